#pragma once

#include <span>
#include <string>
#include <vector>

#include "evimerge/archive.hpp"
#include "evimerge/rng.hpp"
#include "evimerge/tape.hpp"
#include "evimerge/tensor.hpp"

namespace evimerge {

// Dense tanh network: input -> hidden... -> label logits. The pooled
// feature of a sample is the activation of the last hidden layer; layer
// indices are assigned per linear layer with the classifier last.
struct MlpSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> hidden;
    std::size_t label_count = 0;

    std::size_t layer_count() const { return hidden.size() + 1; }
    std::size_t feature_dim() const { return hidden.back(); }
    std::vector<std::size_t> dims() const;  // input, hidden..., labels
};

struct MlpParams {
    MlpSpec spec;
    std::vector<Tensor> weights;  // weights[l] is [in_l x out_l]
    std::vector<Tensor> biases;   // biases[l] is [out_l]
};

MlpParams init_mlp(const MlpSpec& spec, RngStream& rng);

ParameterArchive mlp_to_archive(const MlpParams& params,
                                std::map<std::string, std::string> metadata = {});
MlpParams mlp_from_archive(const ParameterArchive& archive);

// Task-vector deltas in MlpParams layout for the merged forward pass.
MlpParams mlp_delta_from_task_vector(const TaskVector& tau);

// --- plain evaluation (no tape) ---
Tensor mlp_logits(const MlpParams& p, const Tensor& x);
Tensor mlp_features(const MlpParams& p, const Tensor& x);

// --- tape forward passes ---
struct MlpNodes {
    std::vector<NodeId> weights;
    std::vector<NodeId> biases;
};

MlpNodes mlp_leaves(Tape& tape, const MlpParams& p, bool trainable);
NodeId mlp_forward(Tape& tape, const MlpNodes& nodes, NodeId x);

// Forward pass of the per-sample merged model f_{theta0 + sum_k w_ik tau_k}
// without materializing archives: each layer computes
//   y = x W0 + b0 + sum_k w[:,k(,l)] * (x dW_k + db_k).
// `w` is the softmax-normalized router output, [B x K] task-wise or
// [B x layer_count*K] layer-wise (layer-major groups of K).
NodeId merged_forward(Tape& tape, const MlpParams& base, std::span<const MlpParams> deltas,
                      NodeId w, WeightMode mode, NodeId x);

// Evaluation path: same computation with per-sample weights given as plain
// values (row i of `w` shaped as in merged_forward).
Tensor merged_logits(const MlpParams& base, std::span<const MlpParams> deltas, const Tensor& w,
                     WeightMode mode, const Tensor& x);

// Oracle path for tests: materializes theta* per sample, then forwards.
Tensor merged_logits_materialized(const ParameterArchive& base, std::span<const TaskVector> taus,
                                  const Tensor& w, WeightMode mode, const Tensor& x);

// --- training helpers ---
struct SgdTrace {
    std::vector<double> epoch_loss;
};

// Plain-gradient-descent cross-entropy fit. Labels index the logit columns
// (unified ids). A non-empty `class_subset` restricts the softmax to those
// columns, so training a task touches only its own label space and logits
// of unrelated classes keep their pretrained values. Batches are drawn in
// seeded shuffled order; aborts with diagnostics if the loss turns
// non-finite.
SgdTrace fit_cross_entropy(MlpParams& p, const Tensor& x, const std::vector<int>& labels,
                           std::size_t epochs, double lr, std::size_t batch, RngStream& rng,
                           const std::vector<int>& class_subset = {});

double top1_accuracy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace evimerge
