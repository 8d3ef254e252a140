#pragma once

#include <span>
#include <vector>

#include "evimerge/adjacency.hpp"
#include "evimerge/archive.hpp"
#include "evimerge/evidential.hpp"
#include "evimerge/model.hpp"

namespace evimerge {

// Two-layer perceptron mapping pooled features to merge-weight logits:
// K outputs task-wise, layer_count*K layer-wise (layer-major groups).
// The output layer starts at zero so an untrained router merges uniformly.
struct RouterConfig {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 16;
    std::size_t task_count = 0;
    std::size_t layer_count = 0;  // of the merged network, layer-wise mode
    WeightMode mode = WeightMode::TaskWise;

    std::size_t output_dim() const {
        return mode == WeightMode::TaskWise ? task_count : task_count * layer_count;
    }
};

struct RouterParams {
    RouterConfig config;
    Tensor w1, b1, w2, b2;
};

RouterParams init_router(const RouterConfig& config, RngStream& rng);
ParameterArchive router_to_archive(const RouterParams& router);
RouterParams router_from_archive(const ParameterArchive& archive);

// Softmax-normalized per-sample weights, [n x K] or [n x layer_count*K]
// with every K-group summing to 1.
Tensor router_weights(const RouterParams& router, const Tensor& pooled_features);

struct RouterNodes {
    NodeId w1, b1, w2, b2;
};

RouterNodes router_leaves(Tape& tape, const RouterParams& router, bool trainable);
NodeId router_forward(Tape& tape, const RouterNodes& nodes, const RouterConfig& config, NodeId x);

// --- discrepancy-aware contrastive loss ---

// Unit-normalized merged-model outputs plus the frozen ADS partitions.
struct ContrastiveBatch {
    Tensor z;  // [n x d], rows unit-normalized
    std::vector<NeighborPartition> partitions;
    double temperature = 0.5;
};

// Z_i over the anchor's positive and negative neighbors. The partition
// must be nonempty.
double partition_function(std::size_t anchor, const ContrastiveBatch& batch);

// Sum over anchors of -log(pos mass / Z_i), falling back to
// -log(1 - neg mass / Z_i) when no positives exist. Log arguments are
// floored at 1e-6; anchors without neighbors contribute zero.
double loss_discrepancy(const ContrastiveBatch& batch);

// Same loss on the tape. z must already be row-normalized.
NodeId loss_discrepancy_node(Tape& tape, NodeId z,
                             std::span<const NeighborPartition> partitions, double temperature);

// sum_i H(q_i) with Shannon entropy H; rows of `probabilities` sum to 1.
double loss_unsup(const Tensor& probabilities);
NodeId loss_unsup_node(Tape& tape, NodeId probabilities);

double loss_bd(double unsup, double dis, double eta);

// --- Algorithm step 3 ---

struct BDConfig {
    WeightMode mode = WeightMode::TaskWise;
    double eta = 0.1;
    double temperature = 0.5;
    RadiusPolicy radius;
    EpsilonPolicy epsilon;
    std::size_t router_hidden = 16;
    std::size_t epochs = 120;
    std::size_t batch = 24;
    double learning_rate = 0.01;

    void validate() const;
};

struct RouterEpoch {
    double l_unsup = 0.0;
    double l_dis = 0.0;
    double l_bd = 0.0;
};

struct BDTrainResult {
    RouterParams router;
    std::vector<RouterEpoch> trace;
};

// Trains the router against L_BD = L_Unsup + eta * L_Dis. Adjacency sets,
// ADS and partitions are computed once per fixed batch from the trained
// head over base-backbone features and stay frozen while the router
// trains; base parameters and task vectors are never updated.
BDTrainResult train_bd_merging(const ParameterArchive& base, std::span<const TaskVector> vectors,
                               const Tensor& aux_inputs, const HeadParams& head,
                               const BDConfig& config, RngStream& rng);

// "w/o Router" baseline: a single global weight vector over K tasks
// trained on L_Unsup alone. Returns softmaxed weights.
struct StaticAdaptiveResult {
    MergeWeights weights;
    std::vector<double> trace;
};

StaticAdaptiveResult train_static_adaptive(const ParameterArchive& base,
                                           std::span<const TaskVector> vectors,
                                           const Tensor& aux_inputs, std::size_t epochs,
                                           double learning_rate, std::size_t batch,
                                           RngStream& rng);

}  // namespace evimerge
