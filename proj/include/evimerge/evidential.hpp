#pragma once

#include <span>
#include <vector>

#include "evimerge/model.hpp"
#include "evimerge/rng.hpp"
#include "evimerge/tape.hpp"
#include "evimerge/tensor.hpp"

namespace evimerge {

// Subjective-logic view of one sample's evidence over the unified label
// space: alpha = e + 1, S = sum(e) + L, b_c = e_c / S, u = L / S,
// p_c = alpha_c / S.
struct DirichletOpinion {
    std::size_t label_count = 0;
    std::vector<double> evidence;
    std::vector<double> alpha;
    std::vector<double> belief;
    std::vector<double> probability;
    double strength = 0.0;
    double uncertainty = 0.0;
};

enum class EntropySign {
    AsWritten,        // +1: the entropy term enters as sum_j p log p
    MinimizeEntropy,  // -1: the term becomes the (positive) Shannon entropy
};

struct HeadConfig {
    std::size_t unified_label_count = 2;
    double lambda = 0.1;  // KL coefficient
    double gamma = 0.1;   // inverse-correlation coefficient
    bool iec_clip = true;
    EntropySign entropy_sign = EntropySign::AsWritten;

    void validate() const;
};

DirichletOpinion evidence_to_opinion(std::span<const double> evidence, std::size_t label_count);

std::vector<DirichletOpinion> opinions_from_evidence(const Tensor& evidence /*[n x L]*/);

// Inter-class evidential contrast nu = (S/a1) (L/S) (a2/a1) over the two
// largest concentrations; optionally clipped to [0, 1].
double iec_score(const DirichletOpinion& opinion, bool clip = true);

// -sum_i [ nu_i log(1 - u_i) + (1 - nu_i) log u_i ], logs floored at 1e-12.
double loss_inverse(std::span<const double> nu, std::span<const double> uncertainty);

// KL( Dir(alpha) || Dir(1) ) for one concentration vector.
double kl_dirichlet_uniform(std::span<const double> alpha);

// sum_i [ sign * sum_j p_ij log p_ij + lambda * KL_i ].
double loss_entropy_kl(std::span<const DirichletOpinion> batch, double lambda, EntropySign sign);

// loss_entropy_kl + gamma * loss_inverse with nu derived from each opinion.
double loss_head(std::span<const DirichletOpinion> batch, const HeadConfig& config);

// --- evidential head (single linear layer to L evidences, softplus) ---
struct HeadParams {
    Tensor weight;  // [feature_dim x L]
    Tensor bias;    // [L]
};

HeadParams init_head(std::size_t feature_dim, std::size_t label_count, RngStream& rng);
ParameterArchive head_to_archive(const HeadParams& head);
HeadParams head_from_archive(const ParameterArchive& archive);

// Evidence matrix [n x L] for pooled features [n x feature_dim].
Tensor head_evidence(const HeadParams& head, const Tensor& features);

// Builds L_Head on the tape from raw head outputs (pre-softplus logits).
// nu enters as a constant with no gradient path: by default it is computed
// from the current evidence values; passing `fixed_nu` pins it instead,
// which is how the finite-difference oracle probes the same objective the
// optimizer sees.
NodeId head_loss_node(Tape& tape, NodeId head_logits, const HeadConfig& config,
                      const Tensor* fixed_nu = nullptr);

// The per-sample IEC scores the loss would use, computed from evidence.
Tensor iec_scores_for(const Tensor& evidence, bool clip);

struct HeadTrainResult {
    HeadParams head;
    std::vector<double> loss_trace;  // per epoch, mean over batches
};

struct HeadTrainOptions {
    std::size_t epochs = 80;
    double learning_rate = 0.05;
    std::size_t batch = 32;
};

// Algorithm step 1: optimize the head on unlabeled data against L_Head.
// The backbone is only ever read (features of `aux_inputs`), never updated.
HeadTrainResult train_head(const MlpParams& backbone, HeadParams head, const Tensor& aux_inputs,
                           const HeadConfig& config, const HeadTrainOptions& opts, RngStream& rng);

}  // namespace evimerge
