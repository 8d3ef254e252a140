#include "evimerge/evidential.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "evimerge/errors.hpp"
#include "evimerge/special.hpp"

namespace evimerge {

namespace {

constexpr double kLogFloor = 1e-12;

double log_floored(double x) { return std::log(x > kLogFloor ? x : kLogFloor); }

}  // namespace

void HeadConfig::validate() const {
    if (unified_label_count < 2)
        throw ContractViolation("HeadConfig: unified label count must be at least 2");
    if (lambda < 0.0 || gamma < 0.0)
        throw ContractViolation("HeadConfig: lambda and gamma must be non-negative");
}

DirichletOpinion evidence_to_opinion(std::span<const double> evidence, std::size_t label_count) {
    if (evidence.size() != label_count)
        throw ContractViolation("evidence_to_opinion: evidence length " +
                                std::to_string(evidence.size()) + " != label count " +
                                std::to_string(label_count));
    DirichletOpinion op;
    op.label_count = label_count;
    op.evidence.assign(evidence.begin(), evidence.end());
    op.alpha.resize(label_count);
    op.belief.resize(label_count);
    op.probability.resize(label_count);
    double sum_e = 0.0;
    for (std::size_t c = 0; c < label_count; ++c) {
        if (evidence[c] < 0.0)
            throw ContractViolation("evidence_to_opinion: negative evidence at class " +
                                    std::to_string(c));
        op.alpha[c] = evidence[c] + 1.0;
        sum_e += evidence[c];
    }
    op.strength = sum_e + static_cast<double>(label_count);
    op.uncertainty = static_cast<double>(label_count) / op.strength;
    for (std::size_t c = 0; c < label_count; ++c) {
        op.belief[c] = evidence[c] / op.strength;
        op.probability[c] = op.alpha[c] / op.strength;
    }
    return op;
}

std::vector<DirichletOpinion> opinions_from_evidence(const Tensor& evidence) {
    const std::size_t n = evidence.rows(), L = evidence.cols();
    std::vector<DirichletOpinion> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(evidence_to_opinion(
            std::span<const double>(evidence.values.data() + i * L, L), L));
    return out;
}

double iec_score(const DirichletOpinion& opinion, bool clip) {
    const std::size_t L = opinion.label_count;
    if (L < 2) throw ContractViolation("iec_score: needs at least two classes");
    // two largest concentrations; ties resolved by class index
    std::size_t c1 = 0, c2 = 1;
    if (opinion.alpha[1] > opinion.alpha[0]) std::swap(c1, c2);
    for (std::size_t c = 2; c < L; ++c) {
        if (opinion.alpha[c] > opinion.alpha[c1]) {
            c2 = c1;
            c1 = c;
        } else if (opinion.alpha[c] > opinion.alpha[c2]) {
            c2 = c;
        }
    }
    const double S = opinion.strength;
    const double nu = (S / opinion.alpha[c1]) * (static_cast<double>(L) / S) *
                      (opinion.alpha[c2] / opinion.alpha[c1]);
    if (!clip) return nu;
    return std::clamp(nu, 0.0, 1.0);
}

double loss_inverse(std::span<const double> nu, std::span<const double> uncertainty) {
    if (nu.size() != uncertainty.size())
        throw ContractViolation("loss_inverse: nu and uncertainty lengths differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < nu.size(); ++i)
        acc -= nu[i] * log_floored(1.0 - uncertainty[i]) +
               (1.0 - nu[i]) * log_floored(uncertainty[i]);
    return acc;
}

double kl_dirichlet_uniform(std::span<const double> alpha) {
    const std::size_t L = alpha.size();
    double S = 0.0;
    for (double a : alpha) {
        if (a < 1.0) throw ContractViolation("kl_dirichlet_uniform: alpha must be >= 1");
        S += a;
    }
    double kl = std::lgamma(S) - std::lgamma(static_cast<double>(L));
    const double psi_S = digamma(S);
    for (double a : alpha) kl += -std::lgamma(a) + (a - 1.0) * (digamma(a) - psi_S);
    return kl;
}

double loss_entropy_kl(std::span<const DirichletOpinion> batch, double lambda, EntropySign sign) {
    const double s = sign == EntropySign::AsWritten ? 1.0 : -1.0;
    double acc = 0.0;
    for (const auto& op : batch) {
        double plogp = 0.0;
        for (double p : op.probability) plogp += p * log_floored(p);
        acc += s * plogp + lambda * kl_dirichlet_uniform(op.alpha);
    }
    return acc;
}

double loss_head(std::span<const DirichletOpinion> batch, const HeadConfig& config) {
    config.validate();
    std::vector<double> nu(batch.size()), u(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        nu[i] = iec_score(batch[i], config.iec_clip);
        u[i] = batch[i].uncertainty;
    }
    return loss_entropy_kl(batch, config.lambda, config.entropy_sign) +
           config.gamma * loss_inverse(nu, u);
}

HeadParams init_head(std::size_t feature_dim, std::size_t label_count, RngStream& rng) {
    HeadParams h;
    h.weight = Tensor::zeros({feature_dim, label_count});
    const double sigma = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    for (double& v : h.weight.values) v = sigma * rng.normal();
    h.bias = Tensor::zeros({label_count});
    return h;
}

ParameterArchive head_to_archive(const HeadParams& head) {
    ParameterArchive a;
    a.metadata["role"] = "evidential_head";
    ArchiveEntry w;
    w.name = "head.weight";
    w.layer_index = 0;
    w.dims = {head.weight.shape[0], head.weight.shape[1]};
    w.values = head.weight.values;
    a.add(std::move(w));
    ArchiveEntry b;
    b.name = "head.bias";
    b.layer_index = 0;
    b.dims = {head.bias.shape[0]};
    b.values = head.bias.values;
    a.add(std::move(b));
    return a;
}

HeadParams head_from_archive(const ParameterArchive& archive) {
    const ArchiveEntry* w = archive.find("head.weight");
    const ArchiveEntry* b = archive.find("head.bias");
    if (!w || !b) throw FormatError("head archive missing head.weight/head.bias");
    HeadParams h;
    h.weight = Tensor::matrix(w->dims[0], w->dims[1], w->values);
    h.bias = Tensor::vec(b->values);
    return h;
}

Tensor head_evidence(const HeadParams& head, const Tensor& features) {
    Tape tape;
    NodeId logits = tape.linear(tape.constant(features), tape.constant(head.weight),
                                tape.constant(head.bias));
    return tape.value(tape.softplus(logits));
}

Tensor iec_scores_for(const Tensor& evidence, bool clip) {
    const auto ops = opinions_from_evidence(evidence);
    Tensor nu = Tensor::zeros({ops.size()});
    for (std::size_t i = 0; i < ops.size(); ++i) nu.values[i] = iec_score(ops[i], clip);
    return nu;
}

NodeId head_loss_node(Tape& tape, NodeId head_logits, const HeadConfig& config,
                      const Tensor* fixed_nu) {
    config.validate();
    const std::size_t L = config.unified_label_count;
    const Tensor& lv = tape.value(head_logits);
    if (lv.cols() != L)
        throw DimensionError("head_loss_node: logits " + shape_str(lv.shape) +
                             " vs label count " + std::to_string(L));
    const std::size_t n = lv.rows();

    NodeId evidence = tape.softplus(head_logits);
    NodeId alpha = tape.add_const(evidence, 1.0);
    NodeId strength = tape.row_sum(alpha);                      // [n]
    NodeId inv_strength = tape.div(tape.constant(Tensor::full({n}, 1.0)), strength);
    NodeId probs = tape.row_scale(alpha, inv_strength);         // p = alpha / S
    NodeId uncertainty = tape.scale(inv_strength, static_cast<double>(L));  // u = L / S

    // nu is the supervision signal for u and never carries gradient
    Tensor nu = fixed_nu ? *fixed_nu : iec_scores_for(tape.value(evidence), config.iec_clip);
    if (nu.size() != n)
        throw DimensionError("head_loss_node: fixed nu has wrong length");
    Tensor one_minus_nu = Tensor::zeros({n});
    for (std::size_t i = 0; i < n; ++i) one_minus_nu.values[i] = 1.0 - nu.values[i];
    NodeId log_conf = tape.log_floor(tape.rsub_const(1.0, uncertainty));
    NodeId log_u = tape.log_floor(uncertainty);
    NodeId inv_terms = tape.add(tape.mul(tape.constant(nu), log_conf),
                                tape.mul(tape.constant(one_minus_nu), log_u));
    NodeId l_inv = tape.scale(tape.sum(inv_terms), -1.0);

    NodeId plogp = tape.sum(tape.mul(probs, tape.log_floor(probs)));
    const double sign = config.entropy_sign == EntropySign::AsWritten ? 1.0 : -1.0;
    NodeId l_ent = tape.add(tape.scale(plogp, sign),
                            tape.scale(tape.sum(tape.dirichlet_kl_uniform(alpha)), config.lambda));

    return tape.add(l_ent, tape.scale(l_inv, config.gamma));
}

HeadTrainResult train_head(const MlpParams& backbone, HeadParams head, const Tensor& aux_inputs,
                           const HeadConfig& config, const HeadTrainOptions& opts, RngStream& rng) {
    config.validate();
    const Tensor features = mlp_features(backbone, aux_inputs);
    const std::size_t n = features.rows(), f = features.cols();
    const std::size_t batch = opts.batch == 0 ? n : opts.batch;

    HeadTrainResult result;
    result.head = std::move(head);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch, ++batches) {
            const std::size_t m = std::min(batch, n - start);
            Tensor bf = Tensor::zeros({m, f});
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < f; ++c) bf.at(r, c) = features.at(order[start + r], c);
            Tape tape;
            NodeId w = tape.leaf(result.head.weight, true);
            NodeId b = tape.leaf(result.head.bias, true);
            NodeId logits = tape.linear(tape.constant(bf), w, b);
            NodeId loss = head_loss_node(tape, logits, config);
            const double lv = tape.value(loss).values[0];
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "train_head: non-finite loss at epoch " << epoch << ", batch " << batches;
                throw TrainingDiverged(os.str());
            }
            epoch_loss += lv / static_cast<double>(m);
            tape.backward(loss);
            const Tensor& gw = tape.grad(w);
            const double step = opts.learning_rate / static_cast<double>(m);
            for (std::size_t i = 0; i < gw.size(); ++i)
                result.head.weight.values[i] -= step * gw.values[i];
            const Tensor& gb = tape.grad(b);
            for (std::size_t i = 0; i < gb.size(); ++i)
                result.head.bias.values[i] -= step * gb.values[i];
        }
        result.loss_trace.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    }
    return result;
}

}  // namespace evimerge
