#include "evimerge/router.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "evimerge/errors.hpp"

namespace evimerge {

namespace {

constexpr double kRatioFloor = 1e-6;

}  // namespace

RouterParams init_router(const RouterConfig& config, RngStream& rng) {
    if (config.input_dim == 0 || config.hidden_dim == 0 || config.task_count == 0)
        throw ContractViolation("init_router: input, hidden and task dims must be positive");
    if (config.mode == WeightMode::LayerWise && config.layer_count == 0)
        throw ContractViolation("init_router: layer-wise router needs a layer count");
    RouterParams r;
    r.config = config;
    r.w1 = Tensor::zeros({config.input_dim, config.hidden_dim});
    const double sigma = 1.0 / std::sqrt(static_cast<double>(config.input_dim));
    for (double& v : r.w1.values) v = sigma * rng.normal();
    r.b1 = Tensor::zeros({config.hidden_dim});
    // zero output layer: the untrained router emits uniform merge weights
    r.w2 = Tensor::zeros({config.hidden_dim, config.output_dim()});
    r.b2 = Tensor::zeros({config.output_dim()});
    return r;
}

ParameterArchive router_to_archive(const RouterParams& router) {
    ParameterArchive a;
    a.metadata["role"] = "router";
    a.metadata["mode"] = router.config.mode == WeightMode::TaskWise ? "task" : "layer";
    a.metadata["task_count"] = std::to_string(router.config.task_count);
    a.metadata["layer_count"] = std::to_string(router.config.layer_count);
    auto push = [&a](const char* name, std::uint32_t layer, const Tensor& t) {
        ArchiveEntry e;
        e.name = name;
        e.layer_index = layer;
        e.dims.assign(t.shape.begin(), t.shape.end());
        e.values = t.values;
        a.add(std::move(e));
    };
    push("fc0.weight", 0, router.w1);
    push("fc0.bias", 0, router.b1);
    push("fc1.weight", 1, router.w2);
    push("fc1.bias", 1, router.b2);
    return a;
}

RouterParams router_from_archive(const ParameterArchive& archive) {
    const ArchiveEntry* w1 = archive.find("fc0.weight");
    const ArchiveEntry* b1 = archive.find("fc0.bias");
    const ArchiveEntry* w2 = archive.find("fc1.weight");
    const ArchiveEntry* b2 = archive.find("fc1.bias");
    if (!w1 || !b1 || !w2 || !b2) throw FormatError("router archive missing fc0/fc1 entries");
    RouterParams r;
    r.w1 = Tensor::matrix(w1->dims[0], w1->dims[1], w1->values);
    r.b1 = Tensor::vec(b1->values);
    r.w2 = Tensor::matrix(w2->dims[0], w2->dims[1], w2->values);
    r.b2 = Tensor::vec(b2->values);
    r.config.input_dim = r.w1.shape[0];
    r.config.hidden_dim = r.w1.shape[1];
    auto meta = [&archive](const char* key) -> std::string {
        auto it = archive.metadata.find(key);
        return it == archive.metadata.end() ? "" : it->second;
    };
    r.config.mode = meta("mode") == "layer" ? WeightMode::LayerWise : WeightMode::TaskWise;
    r.config.task_count = static_cast<std::size_t>(std::stoul(meta("task_count")));
    r.config.layer_count = static_cast<std::size_t>(std::stoul(meta("layer_count")));
    if (r.config.output_dim() != r.w2.shape[1])
        throw FormatError("router archive: output dim disagrees with metadata");
    return r;
}

RouterNodes router_leaves(Tape& tape, const RouterParams& router, bool trainable) {
    RouterNodes n;
    n.w1 = tape.leaf(router.w1, trainable);
    n.b1 = tape.leaf(router.b1, trainable);
    n.w2 = tape.leaf(router.w2, trainable);
    n.b2 = tape.leaf(router.b2, trainable);
    return n;
}

NodeId router_forward(Tape& tape, const RouterNodes& nodes, const RouterConfig& config, NodeId x) {
    NodeId hidden = tape.tanh_op(tape.linear(x, nodes.w1, nodes.b1));
    NodeId logits = tape.linear(hidden, nodes.w2, nodes.b2);
    return tape.softmax_groups(logits, config.task_count);
}

Tensor router_weights(const RouterParams& router, const Tensor& pooled_features) {
    if (pooled_features.cols() != router.config.input_dim)
        throw DimensionError("router_weights: features " + shape_str(pooled_features.shape) +
                             " vs router input " + std::to_string(router.config.input_dim));
    Tape tape;
    RouterNodes nodes = router_leaves(tape, router, false);
    return tape.value(router_forward(tape, nodes, router.config, tape.constant(pooled_features)));
}

double partition_function(std::size_t anchor, const ContrastiveBatch& batch) {
    const NeighborPartition& part = batch.partitions[anchor];
    if (part.positives.empty() && part.negatives.empty())
        throw ContractViolation("partition_function: anchor " + std::to_string(anchor) +
                                " has no neighbors");
    const std::size_t d = batch.z.cols();
    auto sim = [&](std::size_t j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) dot += batch.z.at(anchor, c) * batch.z.at(j, c);
        return std::exp(dot / batch.temperature);
    };
    double acc = 0.0;
    for (std::size_t j : part.positives) acc += sim(j);
    for (std::size_t j : part.negatives) acc += sim(j);
    return acc;
}

double loss_discrepancy(const ContrastiveBatch& batch) {
    double total = 0.0;
    for (std::size_t i = 0; i < batch.partitions.size(); ++i) {
        const NeighborPartition& part = batch.partitions[i];
        if (part.positives.empty() && part.negatives.empty()) continue;
        const std::size_t d = batch.z.cols();
        auto mass = [&](const std::vector<std::size_t>& set) {
            double acc = 0.0;
            for (std::size_t j : set) {
                double dot = 0.0;
                for (std::size_t c = 0; c < d; ++c) dot += batch.z.at(i, c) * batch.z.at(j, c);
                acc += std::exp(dot / batch.temperature);
            }
            return acc;
        };
        const double pos = mass(part.positives);
        const double neg = mass(part.negatives);
        const double zi = pos + neg;
        const double arg = part.positives.empty() ? 1.0 - neg / zi : pos / zi;
        total -= std::log(arg > kRatioFloor ? arg : kRatioFloor);
    }
    return total;
}

NodeId loss_discrepancy_node(Tape& tape, NodeId z, std::span<const NeighborPartition> partitions,
                             double temperature) {
    const Tensor& zv = tape.value(z);
    const std::size_t n = zv.rows();
    if (partitions.size() != n)
        throw DimensionError("loss_discrepancy_node: " + std::to_string(partitions.size()) +
                             " partitions for " + std::to_string(n) + " samples");
    Tensor mask_pos = Tensor::zeros({n, n});
    Tensor mask_neg = Tensor::zeros({n, n});
    Tensor branch_pos = Tensor::zeros({n});  // anchors scored by the positive branch
    Tensor branch_neg = Tensor::zeros({n});  // anchors with no positives but some negatives
    Tensor empty_guard = Tensor::zeros({n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j : partitions[i].positives) mask_pos.at(i, j) = 1.0;
        for (std::size_t j : partitions[i].negatives) mask_neg.at(i, j) = 1.0;
        if (!partitions[i].positives.empty())
            branch_pos.values[i] = 1.0;
        else if (!partitions[i].negatives.empty())
            branch_neg.values[i] = 1.0;
        else
            empty_guard.values[i] = 1.0;  // keeps 0/0 out of the masked rows
    }
    NodeId sims = tape.exp_op(tape.scale(tape.matmul_nt(z, z), 1.0 / temperature));
    NodeId pos = tape.row_sum(tape.mul(sims, tape.constant(mask_pos)));
    NodeId neg = tape.row_sum(tape.mul(sims, tape.constant(mask_neg)));
    NodeId zi = tape.add(tape.add(pos, neg), tape.constant(empty_guard));
    NodeId pos_term = tape.mul(tape.constant(branch_pos),
                               tape.log_floor(tape.div(pos, zi), kRatioFloor));
    NodeId neg_term = tape.mul(tape.constant(branch_neg),
                               tape.log_floor(tape.rsub_const(1.0, tape.div(neg, zi)), kRatioFloor));
    return tape.scale(tape.sum(tape.add(pos_term, neg_term)), -1.0);
}

double loss_unsup(const Tensor& probabilities) {
    double total = 0.0;
    for (double q : probabilities.values) total -= q * std::log(q > 1e-12 ? q : 1e-12);
    return total;
}

NodeId loss_unsup_node(Tape& tape, NodeId probabilities) {
    return tape.scale(tape.sum(tape.mul(probabilities, tape.log_floor(probabilities))), -1.0);
}

double loss_bd(double unsup, double dis, double eta) {
    if (eta < 0.0) throw ContractViolation("loss_bd: eta must be non-negative");
    return unsup + eta * dis;
}

void BDConfig::validate() const {
    if (eta < 0.0) throw ContractViolation("BDConfig: eta must be non-negative");
    if (!(temperature > 0.0)) throw ContractViolation("BDConfig: temperature must be positive");
    if (batch == 0) throw ContractViolation("BDConfig: batch must be positive");
}

namespace {

struct PreparedBatch {
    Tensor inputs;    // [m x d]
    Tensor features;  // [m x f], base-backbone pooled activations
    std::vector<NeighborPartition> partitions;
};

std::vector<PreparedBatch> prepare_batches(const MlpParams& base, const Tensor& aux_inputs,
                                           const HeadParams& head, const BDConfig& config) {
    const std::size_t n = aux_inputs.rows(), d = aux_inputs.cols();
    std::vector<PreparedBatch> batches;
    for (std::size_t start = 0; start < n; start += config.batch) {
        const std::size_t m = std::min(config.batch, n - start);
        PreparedBatch pb;
        pb.inputs = Tensor::zeros({m, d});
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < d; ++c) pb.inputs.at(r, c) = aux_inputs.at(start + r, c);
        pb.features = mlp_features(base, pb.inputs);
        const Tensor evidence = head_evidence(head, pb.features);
        const auto opinions = opinions_from_evidence(evidence);
        const auto adjacency = build_adjacency(pb.features, config.radius);
        const auto records = ads_all(opinions, adjacency);
        const double eps = resolve_epsilon(records, config.epsilon);
        pb.partitions = partition_neighbors(records, eps);
        batches.push_back(std::move(pb));
    }
    return batches;
}

}  // namespace

BDTrainResult train_bd_merging(const ParameterArchive& base, std::span<const TaskVector> vectors,
                               const Tensor& aux_inputs, const HeadParams& head,
                               const BDConfig& config, RngStream& rng) {
    config.validate();
    if (vectors.empty()) throw ContractViolation("train_bd_merging: need at least one task vector");

    const MlpParams base_params = mlp_from_archive(base);
    std::vector<MlpParams> deltas;
    deltas.reserve(vectors.size());
    for (const auto& v : vectors) deltas.push_back(mlp_delta_from_task_vector(v));

    RouterConfig rc;
    rc.input_dim = base_params.spec.feature_dim();
    rc.hidden_dim = config.router_hidden;
    rc.task_count = vectors.size();
    rc.layer_count = base_params.spec.layer_count();
    rc.mode = config.mode;

    BDTrainResult result;
    result.router = init_router(rc, rng);

    // Step 2 artifacts: frozen for the whole optimization.
    const std::vector<PreparedBatch> batches = prepare_batches(base_params, aux_inputs, head, config);

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        RouterEpoch ep;
        std::size_t samples = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const PreparedBatch& pb = batches[bi];
            const std::size_t m = pb.inputs.rows();
            Tape tape;
            RouterNodes nodes = router_leaves(tape, result.router, true);
            NodeId w = router_forward(tape, nodes, rc, tape.constant(pb.features));
            NodeId logits = merged_forward(tape, base_params, deltas, w, config.mode,
                                           tape.constant(pb.inputs));
            NodeId l_unsup = loss_unsup_node(tape, tape.softmax_rows(logits));
            NodeId l_dis =
                loss_discrepancy_node(tape, tape.row_normalize(logits), pb.partitions,
                                      config.temperature);
            NodeId l_bd = tape.add(l_unsup, tape.scale(l_dis, config.eta));
            const double lv = tape.value(l_bd).values[0];
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "train_bd_merging: non-finite loss at epoch " << epoch << ", batch " << bi;
                throw TrainingDiverged(os.str());
            }
            ep.l_unsup += tape.value(l_unsup).values[0];
            ep.l_dis += tape.value(l_dis).values[0];
            ep.l_bd += lv;
            samples += m;
            tape.backward(l_bd);
            const double step = config.learning_rate / static_cast<double>(m);
            auto apply = [&](NodeId id, Tensor& param) {
                const Tensor& g = tape.grad(id);
                for (std::size_t i = 0; i < g.size(); ++i) param.values[i] -= step * g.values[i];
            };
            apply(nodes.w1, result.router.w1);
            apply(nodes.b1, result.router.b1);
            apply(nodes.w2, result.router.w2);
            apply(nodes.b2, result.router.b2);
        }
        if (samples > 0) {
            ep.l_unsup /= static_cast<double>(samples);
            ep.l_dis /= static_cast<double>(samples);
            ep.l_bd /= static_cast<double>(samples);
        }
        result.trace.push_back(ep);
    }
    return result;
}

StaticAdaptiveResult train_static_adaptive(const ParameterArchive& base,
                                           std::span<const TaskVector> vectors,
                                           const Tensor& aux_inputs, std::size_t epochs,
                                           double learning_rate, std::size_t batch,
                                           RngStream& rng) {
    (void)rng;  // init is deterministic (zero logits); kept for interface symmetry
    if (vectors.empty())
        throw ContractViolation("train_static_adaptive: need at least one task vector");
    const MlpParams base_params = mlp_from_archive(base);
    std::vector<MlpParams> deltas;
    for (const auto& v : vectors) deltas.push_back(mlp_delta_from_task_vector(v));
    const std::size_t K = vectors.size();
    const std::size_t n = aux_inputs.rows(), d = aux_inputs.cols();
    if (batch == 0) batch = n;

    Tensor logits_param = Tensor::zeros({1, K});
    StaticAdaptiveResult result;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        double epoch_loss = 0.0;
        std::size_t samples = 0;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t m = std::min(batch, n - start);
            Tensor bx = Tensor::zeros({m, d});
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < d; ++c) bx.at(r, c) = aux_inputs.at(start + r, c);
            Tape tape;
            NodeId lp = tape.leaf(logits_param, true);
            NodeId w = tape.broadcast_rows(tape.softmax_groups(lp, K), m);
            NodeId logits = merged_forward(tape, base_params, deltas, w, WeightMode::TaskWise,
                                           tape.constant(bx));
            NodeId loss = loss_unsup_node(tape, tape.softmax_rows(logits));
            const double lv = tape.value(loss).values[0];
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "train_static_adaptive: non-finite loss at epoch " << epoch;
                throw TrainingDiverged(os.str());
            }
            epoch_loss += lv;
            samples += m;
            tape.backward(loss);
            const Tensor& g = tape.grad(lp);
            const double step = learning_rate / static_cast<double>(m);
            for (std::size_t i = 0; i < g.size(); ++i) logits_param.values[i] -= step * g.values[i];
        }
        result.trace.push_back(samples ? epoch_loss / static_cast<double>(samples) : 0.0);
    }

    // softmax of the trained logits
    double mx = logits_param.values[0];
    for (double v : logits_param.values) mx = std::max(mx, v);
    std::vector<double> w(K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
        w[k] = std::exp(logits_param.values[k] - mx);
        z += w[k];
    }
    for (double& v : w) v /= z;
    result.weights = MergeWeights::task_wise(std::move(w));
    return result;
}

}  // namespace evimerge
