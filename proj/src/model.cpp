#include "evimerge/model.hpp"

#include <cmath>
#include <sstream>

#include "evimerge/errors.hpp"

namespace evimerge {

std::vector<std::size_t> MlpSpec::dims() const {
    std::vector<std::size_t> d;
    d.push_back(input_dim);
    for (std::size_t h : hidden) d.push_back(h);
    d.push_back(label_count);
    return d;
}

MlpParams init_mlp(const MlpSpec& spec, RngStream& rng) {
    if (spec.input_dim == 0 || spec.hidden.empty() || spec.label_count == 0)
        throw ContractViolation("init_mlp: spec must have input, hidden and label dims");
    MlpParams p;
    p.spec = spec;
    const auto d = spec.dims();
    for (std::size_t l = 0; l + 1 < d.size(); ++l) {
        const std::size_t in = d[l], out = d[l + 1];
        Tensor w = Tensor::zeros({in, out});
        const double sigma = 1.0 / std::sqrt(static_cast<double>(in));
        for (double& v : w.values) v = sigma * rng.normal();
        p.weights.push_back(std::move(w));
        p.biases.push_back(Tensor::zeros({out}));
    }
    return p;
}

ParameterArchive mlp_to_archive(const MlpParams& params, std::map<std::string, std::string> metadata) {
    ParameterArchive a;
    a.metadata = std::move(metadata);
    for (std::size_t l = 0; l < params.weights.size(); ++l) {
        ArchiveEntry w;
        w.name = "layer" + std::to_string(l) + ".weight";
        w.layer_index = static_cast<std::uint32_t>(l);
        w.dims = {params.weights[l].shape[0], params.weights[l].shape[1]};
        w.values = params.weights[l].values;
        a.add(std::move(w));
        ArchiveEntry b;
        b.name = "layer" + std::to_string(l) + ".bias";
        b.layer_index = static_cast<std::uint32_t>(l);
        b.dims = {params.biases[l].shape[0]};
        b.values = params.biases[l].values;
        a.add(std::move(b));
    }
    return a;
}

MlpParams mlp_from_archive(const ParameterArchive& archive) {
    MlpParams p;
    const std::uint32_t layers = archive.layer_count();
    if (layers < 2) throw FormatError("mlp archive needs at least two linear layers");
    for (std::uint32_t l = 0; l < layers; ++l) {
        const ArchiveEntry* w = archive.find("layer" + std::to_string(l) + ".weight");
        const ArchiveEntry* b = archive.find("layer" + std::to_string(l) + ".bias");
        if (!w || !b)
            throw FormatError("mlp archive missing layer" + std::to_string(l) + " entries");
        if (w->dims.size() != 2 || b->dims.size() != 1 || w->dims[1] != b->dims[0])
            throw FormatError("mlp archive: inconsistent dims at layer" + std::to_string(l));
        p.weights.push_back(Tensor::matrix(w->dims[0], w->dims[1], w->values));
        p.biases.push_back(Tensor::vec(b->values));
    }
    p.spec.input_dim = p.weights.front().shape[0];
    for (std::size_t l = 0; l + 1 < p.weights.size(); ++l)
        p.spec.hidden.push_back(p.weights[l].shape[1]);
    p.spec.label_count = p.weights.back().shape[1];
    return p;
}

MlpParams mlp_delta_from_task_vector(const TaskVector& tau) { return mlp_from_archive(tau.data); }

namespace {

void affine(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& out) {
    const std::size_t rows = x.rows(), in = x.cols(), outc = w.shape[1];
    out = Tensor::zeros({rows, outc});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.values.data() + r * in;
        double* yr = out.values.data() + r * outc;
        for (std::size_t j = 0; j < outc; ++j) yr[j] = b.values[j];
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xr[i];
            if (xi == 0.0) continue;
            const double* wrow = w.values.data() + i * outc;
            for (std::size_t j = 0; j < outc; ++j) yr[j] += xi * wrow[j];
        }
    }
}

}  // namespace

Tensor mlp_logits(const MlpParams& p, const Tensor& x) {
    Tensor cur = x, next;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        affine(cur, p.weights[l], p.biases[l], next);
        if (l + 1 < p.weights.size())
            for (double& v : next.values) v = std::tanh(v);
        cur = std::move(next);
    }
    return cur;
}

Tensor mlp_features(const MlpParams& p, const Tensor& x) {
    Tensor cur = x, next;
    for (std::size_t l = 0; l + 1 < p.weights.size(); ++l) {
        affine(cur, p.weights[l], p.biases[l], next);
        for (double& v : next.values) v = std::tanh(v);
        cur = std::move(next);
    }
    return cur;
}

MlpNodes mlp_leaves(Tape& tape, const MlpParams& p, bool trainable) {
    MlpNodes n;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        n.weights.push_back(tape.leaf(p.weights[l], trainable));
        n.biases.push_back(tape.leaf(p.biases[l], trainable));
    }
    return n;
}

NodeId mlp_forward(Tape& tape, const MlpNodes& nodes, NodeId x) {
    NodeId cur = x;
    for (std::size_t l = 0; l < nodes.weights.size(); ++l) {
        cur = tape.linear(cur, nodes.weights[l], nodes.biases[l]);
        if (l + 1 < nodes.weights.size()) cur = tape.tanh_op(cur);
    }
    return cur;
}

NodeId merged_forward(Tape& tape, const MlpParams& base, std::span<const MlpParams> deltas,
                      NodeId w, WeightMode mode, NodeId x) {
    const std::size_t K = deltas.size();
    if (K == 0) throw ContractViolation("merged_forward: need at least one task vector");
    const std::size_t layers = base.weights.size();
    const std::size_t batch = tape.value(x).rows();
    const Tensor& wv = tape.value(w);
    const std::size_t expect_cols = mode == WeightMode::TaskWise ? K : K * layers;
    if (wv.rows() != batch || wv.cols() != expect_cols) {
        std::ostringstream os;
        os << "merged_forward: weights " << shape_str(wv.shape) << " do not match batch " << batch
           << " and K=" << K << (mode == WeightMode::LayerWise ? " (layer-wise)" : "");
        throw DimensionError(os.str());
    }

    NodeId cur = x;
    for (std::size_t l = 0; l < layers; ++l) {
        NodeId w0 = tape.constant(base.weights[l]);
        NodeId b0 = tape.constant(base.biases[l]);
        NodeId y = tape.linear(cur, w0, b0);
        for (std::size_t k = 0; k < K; ++k) {
            NodeId dw = tape.constant(deltas[k].weights[l]);
            NodeId db = tape.constant(deltas[k].biases[l]);
            NodeId contrib = tape.linear(cur, dw, db);
            const std::size_t col = mode == WeightMode::TaskWise ? k : l * K + k;
            y = tape.add(y, tape.row_scale(contrib, tape.col(w, col)));
        }
        cur = (l + 1 < layers) ? tape.tanh_op(y) : y;
    }
    return cur;
}

Tensor merged_logits(const MlpParams& base, std::span<const MlpParams> deltas, const Tensor& w,
                     WeightMode mode, const Tensor& x) {
    Tape tape;
    NodeId xs = tape.constant(x);
    NodeId ws = tape.constant(w);
    return tape.value(merged_forward(tape, base, deltas, ws, mode, xs));
}

Tensor merged_logits_materialized(const ParameterArchive& base, std::span<const TaskVector> taus,
                                  const Tensor& w, WeightMode mode, const Tensor& x) {
    const std::size_t batch = x.rows();
    const std::size_t K = taus.size();
    const std::uint32_t layers = base.layer_count();
    Tensor out;
    for (std::size_t i = 0; i < batch; ++i) {
        MergeWeights mw;
        mw.mode = mode;
        mw.task_count = K;
        mw.layer_count = layers;
        const std::size_t cols = mode == WeightMode::TaskWise ? K : K * layers;
        mw.weights.resize(cols);
        if (mode == WeightMode::TaskWise) {
            for (std::size_t k = 0; k < K; ++k) mw.weights[k] = w.at(i, k);
        } else {
            // merged_forward's column layout is layer-major; MergeWeights is k-major
            for (std::size_t k = 0; k < K; ++k)
                for (std::uint32_t l = 0; l < layers; ++l)
                    mw.weights[k * layers + l] = w.at(i, l * K + k);
        }
        MlpParams merged = mlp_from_archive(merge_parameters(base, taus, mw));
        Tensor xi = Tensor::matrix(1, x.cols(), std::vector<double>(
                                                    x.values.begin() + i * x.cols(),
                                                    x.values.begin() + (i + 1) * x.cols()));
        Tensor li = mlp_logits(merged, xi);
        if (i == 0) out = Tensor::zeros({batch, li.cols()});
        for (std::size_t c = 0; c < li.cols(); ++c) out.at(i, c) = li.values[c];
    }
    return out;
}

SgdTrace fit_cross_entropy(MlpParams& p, const Tensor& x, const std::vector<int>& labels,
                           std::size_t epochs, double lr, std::size_t batch, RngStream& rng,
                           const std::vector<int>& class_subset) {
    const std::size_t n = x.rows();
    if (labels.size() != n) throw ContractViolation("fit_cross_entropy: label count mismatch");
    if (batch == 0) batch = n;
    const std::size_t L = p.spec.label_count;

    // position of each unified label within the active softmax columns
    std::vector<std::size_t> active;
    std::vector<std::size_t> position(L, L);
    if (class_subset.empty()) {
        for (std::size_t c = 0; c < L; ++c) {
            active.push_back(c);
            position[c] = c;
        }
    } else {
        for (int c : class_subset) {
            if (c < 0 || static_cast<std::size_t>(c) >= L)
                throw ContractViolation("fit_cross_entropy: class id out of range");
            position[static_cast<std::size_t>(c)] = active.size();
            active.push_back(static_cast<std::size_t>(c));
        }
    }

    SgdTrace trace;
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < n; start += batch, ++batches) {
            const std::size_t m = std::min(batch, n - start);
            Tensor bx = Tensor::zeros({m, x.cols()});
            Tensor onehot = Tensor::zeros({m, active.size()});
            for (std::size_t r = 0; r < m; ++r) {
                const std::size_t src = order[start + r];
                for (std::size_t c = 0; c < x.cols(); ++c) bx.at(r, c) = x.at(src, c);
                const std::size_t pos = position[static_cast<std::size_t>(labels[src])];
                if (pos >= active.size())
                    throw ContractViolation("fit_cross_entropy: label outside class subset");
                onehot.at(r, pos) = 1.0;
            }
            Tape tape;
            MlpNodes nodes = mlp_leaves(tape, p, true);
            NodeId logits = mlp_forward(tape, nodes, tape.constant(bx));
            if (!class_subset.empty()) logits = tape.gather_cols(logits, active);
            NodeId probs = tape.softmax_rows(logits);
            NodeId picked = tape.mul(tape.log_floor(probs), tape.constant(onehot));
            NodeId loss = tape.scale(tape.sum(picked), -1.0 / static_cast<double>(m));
            const double lv = tape.value(loss).values[0];
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "fit_cross_entropy: non-finite loss at epoch " << epoch << ", batch "
                   << batches;
                throw TrainingDiverged(os.str());
            }
            epoch_loss += lv;
            tape.backward(loss);
            for (std::size_t l = 0; l < p.weights.size(); ++l) {
                const Tensor& gw = tape.grad(nodes.weights[l]);
                for (std::size_t i = 0; i < gw.size(); ++i) p.weights[l].values[i] -= lr * gw.values[i];
                const Tensor& gb = tape.grad(nodes.biases[l]);
                for (std::size_t i = 0; i < gb.size(); ++i) p.biases[l].values[i] -= lr * gb.values[i];
            }
        }
        trace.epoch_loss.push_back(batches ? epoch_loss / static_cast<double>(batches) : 0.0);
    }
    return trace;
}

double top1_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.rows(), L = logits.cols();
    if (labels.size() != n) throw ContractViolation("top1_accuracy: label count mismatch");
    if (n == 0) throw ContractViolation("top1_accuracy: empty dataset");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < L; ++c)
            if (logits.at(i, c) > logits.at(i, best)) best = c;
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace evimerge
