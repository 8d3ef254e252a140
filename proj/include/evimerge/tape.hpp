#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "evimerge/tensor.hpp"

namespace evimerge {

struct NodeId {
    std::uint32_t index = 0;
};

// Reverse-mode tape over dense tensors. The tape is dynamic: it is rebuilt
// for every forward pass and replayed backward in reverse creation order,
// which is a reverse topological order because ops may only reference nodes
// that already exist. Single-threaded per tape; distinct tapes share no
// mutable state.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until backward touches it
        bool needs_grad = false;
        std::function<void(Tape&, const Node&)> backward;
    };

    NodeId leaf(Tensor t, bool requires_grad = true);
    NodeId constant(Tensor t) { return leaf(std::move(t), false); }

    // out[b,j] = sum_i x[b,i] * w[i,j] + b[j]
    NodeId linear(NodeId x, NodeId w, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId scale(NodeId a, double c);
    NodeId add_const(NodeId a, double c);
    NodeId rsub_const(double c, NodeId a);  // c - a

    // y[b,j] = m[b,j] * v[b]
    NodeId row_scale(NodeId m, NodeId v);
    // y[b,j] = v[j], repeated for `rows` rows
    NodeId broadcast_rows(NodeId v, std::size_t rows);
    NodeId row_sum(NodeId m);
    NodeId col(NodeId m, std::size_t j);
    // y[b,i] = m[b, cols[i]]
    NodeId gather_cols(NodeId m, std::vector<std::size_t> cols);
    NodeId sum(NodeId x);  // scalar [1]

    NodeId tanh_op(NodeId x);
    NodeId softplus(NodeId x);
    NodeId exp_op(NodeId x);
    // log(max(x, floor)); gradient is zero where the floor is active
    NodeId log_floor(NodeId x, double floor = 1e-12);

    // Softmax within consecutive groups of `group_size` along the flat
    // value array. Row softmax of an [B,C] tensor is group_size = C.
    NodeId softmax_groups(NodeId x, std::size_t group_size);
    NodeId softmax_rows(NodeId x);

    // Unit-L2-normalizes every row.
    NodeId row_normalize(NodeId x);

    // y = a @ b^T with a[B,N], b[M,N]. a and b may be the same node.
    NodeId matmul_nt(NodeId a, NodeId b);

    // Per-row KL( Dir(alpha_row) || Dir(1) ), alpha[B,L] -> [B].
    NodeId dirichlet_kl_uniform(NodeId alpha);

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node
    // on a path to a gradient-requiring leaf. Loss must be scalar.
    void backward(NodeId loss);
    void zero_grad();

    const Tensor& value(NodeId id) const { return nodes_[id.index].value; }
    const Tensor& grad(NodeId id) const;
    std::size_t size() const { return nodes_.size(); }

private:
    NodeId push(Tensor value, bool needs_grad, std::function<void(Tape&, const Node&)> backward);
    Tensor& grad_buf(NodeId id);
    void accumulate(NodeId id, std::size_t flat_index, double v);

    std::vector<Node> nodes_;

    friend struct TapeOps;
};

// Builds a scalar loss from a leaf holding `x` on a fresh tape.
using ScalarFn = std::function<NodeId(Tape&, NodeId)>;

// Max over components of |g_analytic - g_central_diff| / (|g_cd| + 1e-8).
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h);

}  // namespace evimerge
