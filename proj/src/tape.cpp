#include "evimerge/tape.hpp"

#include <cmath>
#include <sstream>

#include "evimerge/errors.hpp"
#include "evimerge/special.hpp"

namespace evimerge {

namespace {

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_stable(double x) {
    // log(1 + exp(x)) without overflow on either tail
    if (x > 30.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        std::ostringstream os;
        os << op << ": shapes " << shape_str(a.shape) << " and " << shape_str(b.shape)
           << " differ";
        throw DimensionError(os.str());
    }
}

}  // namespace

NodeId Tape::push(Tensor value, bool needs_grad,
                  std::function<void(Tape&, const Node&)> backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buf(NodeId id) {
    Node& n = nodes_[id.index];
    if (n.grad.values.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

const Tensor& Tape::grad(NodeId id) const {
    const Node& n = nodes_[id.index];
    if (n.grad.values.empty()) {
        static thread_local Tensor zero;
        zero = Tensor::zeros(n.value.shape);
        return zero;
    }
    return n.grad;
}

NodeId Tape::leaf(Tensor t, bool requires_grad) {
    check_shape(t, "leaf");
    return push(std::move(t), requires_grad, nullptr);
}

NodeId Tape::linear(NodeId x, NodeId w, NodeId b) {
    const Tensor& xv = nodes_[x.index].value;
    const Tensor& wv = nodes_[w.index].value;
    const Tensor& bv = nodes_[b.index].value;
    const std::size_t batch = xv.rows(), in = xv.cols();
    const std::size_t win = wv.rows(), out = wv.cols();
    if (in != win || bv.size() != out) {
        std::ostringstream os;
        os << "linear_forward: input " << shape_str(xv.shape) << " incompatible with weight "
           << shape_str(wv.shape) << " and bias " << shape_str(bv.shape);
        throw DimensionError(os.str());
    }
    Tensor y = Tensor::zeros({batch, out});
    for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xv.values[r * in + i];
            if (xi == 0.0) continue;
            for (std::size_t j = 0; j < out; ++j) y.values[r * out + j] += xi * wv.values[i * out + j];
        }
    for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t j = 0; j < out; ++j) y.values[r * out + j] += bv.values[j];

    bool ng = nodes_[x.index].needs_grad || nodes_[w.index].needs_grad || nodes_[b.index].needs_grad;
    return push(std::move(y), ng, [x, w, b, batch, in, out](Tape& t, const Node& self) {
        const Tensor& g = self.grad;
        const Tensor& xv = t.nodes_[x.index].value;
        const Tensor& wv = t.nodes_[w.index].value;
        if (t.nodes_[x.index].needs_grad) {
            Tensor& gx = t.grad_buf(x);
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t j = 0; j < out; ++j) {
                    const double gj = g.values[r * out + j];
                    if (gj == 0.0) continue;
                    for (std::size_t i = 0; i < in; ++i)
                        gx.values[r * in + i] += gj * wv.values[i * out + j];
                }
        }
        if (t.nodes_[w.index].needs_grad) {
            Tensor& gw = t.grad_buf(w);
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t i = 0; i < in; ++i) {
                    const double xi = xv.values[r * in + i];
                    if (xi == 0.0) continue;
                    for (std::size_t j = 0; j < out; ++j)
                        gw.values[i * out + j] += xi * g.values[r * out + j];
                }
        }
        if (t.nodes_[b.index].needs_grad) {
            Tensor& gb = t.grad_buf(b);
            for (std::size_t r = 0; r < batch; ++r)
                for (std::size_t j = 0; j < out; ++j) gb.values[j] += g.values[r * out + j];
        }
    });
}

NodeId Tape::add(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a.index].value;
    const Tensor& bv = nodes_[b.index].value;
    require_same_shape(av, bv, "add");
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] += bv.values[i];
    bool ng = nodes_[a.index].needs_grad || nodes_[b.index].needs_grad;
    return push(std::move(y), ng, [a, b](Tape& t, const Node& self) {
        if (t.nodes_[a.index].needs_grad) {
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga.values[i] += self.grad.values[i];
        }
        if (t.nodes_[b.index].needs_grad) {
            Tensor& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb.values[i] += self.grad.values[i];
        }
    });
}

NodeId Tape::sub(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a.index].value;
    const Tensor& bv = nodes_[b.index].value;
    require_same_shape(av, bv, "sub");
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] -= bv.values[i];
    bool ng = nodes_[a.index].needs_grad || nodes_[b.index].needs_grad;
    return push(std::move(y), ng, [a, b](Tape& t, const Node& self) {
        if (t.nodes_[a.index].needs_grad) {
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga.values[i] += self.grad.values[i];
        }
        if (t.nodes_[b.index].needs_grad) {
            Tensor& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < gb.size(); ++i) gb.values[i] -= self.grad.values[i];
        }
    });
}

NodeId Tape::mul(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a.index].value;
    const Tensor& bv = nodes_[b.index].value;
    require_same_shape(av, bv, "mul");
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] *= bv.values[i];
    bool ng = nodes_[a.index].needs_grad || nodes_[b.index].needs_grad;
    return push(std::move(y), ng, [a, b](Tape& t, const Node& self) {
        const Tensor& av = t.nodes_[a.index].value;
        const Tensor& bv = t.nodes_[b.index].value;
        if (t.nodes_[a.index].needs_grad) {
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i)
                ga.values[i] += self.grad.values[i] * bv.values[i];
        }
        if (t.nodes_[b.index].needs_grad) {
            Tensor& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < gb.size(); ++i)
                gb.values[i] += self.grad.values[i] * av.values[i];
        }
    });
}

NodeId Tape::div(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a.index].value;
    const Tensor& bv = nodes_[b.index].value;
    require_same_shape(av, bv, "div");
    Tensor y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y.values[i] /= bv.values[i];
    bool ng = nodes_[a.index].needs_grad || nodes_[b.index].needs_grad;
    return push(std::move(y), ng, [a, b](Tape& t, const Node& self) {
        const Tensor& bv = t.nodes_[b.index].value;
        const Tensor& yv = self.value;
        if (t.nodes_[a.index].needs_grad) {
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.size(); ++i)
                ga.values[i] += self.grad.values[i] / bv.values[i];
        }
        if (t.nodes_[b.index].needs_grad) {
            Tensor& gb = t.grad_buf(b);
            for (std::size_t i = 0; i < gb.size(); ++i)
                gb.values[i] -= self.grad.values[i] * yv.values[i] / bv.values[i];
        }
    });
}

NodeId Tape::scale(NodeId a, double c) {
    Tensor y = nodes_[a.index].value;
    for (double& v : y.values) v *= c;
    return push(std::move(y), nodes_[a.index].needs_grad, [a, c](Tape& t, const Node& self) {
        if (!t.nodes_[a.index].needs_grad) return;
        Tensor& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga.values[i] += c * self.grad.values[i];
    });
}

NodeId Tape::add_const(NodeId a, double c) {
    Tensor y = nodes_[a.index].value;
    for (double& v : y.values) v += c;
    return push(std::move(y), nodes_[a.index].needs_grad, [a](Tape& t, const Node& self) {
        if (!t.nodes_[a.index].needs_grad) return;
        Tensor& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga.values[i] += self.grad.values[i];
    });
}

NodeId Tape::rsub_const(double c, NodeId a) {
    Tensor y = nodes_[a.index].value;
    for (double& v : y.values) v = c - v;
    return push(std::move(y), nodes_[a.index].needs_grad, [a](Tape& t, const Node& self) {
        if (!t.nodes_[a.index].needs_grad) return;
        Tensor& ga = t.grad_buf(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga.values[i] -= self.grad.values[i];
    });
}

NodeId Tape::row_scale(NodeId m, NodeId v) {
    const Tensor& mv = nodes_[m.index].value;
    const Tensor& vv = nodes_[v.index].value;
    const std::size_t rows = mv.rows(), cols = mv.cols();
    if (vv.size() != rows) {
        throw DimensionError("row_scale: vector " + shape_str(vv.shape) + " does not match rows of " +
                             shape_str(mv.shape));
    }
    Tensor y = mv;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y.values[r * cols + c] *= vv.values[r];
    bool ng = nodes_[m.index].needs_grad || nodes_[v.index].needs_grad;
    return push(std::move(y), ng, [m, v, rows, cols](Tape& t, const Node& self) {
        const Tensor& mv = t.nodes_[m.index].value;
        const Tensor& vv = t.nodes_[v.index].value;
        if (t.nodes_[m.index].needs_grad) {
            Tensor& gm = t.grad_buf(m);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    gm.values[r * cols + c] += self.grad.values[r * cols + c] * vv.values[r];
        }
        if (t.nodes_[v.index].needs_grad) {
            Tensor& gv = t.grad_buf(v);
            for (std::size_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < cols; ++c)
                    acc += self.grad.values[r * cols + c] * mv.values[r * cols + c];
                gv.values[r] += acc;
            }
        }
    });
}

NodeId Tape::broadcast_rows(NodeId v, std::size_t rows) {
    const Tensor& vv = nodes_[v.index].value;
    const std::size_t cols = vv.size();
    Tensor y = Tensor::zeros({rows, cols});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y.values[r * cols + c] = vv.values[c];
    return push(std::move(y), nodes_[v.index].needs_grad, [v, rows, cols](Tape& t, const Node& self) {
        if (!t.nodes_[v.index].needs_grad) return;
        Tensor& gv = t.grad_buf(v);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gv.values[c] += self.grad.values[r * cols + c];
    });
}

NodeId Tape::row_sum(NodeId m) {
    const Tensor& mv = nodes_[m.index].value;
    const std::size_t rows = mv.rows(), cols = mv.cols();
    Tensor y = Tensor::zeros({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += mv.values[r * cols + c];
        y.values[r] = acc;
    }
    return push(std::move(y), nodes_[m.index].needs_grad, [m, rows, cols](Tape& t, const Node& self) {
        if (!t.nodes_[m.index].needs_grad) return;
        Tensor& gm = t.grad_buf(m);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gm.values[r * cols + c] += self.grad.values[r];
    });
}

NodeId Tape::col(NodeId m, std::size_t j) {
    const Tensor& mv = nodes_[m.index].value;
    const std::size_t rows = mv.rows(), cols = mv.cols();
    if (j >= cols) throw DimensionError("col: index out of range for " + shape_str(mv.shape));
    Tensor y = Tensor::zeros({rows});
    for (std::size_t r = 0; r < rows; ++r) y.values[r] = mv.values[r * cols + j];
    return push(std::move(y), nodes_[m.index].needs_grad, [m, j, rows, cols](Tape& t, const Node& self) {
        if (!t.nodes_[m.index].needs_grad) return;
        Tensor& gm = t.grad_buf(m);
        for (std::size_t r = 0; r < rows; ++r) gm.values[r * cols + j] += self.grad.values[r];
    });
}

NodeId Tape::gather_cols(NodeId m, std::vector<std::size_t> cols) {
    const Tensor& mv = nodes_[m.index].value;
    const std::size_t rows = mv.rows(), width = mv.cols();
    for (std::size_t j : cols)
        if (j >= width)
            throw DimensionError("gather_cols: index " + std::to_string(j) + " out of range for " +
                                 shape_str(mv.shape));
    Tensor y = Tensor::zeros({rows, cols.size()});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < cols.size(); ++i) y.values[r * cols.size() + i] = mv.values[r * width + cols[i]];
    return push(std::move(y), nodes_[m.index].needs_grad,
                [m, cols, rows, width](Tape& t, const Node& self) {
                    if (!t.nodes_[m.index].needs_grad) return;
                    Tensor& gm = t.grad_buf(m);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t i = 0; i < cols.size(); ++i)
                            gm.values[r * width + cols[i]] +=
                                self.grad.values[r * cols.size() + i];
                });
}

NodeId Tape::sum(NodeId x) {
    const Tensor& xv = nodes_[x.index].value;
    double acc = 0.0;
    for (double v : xv.values) acc += v;
    return push(Tensor({1}, {acc}), nodes_[x.index].needs_grad, [x](Tape& t, const Node& self) {
        if (!t.nodes_[x.index].needs_grad) return;
        Tensor& gx = t.grad_buf(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx.values[i] += self.grad.values[0];
    });
}

NodeId Tape::tanh_op(NodeId x) {
    Tensor y = nodes_[x.index].value;
    for (double& v : y.values) v = std::tanh(v);
    return push(std::move(y), nodes_[x.index].needs_grad, [x](Tape& t, const Node& self) {
        if (!t.nodes_[x.index].needs_grad) return;
        Tensor& gx = t.grad_buf(x);
        for (std::size_t i = 0; i < gx.size(); ++i) {
            const double yi = self.value.values[i];
            gx.values[i] += self.grad.values[i] * (1.0 - yi * yi);
        }
    });
}

NodeId Tape::softplus(NodeId x) {
    Tensor y = nodes_[x.index].value;
    for (double& v : y.values) v = softplus_stable(v);
    return push(std::move(y), nodes_[x.index].needs_grad, [x](Tape& t, const Node& self) {
        if (!t.nodes_[x.index].needs_grad) return;
        const Tensor& xv = t.nodes_[x.index].value;
        Tensor& gx = t.grad_buf(x);
        for (std::size_t i = 0; i < gx.size(); ++i)
            gx.values[i] += self.grad.values[i] * sigmoid(xv.values[i]);
    });
}

NodeId Tape::exp_op(NodeId x) {
    Tensor y = nodes_[x.index].value;
    for (double& v : y.values) v = std::exp(v);
    return push(std::move(y), nodes_[x.index].needs_grad, [x](Tape& t, const Node& self) {
        if (!t.nodes_[x.index].needs_grad) return;
        Tensor& gx = t.grad_buf(x);
        for (std::size_t i = 0; i < gx.size(); ++i)
            gx.values[i] += self.grad.values[i] * self.value.values[i];
    });
}

NodeId Tape::log_floor(NodeId x, double floor) {
    const Tensor& xv = nodes_[x.index].value;
    Tensor y = xv;
    for (double& v : y.values) v = std::log(v > floor ? v : floor);
    return push(std::move(y), nodes_[x.index].needs_grad, [x, floor](Tape& t, const Node& self) {
        if (!t.nodes_[x.index].needs_grad) return;
        const Tensor& xv = t.nodes_[x.index].value;
        Tensor& gx = t.grad_buf(x);
        for (std::size_t i = 0; i < gx.size(); ++i)
            if (xv.values[i] > floor) gx.values[i] += self.grad.values[i] / xv.values[i];
    });
}

NodeId Tape::softmax_groups(NodeId x, std::size_t group_size) {
    const Tensor& xv = nodes_[x.index].value;
    if (group_size == 0 || xv.size() % group_size != 0)
        throw DimensionError("softmax_groups: size " + std::to_string(xv.size()) +
                             " not divisible by group " + std::to_string(group_size));
    Tensor y = xv;
    const std::size_t groups = xv.size() / group_size;
    for (std::size_t g = 0; g < groups; ++g) {
        double* v = y.values.data() + g * group_size;
        double mx = v[0];
        for (std::size_t i = 1; i < group_size; ++i) mx = std::max(mx, v[i]);
        double z = 0.0;
        for (std::size_t i = 0; i < group_size; ++i) {
            v[i] = std::exp(v[i] - mx);
            z += v[i];
        }
        for (std::size_t i = 0; i < group_size; ++i) v[i] /= z;
    }
    return push(std::move(y), nodes_[x.index].needs_grad,
                [x, group_size, groups](Tape& t, const Node& self) {
                    if (!t.nodes_[x.index].needs_grad) return;
                    Tensor& gx = t.grad_buf(x);
                    for (std::size_t g = 0; g < groups; ++g) {
                        const double* s = self.value.values.data() + g * group_size;
                        const double* go = self.grad.values.data() + g * group_size;
                        double dot = 0.0;
                        for (std::size_t i = 0; i < group_size; ++i) dot += go[i] * s[i];
                        double* out = gx.values.data() + g * group_size;
                        for (std::size_t i = 0; i < group_size; ++i)
                            out[i] += s[i] * (go[i] - dot);
                    }
                });
}

NodeId Tape::softmax_rows(NodeId x) {
    const Tensor& xv = nodes_[x.index].value;
    return softmax_groups(x, xv.cols());
}

NodeId Tape::row_normalize(NodeId x) {
    const Tensor& xv = nodes_[x.index].value;
    const std::size_t rows = xv.rows(), cols = xv.cols();
    Tensor y = xv;
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < cols; ++c) sq += xv.values[r * cols + c] * xv.values[r * cols + c];
        double n = std::sqrt(sq);
        norms[r] = n > 1e-300 ? n : 1e-300;
        for (std::size_t c = 0; c < cols; ++c) y.values[r * cols + c] /= norms[r];
    }
    return push(std::move(y), nodes_[x.index].needs_grad,
                [x, rows, cols, norms](Tape& t, const Node& self) {
                    if (!t.nodes_[x.index].needs_grad) return;
                    Tensor& gx = t.grad_buf(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* z = self.value.values.data() + r * cols;
                        const double* g = self.grad.values.data() + r * cols;
                        double dot = 0.0;
                        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * z[c];
                        double* out = gx.values.data() + r * cols;
                        for (std::size_t c = 0; c < cols; ++c)
                            out[c] += (g[c] - z[c] * dot) / norms[r];
                    }
                });
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a.index].value;
    const Tensor& bv = nodes_[b.index].value;
    const std::size_t B = av.rows(), N = av.cols(), M = bv.rows();
    if (bv.cols() != N)
        throw DimensionError("matmul_nt: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Tensor y = Tensor::zeros({B, M});
    for (std::size_t r = 0; r < B; ++r)
        for (std::size_t m = 0; m < M; ++m) {
            double acc = 0.0;
            for (std::size_t n = 0; n < N; ++n) acc += av.values[r * N + n] * bv.values[m * N + n];
            y.values[r * M + m] = acc;
        }
    bool ng = nodes_[a.index].needs_grad || nodes_[b.index].needs_grad;
    return push(std::move(y), ng, [a, b, B, N, M](Tape& t, const Node& self) {
        const Tensor& av = t.nodes_[a.index].value;
        const Tensor& bv = t.nodes_[b.index].value;
        if (t.nodes_[a.index].needs_grad) {
            Tensor& ga = t.grad_buf(a);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t m = 0; m < M; ++m) {
                    const double g = self.grad.values[r * M + m];
                    if (g == 0.0) continue;
                    for (std::size_t n = 0; n < N; ++n) ga.values[r * N + n] += g * bv.values[m * N + n];
                }
        }
        if (t.nodes_[b.index].needs_grad) {
            Tensor& gb = t.grad_buf(b);
            for (std::size_t r = 0; r < B; ++r)
                for (std::size_t m = 0; m < M; ++m) {
                    const double g = self.grad.values[r * M + m];
                    if (g == 0.0) continue;
                    for (std::size_t n = 0; n < N; ++n) gb.values[m * N + n] += g * av.values[r * N + n];
                }
        }
    });
}

NodeId Tape::dirichlet_kl_uniform(NodeId alpha) {
    const Tensor& av = nodes_[alpha.index].value;
    const std::size_t rows = av.rows(), L = av.cols();
    Tensor y = Tensor::zeros({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* a = av.values.data() + r * L;
        double S = 0.0;
        for (std::size_t c = 0; c < L; ++c) S += a[c];
        double kl = std::lgamma(S) - std::lgamma(static_cast<double>(L));
        const double psi_S = digamma(S);
        for (std::size_t c = 0; c < L; ++c)
            kl += -std::lgamma(a[c]) + (a[c] - 1.0) * (digamma(a[c]) - psi_S);
        y.values[r] = kl;
    }
    return push(std::move(y), nodes_[alpha.index].needs_grad,
                [alpha, rows, L](Tape& t, const Node& self) {
                    if (!t.nodes_[alpha.index].needs_grad) return;
                    const Tensor& av = t.nodes_[alpha.index].value;
                    Tensor& ga = t.grad_buf(alpha);
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* a = av.values.data() + r * L;
                        double S = 0.0;
                        for (std::size_t c = 0; c < L; ++c) S += a[c];
                        // d/d a_c = (a_c - 1) psi'(a_c) - (S - L) psi'(S)
                        const double common = (S - static_cast<double>(L)) * trigamma(S);
                        const double g = self.grad.values[r];
                        for (std::size_t c = 0; c < L; ++c)
                            ga.values[r * L + c] += g * ((a[c] - 1.0) * trigamma(a[c]) - common);
                    }
                });
}

void Tape::backward(NodeId loss) {
    Node& ln = nodes_[loss.index];
    if (ln.value.size() != 1)
        throw ContractViolation("backward: loss must be scalar, got shape " +
                                shape_str(ln.value.shape));
    grad_buf(loss).values[0] = 1.0;
    for (std::size_t i = loss.index + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad || !n.backward || n.grad.values.empty()) continue;
        n.backward(*this, n);
    }
}

void Tape::zero_grad() {
    for (Node& n : nodes_) n.grad = Tensor{};
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw ContractViolation("finite_diff_check: step must be positive");
    Tape tape;
    NodeId leaf = tape.leaf(x, true);
    NodeId loss = f(tape, leaf);
    tape.backward(loss);
    const Tensor analytic = tape.grad(leaf);

    auto eval = [&](const Tensor& probe) {
        Tape t;
        NodeId l = t.leaf(probe, false);
        return t.value(f(t, l)).values[0];
    };

    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.values[i];
        probe.values[i] = orig + h;
        const double fp = eval(probe);
        probe.values[i] = orig - h;
        const double fm = eval(probe);
        probe.values[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::fabs(analytic.values[i] - fd) / (std::fabs(fd) + 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace evimerge
