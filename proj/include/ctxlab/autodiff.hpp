#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctxlab/params.hpp"
#include "ctxlab/tensor.hpp"

namespace ctxlab {

// Raised when a forward value or gradient turns out non-finite. Carries the
// id of the node where the problem was first seen.
struct NumericsError : std::runtime_error {
    explicit NumericsError(const std::string& node_id)
        : std::runtime_error("non-finite value at node " + node_id), node(node_id) {}
    std::string node;
};

// --------------------------------------------------------------------------
// Dense kernels. Row-major, no aliasing. The ikj ordering keeps the inner
// loop contiguous in both B and C.
// --------------------------------------------------------------------------
namespace kernels {

// C[m,n] += A[m,k] * B[k,n]
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) {
                continue;
            }
            const double* bp = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void mm_a_bt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int p = 0; p < k; ++p) {
                s += ai[p] * bj[p];
            }
            ci[j] += s;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void mm_at_b_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) {
                continue;
            }
            double* cp = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                cp[j] += av * bi[j];
            }
        }
    }
}

}  // namespace kernels

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}
inline double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = 0.3989422804014326779 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// --------------------------------------------------------------------------
// Tape-based reverse mode. A Tape owns every node of one computation; Var is
// a cheap handle into it. Nodes are appended in evaluation order, so parents
// always precede children and backward is a single reverse sweep.
// --------------------------------------------------------------------------

class Tape;

struct Var {
    Tape* tape = nullptr;
    int idx = -1;
    bool valid() const { return tape != nullptr && idx >= 0; }
};

class Tape {
  public:
    struct Node {
        std::string name;
        Tensor value;
        Tensor grad;                   // allocated lazily during backward
        bool requires_grad = false;
        std::vector<int> parents;
        // Propagates this node's grad into its parents' grads.
        std::function<void(Tape&, Node&)> backprop;
        std::string param_id;          // nonempty for parameter leaves
    };

    Node& node(const Var& v) { return nodes_[static_cast<std::size_t>(v.idx)]; }
    const Node& node(const Var& v) const { return nodes_[static_cast<std::size_t>(v.idx)]; }

    const Tensor& value(const Var& v) const { return node(v).value; }

    std::size_t size() const { return nodes_.size(); }

    Var add_node(std::string name, Tensor value, std::vector<Var> parents,
                 std::function<void(Tape&, Node&)> backprop) {
        Node n;
        n.name = std::move(name);
        n.value = std::move(value);
        n.backprop = std::move(backprop);
        for (const Var& p : parents) {
            if (p.tape != this) {
                throw std::invalid_argument("tape: parent from a different tape");
            }
            n.parents.push_back(p.idx);
            n.requires_grad = n.requires_grad || node(p).requires_grad;
        }
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    // Constant input; never receives gradient.
    Var input(Tensor t, std::string name = "input") {
        return add_node(std::move(name), std::move(t), {}, nullptr);
    }

    // Parameter leaf. Gradient is tracked for trainable parameters only.
    Var param(const ParamStore& store, const std::string& id) {
        const Parameter& p = store.at(id);
        Var v = add_node("param:" + id, p.tensor, {}, nullptr);
        Node& n = node(v);
        n.param_id = id;
        n.requires_grad = p.trainable;
        return v;
    }

    // d(loss)/d(parameter) for every trainable parameter leaf reachable from
    // `loss`. Throws NumericsError if a non-finite value shows up.
    std::map<std::string, Tensor> backward(const Var& loss) {
        Node& ln = node(loss);
        if (!ln.value.is_scalar()) {
            throw std::invalid_argument("backward: loss must be a scalar node, got shape " +
                                        shape_str(ln.value.shape));
        }
        if (!std::isfinite(ln.value.values[0])) {
            throw NumericsError(ln.name);
        }
        for (Node& n : nodes_) {
            n.grad = Tensor();
        }
        ln.grad = Tensor(ln.value.shape);
        ln.grad.values[0] = 1.0;
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.requires_grad || n.grad.values.empty()) {
                continue;
            }
            for (double g : n.grad.values) {
                if (!std::isfinite(g)) {
                    throw NumericsError(n.name);
                }
            }
            if (n.backprop) {
                n.backprop(*this, n);
            }
        }
        std::map<std::string, Tensor> grads;
        for (Node& n : nodes_) {
            if (!n.param_id.empty() && n.requires_grad && !n.grad.values.empty()) {
                auto it = grads.find(n.param_id);
                if (it == grads.end()) {
                    grads.emplace(n.param_id, n.grad);
                } else {
                    // same parameter used through several leaves
                    for (std::size_t k = 0; k < n.grad.values.size(); ++k) {
                        it->second.values[k] += n.grad.values[k];
                    }
                }
            }
        }
        return grads;
    }

    Tensor& grad_of(int idx, const std::vector<int>& shape) {
        Node& n = nodes_[static_cast<std::size_t>(idx)];
        if (n.grad.values.empty()) {
            n.grad = Tensor(shape);
        }
        return n.grad;
    }

    bool parent_needs_grad(int idx) const {
        return nodes_[static_cast<std::size_t>(idx)].requires_grad;
    }

  private:
    std::vector<Node> nodes_;
};

// --------------------------------------------------------------------------
// Primitives
// --------------------------------------------------------------------------

namespace ops {

inline void check_2d(const Tensor& t, const char* who) {
    if (t.shape.size() != 2) {
        throw std::invalid_argument(std::string(who) + ": expected 2-D, got " +
                                    shape_str(t.shape));
    }
}

// C = A[m,k] * B[k,n]
inline Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    check_2d(av, "matmul");
    check_2d(bv, "matmul");
    if (av.shape[1] != bv.shape[0]) {
        throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(av.shape) +
                                    " x " + shape_str(bv.shape));
    }
    const int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    Tensor out({m, n});
    kernels::mm_acc(av.values.data(), bv.values.data(), out.values.data(), m, k, n);
    const int ai = a.idx, bi = b.idx;
    return t.add_node("matmul", std::move(out), {a, b}, [ai, bi, m, k, n](Tape& tp, Tape::Node& nd) {
        const Tensor& A = tp.node(Var{&tp, ai}).value;
        const Tensor& B = tp.node(Var{&tp, bi}).value;
        if (tp.parent_needs_grad(ai)) {
            Tensor& ga = tp.grad_of(ai, A.shape);  // dA = G * B^T
            kernels::mm_a_bt_acc(nd.grad.values.data(), B.values.data(), ga.values.data(), m, n, k);
        }
        if (tp.parent_needs_grad(bi)) {
            Tensor& gb = tp.grad_of(bi, B.shape);  // dB = A^T * G
            kernels::mm_at_b_acc(A.values.data(), nd.grad.values.data(), gb.values.data(), m, k, n);
        }
    });
}

// C = A[m,k] * B[n,k]^T; used for attention scores.
inline Var matmul_bt(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    check_2d(av, "matmul_bt");
    check_2d(bv, "matmul_bt");
    if (av.shape[1] != bv.shape[1]) {
        throw std::invalid_argument("matmul_bt: inner dimensions differ");
    }
    const int m = av.shape[0], k = av.shape[1], n = bv.shape[0];
    Tensor out({m, n});
    kernels::mm_a_bt_acc(av.values.data(), bv.values.data(), out.values.data(), m, k, n);
    const int ai = a.idx, bi = b.idx;
    return t.add_node("matmul_bt", std::move(out), {a, b},
                      [ai, bi, m, k, n](Tape& tp, Tape::Node& nd) {
                          const Tensor& A = tp.node(Var{&tp, ai}).value;
                          const Tensor& B = tp.node(Var{&tp, bi}).value;
                          if (tp.parent_needs_grad(ai)) {
                              Tensor& ga = tp.grad_of(ai, A.shape);  // dA = G * B
                              kernels::mm_acc(nd.grad.values.data(), B.values.data(),
                                              ga.values.data(), m, n, k);
                          }
                          if (tp.parent_needs_grad(bi)) {
                              Tensor& gb = tp.grad_of(bi, B.shape);  // dB = G^T * A
                              kernels::mm_at_b_acc(nd.grad.values.data(), A.values.data(),
                                                   gb.values.data(), m, n, k);
                          }
                      });
}

inline Var add(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (!av.same_shape(bv)) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(av.shape) + " vs " +
                                    shape_str(bv.shape));
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] += bv.values[i];
    }
    const int ai = a.idx, bi = b.idx;
    return t.add_node("add", std::move(out), {a, b}, [ai, bi](Tape& tp, Tape::Node& nd) {
        for (int pi : {ai, bi}) {
            if (!tp.parent_needs_grad(pi)) {
                continue;
            }
            Tensor& g = tp.grad_of(pi, nd.grad.shape);
            for (std::size_t i = 0; i < g.values.size(); ++i) {
                g.values[i] += nd.grad.values[i];
            }
        }
    });
}

// rows of A[m,n] + bias[n]
inline Var add_bias(Var a, Var bias) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(bias);
    check_2d(av, "add_bias");
    if (bv.shape.size() != 1 || bv.shape[0] != av.shape[1]) {
        throw std::invalid_argument("add_bias: bias shape mismatch");
    }
    const int m = av.shape[0], n = av.shape[1];
    Tensor out = av;
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out.at(i, j) += bv.values[static_cast<std::size_t>(j)];
        }
    }
    const int ai = a.idx, bi = bias.idx;
    return t.add_node("add_bias", std::move(out), {a, bias},
                      [ai, bi, m, n](Tape& tp, Tape::Node& nd) {
                          if (tp.parent_needs_grad(ai)) {
                              Tensor& ga = tp.grad_of(ai, {m, n});
                              for (std::size_t i = 0; i < ga.values.size(); ++i) {
                                  ga.values[i] += nd.grad.values[i];
                              }
                          }
                          if (tp.parent_needs_grad(bi)) {
                              Tensor& gb = tp.grad_of(bi, {n});
                              for (int i = 0; i < m; ++i) {
                                  for (int j = 0; j < n; ++j) {
                                      gb.values[static_cast<std::size_t>(j)] += nd.grad.at(i, j);
                                  }
                              }
                          }
                      });
}

inline Var mul(Var a, Var b) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (!av.same_shape(bv)) {
        throw std::invalid_argument("mul: shape mismatch");
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] *= bv.values[i];
    }
    const int ai = a.idx, bi = b.idx;
    return t.add_node("mul", std::move(out), {a, b}, [ai, bi](Tape& tp, Tape::Node& nd) {
        const Tensor& A = tp.node(Var{&tp, ai}).value;
        const Tensor& B = tp.node(Var{&tp, bi}).value;
        if (tp.parent_needs_grad(ai)) {
            Tensor& ga = tp.grad_of(ai, A.shape);
            for (std::size_t i = 0; i < ga.values.size(); ++i) {
                ga.values[i] += nd.grad.values[i] * B.values[i];
            }
        }
        if (tp.parent_needs_grad(bi)) {
            Tensor& gb = tp.grad_of(bi, B.shape);
            for (std::size_t i = 0; i < gb.values.size(); ++i) {
                gb.values[i] += nd.grad.values[i] * A.values[i];
            }
        }
    });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.values) {
        v *= s;
    }
    const int ai = a.idx;
    return t.add_node("scale", std::move(out), {a}, [ai, s](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(ai)) {
            return;
        }
        Tensor& g = tp.grad_of(ai, nd.grad.shape);
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            g.values[i] += s * nd.grad.values[i];
        }
    });
}

inline Var sum(Var a) {
    Tape& t = *a.tape;
    double s = 0.0;
    for (double v : t.value(a).values) {
        s += v;
    }
    const int ai = a.idx;
    return t.add_node("sum", Tensor::scalar(s), {a}, [ai](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(ai)) {
            return;
        }
        const Tensor& A = tp.node(Var{&tp, ai}).value;
        Tensor& g = tp.grad_of(ai, A.shape);
        for (double& v : g.values) {
            v += nd.grad.values[0];
        }
    });
}

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

inline Var gelu(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.values) {
        v = gelu_scalar(v);
    }
    const int ai = a.idx;
    return t.add_node("gelu", std::move(out), {a}, [ai](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(ai)) {
            return;
        }
        const Tensor& A = tp.node(Var{&tp, ai}).value;
        Tensor& g = tp.grad_of(ai, A.shape);
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            g.values[i] += nd.grad.values[i] * gelu_grad_scalar(A.values[i]);
        }
    });
}

inline Var tanh_op(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.value(a);
    for (double& v : out.values) {
        v = std::tanh(v);
    }
    const int ai = a.idx;
    return t.add_node("tanh", std::move(out), {a}, [ai](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(ai)) {
            return;
        }
        Tensor& g = tp.grad_of(ai, nd.value.shape);
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            const double y = nd.value.values[i];
            g.values[i] += nd.grad.values[i] * (1.0 - y * y);
        }
    });
}

// Row-wise softmax of a 2-D tensor (1-D treated as a single row).
inline Var softmax(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = t.value(a);
    const int m = av.shape.size() == 2 ? av.shape[0] : 1;
    const int n = av.shape.size() == 2 ? av.shape[1] : av.shape[0];
    Tensor out = av;
    for (int i = 0; i < m; ++i) {
        double* row = out.values.data() + static_cast<std::size_t>(i) * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) {
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (int j = 0; j < n; ++j) {
            row[j] /= z;
        }
    }
    const int ai = a.idx;
    return t.add_node("softmax", std::move(out), {a}, [ai, m, n](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(ai)) {
            return;
        }
        Tensor& g = tp.grad_of(ai, nd.value.shape);
        for (int i = 0; i < m; ++i) {
            const double* y = nd.value.values.data() + static_cast<std::size_t>(i) * n;
            const double* gy = nd.grad.values.data() + static_cast<std::size_t>(i) * n;
            double* gx = g.values.data() + static_cast<std::size_t>(i) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) {
                s += gy[j] * y[j];
            }
            for (int j = 0; j < n; ++j) {
                gx[j] += y[j] * (gy[j] - s);
            }
        }
    });
}

// Row-wise layer norm with affine output: gamma * (x - mean) / sqrt(var + eps) + beta.
inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-12) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    check_2d(xv, "layer_norm");
    const int m = xv.shape[0], n = xv.shape[1];
    const Tensor& gv = t.value(gamma);
    const Tensor& bv = t.value(beta);
    if (gv.shape != std::vector<int>{n} || bv.shape != std::vector<int>{n}) {
        throw std::invalid_argument("layer_norm: gamma/beta must be [cols]");
    }
    Tensor out({m, n});
    Tensor xhat({m, n});
    std::vector<double> inv_std(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* row = xv.values.data() + static_cast<std::size_t>(i) * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) {
            mean += row[j];
        }
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < n; ++j) {
            const double xh = (row[j] - mean) * is;
            xhat.at(i, j) = xh;
            out.at(i, j) = gv.values[static_cast<std::size_t>(j)] * xh +
                           bv.values[static_cast<std::size_t>(j)];
        }
    }
    const int xi = x.idx, gi = gamma.idx, bi = beta.idx;
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto istd = std::make_shared<std::vector<double>>(std::move(inv_std));
    return t.add_node(
        "layer_norm", std::move(out), {x, gamma, beta},
        [xi, gi, bi, m, n, xh, istd](Tape& tp, Tape::Node& nd) {
            const Tensor& G = tp.node(Var{&tp, gi}).value;
            if (tp.parent_needs_grad(gi)) {
                Tensor& gg = tp.grad_of(gi, {n});
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) {
                        gg.values[static_cast<std::size_t>(j)] += nd.grad.at(i, j) * xh->at(i, j);
                    }
                }
            }
            if (tp.parent_needs_grad(bi)) {
                Tensor& gb = tp.grad_of(bi, {n});
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) {
                        gb.values[static_cast<std::size_t>(j)] += nd.grad.at(i, j);
                    }
                }
            }
            if (tp.parent_needs_grad(xi)) {
                Tensor& gx = tp.grad_of(xi, {m, n});
                for (int i = 0; i < m; ++i) {
                    // dxhat = dy * gamma; dx from the standard LN backward
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double dxh = nd.grad.at(i, j) * G.values[static_cast<std::size_t>(j)];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh->at(i, j);
                    }
                    const double is = (*istd)[static_cast<std::size_t>(i)];
                    for (int j = 0; j < n; ++j) {
                        const double dxh = nd.grad.at(i, j) * G.values[static_cast<std::size_t>(j)];
                        gx.at(i, j) += is * (dxh - sum_dxh / n - xh->at(i, j) * sum_dxh_xh / n);
                    }
                }
            }
        });
}

// rows = table[ids]; gradient accumulates back into the looked-up rows.
inline Var embedding_lookup(Var table, const std::vector<int>& ids) {
    Tape& t = *table.tape;
    const Tensor& tv = t.value(table);
    check_2d(tv, "embedding_lookup");
    const int v = tv.shape[0], d = tv.shape[1];
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                        " out of range [0," + std::to_string(v) + ")");
        }
    }
    const int m = static_cast<int>(ids.size());
    Tensor out({m, d});
    for (int i = 0; i < m; ++i) {
        const double* src = tv.values.data() + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * d;
        std::copy(src, src + d, out.values.data() + static_cast<std::size_t>(i) * d);
    }
    const int ti = table.idx;
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return t.add_node("embedding_lookup", std::move(out), {table},
                      [ti, d, v, ids_copy](Tape& tp, Tape::Node& nd) {
                          if (!tp.parent_needs_grad(ti)) {
                              return;
                          }
                          Tensor& g = tp.grad_of(ti, {v, d});
                          for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                              double* dst = g.values.data() +
                                            static_cast<std::size_t>((*ids_copy)[i]) * d;
                              const double* src = nd.grad.values.data() + i * d;
                              for (int j = 0; j < d; ++j) {
                                  dst[j] += src[j];
                              }
                          }
                      });
}

// Copy of `base` with row positions[i] replaced by the 1-D vector rows[i].
// Gradient for a replaced row flows to its source, not to base.
inline Var replace_rows(Var base, const std::vector<int>& positions, const std::vector<Var>& rows) {
    Tape& t = *base.tape;
    const Tensor& bv = t.value(base);
    check_2d(bv, "replace_rows");
    if (positions.size() != rows.size()) {
        throw std::invalid_argument("replace_rows: positions/rows size mismatch");
    }
    const int m = bv.shape[0], d = bv.shape[1];
    Tensor out = bv;
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const int pos = positions[i];
        if (pos < 0 || pos >= m) {
            throw std::invalid_argument("replace_rows: position out of range");
        }
        const Tensor& rv = t.value(rows[i]);
        if (rv.shape != std::vector<int>{d}) {
            throw std::invalid_argument("replace_rows: row must be [cols] vector");
        }
        std::copy(rv.values.begin(), rv.values.end(),
                  out.values.begin() + static_cast<std::size_t>(pos) * d);
    }
    std::vector<Var> parents = {base};
    parents.insert(parents.end(), rows.begin(), rows.end());
    const int bi = base.idx;
    auto pos_copy = std::make_shared<std::vector<int>>(positions);
    std::vector<int> row_idx;
    row_idx.reserve(rows.size());
    for (const Var& r : rows) {
        row_idx.push_back(r.idx);
    }
    auto rows_copy = std::make_shared<std::vector<int>>(std::move(row_idx));
    return t.add_node("replace_rows", std::move(out), parents,
                      [bi, m, d, pos_copy, rows_copy](Tape& tp, Tape::Node& nd) {
                          std::vector<bool> replaced(static_cast<std::size_t>(m), false);
                          for (int p : *pos_copy) {
                              replaced[static_cast<std::size_t>(p)] = true;
                          }
                          if (tp.parent_needs_grad(bi)) {
                              Tensor& gb = tp.grad_of(bi, {m, d});
                              for (int i = 0; i < m; ++i) {
                                  if (replaced[static_cast<std::size_t>(i)]) {
                                      continue;
                                  }
                                  for (int j = 0; j < d; ++j) {
                                      gb.at(i, j) += nd.grad.at(i, j);
                                  }
                              }
                          }
                          for (std::size_t r = 0; r < rows_copy->size(); ++r) {
                              const int ri = (*rows_copy)[r];
                              if (!tp.parent_needs_grad(ri)) {
                                  continue;
                              }
                              Tensor& gr = tp.grad_of(ri, {d});
                              const int pos = (*pos_copy)[r];
                              // nested replacements at one position: only the
                              // last write is live in the output
                              bool live = true;
                              for (std::size_t r2 = r + 1; r2 < rows_copy->size(); ++r2) {
                                  if ((*pos_copy)[r2] == pos) {
                                      live = false;
                                      break;
                                  }
                              }
                              if (!live) {
                                  continue;
                              }
                              for (int j = 0; j < d; ++j) {
                                  gr.values[static_cast<std::size_t>(j)] += nd.grad.at(pos, j);
                              }
                          }
                      });
}

// x[rows] for a list of row indices; backward scatters.
inline Var gather_rows(Var x, const std::vector<int>& rows) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    check_2d(xv, "gather_rows");
    const int m = xv.shape[0], n = xv.shape[1];
    Tensor out({static_cast<int>(rows.size()), n});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= m) {
            throw std::invalid_argument("gather_rows: row out of range");
        }
        const double* src = xv.values.data() + static_cast<std::size_t>(rows[i]) * n;
        std::copy(src, src + n, out.values.data() + i * n);
    }
    const int xi = x.idx;
    auto rows_copy = std::make_shared<std::vector<int>>(rows);
    return t.add_node("gather_rows", std::move(out), {x},
                      [xi, m, n, rows_copy](Tape& tp, Tape::Node& nd) {
                          if (!tp.parent_needs_grad(xi)) {
                              return;
                          }
                          Tensor& g = tp.grad_of(xi, {m, n});
                          for (std::size_t i = 0; i < rows_copy->size(); ++i) {
                              double* dst = g.values.data() +
                                            static_cast<std::size_t>((*rows_copy)[i]) * n;
                              for (int j = 0; j < n; ++j) {
                                  dst[j] += nd.grad.values[i * n + j];
                              }
                          }
                      });
}

inline Var slice_row(Var x, int row) { return gather_rows(x, {row}); }

// Column block [j0, j1) of a 2-D tensor.
inline Var slice_cols(Var x, int j0, int j1) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    check_2d(xv, "slice_cols");
    const int m = xv.shape[0], n = xv.shape[1];
    if (j0 < 0 || j1 > n || j0 >= j1) {
        throw std::invalid_argument("slice_cols: bad range");
    }
    const int w = j1 - j0;
    Tensor out({m, w});
    for (int i = 0; i < m; ++i) {
        const double* src = xv.values.data() + static_cast<std::size_t>(i) * n + j0;
        std::copy(src, src + w, out.values.data() + static_cast<std::size_t>(i) * w);
    }
    const int xi = x.idx;
    return t.add_node("slice_cols", std::move(out), {x}, [xi, m, n, j0, w](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(xi)) {
            return;
        }
        Tensor& g = tp.grad_of(xi, {m, n});
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < w; ++j) {
                g.values[static_cast<std::size_t>(i) * n + j0 + j] +=
                    nd.grad.values[static_cast<std::size_t>(i) * w + j];
            }
        }
    });
}

// Concatenate 2-D tensors with equal row counts along columns.
inline Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) {
        throw std::invalid_argument("concat_cols: empty input");
    }
    Tape& t = *xs[0].tape;
    const int m = t.value(xs[0]).shape[0];
    int total = 0;
    for (const Var& x : xs) {
        check_2d(t.value(x), "concat_cols");
        if (t.value(x).shape[0] != m) {
            throw std::invalid_argument("concat_cols: row count mismatch");
        }
        total += t.value(x).shape[1];
    }
    Tensor out({m, total});
    int off = 0;
    std::vector<int> widths;
    for (const Var& x : xs) {
        const Tensor& xv = t.value(x);
        const int w = xv.shape[1];
        widths.push_back(w);
        for (int i = 0; i < m; ++i) {
            std::copy(xv.values.data() + static_cast<std::size_t>(i) * w,
                      xv.values.data() + static_cast<std::size_t>(i) * w + w,
                      out.values.data() + static_cast<std::size_t>(i) * total + off);
        }
        off += w;
    }
    std::vector<int> parent_idx;
    for (const Var& x : xs) {
        parent_idx.push_back(x.idx);
    }
    auto pidx = std::make_shared<std::vector<int>>(std::move(parent_idx));
    auto wids = std::make_shared<std::vector<int>>(std::move(widths));
    return t.add_node("concat_cols", std::move(out), xs, [m, total, pidx, wids](Tape& tp, Tape::Node& nd) {
        int off = 0;
        for (std::size_t p = 0; p < pidx->size(); ++p) {
            const int w = (*wids)[p];
            if (tp.parent_needs_grad((*pidx)[p])) {
                Tensor& g = tp.grad_of((*pidx)[p], {m, w});
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < w; ++j) {
                        g.values[static_cast<std::size_t>(i) * w + j] +=
                            nd.grad.values[static_cast<std::size_t>(i) * total + off + j];
                    }
                }
            }
            off += w;
        }
    });
}

// Concatenate 1-D vectors.
inline Var concat(const std::vector<Var>& xs) {
    if (xs.empty()) {
        throw std::invalid_argument("concat: empty input");
    }
    Tape& t = *xs[0].tape;
    int total = 0;
    for (const Var& x : xs) {
        const Tensor& xv = t.value(x);
        if (xv.shape.size() != 1) {
            throw std::invalid_argument("concat: expected 1-D inputs");
        }
        total += xv.shape[0];
    }
    Tensor out({total});
    int off = 0;
    std::vector<int> widths;
    for (const Var& x : xs) {
        const Tensor& xv = t.value(x);
        std::copy(xv.values.begin(), xv.values.end(), out.values.begin() + off);
        widths.push_back(xv.shape[0]);
        off += xv.shape[0];
    }
    std::vector<int> parent_idx;
    for (const Var& x : xs) {
        parent_idx.push_back(x.idx);
    }
    auto pidx = std::make_shared<std::vector<int>>(std::move(parent_idx));
    auto wids = std::make_shared<std::vector<int>>(std::move(widths));
    return t.add_node("concat", std::move(out), xs, [pidx, wids](Tape& tp, Tape::Node& nd) {
        int off = 0;
        for (std::size_t p = 0; p < pidx->size(); ++p) {
            const int w = (*wids)[p];
            if (tp.parent_needs_grad((*pidx)[p])) {
                Tensor& g = tp.grad_of((*pidx)[p], {w});
                for (int j = 0; j < w; ++j) {
                    g.values[static_cast<std::size_t>(j)] += nd.grad.values[static_cast<std::size_t>(off + j)];
                }
            }
            off += w;
        }
    });
}

// Mean over rows of a 2-D tensor -> 1-D vector.
inline Var mean_pool(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    check_2d(xv, "mean_pool");
    const int m = xv.shape[0], n = xv.shape[1];
    Tensor out({n});
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out.values[static_cast<std::size_t>(j)] += xv.at(i, j) / m;
        }
    }
    const int xi = x.idx;
    return t.add_node("mean_pool", std::move(out), {x}, [xi, m, n](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(xi)) {
            return;
        }
        Tensor& g = tp.grad_of(xi, {m, n});
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                g.at(i, j) += nd.grad.values[static_cast<std::size_t>(j)] / m;
            }
        }
    });
}

// 1-D vector viewed as a single-row matrix.
inline Var as_row(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (xv.shape.size() != 1) {
        throw std::invalid_argument("as_row: expected 1-D input");
    }
    const int n = xv.shape[0];
    Tensor out({1, n});
    out.values = xv.values;
    const int xi = x.idx;
    return t.add_node("as_row", std::move(out), {x}, [xi, n](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(xi)) {
            return;
        }
        Tensor& g = tp.grad_of(xi, {n});
        for (int j = 0; j < n; ++j) {
            g.values[static_cast<std::size_t>(j)] += nd.grad.values[static_cast<std::size_t>(j)];
        }
    });
}

// Single-row matrix viewed as a 1-D vector.
inline Var as_vec(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    check_2d(xv, "as_vec");
    if (xv.shape[0] != 1) {
        throw std::invalid_argument("as_vec: expected a single row");
    }
    const int n = xv.shape[1];
    Tensor out({n});
    out.values = xv.values;
    const int xi = x.idx;
    return t.add_node("as_vec", std::move(out), {x}, [xi, n](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(xi)) {
            return;
        }
        Tensor& g = tp.grad_of(xi, {1, n});
        for (int j = 0; j < n; ++j) {
            g.values[static_cast<std::size_t>(j)] += nd.grad.values[static_cast<std::size_t>(j)];
        }
    });
}

// Mean softmax cross-entropy of logits[N, C] against integer labels[N].
// Fused with softmax for the usual stable backward: (softmax - onehot) / N.
inline Var cross_entropy(Var logits, const std::vector<int>& labels) {
    Tape& t = *logits.tape;
    const Tensor& lv = t.value(logits);
    check_2d(lv, "cross_entropy");
    const int n = lv.shape[0], c = lv.shape[1];
    if (static_cast<int>(labels.size()) != n) {
        throw std::invalid_argument("cross_entropy: labels length mismatch");
    }
    Tensor probs({n, c});
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c) {
            throw std::invalid_argument("cross_entropy: label out of range");
        }
        const double* row = lv.values.data() + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) {
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (int j = 0; j < c; ++j) {
            z += std::exp(row[j] - mx);
        }
        const double logz = std::log(z) + mx;
        loss += logz - row[y];
        for (int j = 0; j < c; ++j) {
            probs.at(i, j) = std::exp(row[j] - logz);
        }
    }
    loss /= n;
    const int li = logits.idx;
    auto probs_copy = std::make_shared<Tensor>(std::move(probs));
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return t.add_node("cross_entropy", Tensor::scalar(loss), {logits},
                      [li, n, c, probs_copy, labels_copy](Tape& tp, Tape::Node& nd) {
                          if (!tp.parent_needs_grad(li)) {
                              return;
                          }
                          Tensor& g = tp.grad_of(li, {n, c});
                          const double go = nd.grad.values[0] / n;
                          for (int i = 0; i < n; ++i) {
                              for (int j = 0; j < c; ++j) {
                                  double v = probs_copy->at(i, j);
                                  if (j == (*labels_copy)[static_cast<std::size_t>(i)]) {
                                      v -= 1.0;
                                  }
                                  g.at(i, j) += go * v;
                              }
                          }
                      });
}

// Same values, new shape.
inline Var reshape(Var x, std::vector<int> shape) {
    Tape& t = *x.tape;
    const Tensor& xv = t.value(x);
    if (Tensor::numel(shape) != xv.values.size()) {
        throw std::invalid_argument("reshape: element count mismatch");
    }
    Tensor out(shape, xv.values);
    const int xi = x.idx;
    return t.add_node("reshape", std::move(out), {x}, [xi](Tape& tp, Tape::Node& nd) {
        if (!tp.parent_needs_grad(xi)) {
            return;
        }
        const Tensor& X = tp.node(Var{&tp, xi}).value;
        Tensor& g = tp.grad_of(xi, X.shape);
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            g.values[i] += nd.grad.values[i];
        }
    });
}

// x @ W + b for 2-D x.
inline Var linear(Var x, Var w, Var b) { return add_bias(matmul(x, w), b); }

}  // namespace ops

}  // namespace ctxlab
