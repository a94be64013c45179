#pragma once

// Reverse-mode autodiff on dense row-major tensors. Single-writer graphs:
// a forward pass records nodes, backward() runs once per recorded graph.
// Float is the training dtype; the same templates instantiate with double
// for finite-difference gradient checks.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "tcae/common.hpp"
#include "tcae/rng.hpp"

namespace tcae {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline bool grad_mode_enabled();

namespace detail {
inline thread_local bool g_grad_enabled = true;
inline thread_local bool g_finite_checks = true;
}  // namespace detail

inline bool grad_mode_enabled() { return detail::g_grad_enabled; }
inline void set_finite_checks(bool on) { detail::g_finite_checks = on; }

// Disables graph recording in scope (teacher forward, sampling, eval).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev; }
};

template <class T>
struct Node {
    Shape shape;
    std::shared_ptr<std::vector<T>> value;  // shared so reshape is O(1)
    std::vector<T> grad;                    // allocated lazily in backward
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;
    const char* op = "leaf";
    bool requires_grad = false;
    bool consumed = false;

    std::int64_t size() const { return numel(shape); }
    T* data() { return value->data(); }
    const T* data() const { return value->data(); }
    std::vector<T>& grad_buf() {
        if (grad.empty()) grad.assign(value->size(), T(0));
        return grad;
    }
};

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
    if (!detail::g_finite_checks) return;
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> m(v.data(), static_cast<Eigen::Index>(v.size()));
    if (!m.allFinite())
        throw NumericalError(std::string("non-finite values produced by op '") + op + "'");
}

template <class T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static TensorT leaf(Shape shape, std::vector<T> data, bool requires_grad = false) {
        TCAE_CHECK(numel(shape) == std::int64_t(data.size()), "leaf: shape ", shape_str(shape),
                   " does not match buffer length ", data.size());
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::make_shared<std::vector<T>>(std::move(data));
        n->requires_grad = requires_grad;
        return TensorT(std::move(n));
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return leaf(shape, std::vector<T>(std::size_t(numel(shape)), T(0)), requires_grad);
    }
    static TensorT full(Shape shape, T v, bool requires_grad = false) {
        return leaf(shape, std::vector<T>(std::size_t(numel(shape)), v), requires_grad);
    }
    static TensorT ones(Shape shape, bool requires_grad = false) { return full(shape, T(1), requires_grad); }

    static TensorT randn(Shape shape, RngStream& rng, T stddev = T(1), bool requires_grad = false) {
        std::vector<T> d(std::size_t(numel(shape)));
        for (auto& x : d) x = T(rng.normal()) * stddev;
        return leaf(std::move(shape), std::move(d), requires_grad);
    }
    static TensorT uniform(Shape shape, RngStream& rng, T lo, T hi, bool requires_grad = false) {
        std::vector<T> d(std::size_t(numel(shape)));
        for (auto& x : d) x = T(rng.uniform(double(lo), double(hi)));
        return leaf(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::int64_t dim(int i) const { return n_->shape[std::size_t(i < 0 ? int(n_->shape.size()) + i : i)]; }
    int ndim() const { return int(n_->shape.size()); }
    std::int64_t size() const { return n_->size(); }
    bool requires_grad() const { return n_->requires_grad; }

    const std::vector<T>& values() const { return *n_->value; }
    std::vector<T>& mutable_values() { return *n_->value; }
    const std::vector<T>& grad() const { return n_->grad; }
    Node<T>* node() const { return n_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return n_; }

    T item() const {
        TCAE_CHECK(size() == 1, "item() on tensor of shape ", shape_str(shape()));
        return (*n_->value)[0];
    }

    T at(std::initializer_list<std::int64_t> idx) const {
        std::int64_t off = 0;
        std::size_t k = 0;
        for (auto i : idx) {
            off = off * n_->shape[k] + i;
            ++k;
        }
        return (*n_->value)[std::size_t(off)];
    }

    // Leaf view of the same buffer with no graph history.
    TensorT detach() const {
        auto n = std::make_shared<Node<T>>();
        n->shape = n_->shape;
        n->value = n_->value;
        return TensorT(std::move(n));
    }

    void zero_grad() { n_->grad.clear(); }

private:
    std::shared_ptr<Node<T>> n_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// graph recording helpers

template <class T>
std::shared_ptr<Node<T>> make_op_node(const char* op, Shape shape, std::vector<T> value,
                                      std::vector<std::shared_ptr<Node<T>>> parents) {
    check_finite(value, op);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::make_shared<std::vector<T>>(std::move(value));
    n->op = op;
    if (detail::g_grad_enabled) {
        for (auto& p : parents)
            if (p->requires_grad) n->requires_grad = true;
        if (n->requires_grad) n->parents = std::move(parents);
    }
    return n;
}

// backward(): topological order over the recorded graph, then reverse sweep.
template <class T>
void backward(const TensorT<T>& loss) {
    Node<T>* root = loss.node();
    TCAE_CHECK(root != nullptr, "backward on undefined tensor");
    TCAE_CHECK(root->size() == 1, "backward: loss must be scalar, got ", shape_str(root->shape));
    TCAE_CHECK(!root->consumed, "backward: graph already consumed");
    root->consumed = true;
    if (!root->requires_grad) return;  // nothing reachable

    std::vector<Node<T>*> topo;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buf()[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->backward_fn) continue;
        if (n->grad.empty()) continue;  // not reached by any gradient
        n->backward_fn(*n);
        if (n != root && n->parents.size() > 0) n->grad = {};  // free intermediate grads
        n->backward_fn = nullptr;
    }
}

// ---------------------------------------------------------------------------
// broadcasting

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    Shape out(std::max(a.size(), b.size()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
        std::int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
        TCAE_CHECK(da == db || da == 1 || db == 1, "broadcast mismatch: ", shape_str(a), " vs ",
                   shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides, with 0 on broadcast (size-1) dims, aligned to out rank.
inline std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::int64_t> st(out.size(), 0);
    std::int64_t stride = 1;
    for (int i = int(in.size()) - 1; i >= 0; --i) {
        std::size_t oi = out.size() - in.size() + std::size_t(i);
        st[oi] = (in[std::size_t(i)] == 1 && out[oi] != 1) ? 0 : stride;
        stride *= in[std::size_t(i)];
    }
    return st;
}

// Iterates the output index space of a broadcast binary op calling
// f(out_linear, a_offset, b_offset). The innermost dim is a tight loop.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, F&& f) {
    const int nd = int(out.size());
    if (nd == 0) {
        f(0, 0, 0);
        return;
    }
    const std::int64_t inner = out[std::size_t(nd - 1)];
    const std::int64_t ia = sa[std::size_t(nd - 1)], ib = sb[std::size_t(nd - 1)];
    std::int64_t outer = 1;
    for (int i = 0; i < nd - 1; ++i) outer *= out[std::size_t(i)];
    std::vector<std::int64_t> idx(std::size_t(nd - 1), 0);
    std::int64_t oa = 0, ob = 0, olin = 0;
    for (std::int64_t o = 0; o < outer; ++o) {
        std::int64_t pa = oa, pb = ob;
        for (std::int64_t i = 0; i < inner; ++i) {
            f(olin++, pa, pb);
            pa += ia;
            pb += ib;
        }
        for (int d = nd - 2; d >= 0; --d) {
            idx[std::size_t(d)]++;
            oa += sa[std::size_t(d)];
            ob += sb[std::size_t(d)];
            if (idx[std::size_t(d)] < out[std::size_t(d)]) break;
            oa -= sa[std::size_t(d)] * out[std::size_t(d)];
            ob -= sb[std::size_t(d)] * out[std::size_t(d)];
            idx[std::size_t(d)] = 0;
        }
    }
}

// ---------------------------------------------------------------------------
// binary elementwise ops

enum class BinOp { Add, Sub, Mul, Div };

template <class T>
TensorT<T> binary_op(const char* name, BinOp kind, const TensorT<T>& a, const TensorT<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    Shape so = broadcast_shape(sa, sb);
    std::vector<T> out(std::size_t(numel(so)));
    const T* pa = a.values().data();
    const T* pb = b.values().data();

    if (sa == sb) {
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        Eigen::Map<const Arr> ma(pa, std::int64_t(out.size())), mb(pb, std::int64_t(out.size()));
        Eigen::Map<Arr> mo(out.data(), std::int64_t(out.size()));
        switch (kind) {
            case BinOp::Add: mo = ma + mb; break;
            case BinOp::Sub: mo = ma - mb; break;
            case BinOp::Mul: mo = ma * mb; break;
            case BinOp::Div: mo = ma / mb; break;
        }
    } else {
        auto sta = broadcast_strides(sa, so), stb = broadcast_strides(sb, so);
        switch (kind) {
            case BinOp::Add:
                for_each_broadcast(so, sta, stb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                    out[std::size_t(o)] = pa[ia] + pb[ib];
                });
                break;
            case BinOp::Sub:
                for_each_broadcast(so, sta, stb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                    out[std::size_t(o)] = pa[ia] - pb[ib];
                });
                break;
            case BinOp::Mul:
                for_each_broadcast(so, sta, stb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                    out[std::size_t(o)] = pa[ia] * pb[ib];
                });
                break;
            case BinOp::Div:
                for_each_broadcast(so, sta, stb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                    out[std::size_t(o)] = pa[ia] / pb[ib];
                });
                break;
        }
    }

    auto n = make_op_node<T>(name, so, std::move(out), {a.node_ptr(), b.node_ptr()});
    if (n->requires_grad) {
        auto na = a.node_ptr();
        auto nb = b.node_ptr();
        n->backward_fn = [kind, na, nb, so](Node<T>& self) {
            const T* g = self.grad.data();
            auto sta = broadcast_strides(na->shape, so);
            auto stb = broadcast_strides(nb->shape, so);
            T* ga = na->requires_grad ? na->grad_buf().data() : nullptr;
            T* gb = nb->requires_grad ? nb->grad_buf().data() : nullptr;
            const T* pa = na->data();
            const T* pb = nb->data();
            for_each_broadcast(so, sta, stb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                T go = g[o];
                switch (kind) {
                    case BinOp::Add:
                        if (ga) ga[ia] += go;
                        if (gb) gb[ib] += go;
                        break;
                    case BinOp::Sub:
                        if (ga) ga[ia] += go;
                        if (gb) gb[ib] -= go;
                        break;
                    case BinOp::Mul:
                        if (ga) ga[ia] += go * pb[ib];
                        if (gb) gb[ib] += go * pa[ia];
                        break;
                    case BinOp::Div:
                        if (ga) ga[ia] += go / pb[ib];
                        if (gb) gb[ib] -= go * pa[ia] / (pb[ib] * pb[ib]);
                        break;
                }
            });
        };
    }
    return TensorT<T>(std::move(n));
}

template <class T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) { return binary_op("add", BinOp::Add, a, b); }
template <class T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) { return binary_op("sub", BinOp::Sub, a, b); }
template <class T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) { return binary_op("mul", BinOp::Mul, a, b); }
template <class T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) { return binary_op("div", BinOp::Div, a, b); }

template <class T> TensorT<T> operator+(const TensorT<T>& a, const TensorT<T>& b) { return add(a, b); }
template <class T> TensorT<T> operator-(const TensorT<T>& a, const TensorT<T>& b) { return sub(a, b); }
template <class T> TensorT<T> operator*(const TensorT<T>& a, const TensorT<T>& b) { return mul(a, b); }
template <class T> TensorT<T> operator/(const TensorT<T>& a, const TensorT<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// scalar & unary elementwise ops

template <class T, class FwdF, class BwdF>
TensorT<T> unary_op(const char* name, const TensorT<T>& x, FwdF fwd, BwdF bwd) {
    std::vector<T> out(x.values().size());
    fwd(x.values(), out);
    auto n = make_op_node<T>(name, x.shape(), std::move(out), {x.node_ptr()});
    if (n->requires_grad) {
        auto nx = x.node_ptr();
        n->backward_fn = [nx, bwd](Node<T>& self) {
            bwd(*nx->value, *self.value, self.grad, nx->grad_buf());
        };
    }
    return TensorT<T>(std::move(n));
}

template <class T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <class T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& x, T s) {
    return unary_op<T>(
        "mul_scalar", x,
        [s](const std::vector<T>& in, std::vector<T>& out) {
            CArrMap<T> a(in.data(), std::int64_t(in.size()));
            ArrMap<T>(out.data(), std::int64_t(out.size())) = a * s;
        },
        [s](const std::vector<T>&, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
        });
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& x, T s) {
    return unary_op<T>(
        "add_scalar", x,
        [s](const std::vector<T>& in, std::vector<T>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + s;
        },
        [](const std::vector<T>&, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
}

template <class T> TensorT<T> neg(const TensorT<T>& x) { return mul_scalar(x, T(-1)); }

template <class T>
TensorT<T> exp(const TensorT<T>& x) {
    return unary_op<T>(
        "exp", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            CArrMap<T> a(in.data(), std::int64_t(in.size()));
            ArrMap<T>(out.data(), std::int64_t(out.size())) = a.exp();
        },
        [](const std::vector<T>&, const std::vector<T>& y, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
        });
}

template <class T>
TensorT<T> log(const TensorT<T>& x) {
    return unary_op<T>(
        "log", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            CArrMap<T> a(in.data(), std::int64_t(in.size()));
            ArrMap<T>(out.data(), std::int64_t(out.size())) = a.log();
        },
        [](const std::vector<T>& in, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / in[i];
        });
}

template <class T>
TensorT<T> sqrt(const TensorT<T>& x) {
    return unary_op<T>(
        "sqrt", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            CArrMap<T> a(in.data(), std::int64_t(in.size()));
            ArrMap<T>(out.data(), std::int64_t(out.size())) = a.sqrt();
        },
        [](const std::vector<T>&, const std::vector<T>& y, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (T(2) * y[i]);
        });
}

template <class T>
TensorT<T> abs(const TensorT<T>& x) {
    return unary_op<T>(
        "abs", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::abs(in[i]);
        },
        [](const std::vector<T>& in, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += in[i] > T(0) ? g[i] : (in[i] < T(0) ? -g[i] : T(0));
        });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    return unary_op<T>(
        "relu", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
        },
        [](const std::vector<T>& in, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += in[i] > T(0) ? g[i] : T(0);
        });
}

template <class T>
TensorT<T> leaky_relu(const TensorT<T>& x, T slope) {
    return unary_op<T>(
        "leaky_relu", x,
        [slope](const std::vector<T>& in, std::vector<T>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : slope * in[i];
        },
        [slope](const std::vector<T>& in, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += in[i] > T(0) ? g[i] : slope * g[i];
        });
}

// tanh-approximation GELU (the usual ViT choice); backward differentiates
// the approximation itself so finite differences agree to machine tolerance.
template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
    constexpr double kC = 0.7978845608028653559;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return unary_op<T>(
        "gelu", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            CArrMap<T> a(in.data(), std::int64_t(in.size()));
            ArrMap<T> o(out.data(), std::int64_t(out.size()));
            o = T(0.5) * a * (T(1) + ((T(kC) * (a + T(kA) * a.cube())).tanh()));
        },
        [](const std::vector<T>& in, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                T v = in[i];
                T u = T(kC) * (v + T(kA) * v * v * v);
                T t = std::tanh(u);
                T du = T(kC) * (T(1) + T(3 * kA) * v * v);
                gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du);
            }
        });
}

template <class T>
TensorT<T> tanh(const TensorT<T>& x) {
    return unary_op<T>(
        "tanh", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            CArrMap<T> a(in.data(), std::int64_t(in.size()));
            ArrMap<T>(out.data(), std::int64_t(out.size())) = a.tanh();
        },
        [](const std::vector<T>&, const std::vector<T>& y, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
        });
}

template <class T>
TensorT<T> silu(const TensorT<T>& x) {
    return unary_op<T>(
        "silu", x,
        [](const std::vector<T>& in, std::vector<T>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) {
                T s = T(1) / (T(1) + std::exp(-in[i]));
                out[i] = in[i] * s;
            }
        },
        [](const std::vector<T>& in, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                T s = T(1) / (T(1) + std::exp(-in[i]));
                gx[i] += g[i] * (s + in[i] * s * (T(1) - s));
            }
        });
}

// Gradient is zero outside [lo, hi]; intended for evaluation-time use.
template <class T>
TensorT<T> clamp(const TensorT<T>& x, T lo, T hi) {
    return unary_op<T>(
        "clamp", x,
        [lo, hi](const std::vector<T>& in, std::vector<T>& out) {
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::min(hi, std::max(lo, in[i]));
        },
        [lo, hi](const std::vector<T>& in, const std::vector<T>&, const std::vector<T>& g, std::vector<T>& gx) {
            for (std::size_t i = 0; i < g.size(); ++i)
                if (in[i] >= lo && in[i] <= hi) gx[i] += g[i];
        });
}

template <class T> TensorT<T> square(const TensorT<T>& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// reductions

// Deterministic full sum: fixed 4096-element chunks accumulated in double,
// chunk partials combined in index order.
template <class T>
double chunked_sum(const T* p, std::int64_t n) {
    constexpr std::int64_t kChunk = 4096;
    double total = 0.0;
    for (std::int64_t c = 0; c < n; c += kChunk) {
        double part = 0.0;
        std::int64_t end = std::min(n, c + kChunk);
        for (std::int64_t i = c; i < end; ++i) part += double(p[i]);
        total += part;
    }
    return total;
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
    std::vector<T> out{T(chunked_sum(x.values().data(), x.size()))};
    auto n = make_op_node<T>("sum", Shape{}, std::move(out), {x.node_ptr()});
    if (n->requires_grad) {
        auto nx = x.node_ptr();
        n->backward_fn = [nx](Node<T>& self) {
            T g = self.grad[0];
            auto& gx = nx->grad_buf();
            for (auto& v : gx) v += g;
        };
    }
    return TensorT<T>(std::move(n));
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
    TCAE_CHECK(x.size() > 0, "mean of empty tensor");
    return mul_scalar(sum_all(x), T(1) / T(x.size()));
}

// Sum over one axis. keepdim keeps a size-1 dim in place.
template <class T>
TensorT<T> sum_axis(const TensorT<T>& x, int axis, bool keepdim = false) {
    const Shape& s = x.shape();
    if (axis < 0) axis += x.ndim();
    TCAE_CHECK(axis >= 0 && axis < x.ndim(), "sum_axis: bad axis");
    std::int64_t outer = 1, inner = 1, n = s[std::size_t(axis)];
    for (int i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= s[std::size_t(i)];

    Shape so;
    for (int i = 0; i < x.ndim(); ++i) {
        if (i == axis) {
            if (keepdim) so.push_back(1);
        } else {
            so.push_back(s[std::size_t(i)]);
        }
    }
    std::vector<T> out(std::size_t(outer * inner), T(0));
    const T* p = x.values().data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < n; ++k) {
            const T* row = p + (o * n + k) * inner;
            T* dst = out.data() + o * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += row[i];
        }
    auto nd = make_op_node<T>("sum_axis", so, std::move(out), {x.node_ptr()});
    if (nd->requires_grad) {
        auto nx = x.node_ptr();
        nd->backward_fn = [nx, outer, n, inner](Node<T>& self) {
            auto& gx = nx->grad_buf();
            const T* g = self.grad.data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t k = 0; k < n; ++k) {
                    T* row = gx.data() + (o * n + k) * inner;
                    const T* src = g + o * inner;
                    for (std::int64_t i = 0; i < inner; ++i) row[i] += src[i];
                }
        };
    }
    return TensorT<T>(std::move(nd));
}

template <class T>
TensorT<T> mean_axis(const TensorT<T>& x, int axis, bool keepdim = false) {
    int ax = axis < 0 ? axis + x.ndim() : axis;
    return mul_scalar(sum_axis(x, axis, keepdim), T(1) / T(x.shape()[std::size_t(ax)]));
}

// ---------------------------------------------------------------------------
// shape ops

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    // one -1 dim is inferred
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            TCAE_CHECK(infer < 0, "reshape: multiple -1 dims");
            infer = int(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        TCAE_CHECK(known > 0 && x.size() % known == 0, "reshape: cannot infer dim");
        shape[std::size_t(infer)] = x.size() / known;
    }
    TCAE_CHECK(numel(shape) == x.size(), "reshape ", shape_str(x.shape()), " -> ", shape_str(shape),
               ": element count mismatch");
    // metadata-only: shares the value buffer
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = x.node_ptr()->value;
    n->op = "reshape";
    if (detail::g_grad_enabled && x.requires_grad()) {
        n->requires_grad = true;
        n->parents = {x.node_ptr()};
        auto nx = x.node_ptr();
        n->backward_fn = [nx](Node<T>& self) {
            auto& gx = nx->grad_buf();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        };
    }
    return TensorT<T>(std::move(n));
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm) {
    TCAE_CHECK(int(perm.size()) == x.ndim(), "permute: rank mismatch");
    const Shape& s = x.shape();
    Shape so(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) so[i] = s[std::size_t(perm[i])];

    std::vector<std::int64_t> in_strides(s.size());
    std::int64_t st = 1;
    for (int i = int(s.size()) - 1; i >= 0; --i) {
        in_strides[std::size_t(i)] = st;
        st *= s[std::size_t(i)];
    }
    std::vector<std::int64_t> src_strides(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) src_strides[i] = in_strides[std::size_t(perm[i])];

    std::vector<T> out(std::size_t(x.size()));
    const T* p = x.values().data();
    const int nd = int(so.size());
    std::vector<std::int64_t> idx(std::size_t(nd), 0);
    std::int64_t src = 0;
    for (std::int64_t o = 0; o < x.size(); ++o) {
        out[std::size_t(o)] = p[src];
        for (int d = nd - 1; d >= 0; --d) {
            idx[std::size_t(d)]++;
            src += src_strides[std::size_t(d)];
            if (idx[std::size_t(d)] < so[std::size_t(d)]) break;
            src -= src_strides[std::size_t(d)] * so[std::size_t(d)];
            idx[std::size_t(d)] = 0;
        }
    }
    auto n = make_op_node<T>("permute", so, std::move(out), {x.node_ptr()});
    if (n->requires_grad) {
        auto nx = x.node_ptr();
        n->backward_fn = [nx, so, src_strides](Node<T>& self) {
            auto& gx = nx->grad_buf();
            const T* g = self.grad.data();
            const int nd2 = int(so.size());
            std::vector<std::int64_t> idx2(std::size_t(nd2), 0);
            std::int64_t src = 0;
            for (std::int64_t o = 0; o < std::int64_t(self.grad.size()); ++o) {
                gx[std::size_t(src)] += g[o];
                for (int d = nd2 - 1; d >= 0; --d) {
                    idx2[std::size_t(d)]++;
                    src += src_strides[std::size_t(d)];
                    if (idx2[std::size_t(d)] < so[std::size_t(d)]) break;
                    src -= src_strides[std::size_t(d)] * so[std::size_t(d)];
                    idx2[std::size_t(d)] = 0;
                }
            }
        };
    }
    return TensorT<T>(std::move(n));
}

template <class T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
    TCAE_CHECK(!xs.empty(), "concat of nothing");
    const Shape& s0 = xs[0].shape();
    int nd = int(s0.size());
    if (axis < 0) axis += nd;
    Shape so = s0;
    so[std::size_t(axis)] = 0;
    for (auto& x : xs) {
        TCAE_CHECK(x.ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis)
                TCAE_CHECK(x.shape()[std::size_t(i)] == s0[std::size_t(i)], "concat: shape mismatch");
        so[std::size_t(axis)] += x.shape()[std::size_t(axis)];
    }
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[std::size_t(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= s0[std::size_t(i)];

    std::vector<T> out(std::size_t(numel(so)));
    std::int64_t total_ax = so[std::size_t(axis)];
    std::int64_t off_ax = 0;
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (auto& x : xs) {
        std::int64_t ax = x.shape()[std::size_t(axis)];
        const T* p = x.values().data();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy(p + o * ax * inner, p + (o + 1) * ax * inner,
                      out.data() + (o * total_ax + off_ax) * inner);
        off_ax += ax;
        parents.push_back(x.node_ptr());
    }
    auto n = make_op_node<T>("concat", so, std::move(out), parents);
    if (n->requires_grad) {
        std::vector<std::shared_ptr<Node<T>>> ps = n->parents;
        n->backward_fn = [ps, axis, outer, inner, total_ax](Node<T>& self) {
            const T* g = self.grad.data();
            std::int64_t off_ax = 0;
            for (auto& p : ps) {
                std::int64_t ax = p->shape[std::size_t(axis)];
                if (p->requires_grad) {
                    T* gx = p->grad_buf().data();
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const T* src = g + (o * total_ax + off_ax) * inner;
                        T* dst = gx + o * ax * inner;
                        for (std::int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                    }
                }
                off_ax += ax;
            }
        };
    }
    return TensorT<T>(std::move(n));
}

template <class T>
TensorT<T> slice(const TensorT<T>& x, int axis, std::int64_t start, std::int64_t end) {
    const Shape& s = x.shape();
    int nd = x.ndim();
    if (axis < 0) axis += nd;
    TCAE_CHECK(start >= 0 && end <= s[std::size_t(axis)] && start <= end, "slice out of range");
    Shape so = s;
    so[std::size_t(axis)] = end - start;
    std::int64_t outer = 1, inner = 1, ax = s[std::size_t(axis)];
    for (int i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= s[std::size_t(i)];
    std::int64_t len = end - start;
    std::vector<T> out(std::size_t(numel(so)));
    const T* p = x.values().data();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy(p + (o * ax + start) * inner, p + (o * ax + end) * inner, out.data() + o * len * inner);
    auto n = make_op_node<T>("slice", so, std::move(out), {x.node_ptr()});
    if (n->requires_grad) {
        auto nx = x.node_ptr();
        n->backward_fn = [nx, outer, inner, ax, start, len](Node<T>& self) {
            T* gx = nx->grad_buf().data();
            const T* g = self.grad.data();
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* src = g + o * len * inner;
                T* dst = gx + (o * ax + start) * inner;
                for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        };
    }
    return TensorT<T>(std::move(n));
}

// Rows of a [R, D] matrix by index; backward scatter-adds.
template <class T>
TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<std::int64_t>& idx) {
    TCAE_CHECK(x.ndim() == 2, "gather_rows: want 2-d input, got ", shape_str(x.shape()));
    std::int64_t R = x.dim(0), D = x.dim(1);
    std::vector<T> out(idx.size() * std::size_t(D));
    const T* p = x.values().data();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        TCAE_CHECK(idx[i] >= 0 && idx[i] < R, "gather_rows: index out of range");
        std::copy(p + idx[i] * D, p + (idx[i] + 1) * D, out.data() + std::int64_t(i) * D);
    }
    auto n = make_op_node<T>("gather_rows", Shape{std::int64_t(idx.size()), D}, std::move(out),
                             {x.node_ptr()});
    if (n->requires_grad) {
        auto nx = x.node_ptr();
        n->backward_fn = [nx, idx, D](Node<T>& self) {
            T* gx = nx->grad_buf().data();
            const T* g = self.grad.data();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                T* dst = gx + idx[i] * D;
                const T* src = g + std::int64_t(i) * D;
                for (std::int64_t d = 0; d < D; ++d) dst[d] += src[d];
            }
        };
    }
    return TensorT<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// matrix products (Eigen-backed kernels)

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<MatRM<T>>;
template <class T>
using CMatMap = Eigen::Map<const MatRM<T>>;

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    TCAE_CHECK(a.ndim() == 2 && b.ndim() == 2, "matmul: want 2-d operands");
    std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    TCAE_CHECK(k == k2, "matmul: inner dims ", k, " vs ", k2);
    std::vector<T> out(std::size_t(m * n), T(0));
    if (m && n && k) {
        CMatMap<T> ma(a.values().data(), m, k), mb(b.values().data(), k, n);
        MatMap<T>(out.data(), m, n).noalias() = ma * mb;
    }
    auto nd = make_op_node<T>("matmul", Shape{m, n}, std::move(out), {a.node_ptr(), b.node_ptr()});
    if (nd->requires_grad) {
        auto na = a.node_ptr();
        auto nb = b.node_ptr();
        nd->backward_fn = [na, nb, m, k, n](Node<T>& self) {
            if (!(m && n)) return;
            CMatMap<T> g(self.grad.data(), m, n);
            if (na->requires_grad && k) {
                CMatMap<T> mb(nb->data(), k, n);
                MatMap<T>(na->grad_buf().data(), m, k).noalias() += g * mb.transpose();
            }
            if (nb->requires_grad && k) {
                CMatMap<T> ma(na->data(), m, k);
                MatMap<T>(nb->grad_buf().data(), k, n).noalias() += ma.transpose() * g;
            }
        };
    }
    return TensorT<T>(std::move(nd));
}

// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n]. Optionally transposes the
// second operand in place of an explicit permute.
template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool trans_b = false) {
    TCAE_CHECK(a.ndim() == 3 && b.ndim() == 3, "bmm: want 3-d operands");
    std::int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2);
    std::int64_t Bb = b.dim(0), bk = trans_b ? b.dim(2) : b.dim(1), n = trans_b ? b.dim(1) : b.dim(2);
    TCAE_CHECK(B == Bb && k == bk, "bmm: shape mismatch ", shape_str(a.shape()), " vs ",
               shape_str(b.shape()));
    std::vector<T> out(std::size_t(B * m * n));
    for (std::int64_t i = 0; i < B; ++i) {
        CMatMap<T> ma(a.values().data() + i * m * k, m, k);
        MatMap<T> mo(out.data() + i * m * n, m, n);
        if (trans_b) {
            CMatMap<T> mb(b.values().data() + i * n * k, n, k);
            mo.noalias() = ma * mb.transpose();
        } else {
            CMatMap<T> mb(b.values().data() + i * k * n, k, n);
            mo.noalias() = ma * mb;
        }
    }
    auto nd = make_op_node<T>("bmm", Shape{B, m, n}, std::move(out), {a.node_ptr(), b.node_ptr()});
    if (nd->requires_grad) {
        auto na = a.node_ptr();
        auto nb = b.node_ptr();
        nd->backward_fn = [na, nb, B, m, k, n, trans_b](Node<T>& self) {
            for (std::int64_t i = 0; i < B; ++i) {
                CMatMap<T> g(self.grad.data() + i * m * n, m, n);
                if (na->requires_grad) {
                    MatMap<T> ga(na->grad_buf().data() + i * m * k, m, k);
                    if (trans_b) {
                        CMatMap<T> mb(nb->data() + i * n * k, n, k);
                        ga.noalias() += g * mb;
                    } else {
                        CMatMap<T> mb(nb->data() + i * k * n, k, n);
                        ga.noalias() += g * mb.transpose();
                    }
                }
                if (nb->requires_grad) {
                    CMatMap<T> ma(na->data() + i * m * k, m, k);
                    if (trans_b) {
                        MatMap<T> gb(nb->grad_buf().data() + i * n * k, n, k);
                        gb.noalias() += g.transpose() * ma;
                    } else {
                        MatMap<T> gb(nb->grad_buf().data() + i * k * n, k, n);
                        gb.noalias() += ma.transpose() * g;
                    }
                }
            }
        };
    }
    return TensorT<T>(std::move(nd));
}

// ---------------------------------------------------------------------------
// softmax / log-softmax / layernorm

// Stable softmax along an arbitrary axis (max-subtraction per fiber).
template <class T>
TensorT<T> softmax(const TensorT<T>& x, int axis = -1) {
    const Shape& s = x.shape();
    if (axis < 0) axis += x.ndim();
    TCAE_CHECK(axis >= 0 && axis < x.ndim(), "softmax: bad axis");
    std::int64_t outer = 1, inner = 1, n = s[std::size_t(axis)];
    for (int i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= s[std::size_t(i)];

    std::vector<T> out(std::size_t(x.size()));
    const T* p = x.values().data();
    if (inner == 1) {
        for (std::int64_t o = 0; o < outer; ++o) {
            CArrMap<T> src(p + o * n, n);
            ArrMap<T> dst(out.data() + o * n, n);
            T mx = src.maxCoeff();
            dst = (src - mx).exp();
            dst *= T(1) / dst.sum();
        }
    } else {
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                const T* src = p + o * n * inner + in;
                T* dst = out.data() + o * n * inner + in;
                T mx = src[0];
                for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, src[i * inner]);
                T sum = T(0);
                for (std::int64_t i = 0; i < n; ++i) {
                    T e = std::exp(src[i * inner] - mx);
                    dst[i * inner] = e;
                    sum += e;
                }
                T inv = T(1) / sum;
                for (std::int64_t i = 0; i < n; ++i) dst[i * inner] *= inv;
            }
    }
    auto nd = make_op_node<T>("softmax", s, std::move(out), {x.node_ptr()});
    if (nd->requires_grad) {
        auto nx = x.node_ptr();
        nd->backward_fn = [nx, outer, inner, n](Node<T>& self) {
            T* gx = nx->grad_buf().data();
            const T* g = self.grad.data();
            const T* y = self.value->data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    std::int64_t base = o * n * inner + in;
                    T dot = T(0);
                    for (std::int64_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (std::int64_t i = 0; i < n; ++i)
                        gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
                }
        };
    }
    return TensorT<T>(std::move(nd));
}

template <class T>
TensorT<T> log_softmax(const TensorT<T>& x, int axis = -1) {
    const Shape& s = x.shape();
    if (axis < 0) axis += x.ndim();
    std::int64_t outer = 1, inner = 1, n = s[std::size_t(axis)];
    for (int i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= s[std::size_t(i)];

    std::vector<T> out(std::size_t(x.size()));
    const T* p = x.values().data();
    if (inner == 1) {
        for (std::int64_t o = 0; o < outer; ++o) {
            CArrMap<T> src(p + o * n, n);
            ArrMap<T> dst(out.data() + o * n, n);
            T mx = src.maxCoeff();
            T lse = mx + std::log((src - mx).exp().sum());
            dst = src - lse;
        }
    } else {
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t in = 0; in < inner; ++in) {
                const T* src = p + o * n * inner + in;
                T* dst = out.data() + o * n * inner + in;
                T mx = src[0];
                for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, src[i * inner]);
                T sum = T(0);
                for (std::int64_t i = 0; i < n; ++i) sum += std::exp(src[i * inner] - mx);
                T lse = mx + std::log(sum);
                for (std::int64_t i = 0; i < n; ++i) dst[i * inner] = src[i * inner] - lse;
            }
    }
    auto nd = make_op_node<T>("log_softmax", s, std::move(out), {x.node_ptr()});
    if (nd->requires_grad) {
        auto nx = x.node_ptr();
        nd->backward_fn = [nx, outer, inner, n](Node<T>& self) {
            T* gx = nx->grad_buf().data();
            const T* g = self.grad.data();
            const T* y = self.value->data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    std::int64_t base = o * n * inner + in;
                    T gsum = T(0);
                    for (std::int64_t i = 0; i < n; ++i) gsum += g[base + i * inner];
                    for (std::int64_t i = 0; i < n; ++i)
                        gx[base + i * inner] += g[base + i * inner] - std::exp(y[base + i * inner]) * gsum;
                }
        };
    }
    return TensorT<T>(std::move(nd));
}

// LayerNorm over the last axis; gamma/beta optional (pass undefined tensors
// for a plain normalization).
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                      T eps = T(1e-5)) {
    std::int64_t n = x.dim(-1);
    std::int64_t rows = x.size() / n;
    bool affine = gamma.defined();
    if (affine) {
        TCAE_CHECK(gamma.size() == n && beta.size() == n, "layer_norm: affine size mismatch");
    }
    std::vector<T> out(std::size_t(x.size()));
    auto rstd = std::vector<T>(std::size_t(rows));
    auto xhat = std::vector<T>(std::size_t(x.size()));
    const T* p = x.values().data();
    const T* gp = affine ? gamma.values().data() : nullptr;
    const T* bp = affine ? beta.values().data() : nullptr;
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* src = p + r * n;
        T mean = T(0);
        for (std::int64_t i = 0; i < n; ++i) mean += src[i];
        mean /= T(n);
        T var = T(0);
        for (std::int64_t i = 0; i < n; ++i) {
            T d = src[i] - mean;
            var += d * d;
        }
        var /= T(n);
        T rs = T(1) / std::sqrt(var + eps);
        rstd[std::size_t(r)] = rs;
        T* xh = xhat.data() + r * n;
        T* dst = out.data() + r * n;
        for (std::int64_t i = 0; i < n; ++i) {
            xh[i] = (src[i] - mean) * rs;
            dst[i] = affine ? xh[i] * gp[i] + bp[i] : xh[i];
        }
    }
    std::vector<std::shared_ptr<Node<T>>> parents = {x.node_ptr()};
    if (affine) {
        parents.push_back(gamma.node_ptr());
        parents.push_back(beta.node_ptr());
    }
    auto nd = make_op_node<T>("layer_norm", x.shape(), std::move(out), parents);
    if (nd->requires_grad) {
        auto nx = x.node_ptr();
        auto ng = affine ? gamma.node_ptr() : nullptr;
        auto nb = affine ? beta.node_ptr() : nullptr;
        auto rstd_s = std::make_shared<std::vector<T>>(std::move(rstd));
        auto xhat_s = std::make_shared<std::vector<T>>(std::move(xhat));
        nd->backward_fn = [nx, ng, nb, rstd_s, xhat_s, rows, n](Node<T>& self) {
            const T* g = self.grad.data();
            const T* xh = xhat_s->data();
            const T* gp = ng ? ng->data() : nullptr;
            T* ggamma = (ng && ng->requires_grad) ? ng->grad_buf().data() : nullptr;
            T* gbeta = (nb && nb->requires_grad) ? nb->grad_buf().data() : nullptr;
            T* gx = nx->requires_grad ? nx->grad_buf().data() : nullptr;
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* gr = g + r * n;
                const T* xr = xh + r * n;
                if (ggamma)
                    for (std::int64_t i = 0; i < n; ++i) ggamma[i] += gr[i] * xr[i];
                if (gbeta)
                    for (std::int64_t i = 0; i < n; ++i) gbeta[i] += gr[i];
                if (gx) {
                    // d xhat = g * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    T sum1 = T(0), sum2 = T(0);
                    for (std::int64_t i = 0; i < n; ++i) {
                        T dxh = gp ? gr[i] * gp[i] : gr[i];
                        sum1 += dxh;
                        sum2 += dxh * xr[i];
                    }
                    T inv_n = T(1) / T(n);
                    T rs = (*rstd_s)[std::size_t(r)];
                    T* gxr = gx + r * n;
                    for (std::int64_t i = 0; i < n; ++i) {
                        T dxh = gp ? gr[i] * gp[i] : gr[i];
                        gxr[i] += rs * (dxh - sum1 * inv_n - xr[i] * sum2 * inv_n);
                    }
                }
            }
        };
    }
    return TensorT<T>(std::move(nd));
}

// ---------------------------------------------------------------------------
// conv2d (im2col + GEMM)

template <class T>
void im2col(const T* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t k,
            std::int64_t stride, std::int64_t pad, std::int64_t OH, std::int64_t OW, T* col) {
    // col layout: [OH*OW, C*k*k]
    for (std::int64_t oy = 0; oy < OH; ++oy)
        for (std::int64_t ox = 0; ox < OW; ++ox) {
            T* dst = col + (oy * OW + ox) * C * k * k;
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    std::int64_t iy = oy * stride + ky - pad;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        std::int64_t ix = ox * stride + kx - pad;
                        T v = (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x[(c * H + iy) * W + ix] : T(0);
                        dst[(c * k + ky) * k + kx] = v;
                    }
                }
        }
}

template <class T>
void col2im_add(const T* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t k,
                std::int64_t stride, std::int64_t pad, std::int64_t OH, std::int64_t OW, T* x) {
    for (std::int64_t oy = 0; oy < OH; ++oy)
        for (std::int64_t ox = 0; ox < OW; ++ox) {
            const T* src = col + (oy * OW + ox) * C * k * k;
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        std::int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= W) continue;
                        x[(c * H + iy) * W + ix] += src[(c * k + ky) * k + kx];
                    }
                }
        }
}

// x: [B,C,H,W], w: [O,C,k,k], bias: [O] or undefined. Cross-correlation.
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  std::int64_t stride = 1, std::int64_t pad = 0) {
    TCAE_CHECK(x.ndim() == 4 && w.ndim() == 4, "conv2d: want 4-d input and kernel");
    std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::int64_t O = w.dim(0), Cw = w.dim(1), k = w.dim(2);
    TCAE_CHECK(C == Cw && w.dim(3) == k, "conv2d: kernel shape mismatch");
    TCAE_CHECK(k <= H + 2 * pad && k <= W + 2 * pad, "conv2d: kernel larger than padded input");
    std::int64_t OH = (H + 2 * pad - k) / stride + 1;
    std::int64_t OW = (W + 2 * pad - k) / stride + 1;

    std::int64_t ckk = C * k * k;
    std::vector<T> col(std::size_t(B * OH * OW * ckk));
    for (std::int64_t b = 0; b < B; ++b)
        im2col(x.values().data() + b * C * H * W, C, H, W, k, stride, pad, OH, OW,
               col.data() + b * OH * OW * ckk);

    std::vector<T> out(std::size_t(B * O * OH * OW));
    {
        // [B*OH*OW, ckk] x [ckk, O] -> [B*OH*OW, O], then transpose to [B,O,OH,OW]
        CMatMap<T> mcol(col.data(), B * OH * OW, ckk);
        CMatMap<T> mw(w.values().data(), O, ckk);
        MatRM<T> prod = mcol * mw.transpose();  // [B*OH*OW, O]
        const T* bp = bias.defined() ? bias.values().data() : nullptr;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t oy = 0; oy < OH * OW; ++oy)
                for (std::int64_t o = 0; o < O; ++o)
                    out[std::size_t(((b * O + o) * OH * OW) + oy)] =
                        prod(b * OH * OW + oy, o) + (bp ? bp[o] : T(0));
    }

    std::vector<std::shared_ptr<Node<T>>> parents = {x.node_ptr(), w.node_ptr()};
    if (bias.defined()) parents.push_back(bias.node_ptr());
    auto nd = make_op_node<T>("conv2d", Shape{B, O, OH, OW}, std::move(out), parents);
    if (nd->requires_grad) {
        auto nx = x.node_ptr();
        auto nw = w.node_ptr();
        auto nb = bias.defined() ? bias.node_ptr() : nullptr;
        auto col_s = std::make_shared<std::vector<T>>(std::move(col));
        nd->backward_fn = [nx, nw, nb, col_s, B, C, H, W, O, k, stride, pad, OH, OW](Node<T>& self) {
            std::int64_t ckk = C * k * k;
            // grad wrt output, relaid as [B*OH*OW, O]
            MatRM<T> gout(B * OH * OW, O);
            {
                const T* g = self.grad.data();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t o = 0; o < O; ++o)
                        for (std::int64_t i = 0; i < OH * OW; ++i)
                            gout(b * OH * OW + i, o) = g[(b * O + o) * OH * OW + i];
            }
            if (nb && nb->requires_grad) {
                T* gb = nb->grad_buf().data();
                for (std::int64_t o = 0; o < O; ++o) gb[o] += gout.col(o).sum();
            }
            if (nw->requires_grad) {
                CMatMap<T> mcol(col_s->data(), B * OH * OW, ckk);
                MatMap<T> gw(nw->grad_buf().data(), O, ckk);
                gw.noalias() += gout.transpose() * mcol;
            }
            if (nx->requires_grad) {
                CMatMap<T> mw(nw->data(), O, ckk);
                MatRM<T> gcol = gout * mw;  // [B*OH*OW, ckk]
                T* gx = nx->grad_buf().data();
                for (std::int64_t b = 0; b < B; ++b)
                    col2im_add(gcol.data() + b * OH * OW * ckk, C, H, W, k, stride, pad, OH, OW,
                               gx + b * C * H * W);
            }
        };
    }
    return TensorT<T>(std::move(nd));
}

// ---------------------------------------------------------------------------
// token-grid rearrangement (pixel shuffle on sequences)

// [B, g*g, d] -> [B, (g/r)^2, r*r*d]; each output token concatenates its
// r x r block of inputs in row-major block order.
template <class T>
TensorT<T> grid_merge(const TensorT<T>& x, std::int64_t r) {
    TCAE_CHECK(x.ndim() == 3, "grid_merge: want [B,N,d]");
    std::int64_t B = x.dim(0), N = x.dim(1), d = x.dim(2);
    auto g = std::int64_t(std::llround(std::sqrt(double(N))));
    TCAE_CHECK(g * g == N, "grid_merge: token count ", N, " is not a square");
    TCAE_CHECK(r >= 1 && g % r == 0, "grid_merge: grid side ", g, " not divisible by ", r);
    std::int64_t G = g / r;
    std::vector<T> out(std::size_t(x.size()));
    const T* p = x.values().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t gy = 0; gy < G; ++gy)
            for (std::int64_t gx = 0; gx < G; ++gx)
                for (std::int64_t ry = 0; ry < r; ++ry)
                    for (std::int64_t rx = 0; rx < r; ++rx) {
                        const T* src = p + (b * N + (gy * r + ry) * g + (gx * r + rx)) * d;
                        T* dst = out.data() + ((b * G + gy) * G + gx) * r * r * d + (ry * r + rx) * d;
                        std::copy(src, src + d, dst);
                    }
    auto nd = make_op_node<T>("grid_merge", Shape{B, G * G, r * r * d}, std::move(out), {x.node_ptr()});
    if (nd->requires_grad) {
        auto nx = x.node_ptr();
        nd->backward_fn = [nx, B, N, d, g, G, r](Node<T>& self) {
            T* gxp = nx->grad_buf().data();
            const T* gg = self.grad.data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t gy = 0; gy < G; ++gy)
                    for (std::int64_t gx = 0; gx < G; ++gx)
                        for (std::int64_t ry = 0; ry < r; ++ry)
                            for (std::int64_t rx = 0; rx < r; ++rx) {
                                T* dst = gxp + (b * N + (gy * r + ry) * g + (gx * r + rx)) * d;
                                const T* src =
                                    gg + ((b * G + gy) * G + gx) * r * r * d + (ry * r + rx) * d;
                                for (std::int64_t i = 0; i < d; ++i) dst[i] += src[i];
                            }
        };
    }
    return TensorT<T>(std::move(nd));
}

// Inverse of grid_merge: [B, G*G, r*r*d] -> [B, (G*r)^2, d].
template <class T>
TensorT<T> grid_split(const TensorT<T>& x, std::int64_t r) {
    TCAE_CHECK(x.ndim() == 3, "grid_split: want [B,N,d]");
    std::int64_t B = x.dim(0), N = x.dim(1), dd = x.dim(2);
    TCAE_CHECK(dd % (r * r) == 0, "grid_split: dim ", dd, " not divisible by r^2");
    std::int64_t d = dd / (r * r);
    auto G = std::int64_t(std::llround(std::sqrt(double(N))));
    TCAE_CHECK(G * G == N, "grid_split: token count ", N, " is not a square");
    std::int64_t g = G * r;
    std::vector<T> out(std::size_t(x.size()));
    const T* p = x.values().data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t gy = 0; gy < G; ++gy)
            for (std::int64_t gx = 0; gx < G; ++gx)
                for (std::int64_t ry = 0; ry < r; ++ry)
                    for (std::int64_t rx = 0; rx < r; ++rx) {
                        const T* src = p + ((b * G + gy) * G + gx) * r * r * d + (ry * r + rx) * d;
                        T* dst = out.data() + (b * g * g + (gy * r + ry) * g + (gx * r + rx)) * d;
                        std::copy(src, src + d, dst);
                    }
    auto nd = make_op_node<T>("grid_split", Shape{B, g * g, d}, std::move(out), {x.node_ptr()});
    if (nd->requires_grad) {
        auto nx = x.node_ptr();
        nd->backward_fn = [nx, B, d, g, G, r](Node<T>& self) {
            T* gxp = nx->grad_buf().data();
            const T* gg = self.grad.data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t gy = 0; gy < G; ++gy)
                    for (std::int64_t gx = 0; gx < G; ++gx)
                        for (std::int64_t ry = 0; ry < r; ++ry)
                            for (std::int64_t rx = 0; rx < r; ++rx) {
                                T* dst = gxp + ((b * G + gy) * G + gx) * r * r * d + (ry * r + rx) * d;
                                const T* src =
                                    gg + (b * g * g + (gy * r + ry) * g + (gx * r + rx)) * d;
                                for (std::int64_t i = 0; i < d; ++i) dst[i] += src[i];
                            }
        };
    }
    return TensorT<T>(std::move(nd));
}

}  // namespace tcae
