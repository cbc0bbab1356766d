#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to an immutable value buffer plus an optional
// backward-graph node. Ops build the graph when any input requires grad;
// backward() topologically walks the graph once and accumulates gradients
// into every requires-grad participant. Gradients accumulate across calls
// until zero_grad().
//
// Data movement (padding, cropping, pixel shuffling, window partitioning,
// axis permutation) is expressed through one gather primitive, so every such
// op shares the same scatter-add backward.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace droughtcast {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) {
        if (e <= 0) throw std::invalid_argument("non-positive tensor extent");
        n *= e;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

class Tensor;

namespace detail {

struct Node;

struct TensorData {
    Shape shape;
    std::vector<double> v;
    std::vector<double> g;  // empty until first accumulation
    bool requires_grad = false;
    std::shared_ptr<Node> node;

    std::vector<double>& grad() {
        if (g.empty()) g.assign(v.size(), 0.0);
        return g;
    }
};

struct Node {
    std::vector<std::shared_ptr<TensorData>> parents;
    std::function<void()> backprop;  // reads own grad, accumulates into parents
};

}  // namespace detail

class Tensor {
  public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = {1};
        d_->v.assign(1, 0.0);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Tensor filled(Shape shape, double value, bool requires_grad = false) {
        Tensor t;
        std::int64_t n = shape_numel(shape);
        t.d_->shape = std::move(shape);
        t.d_->v.assign(static_cast<std::size_t>(n), value);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
            throw std::invalid_argument("value count does not match shape " + shape_str(shape));
        Tensor t;
        t.d_->shape = std::move(shape);
        t.d_->v = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    const Shape& shape() const { return d_->shape; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape.at(static_cast<std::size_t>(i)); }
    std::size_t numel() const { return d_->v.size(); }

    const std::vector<double>& values() const { return d_->v; }
    std::vector<double>& mutable_values() { return d_->v; }
    double operator[](std::size_t i) const { return d_->v[i]; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor");
        return d_->v[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !d_->g.empty(); }
    std::vector<double>& grad() { return d_->grad(); }
    const std::vector<double>& grad() const { return const_cast<detail::TensorData&>(*d_).grad(); }
    void zero_grad() { d_->g.clear(); }

    // Value copy detached from any graph.
    Tensor detach() const {
        Tensor t;
        t.d_->shape = d_->shape;
        t.d_->v = d_->v;
        return t;
    }

    bool same_data(const Tensor& other) const { return d_ == other.d_; }

    void backward() const;

    // internal
    std::shared_ptr<detail::TensorData> data_ptr() const { return d_; }

  private:
    std::shared_ptr<detail::TensorData> d_;

    friend Tensor make_op_result(Shape shape, std::vector<double> values,
                                 const std::vector<Tensor>& parents,
                                 std::function<void()> (*bind)(detail::TensorData*, void*), void*);
};

namespace detail {

inline bool any_requires_grad(const std::vector<Tensor>& ts) {
    for (const auto& t : ts)
        if (t.requires_grad()) return true;
    return false;
}

inline thread_local bool g_grad_enabled = true;

}  // namespace detail

// Scoped switch that stops graph construction (inference / rollouts).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

// Builds the result tensor for an op. make_backprop receives the already
// constructed output data record so the closure can read its gradient.
inline Tensor op_result(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
                        const std::function<std::function<void()>(detail::TensorData*)>& make_backprop) {
    Tensor out = Tensor::from(std::move(shape), std::move(values));
    if (detail::g_grad_enabled && detail::any_requires_grad(parents)) {
        out.set_requires_grad(true);
        auto node = std::make_shared<detail::Node>();
        for (const auto& p : parents) node->parents.push_back(p.data_ptr());
        node->backprop = make_backprop(out.data_ptr().get());
        out.data_ptr()->node = std::move(node);
    }
    return out;
}

inline void Tensor::backward() const {
    if (numel() != 1) throw std::invalid_argument("backward() requires a scalar loss");
    // Seed and topologically order the graph (iterative DFS, post-order).
    d_->grad()[0] += 1.0;
    std::vector<detail::TensorData*> order;
    std::unordered_set<detail::TensorData*> visited;
    std::vector<std::pair<detail::TensorData*, std::size_t>> stack;
    stack.emplace_back(d_.get(), 0);
    visited.insert(d_.get());
    while (!stack.empty()) {
        auto& [cur, idx] = stack.back();
        if (!cur->node || idx >= cur->node->parents.size()) {
            order.push_back(cur);
            stack.pop_back();
            continue;
        }
        detail::TensorData* next = cur->node->parents[idx++].get();
        if (visited.insert(next).second) stack.emplace_back(next, 0);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::TensorData* td = *it;
        if (td->node && !td->g.empty()) td->node->backprop();
    }
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
    auto pa = a.data_ptr(), pb = b.data_ptr();
    return op_result(a.shape(), std::move(v), {a, b}, [pa, pb](detail::TensorData* out) {
        return [out, pa, pb]() {
            const auto& g = out->g;
            if (pa->requires_grad) {
                auto& ga = pa->grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (pb->requires_grad) {
                auto& gb = pb->grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
    auto pa = a.data_ptr(), pb = b.data_ptr();
    return op_result(a.shape(), std::move(v), {a, b}, [pa, pb](detail::TensorData* out) {
        return [out, pa, pb]() {
            const auto& g = out->g;
            if (pa->requires_grad) {
                auto& ga = pa->grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (pb->requires_grad) {
                auto& gb = pb->grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
    auto pa = a.data_ptr(), pb = b.data_ptr();
    return op_result(a.shape(), std::move(v), {a, b}, [pa, pb](detail::TensorData* out) {
        return [out, pa, pb]() {
            const auto& g = out->g;
            if (pa->requires_grad) {
                auto& ga = pa->grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb->v[i];
            }
            if (pb->requires_grad) {
                auto& gb = pb->grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa->v[i];
            }
        };
    });
}

// a*x + b with plain scalars.
inline Tensor affine(const Tensor& x, double a, double b) {
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a * x[i] + b;
    auto px = x.data_ptr();
    return op_result(x.shape(), std::move(v), {x}, [px, a](detail::TensorData* out) {
        return [out, px, a]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (std::size_t i = 0; i < out->g.size(); ++i) gx[i] += a * out->g[i];
        };
    });
}

inline Tensor scale(const Tensor& x, double a) { return affine(x, a, 0.0); }

// Elementwise product with a scalar tensor (broadcast), differentiable in both.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be a scalar tensor");
    std::vector<double> v(x.numel());
    const double sv = s[0];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] * sv;
    auto px = x.data_ptr(), ps = s.data_ptr();
    return op_result(x.shape(), std::move(v), {x, s}, [px, ps, sv](detail::TensorData* out) {
        return [out, px, ps, sv]() {
            const auto& g = out->g;
            if (px->requires_grad) {
                auto& gx = px->grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
            }
            if (ps->requires_grad) {
                double acc = 0.0;
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * px->v[i];
                ps->grad()[0] += acc;
            }
        };
    });
}

// Offset every element by a scalar tensor, differentiable in both.
inline Tensor shift_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("shift_by: offset must be a scalar tensor");
    std::vector<double> v(x.numel());
    const double sv = s[0];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] + sv;
    auto px = x.data_ptr(), ps = s.data_ptr();
    return op_result(x.shape(), std::move(v), {x, s}, [px, ps](detail::TensorData* out) {
        return [out, px, ps]() {
            const auto& g = out->g;
            if (px->requires_grad) {
                auto& gx = px->grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (ps->requires_grad) {
                double acc = 0.0;
                for (double gi : g) acc += gi;
                ps->grad()[0] += acc;
            }
        };
    });
}

inline Tensor reciprocal(const Tensor& s, double floor_eps = 0.0) {
    std::vector<double> v(s.numel());
    std::vector<double> denom(s.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double d = s[i];
        if (floor_eps > 0.0 && std::abs(d) < floor_eps) d = d < 0 ? -floor_eps : floor_eps;
        denom[i] = d;
        v[i] = 1.0 / d;
    }
    auto ps = s.data_ptr();
    return op_result(s.shape(), std::move(v), {s},
                     [ps, denom = std::move(denom)](detail::TensorData* out) {
                         return [out, ps, denom]() {
                             if (!ps->requires_grad) return;
                             auto& gs = ps->grad();
                             for (std::size_t i = 0; i < out->g.size(); ++i)
                                 gs[i] -= out->g[i] / (denom[i] * denom[i]);
                         };
                     });
}

// Clamp a scalar tensor to [lo, hi]; gradient passes only where unclamped.
inline Tensor clamp_scalar(const Tensor& s, double lo, double hi) {
    if (s.numel() != 1) throw std::invalid_argument("clamp_scalar: scalar expected");
    double raw = s[0];
    double cl = std::min(std::max(raw, lo), hi);
    bool pass = raw > lo && raw < hi;
    auto ps = s.data_ptr();
    return op_result({1}, {cl}, {s}, [ps, pass](detail::TensorData* out) {
        return [out, ps, pass]() {
            if (ps->requires_grad && pass) ps->grad()[0] += out->g[0];
        };
    });
}

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
    auto px = x.data_ptr();
    return op_result({1}, {acc}, {x}, [px](detail::TensorData* out) {
        return [out, px]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            const double g = out->g[0];
            for (auto& gi : gx) gi += g;
        };
    });
}

inline Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

// Mean over one axis, removing it from the shape (scalar shape {1} if none left).
inline Tensor mean_over_axis(const Tensor& x, int axis) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw std::invalid_argument("mean_over_axis: axis out of range");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
    const std::int64_t n = s[axis];
    Shape out_shape;
    for (int i = 0; i < static_cast<int>(s.size()); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape = {1};
    std::vector<double> v(static_cast<std::size_t>(outer * inner), 0.0);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < n; ++k)
            for (std::int64_t i = 0; i < inner; ++i)
                v[static_cast<std::size_t>(o * inner + i)] += x[static_cast<std::size_t>((o * n + k) * inner + i)];
    const double invn = 1.0 / static_cast<double>(n);
    for (auto& e : v) e *= invn;
    auto px = x.data_ptr();
    return op_result(out_shape, std::move(v), {x}, [px, outer, inner, n, invn](detail::TensorData* out) {
        return [out, px, outer, inner, n, invn]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t k = 0; k < n; ++k)
                    for (std::int64_t i = 0; i < inner; ++i)
                        gx[static_cast<std::size_t>((o * n + k) * inner + i)] +=
                            out->g[static_cast<std::size_t>(o * inner + i)] * invn;
        };
    });
}

// Weighted mean with plain (non-differentiated) weights; weights must be
// positive and the same length as x.
inline Tensor weighted_mean(const Tensor& x, const std::vector<double>& w) {
    if (w.size() != x.numel()) throw std::invalid_argument("weighted_mean: weight length mismatch");
    double wsum = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        wsum += w[i];
        acc += w[i] * x[i];
    }
    if (wsum <= 0.0) throw std::invalid_argument("weighted_mean: non-positive weight sum");
    auto px = x.data_ptr();
    const double inv = 1.0 / wsum;
    return op_result({1}, {acc * inv}, {x}, [px, w, inv](detail::TensorData* out) {
        return [out, px, w, inv]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            const double g = out->g[0];
            for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i] * inv;
        };
    });
}

// ---------------------------------------------------------------------------
// Activations, normalization, dropout
// ---------------------------------------------------------------------------

// tanh-approximation GELU.
inline Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double xi = x[i];
        v[i] = 0.5 * xi * (1.0 + std::tanh(kC * (xi + kA * xi * xi * xi)));
    }
    auto px = x.data_ptr();
    return op_result(x.shape(), std::move(v), {x}, [px](detail::TensorData* out) {
        return [out, px]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (std::size_t i = 0; i < out->g.size(); ++i) {
                double xi = px->v[i];
                double u = kC * (xi + kA * xi * xi * xi);
                double t = std::tanh(u);
                double du = kC * (1.0 + 3.0 * kA * xi * xi);
                gx[i] += out->g[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
            }
        };
    });
}

// Numerically stable softmax over the last axis.
inline Tensor softmax_lastdim(const Tensor& x) {
    const Shape& s = x.shape();
    const std::int64_t d = s.back();
    const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
    std::vector<double> v(x.numel());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * d;
        double*o = v.data() + r * d;
        double m = in[0];
        for (std::int64_t i = 1; i < d; ++i) m = std::max(m, in[i]);
        double z = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            o[i] = std::exp(in[i] - m);
            z += o[i];
        }
        const double inv = 1.0 / z;
        for (std::int64_t i = 0; i < d; ++i) o[i] *= inv;
    }
    auto px = x.data_ptr();
    return op_result(s, std::move(v), {x}, [px, rows, d](detail::TensorData* out) {
        return [out, px, rows, d]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* y = out->v.data() + r * d;
                const double* g = out->g.data() + r * d;
                double dot = 0.0;
                for (std::int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
                for (std::int64_t i = 0; i < d; ++i) gx[r * d + i] += y[i] * (g[i] - dot);
            }
        };
    });
}

// Per-last-axis standardization followed by an affine map.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const Shape& s = x.shape();
    const std::int64_t d = s.back();
    if (gamma.numel() != static_cast<std::size_t>(d) || beta.numel() != static_cast<std::size_t>(d))
        throw std::invalid_argument("layer_norm: gamma/beta must match last extent");
    const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / d;
    std::vector<double> v(x.numel());
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x.values().data() + r * d;
        double mu = 0.0;
        for (std::int64_t i = 0; i < d; ++i) mu += in[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t i = 0; i < d; ++i) {
            double xh = (in[i] - mu) * is;
            xhat[r * d + i] = xh;
            v[r * d + i] = xh * gamma[static_cast<std::size_t>(i)] + beta[static_cast<std::size_t>(i)];
        }
    }
    auto px = x.data_ptr(), pg = gamma.data_ptr(), pb = beta.data_ptr();
    return op_result(s, std::move(v), {x, gamma, beta},
                     [px, pg, pb, rows, d, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](detail::TensorData* out) {
                         return [out, px, pg, pb, rows, d, xhat, inv_std]() {
                             const auto& g = out->g;
                             for (std::int64_t r = 0; r < rows; ++r) {
                                 const double* gr = g.data() + r * d;
                                 const double* xh = xhat.data() + r * d;
                                 if (pg->requires_grad) {
                                     auto& gg = pg->grad();
                                     for (std::int64_t i = 0; i < d; ++i) gg[i] += gr[i] * xh[i];
                                 }
                                 if (pb->requires_grad) {
                                     auto& gb = pb->grad();
                                     for (std::int64_t i = 0; i < d; ++i) gb[i] += gr[i];
                                 }
                                 if (px->requires_grad) {
                                     auto& gx = px->grad();
                                     double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                                     for (std::int64_t i = 0; i < d; ++i) {
                                         double dxh = gr[i] * pg->v[i];
                                         mean_dxh += dxh;
                                         mean_dxh_xh += dxh * xh[i];
                                     }
                                     mean_dxh /= static_cast<double>(d);
                                     mean_dxh_xh /= static_cast<double>(d);
                                     const double is = inv_std[static_cast<std::size_t>(r)];
                                     for (std::int64_t i = 0; i < d; ++i) {
                                         double dxh = gr[i] * pg->v[i];
                                         gx[r * d + i] += is * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                                     }
                                 }
                             }
                         };
                     });
}

// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
// Identity when training is false or p == 0.
inline Tensor dropout(const Tensor& x, double p, bool training, std::mt19937_64& rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double keep = 1.0 - p;
    std::vector<double> mask(x.numel());
    std::vector<double> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        mask[i] = uni(rng) < p ? 0.0 : 1.0 / keep;
        v[i] = x[i] * mask[i];
    }
    auto px = x.data_ptr();
    return op_result(x.shape(), std::move(v), {x}, [px, mask = std::move(mask)](detail::TensorData* out) {
        return [out, px, mask]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (std::size_t i = 0; i < out->g.size(); ++i) gx[i] += out->g[i] * mask[i];
        };
    });
}

// ---------------------------------------------------------------------------
// Gather: the shared data-movement primitive
// ---------------------------------------------------------------------------

constexpr std::size_t kGatherFill = std::numeric_limits<std::size_t>::max();

// out[i] = in[idx[i]], with kGatherFill producing 0. Backward scatter-adds.
inline Tensor gather(const Tensor& x, std::vector<std::size_t> idx, Shape out_shape) {
    if (shape_numel(out_shape) != static_cast<std::int64_t>(idx.size()))
        throw std::invalid_argument("gather: index count does not match output shape");
    std::vector<double> v(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] == kGatherFill) {
            v[i] = 0.0;
        } else {
            if (idx[i] >= x.numel()) throw std::invalid_argument("gather: index out of range");
            v[i] = x[idx[i]];
        }
    }
    auto px = x.data_ptr();
    return op_result(std::move(out_shape), std::move(v), {x},
                     [px, idx = std::move(idx)](detail::TensorData* out) {
                         return [out, px, idx]() {
                             if (!px->requires_grad) return;
                             auto& gx = px->grad();
                             for (std::size_t i = 0; i < idx.size(); ++i)
                                 if (idx[i] != kGatherFill) gx[idx[i]] += out->g[i];
                         };
                     });
}

inline Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != static_cast<std::int64_t>(x.numel()))
        throw std::invalid_argument("reshape: element count mismatch");
    std::vector<std::size_t> idx(x.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return gather(x, std::move(idx), std::move(new_shape));
}

// General axis permutation: out axes are x axes reordered by perm.
inline Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) throw std::invalid_argument("permute: rank mismatch");
    Shape out_shape(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = s[static_cast<std::size_t>(perm[i])];
    std::vector<std::int64_t> in_strides(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
    std::vector<std::size_t> idx(x.numel());
    std::vector<std::int64_t> coord(perm.size(), 0);
    for (std::size_t o = 0; o < idx.size(); ++o) {
        std::int64_t src = 0;
        for (std::size_t a = 0; a < perm.size(); ++a) src += coord[a] * in_strides[static_cast<std::size_t>(perm[a])];
        idx[o] = static_cast<std::size_t>(src);
        for (int a = static_cast<int>(perm.size()) - 1; a >= 0; --a) {
            if (++coord[static_cast<std::size_t>(a)] < out_shape[static_cast<std::size_t>(a)]) break;
            coord[static_cast<std::size_t>(a)] = 0;
        }
    }
    return gather(x, std::move(idx), std::move(out_shape));
}

// ---------------------------------------------------------------------------
// Padding, cropping, pixel shuffle
// ---------------------------------------------------------------------------

enum class PadMode { mirror, zero };

namespace detail {

// Single-bounce reflection without edge duplication: -1 -> 1, n -> n-2.
inline std::int64_t reflect_once(std::int64_t i, std::int64_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

// Multi-bounce reflection (period 2(n-1)) for pads wider than the extent.
inline std::int64_t reflect_any(std::int64_t i, std::int64_t n) {
    if (n == 1) return 0;
    const std::int64_t period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

}  // namespace detail

// Pad the two trailing spatial axes. Mirror reflects interior values without
// duplicating the edge sample; pads must stay below the extent for mirror mode
// unless multi-bounce is explicitly allowed.
inline Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right, PadMode mode,
                    bool allow_rebounce = false) {
    if (x.rank() < 2) throw std::invalid_argument("pad2d: rank must be >= 2");
    if (top < 0 || bottom < 0 || left < 0 || right < 0) throw std::invalid_argument("pad2d: negative pad");
    const Shape& s = x.shape();
    const std::int64_t w = s.back();
    const std::int64_t h = s[s.size() - 2];
    const std::int64_t planes = static_cast<std::int64_t>(x.numel()) / (h * w);
    if (mode == PadMode::mirror && !allow_rebounce) {
        if (top >= h || bottom >= h || left >= w || right >= w)
            throw std::invalid_argument("pad2d: mirror pad must be smaller than the extent");
    }
    const std::int64_t ho = h + top + bottom, wo = w + left + right;
    Shape out_shape = s;
    out_shape[s.size() - 2] = static_cast<int>(ho);
    out_shape.back() = static_cast<int>(wo);
    std::vector<std::size_t> idx(static_cast<std::size_t>(planes * ho * wo));
    std::size_t o = 0;
    for (std::int64_t p = 0; p < planes; ++p) {
        const std::size_t base = static_cast<std::size_t>(p * h * w);
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            std::int64_t iy = oy - top;
            bool y_out = iy < 0 || iy >= h;
            if (y_out && mode == PadMode::mirror)
                iy = allow_rebounce ? detail::reflect_any(iy, h) : detail::reflect_once(iy, h);
            for (std::int64_t ox = 0; ox < wo; ++ox, ++o) {
                std::int64_t ix = ox - left;
                bool x_out = ix < 0 || ix >= w;
                if (mode == PadMode::zero && (y_out || x_out)) {
                    idx[o] = kGatherFill;
                    continue;
                }
                if (x_out) ix = allow_rebounce ? detail::reflect_any(ix, w) : detail::reflect_once(ix, w);
                idx[o] = base + static_cast<std::size_t>(iy * w + ix);
            }
        }
    }
    return gather(x, std::move(idx), std::move(out_shape));
}

// Symmetric mirror pad (reflect, no edge duplication). Rank-1 input pads its
// single axis; otherwise both trailing spatial axes are padded.
inline Tensor mirror_pad(const Tensor& x, int p) {
    const Shape& s = x.shape();
    if (x.rank() == 1) {
        if (p >= s[0]) throw std::invalid_argument("mirror_pad: pad must be smaller than the extent");
        Tensor row = reshape(x, {1, s[0]});
        return reshape(pad2d(row, 0, 0, p, p, PadMode::mirror), {s[0] + 2 * p});
    }
    if (p >= s[s.size() - 2] || p >= s.back())
        throw std::invalid_argument("mirror_pad: pad must be smaller than both spatial extents");
    return pad2d(x, p, p, p, p, PadMode::mirror);
}

inline Tensor crop2d(const Tensor& x, int top, int left, int out_h, int out_w) {
    const Shape& s = x.shape();
    const std::int64_t w = s.back();
    const std::int64_t h = s[s.size() - 2];
    if (top + out_h > h || left + out_w > w) throw std::invalid_argument("crop2d: window out of range");
    const std::int64_t planes = static_cast<std::int64_t>(x.numel()) / (h * w);
    Shape out_shape = s;
    out_shape[s.size() - 2] = out_h;
    out_shape.back() = out_w;
    std::vector<std::size_t> idx(static_cast<std::size_t>(planes * out_h * out_w));
    std::size_t o = 0;
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t oy = 0; oy < out_h; ++oy)
            for (std::int64_t ox = 0; ox < out_w; ++ox, ++o)
                idx[o] = static_cast<std::size_t>(p * h * w + (oy + top) * w + (ox + left));
    return gather(x, std::move(idx), std::move(out_shape));
}

// Channel-to-space rearrangement:
// out[c, r*h + i, r*w + j] = in[c*r^2 + i*r + j, h, w].
inline Tensor pixel_shuffle(const Tensor& x, int r) {
    if (x.rank() != 3) throw std::invalid_argument("pixel_shuffle: expected [C,H,W]");
    if (r < 1) throw std::invalid_argument("pixel_shuffle: r must be >= 1");
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (cin % (r * r) != 0)
        throw std::invalid_argument("pixel_shuffle: channel count not divisible by r^2");
    const int cout = cin / (r * r);
    Shape out_shape{cout, h * r, w * r};
    std::vector<std::size_t> idx(x.numel());
    std::size_t o = 0;
    for (int c = 0; c < cout; ++c)
        for (int oy = 0; oy < h * r; ++oy)
            for (int ox = 0; ox < w * r; ++ox, ++o) {
                int i = oy % r, j = ox % r;
                int src_c = c * r * r + i * r + j;
                idx[o] = static_cast<std::size_t>((src_c * h + oy / r) * w + ox / r);
            }
    return gather(x, std::move(idx), std::move(out_shape));
}

// Exact inverse of pixel_shuffle.
inline Tensor pixel_unshuffle(const Tensor& x, int r) {
    if (x.rank() != 3) throw std::invalid_argument("pixel_unshuffle: expected [C,H,W]");
    if (r < 1) throw std::invalid_argument("pixel_unshuffle: r must be >= 1");
    const int c = x.dim(0), hr = x.dim(1), wr = x.dim(2);
    if (hr % r != 0 || wr % r != 0)
        throw std::invalid_argument("pixel_unshuffle: spatial extents not divisible by r");
    const int h = hr / r, w = wr / r;
    Shape out_shape{c * r * r, h, w};
    std::vector<std::size_t> idx(x.numel());
    std::size_t o = 0;
    for (int oc = 0; oc < c * r * r; ++oc) {
        int base_c = oc / (r * r);
        int i = (oc / r) % r, j = oc % r;
        for (int oy = 0; oy < h; ++oy)
            for (int ox = 0; ox < w; ++ox, ++o)
                idx[o] = static_cast<std::size_t>((base_c * hr + oy * r + i) * wr + ox * r + j);
    }
    return gather(x, std::move(idx), std::move(out_shape));
}

// Bilinear 2x upsampling of the two trailing axes (constant-preserving,
// half-pixel centers). Fixed linear map; differentiable.
inline Tensor upsample2x_bilinear(const Tensor& x) {
    if (x.rank() < 2) throw std::invalid_argument("upsample2x_bilinear: rank must be >= 2");
    const Shape& s = x.shape();
    const std::int64_t w = s.back(), h = s[s.size() - 2];
    const std::int64_t planes = static_cast<std::int64_t>(x.numel()) / (h * w);
    const std::int64_t ho = 2 * h, wo = 2 * w;
    Shape out_shape = s;
    out_shape[s.size() - 2] = static_cast<int>(ho);
    out_shape.back() = static_cast<int>(wo);
    // Precompute the 1-D source taps once per axis.
    auto taps = [](std::int64_t n_out, std::int64_t n_in) {
        std::vector<std::array<double, 2>> wts(static_cast<std::size_t>(n_out));
        std::vector<std::array<std::int64_t, 2>> pos(static_cast<std::size_t>(n_out));
        for (std::int64_t o = 0; o < n_out; ++o) {
            double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
            std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
            double f = src - static_cast<double>(i0);
            std::int64_t a = std::clamp<std::int64_t>(i0, 0, n_in - 1);
            std::int64_t b = std::clamp<std::int64_t>(i0 + 1, 0, n_in - 1);
            pos[static_cast<std::size_t>(o)] = {a, b};
            wts[static_cast<std::size_t>(o)] = {1.0 - f, f};
        }
        return std::pair(pos, wts);
    };
    auto [ypos, ywts] = taps(ho, h);
    auto [xpos, xwts] = taps(wo, w);
    std::vector<double> v(static_cast<std::size_t>(planes * ho * wo));
    std::size_t o = 0;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* in = x.values().data() + p * h * w;
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox, ++o) {
                double acc = 0.0;
                for (int a = 0; a < 2; ++a)
                    for (int b = 0; b < 2; ++b)
                        acc += ywts[static_cast<std::size_t>(oy)][static_cast<std::size_t>(a)] *
                               xwts[static_cast<std::size_t>(ox)][static_cast<std::size_t>(b)] *
                               in[ypos[static_cast<std::size_t>(oy)][static_cast<std::size_t>(a)] * w +
                                  xpos[static_cast<std::size_t>(ox)][static_cast<std::size_t>(b)]];
                v[o] = acc;
            }
    }
    auto px = x.data_ptr();
    return op_result(out_shape, std::move(v), {x},
                     [px, planes, h, w, ho, wo, ypos = std::move(ypos), ywts = std::move(ywts),
                      xpos = std::move(xpos), xwts = std::move(xwts)](detail::TensorData* out) {
                         return [out, px, planes, h, w, ho, wo, ypos, ywts, xpos, xwts]() {
                             if (!px->requires_grad) return;
                             auto& gx = px->grad();
                             std::size_t o = 0;
                             for (std::int64_t p = 0; p < planes; ++p) {
                                 double* gp = gx.data() + p * h * w;
                                 for (std::int64_t oy = 0; oy < ho; ++oy)
                                     for (std::int64_t ox = 0; ox < wo; ++ox, ++o)
                                         for (int a = 0; a < 2; ++a)
                                             for (int b = 0; b < 2; ++b)
                                                 gp[ypos[static_cast<std::size_t>(oy)][static_cast<std::size_t>(a)] * w +
                                                    xpos[static_cast<std::size_t>(ox)][static_cast<std::size_t>(b)]] +=
                                                     out->g[o] *
                                                     ywts[static_cast<std::size_t>(oy)][static_cast<std::size_t>(a)] *
                                                     xwts[static_cast<std::size_t>(ox)][static_cast<std::size_t>(b)];
                             }
                         };
                     });
}

// ---------------------------------------------------------------------------
// Channel concat / slice (axis 0 of any rank; row-major blocks are contiguous)
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int total = 0;
    for (const auto& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail) throw std::invalid_argument("concat_channels: trailing shape mismatch");
        total += p.dim(0);
    }
    Shape out_shape = parts[0].shape();
    out_shape[0] = total;
    std::vector<double> v;
    v.reserve(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        offsets.push_back(v.size());
        v.insert(v.end(), p.values().begin(), p.values().end());
    }
    std::vector<std::shared_ptr<detail::TensorData>> datas;
    for (const auto& p : parts) datas.push_back(p.data_ptr());
    return op_result(out_shape, std::move(v), parts,
                     [datas = std::move(datas), offsets = std::move(offsets)](detail::TensorData* out) {
                         return [out, datas, offsets]() {
                             for (std::size_t k = 0; k < datas.size(); ++k) {
                                 if (!datas[k]->requires_grad) continue;
                                 auto& gp = datas[k]->grad();
                                 const std::size_t off = offsets[k];
                                 for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += out->g[off + i];
                             }
                         };
                     });
}

// Channels [c0, c1) of a [C, ...] tensor.
inline Tensor slice_channels(const Tensor& x, int c0, int c1) {
    if (c0 < 0 || c1 <= c0 || c1 > x.dim(0)) throw std::invalid_argument("slice_channels: bad range");
    const std::size_t per = x.numel() / static_cast<std::size_t>(x.dim(0));
    Shape out_shape = x.shape();
    out_shape[0] = c1 - c0;
    const std::size_t off = static_cast<std::size_t>(c0) * per;
    const std::size_t n = static_cast<std::size_t>(c1 - c0) * per;
    std::vector<double> v(x.values().begin() + static_cast<std::ptrdiff_t>(off),
                          x.values().begin() + static_cast<std::ptrdiff_t>(off + n));
    auto px = x.data_ptr();
    return op_result(out_shape, std::move(v), {x}, [px, off, n](detail::TensorData* out) {
        return [out, px, off, n]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (std::size_t i = 0; i < n; ++i) gx[off + i] += out->g[i];
        };
    });
}

// Per-channel affine map with plain (constant) coefficients:
// out[c,...] = x[c,...] * s[c] + o[c].
inline Tensor channel_affine(const Tensor& x, const std::vector<double>& s, const std::vector<double>& o) {
    const int c = x.dim(0);
    if (s.size() != static_cast<std::size_t>(c) || o.size() != static_cast<std::size_t>(c))
        throw std::invalid_argument("channel_affine: coefficient length mismatch");
    const std::size_t per = x.numel() / static_cast<std::size_t>(c);
    std::vector<double> v(x.numel());
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < per; ++i) {
            std::size_t k = static_cast<std::size_t>(ch) * per + i;
            v[k] = x[k] * s[static_cast<std::size_t>(ch)] + o[static_cast<std::size_t>(ch)];
        }
    auto px = x.data_ptr();
    return op_result(x.shape(), std::move(v), {x}, [px, s, per, c](detail::TensorData* out) {
        return [out, px, s, per, c]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < per; ++i) {
                    std::size_t k = static_cast<std::size_t>(ch) * per + i;
                    gx[k] += out->g[k] * s[static_cast<std::size_t>(ch)];
                }
        };
    });
}

// Per-channel clamp-at-zero for flagged channels; others pass through.
// Subgradient: pass where x > 0, zero where x < 0 (and at exactly 0).
inline Tensor clamp_min0_channels(const Tensor& x, const std::vector<bool>& flagged) {
    const int c = x.dim(0);
    if (flagged.size() != static_cast<std::size_t>(c))
        throw std::invalid_argument("clamp_min0_channels: flag length mismatch");
    const std::size_t per = x.numel() / static_cast<std::size_t>(c);
    std::vector<double> v = x.values();
    for (int ch = 0; ch < c; ++ch) {
        if (!flagged[static_cast<std::size_t>(ch)]) continue;
        for (std::size_t i = 0; i < per; ++i) {
            std::size_t k = static_cast<std::size_t>(ch) * per + i;
            if (v[k] < 0.0) v[k] = 0.0;
        }
    }
    auto px = x.data_ptr();
    return op_result(x.shape(), std::move(v), {x}, [px, flagged, per, c](detail::TensorData* out) {
        return [out, px, flagged, per, c]() {
            if (!px->requires_grad) return;
            auto& gx = px->grad();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < per; ++i) {
                    std::size_t k = static_cast<std::size_t>(ch) * per + i;
                    if (!flagged[static_cast<std::size_t>(ch)] || px->v[k] > 0.0) gx[k] += out->g[k];
                }
        };
    });
}

// ---------------------------------------------------------------------------
// Matrix products and linear layers
// ---------------------------------------------------------------------------

namespace detail {

inline void mm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
    // c[m,n] += a[m,k] * b[k,n], ikj order for contiguous access
    for (std::int64_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = ar[kk];
            if (av == 0.0) continue;
            const double* br = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

inline void mm_acc_at(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    // c[k,n] += a^T[k,m] * b[m,n] given a[m,k]
    for (std::int64_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        const double* br = b + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = ar[kk];
            if (av == 0.0) continue;
            double* cr = c + kk * n;
            for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

inline void mm_acc_bt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                      std::int64_t n) {
    // c[m,n] += a[m,k] * b^T[k,n] given b[n,k]
    for (std::int64_t i = 0; i < m; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const double* br = b + j * k;
            double acc = 0.0;
            for (std::int64_t kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
            cr[j] += acc;
        }
    }
}

}  // namespace detail

// a[m,k] x b[k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: expected rank-2 inputs");
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw std::invalid_argument("matmul: inner extents differ");
    std::vector<double> v(static_cast<std::size_t>(m * n), 0.0);
    detail::mm_acc(a.values().data(), b.values().data(), v.data(), m, k, n);
    auto pa = a.data_ptr(), pb = b.data_ptr();
    return op_result({static_cast<int>(m), static_cast<int>(n)}, std::move(v), {a, b},
                     [pa, pb, m, k, n](detail::TensorData* out) {
                         return [out, pa, pb, m, k, n]() {
                             if (pa->requires_grad)
                                 detail::mm_acc_bt(out->g.data(), pb->v.data(), pa->grad().data(), m, n, k);
                             if (pb->requires_grad)
                                 detail::mm_acc_at(pa->v.data(), out->g.data(), pb->grad().data(), m, k, n);
                         };
                     });
}

// Batched a[B,m,k] x b[B,k,n] -> [B,m,n]; transpose_b treats b as [B,n,k].
inline Tensor matmul_batched(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3)
        throw std::invalid_argument("matmul_batched: expected rank-3 inputs");
    const std::int64_t bb = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::int64_t n = transpose_b ? b.dim(1) : b.dim(2);
    const std::int64_t bk = transpose_b ? b.dim(2) : b.dim(1);
    if (b.dim(0) != bb || bk != k) throw std::invalid_argument("matmul_batched: shape mismatch");
    std::vector<double> v(static_cast<std::size_t>(bb * m * n), 0.0);
    for (std::int64_t i = 0; i < bb; ++i) {
        const double* ap = a.values().data() + i * m * k;
        const double* bp = b.values().data() + i * k * n;
        double* cp = v.data() + i * m * n;
        if (transpose_b)
            detail::mm_acc_bt(ap, bp, cp, m, k, n);
        else
            detail::mm_acc(ap, bp, cp, m, k, n);
    }
    auto pa = a.data_ptr(), pb = b.data_ptr();
    return op_result({static_cast<int>(bb), static_cast<int>(m), static_cast<int>(n)}, std::move(v),
                     {a, b}, [pa, pb, bb, m, k, n, transpose_b](detail::TensorData* out) {
                         return [out, pa, pb, bb, m, k, n, transpose_b]() {
                             for (std::int64_t i = 0; i < bb; ++i) {
                                 const double* gp = out->g.data() + i * m * n;
                                 const double* ap = pa->v.data() + i * m * k;
                                 const double* bp = pb->v.data() + i * k * n;
                                 if (!transpose_b) {
                                     // y = a b: da += g b^T, db += a^T g
                                     if (pa->requires_grad)
                                         detail::mm_acc_bt(gp, bp, pa->grad().data() + i * m * k, m, n, k);
                                     if (pb->requires_grad)
                                         detail::mm_acc_at(ap, gp, pb->grad().data() + i * k * n, m, k, n);
                                 } else {
                                     // y = a b^T with b[n,k]: da += g b, db += g^T a
                                     if (pa->requires_grad)
                                         detail::mm_acc(gp, bp, pa->grad().data() + i * m * k, m, n, k);
                                     if (pb->requires_grad)
                                         detail::mm_acc_at(gp, ap, pb->grad().data() + i * n * k, m, n, k);
                                 }
                             }
                         };
                     });
}

// x[N,D] * W[D,M] + b[M]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1)
        throw std::invalid_argument("linear: expected x[N,D], W[D,M], b[M]");
    const std::int64_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
    if (w.dim(0) != d || b.dim(0) != m) throw std::invalid_argument("linear: shape mismatch");
    std::vector<double> v(static_cast<std::size_t>(n * m));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j) v[static_cast<std::size_t>(i * m + j)] = b[static_cast<std::size_t>(j)];
    detail::mm_acc(x.values().data(), w.values().data(), v.data(), n, d, m);
    auto px = x.data_ptr(), pw = w.data_ptr(), pb = b.data_ptr();
    return op_result({static_cast<int>(n), static_cast<int>(m)}, std::move(v), {x, w, b},
                     [px, pw, pb, n, d, m](detail::TensorData* out) {
                         return [out, px, pw, pb, n, d, m]() {
                             if (px->requires_grad)
                                 detail::mm_acc_bt(out->g.data(), pw->v.data(), px->grad().data(), n, m, d);
                             if (pw->requires_grad)
                                 detail::mm_acc_at(px->v.data(), out->g.data(), pw->grad().data(), n, d, m);
                             if (pb->requires_grad) {
                                 auto& gb = pb->grad();
                                 for (std::int64_t i = 0; i < n; ++i)
                                     for (std::int64_t j = 0; j < m; ++j)
                                         gb[static_cast<std::size_t>(j)] += out->g[static_cast<std::size_t>(i * m + j)];
                             }
                         };
                     });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

// Valid cross-correlation of x[Ci,Hp,Wp] with w[Co,Ci,kh,kw], stride s.
inline Tensor conv_valid(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    const std::int64_t ci = x.dim(0), hp = x.dim(1), wp = x.dim(2);
    const std::int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
    if (b.numel() != static_cast<std::size_t>(co)) throw std::invalid_argument("conv2d: bias size mismatch");
    if (hp < kh || wp < kw) throw std::invalid_argument("conv2d: kernel larger than padded input");
    const std::int64_t ho = (hp - kh) / stride + 1, wo = (wp - kw) / stride + 1;
    std::vector<double> v(static_cast<std::size_t>(co * ho * wo));
    for (std::int64_t oc = 0; oc < co; ++oc) {
        const double bias = b[static_cast<std::size_t>(oc)];
        for (std::int64_t oy = 0; oy < ho; ++oy)
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                double acc = bias;
                const std::int64_t iy0 = oy * stride, ix0 = ox * stride;
                for (std::int64_t ic = 0; ic < ci; ++ic) {
                    const double* xp = x.values().data() + (ic * hp + iy0) * wp + ix0;
                    const double* wp2 = w.values().data() + ((oc * ci + ic) * kh) * kw;
                    for (std::int64_t ky = 0; ky < kh; ++ky) {
                        const double* xr = xp + ky * wp;
                        const double* wr = wp2 + ky * kw;
                        for (std::int64_t kx = 0; kx < kw; ++kx) acc += xr[kx] * wr[kx];
                    }
                }
                v[static_cast<std::size_t>((oc * ho + oy) * wo + ox)] = acc;
            }
    }
    auto px = x.data_ptr(), pw = w.data_ptr(), pb = b.data_ptr();
    return op_result({static_cast<int>(co), static_cast<int>(ho), static_cast<int>(wo)}, std::move(v),
                     {x, w, b}, [px, pw, pb, ci, hp, wp, co, kh, kw, ho, wo, stride](detail::TensorData* out) {
                         return [out, px, pw, pb, ci, hp, wp, co, kh, kw, ho, wo, stride]() {
                             const auto& g = out->g;
                             double* gx = px->requires_grad ? px->grad().data() : nullptr;
                             double* gw = pw->requires_grad ? pw->grad().data() : nullptr;
                             double* gb = pb->requires_grad ? pb->grad().data() : nullptr;
                             for (std::int64_t oc = 0; oc < co; ++oc)
                                 for (std::int64_t oy = 0; oy < ho; ++oy)
                                     for (std::int64_t ox = 0; ox < wo; ++ox) {
                                         const double go = g[static_cast<std::size_t>((oc * ho + oy) * wo + ox)];
                                         if (go == 0.0) continue;
                                         if (gb) gb[oc] += go;
                                         const std::int64_t iy0 = oy * stride, ix0 = ox * stride;
                                         for (std::int64_t ic = 0; ic < ci; ++ic) {
                                             const std::int64_t xbase = (ic * hp + iy0) * wp + ix0;
                                             const std::int64_t wbase = ((oc * ci + ic) * kh) * kw;
                                             for (std::int64_t ky = 0; ky < kh; ++ky)
                                                 for (std::int64_t kx = 0; kx < kw; ++kx) {
                                                     const std::int64_t xi = xbase + ky * wp + kx;
                                                     const std::int64_t wi = wbase + ky * kw + kx;
                                                     if (gx) gx[xi] += go * pw->v[static_cast<std::size_t>(wi)];
                                                     if (gw) gw[wi] += go * px->v[static_cast<std::size_t>(xi)];
                                                 }
                                         }
                                     }
                         };
                     });
}

}  // namespace detail

// "Same"-coverage convolution: output extents are ceil(input/stride); the
// required pad is split floor/ceil between the leading and trailing side.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, PadMode pad) {
    if (x.rank() != 3 || w.rank() != 4) throw std::invalid_argument("conv2d: expected x[C,H,W], w[O,C,kh,kw]");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    const int h = x.dim(1), wd = x.dim(2);
    const int kh = w.dim(2), kw = w.dim(3);
    if (kh < 1 || kw < 1) throw std::invalid_argument("conv2d: kernel extent must be >= 1");
    const int ho = (h + stride - 1) / stride, wo = (wd + stride - 1) / stride;
    const int pad_h = std::max(0, (ho - 1) * stride + kh - h);
    const int pad_w = std::max(0, (wo - 1) * stride + kw - wd);
    // Internal same-coverage padding tolerates pads wider than the extent
    // (rebouncing reflection); tiny latent maps need it.
    Tensor xp = (pad_h || pad_w)
                    ? pad2d(x, pad_h / 2, pad_h - pad_h / 2, pad_w / 2, pad_w - pad_w / 2, pad,
                            /*allow_rebounce=*/true)
                    : x;
    return detail::conv_valid(xp, w, b, stride);
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

struct SpectralState {
    std::vector<double> u, v;  // persistent power-iteration vectors
    double sigma = 0.0;        // last estimate (reporting only)

    void init(std::int64_t m, std::int64_t n, std::mt19937_64& rng) {
        std::normal_distribution<double> nd(0.0, 1.0);
        u.resize(static_cast<std::size_t>(m));
        v.resize(static_cast<std::size_t>(n));
        for (auto& e : u) e = nd(rng);
        for (auto& e : v) e = nd(rng);
        double nu = 0.0;
        for (double e : u) nu += e * e;
        nu = std::sqrt(nu);
        for (auto& e : u) e /= (nu > 0 ? nu : 1.0);
        double nv = 0.0;
        for (double e : v) nv += e * e;
        nv = std::sqrt(nv);
        for (auto& e : v) e /= (nv > 0 ? nv : 1.0);
    }
};

// Weight divided by the one-step power-iteration estimate of its largest
// singular value. The weight tensor is treated as a [rows, numel/rows] matrix.
// update_estimate runs one power-iteration step on the persistent vectors;
// the returned tensor is differentiable w.r.t. the weight through
// sigma = u^T W v with u, v held constant. A zero matrix floors sigma at eps.
inline Tensor spectral_normalize(const Tensor& w, SpectralState& state, bool update_estimate,
                                 double eps = 1e-12) {
    const std::int64_t m = w.dim(0);
    const std::int64_t n = static_cast<std::int64_t>(w.numel()) / m;
    if (state.u.size() != static_cast<std::size_t>(m) || state.v.size() != static_cast<std::size_t>(n))
        throw std::invalid_argument("spectral_normalize: state not initialized for this weight");
    const double* wv = w.values().data();
    if (update_estimate) {
        // v <- W^T u / ||.||, u <- W v / ||.||
        std::vector<double> nv(static_cast<std::size_t>(n), 0.0);
        for (std::int64_t i = 0; i < m; ++i) {
            const double ui = state.u[static_cast<std::size_t>(i)];
            const double* row = wv + i * n;
            for (std::int64_t j = 0; j < n; ++j) nv[static_cast<std::size_t>(j)] += ui * row[j];
        }
        double nn = 0.0;
        for (double e : nv) nn += e * e;
        nn = std::sqrt(nn);
        if (nn > eps)
            for (auto& e : nv) e /= nn;
        state.v = std::move(nv);
        std::vector<double> nu(static_cast<std::size_t>(m), 0.0);
        for (std::int64_t i = 0; i < m; ++i) {
            const double* row = wv + i * n;
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) acc += row[j] * state.v[static_cast<std::size_t>(j)];
            nu[static_cast<std::size_t>(i)] = acc;
        }
        double un = 0.0;
        for (double e : nu) un += e * e;
        un = std::sqrt(un);
        if (un > eps)
            for (auto& e : nu) e /= un;
        state.u = std::move(nu);
    }
    // sigma = u^T W v as a differentiable function of W
    double sigma = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        const double* row = wv + i * n;
        double acc = 0.0;
        for (std::int64_t j = 0; j < n; ++j) acc += row[j] * state.v[static_cast<std::size_t>(j)];
        sigma += state.u[static_cast<std::size_t>(i)] * acc;
    }
    state.sigma = sigma;
    if (std::abs(sigma) < eps) {
        // Degenerate (zero) matrix: return zeros, no useful gradient direction.
        return Tensor::zeros(w.shape());
    }
    auto pw = w.data_ptr();
    std::vector<double> out(w.numel());
    const double inv = 1.0 / sigma;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i] * inv;
    std::vector<double> u = state.u, vv = state.v;
    return op_result(w.shape(), std::move(out), {w},
                     [pw, m, n, inv, u = std::move(u), vv = std::move(vv)](detail::TensorData* out_td) {
                         return [out_td, pw, m, n, inv, u, vv]() {
                             if (!pw->requires_grad) return;
                             // y = W / sigma, sigma = u^T W v
                             // dL/dW = g/sigma - (sum(g .* W)/sigma^2) u v^T
                             auto& gw = pw->grad();
                             const auto& g = out_td->g;
                             double gdotw = 0.0;
                             for (std::size_t i = 0; i < g.size(); ++i) gdotw += g[i] * pw->v[i];
                             const double coef = gdotw * inv * inv;
                             for (std::int64_t i = 0; i < m; ++i)
                                 for (std::int64_t j = 0; j < n; ++j) {
                                     const std::size_t k = static_cast<std::size_t>(i * n + j);
                                     gw[k] += g[k] * inv - coef * u[static_cast<std::size_t>(i)] * vv[static_cast<std::size_t>(j)];
                                 }
                         };
                     });
}

}  // namespace droughtcast
