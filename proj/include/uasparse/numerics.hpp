#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <Eigen/Core>

#include "uasparse/errors.hpp"
#include "uasparse/random.hpp"

namespace uasparse {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

/// Keeps large activation buffers on the heap between ops instead of mapping
/// fresh pages for each one. No-op outside glibc.
inline void retain_large_allocations() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; ///< empty until a backward pass reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

/// Disables graph recording on this thread for its lifetime (inference).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Dense row-major tensor handle. Copies share storage, like a reference-counted
/// buffer; use clone() for an independent copy.
template <class T>
class BasicTensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    BasicTensor() = default;
    explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

    static BasicTensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        for (auto d : shape)
            if (d == 0) throw ShapeMismatch("tensor dimensions must be positive, got " + shape_str(shape));
        if (shape_numel(shape) != data.size()) {
            throw ShapeMismatch("data length " + std::to_string(data.size()) + " does not match shape " +
                                shape_str(shape));
        }
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return BasicTensor(std::move(n));
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static BasicTensor scalar(T v) { return from({1}, {v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    T item() const {
        if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<T> grad() { return node_->grad; }
    std::span<const T> grad() const { return node_->grad; }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }
    void clear_grad() { node_->grad.clear(); }

    BasicTensor clone(bool requires_grad = false) const { return from(shape(), node_->data, requires_grad); }

    /// Reverse-mode pass from this scalar through every recorded operation.
    void backward() {
        if (numel() != 1) throw ShapeMismatch("backward() requires a scalar, got " + shape_str(shape()));
        std::vector<detail::Node<T>*> order;
        std::unordered_set<detail::Node<T>*> seen;
        std::vector<std::pair<detail::Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                auto* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->ensure_grad()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn && !(*it)->grad.empty()) (*it)->backward_fn(**it);
        }
    }

    detail::Node<T>* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

private:
    NodePtr node_;
};

using Tensor = BasicTensor<float>;

namespace detail {

template <class T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, std::vector<BasicTensor<T>> inputs,
                           std::function<void(Node<T>&)> backward_fn) {
    auto out = BasicTensor<T>::from(std::move(shape), std::move(data));
    if (!grad_mode()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    auto* n = out.node();
    n->requires_grad = true;
    for (auto& in : inputs) n->parents.push_back(in.node_ptr());
    n->backward_fn = std::move(backward_fn);
    return out;
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
void require_rank(const BasicTensor<T>& t, std::size_t r, const char* op) {
    if (t.rank() != r) {
        throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                            shape_str(t.shape()));
    }
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                            " differ");
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    using M = detail::RowMat<T>;
    std::vector<T> out(m * n);
    Eigen::Map<M>(out.data(), m, n).noalias() =
        Eigen::Map<const M>(a.data().data(), m, k) * Eigen::Map<const M>(b.data().data(), k, n);
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node<T>& self) {
        Eigen::Map<const M> dc(self.grad.data(), m, n);
        if (an->requires_grad) {
            Eigen::Map<M>(an->ensure_grad().data(), m, k).noalias() +=
                dc * Eigen::Map<const M>(bn->data.data(), k, n).transpose();
        }
        if (bn->requires_grad) {
            Eigen::Map<M>(bn->ensure_grad().data(), k, n).noalias() +=
                Eigen::Map<const M>(an->data.data(), m, k).transpose() * dc;
        }
    });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    detail::require_rank(a, 2, "transpose");
    const auto r = a.dim(0), c = a.dim(1);
    std::vector<T> out(r * c);
    const auto src = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = src[i * c + j];
    auto* an = a.node();
    return detail::make_result<T>({c, r}, std::move(out), {a}, [an, r, c](detail::Node<T>& self) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

/// Same data viewed with a new shape (row-major order preserved).
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    auto* an = a.node();
    return detail::make_result<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), {a},
                                  [an](detail::Node<T>& self) {
                                      auto& g = an->ensure_grad();
                                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  });
}

template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& a) {
    return reshape(a, {a.numel()});
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeMismatch("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeMismatch("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw ShapeMismatch("concat: rank mismatch");
        for (std::size_t d = 0; d < ref.size(); ++d)
            if (d != axis && p.dim(d) != ref[d]) throw ShapeMismatch("concat: incompatible shapes");
        total += p.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= ref[d];
    for (std::size_t d = axis + 1; d < ref.size(); ++d) inner *= ref[d];
    Shape shape = ref;
    shape[axis] = total;
    std::vector<T> out(shape_numel(shape));
    std::vector<detail::Node<T>*> nodes;
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * w), w,
                        out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset));
        offset += w;
        nodes.push_back(p.node());
        widths.push_back(w);
    }
    return detail::make_result<T>(std::move(shape), std::move(out), parts,
                                  [nodes, widths, outer, total, inner](detail::Node<T>& self) {
                                      std::size_t off = 0;
                                      for (std::size_t i = 0; i < nodes.size(); ++i) {
                                          if (nodes[i]->requires_grad) {
                                              auto& g = nodes[i]->ensure_grad();
                                              for (std::size_t o = 0; o < outer; ++o)
                                                  for (std::size_t j = 0; j < widths[i]; ++j)
                                                      g[o * widths[i] + j] += self.grad[o * total * inner + off + j];
                                          }
                                          off += widths[i];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
        for (auto* p : {an, bn}) {
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto* an = a.node();
    auto* bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<T>& self) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->data[i];
        }
    });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
    auto* an = a.node();
    return detail::make_result<T>(a.shape(), std::move(out), {a}, [an, s](detail::Node<T>& self) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

/// x[N, D] + bias[D] broadcast over rows.
template <class T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
    detail::require_rank(x, 2, "add_bias");
    const auto rows = x.dim(0), cols = x.dim(1);
    if (bias.numel() != cols) {
        throw ShapeMismatch("add_bias: bias " + shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
    }
    using M = detail::RowMat<T>;
    using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
    const auto R = static_cast<Eigen::Index>(rows), Cn = static_cast<Eigen::Index>(cols);
    std::vector<T> out(x.numel());
    Eigen::Map<M>(out.data(), R, Cn).noalias() =
        Eigen::Map<const M>(x.data().data(), R, Cn).rowwise() + Eigen::Map<const RowVec>(bias.data().data(), Cn);
    auto* xn = x.node();
    auto* bn = bias.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x, bias}, [xn, bn, R, Cn](detail::Node<T>& self) {
        const Eigen::Map<const M> dy(self.grad.data(), R, Cn);
        if (xn->requires_grad) Eigen::Map<M>(xn->ensure_grad().data(), R, Cn) += dy;
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (Eigen::Index r = 0; r < R; ++r)
                for (Eigen::Index c = 0; c < Cn; ++c) g[c] += dy(r, c);
        }
    });
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    return add_bias(matmul(x, weight), bias);
}

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

template <class T>
BasicTensor<T> selu(const BasicTensor<T>& x) {
    const T lambda = static_cast<T>(kSeluLambda);
    const T la = static_cast<T>(kSeluLambda * kSeluAlpha);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        out[i] = v > T(0) ? lambda * v : la * std::expm1(v);
    }
    auto* xn = x.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [xn, lambda, la](detail::Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = xn->data[i];
            g[i] += self.grad[i] * (v > T(0) ? lambda : la * std::exp(v));
        }
    });
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x.data()[i], T(0));
    auto* xn = x.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [xn](detail::Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xn->data[i] > T(0)) g[i] += self.grad[i];
    });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p) so inference needs no rescale.
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) throw Error("dropout: p must lie in [0, 1)");
    if (!training || p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    for (auto& m : mask) m = rng.bernoulli(p) ? T(0) : keep_scale;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
    auto* xn = x.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [xn, mask = std::move(mask)](detail::Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T s = T(0);
    for (T v : x.data()) s += v;
    auto* xn = x.node();
    return detail::make_result<T>({1}, {s}, {x}, [xn](detail::Node<T>& self) {
        auto& g = xn->ensure_grad();
        for (auto& gi : g) gi += self.grad[0];
    });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Softmax along `axis`, computed with max subtraction.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeMismatch("softmax: axis out of range for " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    const std::size_t n = x.dim(axis);
    for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
    std::vector<T> out(x.numel());
    const auto in = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
            T z = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                out[base + j * inner] = std::exp(in[base + j * inner] - mx);
                z += out[base + j * inner];
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
        }
    }
    auto* xn = x.node();
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [xn, outer, inner, n](detail::Node<T>& self) {
        auto& g = xn->ensure_grad();
        const auto& y = self.data;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * n * inner + i;
                T dot = T(0);
                for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < n; ++j)
                    g[base + j * inner] += y[base + j * inner] * (self.grad[base + j * inner] - dot);
            }
        }
    });
}

/// Row-wise layer normalization of x[N, D] with learned gamma[D], beta[D].
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta,
                          T eps = T(1e-5)) {
    detail::require_rank(x, 2, "layer_norm");
    const auto rows = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d) throw ShapeMismatch("layer_norm: gamma/beta width mismatch");
    std::vector<T> out(x.numel()), xhat(x.numel()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = x.data().data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        inv_std[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * inv_std[r];
            out[r * d + j] = xhat[r * d + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    auto* xn = x.node();
    auto* gn = gamma.node();
    auto* bn = beta.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            const auto& dy = self.grad;
            if (gn->requires_grad || bn->requires_grad) {
                auto* gg = gn->requires_grad ? &gn->ensure_grad() : nullptr;
                auto* bg = bn->requires_grad ? &bn->ensure_grad() : nullptr;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) {
                        if (gg) (*gg)[j] += dy[r * d + j] * xhat[r * d + j];
                        if (bg) (*bg)[j] += dy[r * d + j];
                    }
            }
            if (xn->requires_grad) {
                auto& g = xn->ensure_grad();
                const T dd = static_cast<T>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    T s1 = T(0), s2 = T(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = dy[r * d + j] * gn->data[j];
                        s1 += dxh;
                        s2 += dxh * xhat[r * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dxh = dy[r * d + j] * gn->data[j];
                        g[r * d + j] += inv_std[r] / dd * (dd * dxh - s1 - xhat[r * d + j] * s2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product self-attention over a batch of sequences.
///
/// q, k, v are [batch * seq_len, d_model]; head h owns columns
/// [h * d_k, (h + 1) * d_k). Keys whose mask entry is 0 get zero weight. A
/// sequence with no real token attends uniformly over all of its positions.
/// When `weights_out` is given it receives [batch, heads, seq_len, seq_len].
template <class T>
BasicTensor<T> masked_self_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                                     std::span<const std::uint8_t> mask, std::size_t batch, std::size_t seq_len,
                                     std::size_t num_heads, std::vector<T>* weights_out = nullptr) {
    detail::require_rank(q, 2, "attention");
    detail::require_same_shape(q, k, "attention");
    detail::require_same_shape(q, v, "attention");
    const std::size_t d = q.dim(1);
    if (q.dim(0) != batch * seq_len || mask.size() != batch * seq_len) {
        throw ShapeMismatch("attention: rows/mask do not match batch * seq_len");
    }
    if (num_heads == 0 || d % num_heads != 0) throw ShapeMismatch("attention: d_model not divisible by heads");
    const std::size_t dk = d / num_heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));
    const std::size_t ss = seq_len * seq_len;

    using Mat = detail::RowMat<T>;
    using Block = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    using MutBlock = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
    using Square = Eigen::Map<Mat>;

    std::vector<T> probs(batch * num_heads * ss);
    std::vector<std::uint8_t> uniform(batch, 0);
    std::vector<T> out(q.numel(), T(0));
    const T* Q = q.data().data();
    const T* K = k.data().data();
    const T* V = v.data().data();
    Mat scores(seq_len, seq_len);

    for (std::size_t b = 0; b < batch; ++b) {
        const std::uint8_t* m = mask.data() + b * seq_len;
        const bool any = std::any_of(m, m + seq_len, [](std::uint8_t x) { return x != 0; });
        uniform[b] = any ? 0 : 1;
        const auto S = static_cast<Eigen::Index>(seq_len);
        Eigen::Array<bool, 1, Eigen::Dynamic> keep(S);
        for (Eigen::Index j = 0; j < S; ++j) keep(j) = m[j] != 0;
        const auto Dk = static_cast<Eigen::Index>(dk);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        for (std::size_t h = 0; h < num_heads; ++h) {
            const std::size_t off = b * seq_len * d + h * dk;
            Square P(probs.data() + (b * num_heads + h) * ss, S, S);
            if (!any) {
                P.setConstant(T(1) / static_cast<T>(seq_len));
            } else {
                scores.noalias() = Block(Q + off, S, Dk, stride) * Block(K + off, S, Dk, stride).transpose();
                scores *= inv_sqrt;
                // Scalar loops: Eigen's vectorized exp and sum depend on row alignment.
                for (Eigen::Index i = 0; i < S; ++i) {
                    T mx = -std::numeric_limits<T>::infinity();
                    for (Eigen::Index j = 0; j < S; ++j)
                        if (keep(j)) mx = std::max(mx, scores(i, j));
                    T total = T(0);
                    for (Eigen::Index j = 0; j < S; ++j) {
                        P(i, j) = keep(j) ? std::exp(scores(i, j) - mx) : T(0);
                        total += P(i, j);
                    }
                    for (Eigen::Index j = 0; j < S; ++j) P(i, j) /= total;
                }
            }
            MutBlock(out.data() + off, S, Dk, stride).noalias() = P * Block(V + off, S, Dk, stride);
        }
    }
    if (weights_out) *weights_out = probs;

    auto* qn = q.node();
    auto* kn = k.node();
    auto* vn = v.node();
    return detail::make_result<T>(
        q.shape(), std::move(out), {q, k, v},
        [qn, kn, vn, batch, seq_len, num_heads, d, dk, inv_sqrt, ss, probs = std::move(probs),
         uniform = std::move(uniform)](detail::Node<T>& self) {
            T* gq = qn->requires_grad ? qn->ensure_grad().data() : nullptr;
            T* gk = kn->requires_grad ? kn->ensure_grad().data() : nullptr;
            T* gv = vn->requires_grad ? vn->ensure_grad().data() : nullptr;
            const auto S = static_cast<Eigen::Index>(seq_len);
            const auto Dk = static_cast<Eigen::Index>(dk);
            const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
            Mat dP(S, S);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < num_heads; ++h) {
                    const std::size_t off = b * seq_len * d + h * dk;
                    const Eigen::Map<const Mat> P(probs.data() + (b * num_heads + h) * ss, S, S);
                    const Block dO(self.grad.data() + off, S, Dk, stride);
                    if (gv) MutBlock(gv + off, S, Dk, stride).noalias() += P.transpose() * dO;
                    if (uniform[b] || (!gq && !gk)) continue;
                    dP.noalias() = dO * Block(vn->data.data() + off, S, Dk, stride).transpose();
                    // dS = P * (dP - rowsum(P * dP)), scaled like the forward scores
                    for (Eigen::Index i = 0; i < S; ++i) {
                        T dot = T(0);
                        for (Eigen::Index j = 0; j < S; ++j) dot += P(i, j) * dP(i, j);
                        for (Eigen::Index j = 0; j < S; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
                    }
                    if (gq) MutBlock(gq + off, S, Dk, stride).noalias() += dP * Block(kn->data.data() + off, S, Dk, stride);
                    if (gk)
                        MutBlock(gk + off, S, Dk, stride).noalias() += dP.transpose() * Block(qn->data.data() + off, S, Dk, stride);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over rows of -log softmax(logits)[target]. Accepts [C] or [B, C].
template <class T>
BasicTensor<T> cross_entropy_loss(const BasicTensor<T>& logits, std::span<const std::size_t> targets) {
    if (logits.rank() != 1 && logits.rank() != 2) throw ShapeMismatch("cross_entropy_loss: logits must be [C] or [B,C]");
    const std::size_t rows = logits.rank() == 1 ? 1 : logits.dim(0);
    const std::size_t c = logits.shape().back();
    if (targets.size() != rows) throw ShapeMismatch("cross_entropy_loss: one target per row required");
    std::vector<T> soft(logits.numel());
    T loss = T(0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= c) {
            throw IndexOutOfRange("cross_entropy_loss: target " + std::to_string(targets[r]) + " outside [0," +
                                  std::to_string(c) + ")");
        }
        const T* z = logits.data().data() + r * c;
        T mx = *std::max_element(z, z + c);
        T sum_exp = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            soft[r * c + j] = std::exp(z[j] - mx);
            sum_exp += soft[r * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) soft[r * c + j] /= sum_exp;
        loss += -(z[targets[r]] - mx - std::log(sum_exp));
    }
    loss /= static_cast<T>(rows);
    auto* ln = logits.node();
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    return detail::make_result<T>({1}, {loss}, {logits},
                                  [ln, rows, c, soft = std::move(soft), tgt = std::move(tgt)](detail::Node<T>& self) {
                                      auto& g = ln->ensure_grad();
                                      const T s = self.grad[0] / static_cast<T>(rows);
                                      for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t j = 0; j < c; ++j)
                                              g[r * c + j] += s * (soft[r * c + j] - (j == tgt[r] ? T(1) : T(0)));
                                  });
}

template <class T>
BasicTensor<T> cross_entropy_loss(const BasicTensor<T>& logits, std::size_t target) {
    const std::size_t t[1] = {target};
    return cross_entropy_loss(logits, std::span<const std::size_t>(t, 1));
}

inline constexpr double kBceEpsilon = 1e-7;

/// Mean over all elements of -[t log p + (1 - t) log(1 - p)], p clamped to
/// [eps, 1 - eps]. The gradient is evaluated at the clamped probability.
template <class T>
BasicTensor<T> binary_cross_entropy_loss(const BasicTensor<T>& probs, const BasicTensor<T>& target) {
    detail::require_same_shape(probs, target, "binary_cross_entropy_loss");
    const T eps = static_cast<T>(kBceEpsilon);
    const std::size_t n = probs.numel();
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T p = std::clamp(probs.data()[i], eps, T(1) - eps);
        const T t = target.data()[i];
        loss -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
    }
    loss /= static_cast<T>(n);
    auto* pn = probs.node();
    auto tn = target.node_ptr(); // the target is not a graph input, so the closure owns it
    return detail::make_result<T>({1}, {loss}, {probs}, [pn, tn, n, eps](detail::Node<T>& self) {
        auto& g = pn->ensure_grad();
        const T s = self.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const T p = std::clamp(pn->data[i], eps, T(1) - eps);
            const T t = tn->data[i];
            g[i] += s * (-t / p + (T(1) - t) / (T(1) - p));
        }
    });
}

// ---------------------------------------------------------------------------
// Optimizer

struct SgdConfig {
    double learning_rate = 0.005;
    double weight_decay = 0.0;

    void validate() const {
        if (!(learning_rate >= 0.0)) throw Error("SgdConfig: learning_rate must be non-negative");
        if (!(weight_decay >= 0.0)) throw Error("SgdConfig: weight_decay must be non-negative");
    }
};

/// p <- p - lr * (grad + weight_decay * p), then every gradient is zeroed.
template <class T>
void sgd_step(std::span<BasicTensor<T>> params, const SgdConfig& config) {
    config.validate();
    for (const auto& p : params)
        if (!p.has_grad()) throw MissingGradient("sgd_step: parameter has no gradient");
    const T lr = static_cast<T>(config.learning_rate);
    const T wd = static_cast<T>(config.weight_decay);
    for (auto& p : params) {
        auto w = p.data();
        auto g = p.grad();
        if (lr != T(0)) {
            for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + wd * w[i]);
        }
        p.zero_grad();
    }
}

template <class T>
void sgd_step(std::vector<BasicTensor<T>>& params, const SgdConfig& config) {
    sgd_step(std::span<BasicTensor<T>>(params), config);
}

} // namespace uasparse
