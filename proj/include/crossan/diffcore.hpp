// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors (rank 1 or 2, row-major) with reverse-mode gradients.
//
// Every op returns a fresh node. A node tracks gradients iff at least one of
// its parents does; untracked results drop their parents so inference does not
// retain a graph. Rank-1 tensors behave as a single row wherever an op works
// row-wise (softmax, layer_norm, ...).
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "crossan/error.hpp"
#include "crossan/util.hpp"

namespace crossan {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

struct DiffNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<DiffNode>> parents;
    std::function<void(DiffNode&)> backward_fn;

    std::size_t numel() const { return value.size(); }
    std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    double item() const {
        if (value.size() != 1) throw ContractError("item() on non-scalar node " + shape_str(shape));
        return value[0];
    }
    // Gradient slot of a parent; sized by backward() before any closure runs.
    std::vector<double>& pgrad(std::size_t i) { return parents[i]->grad; }
    bool ptracked(std::size_t i) const { return parents[i]->requires_grad; }
};

using Var = std::shared_ptr<DiffNode>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline CMapMat cmat(const std::vector<double>& v, std::size_t r, std::size_t c) {
    return CMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline RowMat owned(const std::vector<double>& v, std::size_t r, std::size_t c) { return cmat(v, r, c); }
inline MapMat mat(std::vector<double>& v, std::size_t r, std::size_t c) {
    return MapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void check_valid_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 2) throw DimensionError("tensor rank must be 1 or 2, got " + shape_str(shape));
    for (auto d : shape)
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
}

inline Var make(Shape shape, std::vector<double> value, std::vector<Var> parents,
                std::function<void(DiffNode&)> backward_fn, const char* op) {
    if (!all_finite(value)) throw NumericError(std::string("non-finite output from ") + op);
    auto n = std::make_shared<DiffNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p->requires_grad; });
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->shape != b->shape)
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Leaves

inline Var tensor(Shape shape, std::vector<double> value, bool requires_grad = false) {
    detail::check_valid_shape(shape);
    if (shape_numel(shape) != value.size())
        throw DimensionError("tensor: " + std::to_string(value.size()) + " values for shape " + shape_str(shape));
    auto n = std::make_shared<DiffNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

inline Var zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

inline Var scalar(double v, bool requires_grad = false) { return tensor({1}, {v}, requires_grad); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
    const std::size_t m = a->rows(), k = a->cols(), k2 = b->rows(), n = b->cols();
    if (k != k2 || (a->shape.size() == 1 && b->shape.size() == 1))
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a->shape) + " x " + shape_str(b->shape));
    // Eigen picks its summation order from operand addresses, so products run
    // on Eigen-owned copies; std::vector storage has no fixed alignment and
    // the same inputs would otherwise round differently from call to call.
    const detail::RowMat c = detail::owned(a->value, m, k) * detail::owned(b->value, k, n);
    std::vector<double> out(c.data(), c.data() + m * n);
    Shape shape = a->shape.size() == 1 ? Shape{n} : Shape{m, n};
    return detail::make(std::move(shape), std::move(out), {a, b},
                        [m, k, n](DiffNode& self) {
                            const detail::RowMat g = detail::owned(self.grad, m, n);
                            if (self.ptracked(0)) {
                                const detail::RowMat ga = g * detail::owned(self.parents[1]->value, k, n).transpose();
                                detail::mat(self.pgrad(0), m, k) += ga;
                            }
                            if (self.ptracked(1)) {
                                const detail::RowMat gb = detail::owned(self.parents[0]->value, m, k).transpose() * g;
                                detail::mat(self.pgrad(1), k, n) += gb;
                            }
                        },
                        "matmul");
}

inline Var transpose(const Var& a) {
    const std::size_t m = a->rows(), n = a->cols();
    std::vector<double> out(m * n);
    detail::mat(out, n, m) = detail::cmat(a->value, m, n).transpose();
    return detail::make({n, m}, std::move(out), {a},
                        [m, n](DiffNode& self) {
                            detail::mat(self.pgrad(0), m, n) += detail::cmat(self.grad, n, m).transpose();
                        },
                        "transpose");
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    return detail::make(a->shape, std::move(out), {a, b},
                        [](DiffNode& self) {
                            for (std::size_t p = 0; p < 2; ++p)
                                if (self.ptracked(p))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(p)[i] += self.grad[i];
                        },
                        "add");
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
    return detail::make(a->shape, std::move(out), {a, b},
                        [](DiffNode& self) {
                            if (self.ptracked(0))
                                for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(0)[i] += self.grad[i];
                            if (self.ptracked(1))
                                for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(1)[i] -= self.grad[i];
                        },
                        "sub");
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
    return detail::make(a->shape, std::move(out), {a, b},
                        [](DiffNode& self) {
                            const auto& av = self.parents[0]->value;
                            const auto& bv = self.parents[1]->value;
                            if (self.ptracked(0))
                                for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(0)[i] += self.grad[i] * bv[i];
                            if (self.ptracked(1))
                                for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(1)[i] += self.grad[i] * av[i];
                        },
                        "mul");
}

inline Var scale(const Var& a, double c) {
    std::vector<double> out(a->numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * c;
    return detail::make(a->shape, std::move(out), {a},
                        [c](DiffNode& self) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(0)[i] += self.grad[i] * c;
                        },
                        "scale");
}

// x[m x n] + row[n], the row broadcast over every row of x.
inline Var add_row(const Var& x, const Var& row) {
    const std::size_t m = x->rows(), n = x->cols();
    if (row->numel() != n)
        throw DimensionError("add_row: bias " + shape_str(row->shape) + " does not match " + shape_str(x->shape));
    std::vector<double> out(x->value);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] += row->value[c];
    return detail::make(x->shape, std::move(out), {x, row},
                        [m, n](DiffNode& self) {
                            if (self.ptracked(0))
                                for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(0)[i] += self.grad[i];
                            if (self.ptracked(1)) {
                                auto& gb = self.pgrad(1);
                                for (std::size_t r = 0; r < m; ++r)
                                    for (std::size_t c = 0; c < n; ++c) gb[c] += self.grad[r * n + c];
                            }
                        },
                        "add_row");
}

// Exact-erf GELU: x * Phi(x).
inline Var gelu(const Var& x) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    std::vector<double> out(x->numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x->value[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    return detail::make(x->shape, std::move(out), {x},
                        [](DiffNode& self) {
                            constexpr double kInvSqrt2Pi = 0.39894228040143267794;
                            const auto& xv = self.parents[0]->value;
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                const double v = xv[i];
                                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                                self.pgrad(0)[i] += self.grad[i] * (cdf + v * pdf);
                            }
                        },
                        "gelu");
}

// Inverted dropout; identity when not training or p == 0.
inline Var dropout(const Var& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw DomainError("dropout probability must be < 1");
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x->numel());
    std::vector<double> out(x->numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
        out[i] = x->value[i] * mask[i];
    }
    return detail::make(x->shape, std::move(out), {x},
                        [mask = std::move(mask)](DiffNode& self) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(0)[i] += self.grad[i] * mask[i];
                        },
                        "dropout");
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x->value) s += v;
    return detail::make({1}, {s}, {x},
                        [](DiffNode& self) {
                            for (auto& g : self.pgrad(0)) g += self.grad[0];
                        },
                        "sum");
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x->numel())); }

// ---------------------------------------------------------------------------
// Row-wise normalizations

// Row-wise softmax of x / temperature with subtract-max stabilization.
inline Var softmax(const Var& x, double temperature = 1.0) {
    if (!(temperature > 0.0)) throw DomainError("softmax temperature must be positive");
    const std::size_t m = x->rows(), n = x->cols();
    std::vector<double> out(x->numel());
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = x->value.data() + r * n;
        double* o = out.data() + r * n;
        const double mx = *std::max_element(in, in + n);
        double z = 0.0;
        for (std::size_t c = 0; c < n; ++c) z += (o[c] = std::exp((in[c] - mx) / temperature));
        for (std::size_t c = 0; c < n; ++c) o[c] /= z;
    }
    return detail::make(x->shape, std::move(out), {x},
                        [m, n, temperature](DiffNode& self) {
                            for (std::size_t r = 0; r < m; ++r) {
                                const double* y = self.value.data() + r * n;
                                const double* gy = self.grad.data() + r * n;
                                double dot = 0.0;
                                for (std::size_t c = 0; c < n; ++c) dot += gy[c] * y[c];
                                double* gx = self.pgrad(0).data() + r * n;
                                for (std::size_t c = 0; c < n; ++c) gx[c] += y[c] * (gy[c] - dot) / temperature;
                            }
                        },
                        "softmax");
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const std::size_t m = x->rows(), n = x->cols();
    if (gamma->numel() != n || beta->numel() != n)
        throw DimensionError("layer_norm: affine params must have " + std::to_string(n) + " entries");
    std::vector<double> xhat(x->numel());
    std::vector<double> inv_std(m);
    std::vector<double> out(x->numel());
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = x->value.data() + r * n;
        double mu = 0.0;
        for (std::size_t c = 0; c < n; ++c) mu += in[c];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= static_cast<double>(n);
        if (var + eps <= 0.0) throw DomainError("layer_norm: division by zero (zero variance with eps = 0)");
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            xhat[r * n + c] = (in[c] - mu) * inv_std[r];
            out[r * n + c] = gamma->value[c] * xhat[r * n + c] + beta->value[c];
        }
    }
    return detail::make(x->shape, std::move(out), {x, gamma, beta},
                        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](DiffNode& self) {
                            const auto& g = self.parents[1]->value;
                            for (std::size_t r = 0; r < m; ++r) {
                                const double* gy = self.grad.data() + r * n;
                                const double* xh = xhat.data() + r * n;
                                if (self.ptracked(1))
                                    for (std::size_t c = 0; c < n; ++c) self.pgrad(1)[c] += gy[c] * xh[c];
                                if (self.ptracked(2))
                                    for (std::size_t c = 0; c < n; ++c) self.pgrad(2)[c] += gy[c];
                                if (self.ptracked(0)) {
                                    double s1 = 0.0, s2 = 0.0;
                                    for (std::size_t c = 0; c < n; ++c) {
                                        const double d = gy[c] * g[c];
                                        s1 += d;
                                        s2 += d * xh[c];
                                    }
                                    const double k = inv_std[r] / static_cast<double>(n);
                                    double* gx = self.pgrad(0).data() + r * n;
                                    for (std::size_t c = 0; c < n; ++c)
                                        gx[c] += k * (static_cast<double>(n) * gy[c] * g[c] - s1 - xh[c] * s2);
                                }
                            }
                        },
                        "layer_norm");
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts[0]->rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p->rows() != m) throw DimensionError("concat_cols: row count mismatch " + shape_str(parts[0]->shape) + " vs " + shape_str(p->shape));
        widths.push_back(p->cols());
        total += p->cols();
    }
    std::vector<double> out(m * total);
    for (std::size_t r = 0; r < m; ++r) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            std::copy_n(parts[i]->value.data() + r * widths[i], widths[i], out.data() + r * total + off);
            off += widths[i];
        }
    }
    Shape shape = parts[0]->shape.size() == 1 ? Shape{total} : Shape{m, total};
    return detail::make(std::move(shape), std::move(out), parts,
                        [m, total, widths](DiffNode& self) {
                            std::size_t off = 0;
                            for (std::size_t i = 0; i < widths.size(); ++i) {
                                if (self.ptracked(i)) {
                                    auto& g = self.pgrad(i);
                                    for (std::size_t r = 0; r < m; ++r)
                                        for (std::size_t c = 0; c < widths[i]; ++c) g[r * widths[i] + c] += self.grad[r * total + off + c];
                                }
                                off += widths[i];
                            }
                        },
                        "concat_cols");
}

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
    const std::size_t m = x->rows(), n = x->cols();
    if (begin >= end || end > n)
        throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " + shape_str(x->shape));
    const std::size_t w = end - begin;
    std::vector<double> out(m * w);
    for (std::size_t r = 0; r < m; ++r) std::copy_n(x->value.data() + r * n + begin, w, out.data() + r * w);
    Shape shape = x->shape.size() == 1 ? Shape{w} : Shape{m, w};
    return detail::make(std::move(shape), std::move(out), {x},
                        [m, n, w, begin](DiffNode& self) {
                            for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t c = 0; c < w; ++c) self.pgrad(0)[r * n + begin + c] += self.grad[r * w + c];
                        },
                        "slice_cols");
}

// Rows of x picked by index; index -1 yields a zero row (padding).
inline Var gather_rows(const Var& x, std::span<const long> index) {
    const std::size_t m = x->rows(), n = x->cols();
    if (index.empty()) throw DimensionError("gather_rows: empty index");
    std::vector<long> idx(index.begin(), index.end());
    std::vector<double> out(idx.size() * n, 0.0);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0) continue;
        if (static_cast<std::size_t>(idx[r]) >= m)
            throw RangeError("gather_rows: index " + std::to_string(idx[r]) + " out of " + std::to_string(m) + " rows");
        std::copy_n(x->value.data() + static_cast<std::size_t>(idx[r]) * n, n, out.data() + r * n);
    }
    const std::size_t rows = idx.size();
    return detail::make({rows, n}, std::move(out), {x},
                        [n, idx = std::move(idx)](DiffNode& self) {
                            for (std::size_t r = 0; r < idx.size(); ++r) {
                                if (idx[r] < 0) continue;
                                double* g = self.pgrad(0).data() + static_cast<std::size_t>(idx[r]) * n;
                                for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
                            }
                        },
                        "gather_rows");
}

inline Var reshape(const Var& x, Shape shape) {
    detail::check_valid_shape(shape);
    if (shape_numel(shape) != x->numel())
        throw DimensionError("reshape: " + shape_str(x->shape) + " -> " + shape_str(shape));
    return detail::make(std::move(shape), x->value, {x},
                        [](DiffNode& self) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(0)[i] += self.grad[i];
                        },
                        "reshape");
}

// ---------------------------------------------------------------------------
// Mixtures

// sum_j w[j] * xs[j], with one scalar weight per input (w has xs.size() entries).
inline Var weighted_sum(const std::vector<Var>& xs, const Var& w) {
    if (xs.empty() || w->numel() != xs.size())
        throw DimensionError("weighted_sum: " + std::to_string(xs.size()) + " inputs but weights " + shape_str(w->shape));
    for (const auto& x : xs) detail::require_same_shape(xs[0], x, "weighted_sum");
    std::vector<double> out(xs[0]->numel(), 0.0);
    for (std::size_t j = 0; j < xs.size(); ++j)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += w->value[j] * xs[j]->value[i];
    std::vector<Var> parents(xs);
    parents.push_back(w);
    const std::size_t J = xs.size();
    return detail::make(xs[0]->shape, std::move(out), std::move(parents),
                        [J](DiffNode& self) {
                            const auto& wv = self.parents[J]->value;
                            for (std::size_t j = 0; j < J; ++j) {
                                const auto& xv = self.parents[j]->value;
                                if (self.ptracked(j))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) self.pgrad(j)[i] += wv[j] * self.grad[i];
                                if (self.ptracked(J)) {
                                    double d = 0.0;
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) d += self.grad[i] * xv[i];
                                    self.pgrad(J)[j] += d;
                                }
                            }
                        },
                        "weighted_sum");
}

// Per-row mixture: out[r] = sum_j W[r, j] * xs[j][r]. Terms with an exactly zero
// weight are skipped, so inputs under a zero weight cannot affect the output.
inline Var row_weighted_sum(const std::vector<Var>& xs, const Var& W) {
    if (xs.empty()) throw DimensionError("row_weighted_sum: no inputs");
    for (const auto& x : xs) detail::require_same_shape(xs[0], x, "row_weighted_sum");
    const std::size_t m = xs[0]->rows(), n = xs[0]->cols(), J = xs.size();
    if (W->rows() != m || W->cols() != J)
        throw DimensionError("row_weighted_sum: weights " + shape_str(W->shape) + " for " + std::to_string(J) + " inputs of " + shape_str(xs[0]->shape));
    std::vector<double> out(m * n, 0.0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < J; ++j) {
            const double w = W->value[r * J + j];
            if (w == 0.0) continue;
            const double* x = xs[j]->value.data() + r * n;
            for (std::size_t c = 0; c < n; ++c) out[r * n + c] += w * x[c];
        }
    std::vector<Var> parents(xs);
    parents.push_back(W);
    return detail::make(xs[0]->shape, std::move(out), std::move(parents),
                        [m, n, J](DiffNode& self) {
                            const auto& wv = self.parents[J]->value;
                            for (std::size_t r = 0; r < m; ++r)
                                for (std::size_t j = 0; j < J; ++j) {
                                    const double* gy = self.grad.data() + r * n;
                                    if (self.ptracked(j)) {
                                        double* gx = self.pgrad(j).data() + r * n;
                                        for (std::size_t c = 0; c < n; ++c) gx[c] += wv[r * J + j] * gy[c];
                                    }
                                    if (self.ptracked(J)) {
                                        const double* x = self.parents[j]->value.data() + r * n;
                                        double d = 0.0;
                                        for (std::size_t c = 0; c < n; ++c) d += gy[c] * x[c];
                                        self.pgrad(J)[r * J + j] += d;
                                    }
                                }
                        },
                        "row_weighted_sum");
}

struct TopK {
    Var weights;                               // [m x J], zero outside the selection
    std::vector<std::vector<std::size_t>> selected;  // per row, in descending score order
};

// Keeps the listed columns of each row and rescales them to sum to one.
// Gradients pass only through the kept entries.
inline Var renormalize_selection(const Var& scores, const std::vector<std::vector<std::size_t>>& selected) {
    const std::size_t m = scores->rows(), J = scores->cols();
    if (selected.size() != m) throw DimensionError("renormalize_selection: selection rows do not match scores " + shape_str(scores->shape));
    std::vector<double> out(m * J, 0.0);
    std::vector<double> sums(m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const double* s = scores->value.data() + r * J;
        double total = 0.0;
        for (auto j : selected[r]) {
            if (j >= J) throw RangeError("renormalize_selection: column " + std::to_string(j) + " out of " + std::to_string(J));
            total += s[j];
        }
        if (!(total > 0.0)) throw NumericError("top-k: selected scores sum to a non-positive value");
        for (auto j : selected[r]) out[r * J + j] = s[j] / total;
        sums[r] = total;
    }
    return detail::make(scores->shape, std::move(out), {scores},
                        [J, sel = selected, sums = std::move(sums)](DiffNode& self) {
                            for (std::size_t r = 0; r < sel.size(); ++r) {
                                double dot = 0.0;
                                for (auto j : sel[r]) dot += self.grad[r * J + j] * self.value[r * J + j];
                                for (auto j : sel[r]) self.pgrad(0)[r * J + j] += (self.grad[r * J + j] - dot) / sums[r];
                            }
                        },
                        "renormalize_selection");
}

// Row-wise hard top-k with renormalization of the selected scores. Ties go to
// the lower column index.
inline TopK topk_renormalize(const Var& scores, std::size_t k) {
    const std::size_t m = scores->rows(), J = scores->cols();
    if (k < 1 || k > J) throw RangeError("top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(J) + "]");
    TopK result;
    result.selected.resize(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* s = scores->value.data() + r * J;
        std::vector<std::size_t> order(J);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [s](std::size_t a, std::size_t b) { return s[a] > s[b]; });
        order.resize(k);
        result.selected[r] = std::move(order);
    }
    result.weights = renormalize_selection(scores, result.selected);
    return result;
}

// ---------------------------------------------------------------------------
// Attention and loss kernels

// Causal multi-head self-attention over `num_seqs` stacked sequences of
// `seq_len` rows each. q, k, v are [num_seqs*seq_len x d]; heads split the
// columns. Position t attends to positions s <= t whose key_valid flag is set;
// a query with no admissible key outputs a zero row.
inline Var causal_attention(const Var& q, const Var& k, const Var& v, std::size_t seq_len, std::size_t num_heads,
                            std::span<const std::uint8_t> key_valid) {
    detail::require_same_shape(q, k, "causal_attention");
    detail::require_same_shape(q, v, "causal_attention");
    const std::size_t N = q->rows(), d = q->cols();
    if (seq_len == 0 || N % seq_len != 0) throw DimensionError("causal_attention: rows not a multiple of seq_len");
    if (num_heads == 0 || d % num_heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
    if (key_valid.size() != N) throw DimensionError("causal_attention: key mask length mismatch");
    const std::size_t B = N / seq_len, L = seq_len, dh = d / num_heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> probs(B * num_heads * L * L, 0.0);
    std::vector<double> out(N * d, 0.0);
    std::vector<std::uint8_t> valid(key_valid.begin(), key_valid.end());
    const auto& Q = q->value;
    const auto& K = k->value;
    const auto& V = v->value;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < num_heads; ++h) {
            double* P = probs.data() + (b * num_heads + h) * L * L;
            for (std::size_t t = 0; t < L; ++t) {
                const double* qt = Q.data() + (b * L + t) * d + h * dh;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    if (!valid[b * L + s]) continue;
                    const double* ks = K.data() + (b * L + s) * d + h * dh;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) dot += qt[c] * ks[c];
                    P[t * L + s] = dot * sc;
                    mx = std::max(mx, P[t * L + s]);
                }
                if (mx == -std::numeric_limits<double>::infinity()) continue;
                double z = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    if (!valid[b * L + s]) continue;
                    z += (P[t * L + s] = std::exp(P[t * L + s] - mx));
                }
                double* ot = out.data() + (b * L + t) * d + h * dh;
                for (std::size_t s = 0; s <= t; ++s) {
                    if (!valid[b * L + s]) continue;
                    P[t * L + s] /= z;
                    const double* vs = V.data() + (b * L + s) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) ot[c] += P[t * L + s] * vs[c];
                }
            }
        }
    return detail::make(q->shape, std::move(out), {q, k, v},
                        [B, L, d, dh, num_heads, sc, probs = std::move(probs), valid = std::move(valid)](DiffNode& self) {
                            const auto& Q = self.parents[0]->value;
                            const auto& K = self.parents[1]->value;
                            const auto& V = self.parents[2]->value;
                            std::vector<double> dQ(Q.size(), 0.0), dK(K.size(), 0.0), dV(V.size(), 0.0);
                            std::vector<double> dp(L);
                            for (std::size_t b = 0; b < B; ++b)
                                for (std::size_t h = 0; h < num_heads; ++h) {
                                    const double* P = probs.data() + (b * num_heads + h) * L * L;
                                    for (std::size_t t = 0; t < L; ++t) {
                                        const double* go = self.grad.data() + (b * L + t) * d + h * dh;
                                        double dot = 0.0;
                                        for (std::size_t s = 0; s <= t; ++s) {
                                            dp[s] = 0.0;
                                            if (!valid[b * L + s] || P[t * L + s] == 0.0) continue;
                                            const double* vs = V.data() + (b * L + s) * d + h * dh;
                                            double* gv = dV.data() + (b * L + s) * d + h * dh;
                                            for (std::size_t c = 0; c < dh; ++c) {
                                                dp[s] += go[c] * vs[c];
                                                gv[c] += P[t * L + s] * go[c];
                                            }
                                            dot += dp[s] * P[t * L + s];
                                        }
                                        const double* qt = Q.data() + (b * L + t) * d + h * dh;
                                        double* gq = dQ.data() + (b * L + t) * d + h * dh;
                                        for (std::size_t s = 0; s <= t; ++s) {
                                            if (!valid[b * L + s] || P[t * L + s] == 0.0) continue;
                                            const double ds = P[t * L + s] * (dp[s] - dot) * sc;
                                            const double* ks = K.data() + (b * L + s) * d + h * dh;
                                            double* gk = dK.data() + (b * L + s) * d + h * dh;
                                            for (std::size_t c = 0; c < dh; ++c) {
                                                gq[c] += ds * ks[c];
                                                gk[c] += ds * qt[c];
                                            }
                                        }
                                    }
                                }
                            const std::vector<double>* grads[3] = {&dQ, &dK, &dV};
                            for (std::size_t p = 0; p < 3; ++p)
                                if (self.ptracked(p))
                                    for (std::size_t i = 0; i < grads[p]->size(); ++i) self.pgrad(p)[i] += (*grads[p])[i];
                        },
                        "causal_attention");
}

// Mean over rows of -log softmax restricted to admitted columns, evaluated at
// the row's target column. mask[r*C + c] != 0 admits column c for row r; the
// target column must be admitted.
inline Var masked_softmax_xent(const Var& logits, std::span<const std::uint8_t> mask, std::span<const std::size_t> targets) {
    const std::size_t P = logits->rows(), C = logits->cols();
    if (P == 0 || targets.size() != P || mask.size() != P * C)
        throw DimensionError("masked_softmax_xent: inconsistent logits/mask/targets sizes");
    std::vector<double> probs(P * C, 0.0);
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    double total = 0.0;
    for (std::size_t r = 0; r < P; ++r) {
        if (tgt[r] >= C || !m[r * C + tgt[r]]) throw ContractError("masked_softmax_xent: target column not admitted");
        const double* x = logits->value.data() + r * C;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < C; ++c)
            if (m[r * C + c]) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c)
            if (m[r * C + c]) z += (probs[r * C + c] = std::exp(x[c] - mx));
        for (std::size_t c = 0; c < C; ++c) probs[r * C + c] /= z;
        total += -(x[tgt[r]] - mx - std::log(z));
    }
    const double inv_p = 1.0 / static_cast<double>(P);
    return detail::make({1}, {total * inv_p}, {logits},
                        [P, C, inv_p, probs = std::move(probs), tgt = std::move(tgt)](DiffNode& self) {
                            const double g = self.grad[0] * inv_p;
                            auto& gx = self.pgrad(0);
                            for (std::size_t r = 0; r < P; ++r) {
                                for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g * probs[r * C + c];
                                gx[r * C + tgt[r]] -= g;
                            }
                        },
                        "masked_softmax_xent");
}

// ---------------------------------------------------------------------------
// Backward pass

inline void backward(const Var& loss) {
    if (!loss || loss->numel() != 1) throw ContractError("backward: loss must be a scalar, got " + (loss ? shape_str(loss->shape) : std::string("null")));
    if (!loss->requires_grad) return;
    // Iterative post-order DFS gives a deterministic topological order.
    std::vector<DiffNode*> order;
    std::unordered_set<DiffNode*> seen;
    std::vector<std::pair<DiffNode*, std::size_t>> stack{{loss.get(), 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            DiffNode* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto* n : order) n->grad.assign(n->numel(), 0.0);
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// Max over every entry of every input of |analytic - central difference| /
// max(1, |central difference|). `f` must rebuild its graph from the current
// values of `inputs` on every call and return a scalar.
inline double finite_diff_check(const std::function<Var()>& f, const std::vector<Var>& inputs, double h = 1e-5) {
    for (const auto& in : inputs) {
        in->requires_grad = true;
        in->grad.clear();
    }
    Var out = f();
    backward(out);
    std::vector<std::vector<double>> analytic;
    for (const auto& in : inputs) {
        if (in->grad.size() != in->numel()) analytic.emplace_back(in->numel(), 0.0);
        else analytic.push_back(in->grad);
    }
    double worst = 0.0;
    for (std::size_t p = 0; p < inputs.size(); ++p) {
        auto& vals = inputs[p]->value;
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double up = f()->item();
            vals[i] = orig - h;
            const double down = f()->item();
            vals[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(analytic[p][i] - numeric) / std::max(1.0, std::abs(numeric)));
        }
    }
    return worst;
}

// Single-input convenience form: `f` builds a scalar from a leaf holding `x`.
inline double finite_diff_check(const std::function<Var(const Var&)>& f, const Shape& shape, std::vector<double> x, double h = 1e-5) {
    Var leaf = tensor(shape, std::move(x), true);
    return finite_diff_check([&] { return f(leaf); }, std::vector<Var>{leaf}, h);
}

}  // namespace crossan
