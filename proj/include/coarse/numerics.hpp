#pragma once

// Dense f64 tensors and a define-by-run reverse-mode graph, sized for a small
// transformer encoder. Matrices are row-major; a 2-D tensor is [rows x cols].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace coarse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (numel(shape_) != values_.size()) {
            throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " +
                             std::to_string(values_.size()) + " values");
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return values_.size(); }
    std::size_t rows() const { return shape_.size() >= 2 ? values_.size() / shape_.back() : 1; }
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

    bool has_grad() const noexcept { return !grad_.empty() || values_.empty(); }
    std::span<double> grad() {
        if (grad_.size() != values_.size()) grad_.assign(values_.size(), 0.0);
        return grad_;
    }
    std::span<const double> grad() const noexcept { return grad_; }
    void clear_grad() noexcept { grad_.clear(); }

    bool all_finite() const {
        return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    Shape shape_;
    std::vector<double> values_;
    std::vector<double> grad_;
};

/// Handle to a node of a Graph.
struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

inline constexpr int kIgnoreIndex = -1;
inline constexpr double kGeluCoeff = 0.044715;

inline double gelu_value(double x) {
    const double c = std::sqrt(2.0 / M_PI);
    return 0.5 * x * (1.0 + std::tanh(c * (x + kGeluCoeff * x * x * x)));
}

/// Records operations as they execute; backward() walks the record in
/// reverse. One graph per forward pass. Not thread-safe; independent graphs
/// over shared const weights may run concurrently.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves -------------------------------------------------------

    /// Leaf holding a copy of `t`. With requires_grad false no gradient is
    /// propagated into it or through ops that only depend on constants.
    Var constant(Tensor t, bool requires_grad = true) {
        Node n;
        n.shape = t.shape();
        n.value.assign(t.values().begin(), t.values().end());
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    /// Leaf bound to an external tensor (a model parameter). The tensor is
    /// read in place and must outlive the graph. Repeated calls with the
    /// same tensor return the same node so shared uses accumulate.
    Var leaf(const Tensor& t) {
        if (auto it = leaves_.find(&t); it != leaves_.end()) return it->second;
        Node n;
        n.shape = t.shape();
        n.external = t.values().data();
        n.external_size = t.size();
        Var v = push(std::move(n));
        leaves_.emplace(&t, v);
        return v;
    }

    // ---- accessors ----------------------------------------------------

    const Shape& shape(Var v) const { return node(v).shape; }
    std::span<const double> value(Var v) const {
        const Node& n = node(v);
        if (n.external) return {n.external, n.external_size};
        return n.value;
    }
    double scalar(Var v) const {
        auto s = value(v);
        if (s.size() != 1) throw ShapeError("scalar() on tensor " + shape_str(shape(v)));
        return s[0];
    }
    Tensor tensor(Var v) const {
        auto s = value(v);
        return Tensor(shape(v), std::vector<double>(s.begin(), s.end()));
    }
    /// Gradient of the last backward() w.r.t. v; empty if v was unreached.
    std::span<const double> grad(Var v) const { return node(v).grad; }

    /// Gradient w.r.t. a parameter tensor bound via leaf(); empty if the
    /// tensor was not used or not reached.
    std::span<const double> grad_of(const Tensor& t) const {
        auto it = leaves_.find(&t);
        if (it == leaves_.end()) return {};
        return node(it->second).grad;
    }

    /// Adds this graph's gradient for `t` into t.grad(). Returns false if
    /// the graph produced no gradient for it.
    bool accumulate_into(Tensor& t) const {
        auto g = grad_of(t);
        if (g.empty()) return false;
        auto dst = t.grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        return true;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    void reset() {
        nodes_.clear();
        leaves_.clear();
        backward_done_ = false;
    }

    // ---- operations ---------------------------------------------------

    /// [m x k] x [k x n] -> [m x n]
    Var matmul(Var a, Var b) {
        const auto [m, k] = dims2(a);
        const auto [k2, n] = dims2(b);
        if (k != k2) {
            throw ShapeError("matmul inner dimensions differ: " + shape_str(shape(a)) + " x " +
                             shape_str(shape(b)));
        }
        Node out;
        out.shape = {m, n};
        out.value.assign(m * n, 0.0);
        gemm_nn(value(a).data(), value(b).data(), out.value.data(), m, k, n);
        out.inputs = {a, b};
        out.backward = [m, k, n](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            Var a = o.inputs[0], b = o.inputs[1];
            if (g.wants_grad(a)) {
                // dA += dC * B^T
                gemm_nt(o.grad.data(), g.value(b).data(), g.grad_buffer(a).data(), m, n, k);
            }
            if (g.wants_grad(b)) {
                // dB += A^T * dC
                gemm_tn(g.value(a).data(), o.grad.data(), g.grad_buffer(b).data(), m, k, n);
            }
        };
        return push(std::move(out));
    }

    /// [m x k] x [n x k]^T -> [m x n]
    Var matmul_nt(Var a, Var b) {
        const auto [m, k] = dims2(a);
        const auto [n, k2] = dims2(b);
        if (k != k2) {
            throw ShapeError("matmul_nt inner dimensions differ: " + shape_str(shape(a)) + " x " +
                             shape_str(shape(b)) + "^T");
        }
        Node out;
        out.shape = {m, n};
        out.value.assign(m * n, 0.0);
        gemm_nt(value(a).data(), value(b).data(), out.value.data(), m, k, n);
        out.inputs = {a, b};
        out.backward = [m, k, n](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            Var a = o.inputs[0], b = o.inputs[1];
            if (g.wants_grad(a)) {
                // dA += dC * B
                gemm_nn(o.grad.data(), g.value(b).data(), g.grad_buffer(a).data(), m, n, k);
            }
            if (g.wants_grad(b)) {
                // dB += dC^T * A
                gemm_tn(o.grad.data(), g.value(a).data(), g.grad_buffer(b).data(), m, n, k);
            }
        };
        return push(std::move(out));
    }

    /// Elementwise a + b. b may match a's trailing dimensions, in which case
    /// it is broadcast along a's leading dimensions (bias rows).
    Var add(Var a, Var b) { return binary(a, b, false); }

    /// Elementwise a * b with the same broadcasting rule as add().
    Var mul(Var a, Var b) { return binary(a, b, true); }

    Var scale(Var a, double c) {
        Node out;
        out.shape = shape(a);
        auto av = value(a);
        out.value.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out.value[i] = av[i] * c;
        out.inputs = {a};
        out.backward = [c](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            auto ga = g.grad_buffer(o.inputs[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * c;
        };
        return push(std::move(out));
    }

    Var gelu(Var a) {
        Node out;
        out.shape = shape(a);
        auto av = value(a);
        out.value.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out.value[i] = gelu_value(av[i]);
        out.inputs = {a};
        out.backward = [](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            Var a = o.inputs[0];
            if (!g.wants_grad(a)) return;
            const double c = std::sqrt(2.0 / M_PI);
            auto x = g.value(a);
            auto ga = g.grad_buffer(a);
            for (std::size_t i = 0; i < ga.size(); ++i) {
                const double xi = x[i];
                const double th = std::tanh(c * (xi + kGeluCoeff * xi * xi * xi));
                const double d = 0.5 * (1.0 + th) +
                                 0.5 * xi * (1.0 - th * th) * c * (1.0 + 3.0 * kGeluCoeff * xi * xi);
                ga[i] += o.grad[i] * d;
            }
        };
        return push(std::move(out));
    }

    Var tanh(Var a) {
        Node out;
        out.shape = shape(a);
        auto av = value(a);
        out.value.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out.value[i] = std::tanh(av[i]);
        out.inputs = {a};
        out.backward = [](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            auto ga = g.grad_buffer(o.inputs[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * (1.0 - o.value[i] * o.value[i]);
        };
        return push(std::move(out));
    }

    /// Sum of all elements -> scalar.
    Var sum(Var a) {
        Node out;
        out.shape = {};
        auto av = value(a);
        out.value = {std::accumulate(av.begin(), av.end(), 0.0)};
        out.inputs = {a};
        out.backward = [](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            for (double& x : g.grad_buffer(o.inputs[0])) x += o.grad[0];
        };
        return push(std::move(out));
    }

    /// Row-wise normalization over the last dimension followed by gain/bias.
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12) {
        const std::size_t h = shape(x).empty() ? 0 : shape(x).back();
        if (h == 0) throw ShapeError("layer_norm over an empty last dimension");
        if (numel(shape(gain)) != h || numel(shape(bias)) != h) {
            throw ShapeError("layer_norm gain/bias must have " + std::to_string(h) + " elements");
        }
        const std::size_t rows = numel(shape(x)) / h;
        auto xv = value(x);
        auto gv = value(gain);
        auto bv = value(bias);
        Node out;
        out.shape = shape(x);
        out.value.resize(xv.size());
        std::vector<double> xhat(xv.size());
        std::vector<double> inv_std(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* row = xv.data() + r * h;
            double mean = 0.0;
            for (std::size_t j = 0; j < h; ++j) mean += row[j];
            mean /= static_cast<double>(h);
            double var = 0.0;
            for (std::size_t j = 0; j < h; ++j) var += (row[j] - mean) * (row[j] - mean);
            var /= static_cast<double>(h);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[r] = is;
            for (std::size_t j = 0; j < h; ++j) {
                const double xh = (row[j] - mean) * is;
                xhat[r * h + j] = xh;
                out.value[r * h + j] = xh * gv[j] + bv[j];
            }
        }
        out.inputs = {x, gain, bias};
        out.backward = [h, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g,
                                                                                       std::size_t self) {
            const Node& o = g.nodes_[self];
            Var x = o.inputs[0], gain = o.inputs[1], bias = o.inputs[2];
            auto gv = g.value(gain);
            if (g.wants_grad(gain)) {
                auto gg = g.grad_buffer(gain);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < h; ++j) gg[j] += o.grad[r * h + j] * xhat[r * h + j];
            }
            if (g.wants_grad(bias)) {
                auto gb = g.grad_buffer(bias);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < h; ++j) gb[j] += o.grad[r * h + j];
            }
            if (g.wants_grad(x)) {
                auto gx = g.grad_buffer(x);
                const double inv_h = 1.0 / static_cast<double>(h);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < h; ++j) {
                        const double d = o.grad[r * h + j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * h + j];
                    }
                    mean_d *= inv_h;
                    mean_dx *= inv_h;
                    for (std::size_t j = 0; j < h; ++j) {
                        const double d = o.grad[r * h + j] * gv[j];
                        gx[r * h + j] += inv_std[r] * (d - mean_d - xhat[r * h + j] * mean_dx);
                    }
                }
            }
        };
        return push(std::move(out));
    }

    /// Softmax over each row of a 2-D tensor. If `column_mask` is given
    /// (one entry per column), columns with mask 0 receive probability 0.
    Var softmax_rows(Var x, std::span<const std::uint8_t> column_mask = {}) {
        const auto [rows, cols] = dims2(x);
        if (!column_mask.empty() && column_mask.size() != cols) {
            throw ShapeError("softmax mask length differs from row width");
        }
        auto xv = value(x);
        Node out;
        out.shape = {rows, cols};
        out.value.assign(rows * cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in = xv.data() + r * cols;
            double* p = out.value.data() + r * cols;
            double mx = -INFINITY;
            for (std::size_t c = 0; c < cols; ++c)
                if (column_mask.empty() || column_mask[c]) mx = std::max(mx, in[c]);
            if (!std::isfinite(mx)) continue;  // fully masked row stays zero
            double z = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                if (column_mask.empty() || column_mask[c]) {
                    p[c] = std::exp(in[c] - mx);
                    z += p[c];
                }
            }
            for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
        }
        out.inputs = {x};
        out.backward = [rows, cols](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            auto gx = g.grad_buffer(o.inputs[0]);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* p = o.value.data() + r * cols;
                const double* dy = o.grad.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * p[c];
                for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += p[c] * (dy[c] - dot);
            }
        };
        return push(std::move(out));
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` [n x V]. Rows whose target is kIgnoreIndex are excluded.
    Var softmax_cross_entropy(Var logits, std::span<const int> targets) {
        const auto [rows, cols] = dims2(logits);
        if (targets.size() != rows) throw ShapeError("one target per logits row required");
        std::size_t counted = 0;
        for (int t : targets) {
            if (t == kIgnoreIndex) continue;
            if (t < 0 || static_cast<std::size_t>(t) >= cols) {
                throw ShapeError("target index " + std::to_string(t) + " outside [0, " +
                                 std::to_string(cols) + ")");
            }
            ++counted;
        }
        if (counted == 0) throw NumericError("cross-entropy over zero non-ignored rows is undefined");
        auto lv = value(logits);
        std::vector<double> probs(rows * cols, 0.0);
        double total = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            if (targets[r] == kIgnoreIndex) continue;
            const double* in = lv.data() + r * cols;
            double* p = probs.data() + r * cols;
            const double mx = *std::max_element(in, in + cols);
            double z = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                p[c] = std::exp(in[c] - mx);
                z += p[c];
            }
            for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
            total += std::log(z) - (in[targets[r]] - mx);
        }
        const double loss = total / static_cast<double>(counted);
        if (!std::isfinite(loss)) throw NumericError("non-finite cross-entropy loss");
        Node out;
        out.shape = {};
        out.value = {loss};
        out.inputs = {logits};
        std::vector<int> tcopy(targets.begin(), targets.end());
        out.backward = [rows, cols, counted, probs = std::move(probs), tcopy = std::move(tcopy)](
                           Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            auto gl = g.grad_buffer(o.inputs[0]);
            const double s = o.grad[0] / static_cast<double>(counted);
            for (std::size_t r = 0; r < rows; ++r) {
                if (tcopy[r] == kIgnoreIndex) continue;
                for (std::size_t c = 0; c < cols; ++c) gl[r * cols + c] += s * probs[r * cols + c];
                gl[r * cols + static_cast<std::size_t>(tcopy[r])] -= s;
            }
        };
        return push(std::move(out));
    }

    /// Rows of a 2-D tensor picked by index (embedding lookup, row select).
    Var gather_rows(Var table, std::span<const int> indices) {
        const auto [rows, cols] = dims2(table);
        auto tv = value(table);
        Node out;
        out.shape = {indices.size(), cols};
        out.value.resize(indices.size() * cols);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const int r = indices[i];
            if (r < 0 || static_cast<std::size_t>(r) >= rows) {
                throw ShapeError("row index " + std::to_string(r) + " outside [0, " + std::to_string(rows) + ")");
            }
            std::copy_n(tv.data() + static_cast<std::size_t>(r) * cols, cols, out.value.data() + i * cols);
        }
        out.inputs = {table};
        std::vector<int> idx(indices.begin(), indices.end());
        out.backward = [cols, idx = std::move(idx)](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            auto gt = g.grad_buffer(o.inputs[0]);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                double* dst = gt.data() + static_cast<std::size_t>(idx[i]) * cols;
                const double* src = o.grad.data() + i * cols;
                for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
            }
        };
        return push(std::move(out));
    }

    /// Columns [start, start + width) of a 2-D tensor.
    Var slice_cols(Var x, std::size_t start, std::size_t width) {
        const auto [rows, cols] = dims2(x);
        if (start + width > cols) throw ShapeError("column slice out of range");
        auto xv = value(x);
        Node out;
        out.shape = {rows, width};
        out.value.resize(rows * width);
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(xv.data() + r * cols + start, width, out.value.data() + r * width);
        out.inputs = {x};
        out.backward = [rows, cols, start, width](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            auto gx = g.grad_buffer(o.inputs[0]);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < width; ++c) gx[r * cols + start + c] += o.grad[r * width + c];
        };
        return push(std::move(out));
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    Var concat_cols(std::span<const Var> parts) {
        if (parts.empty()) throw ShapeError("concat of zero tensors");
        const std::size_t rows = dims2(parts[0]).first;
        std::vector<std::size_t> widths;
        std::size_t total = 0;
        for (Var p : parts) {
            const auto [r, c] = dims2(p);
            if (r != rows) throw ShapeError("concat_cols row counts differ");
            widths.push_back(c);
            total += c;
        }
        Node out;
        out.shape = {rows, total};
        out.value.resize(rows * total);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            auto pv = value(parts[i]);
            for (std::size_t r = 0; r < rows; ++r)
                std::copy_n(pv.data() + r * widths[i], widths[i], out.value.data() + r * total + offset);
            offset += widths[i];
        }
        out.inputs.assign(parts.begin(), parts.end());
        out.backward = [rows, total, widths = std::move(widths)](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            std::size_t offset = 0;
            for (std::size_t i = 0; i < o.inputs.size(); ++i) {
                if (g.wants_grad(o.inputs[i])) {
                    auto gp = g.grad_buffer(o.inputs[i]);
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < widths[i]; ++c)
                            gp[r * widths[i] + c] += o.grad[r * total + offset + c];
                }
                offset += widths[i];
            }
        };
        return push(std::move(out));
    }

    /// Inverted dropout. rate == 0 returns x unchanged.
    Var dropout(Var x, double rate, Rng& rng) {
        if (rate <= 0.0) return x;
        if (rate >= 1.0) throw UsageError("dropout rate must be below 1");
        auto xv = value(x);
        const double keep_scale = 1.0 / (1.0 - rate);
        std::vector<double> mask(xv.size());
        for (double& m : mask) m = uniform01(rng) < rate ? 0.0 : keep_scale;
        Node out;
        out.shape = shape(x);
        out.value.resize(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) out.value[i] = xv[i] * mask[i];
        out.inputs = {x};
        out.backward = [mask = std::move(mask)](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            if (!g.wants_grad(o.inputs[0])) return;
            auto gx = g.grad_buffer(o.inputs[0]);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i] * mask[i];
        };
        return push(std::move(out));
    }

    // ---- backward -----------------------------------------------------

    /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable node in
    /// reverse recording order. Shared subexpressions accumulate.
    void backward(Var loss) {
        if (backward_done_) throw UsageError("backward() called twice on the same graph without reset()");
        if (numel(shape(loss)) != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_str(shape(loss)));
        if (!std::isfinite(scalar(loss))) throw NumericError("backward() from a non-finite loss");
        backward_done_ = true;
        grad_buffer(loss)[0] += 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.empty() || !n.backward || !n.requires_grad) continue;
            n.backward(*this, i);
        }
    }

private:
    struct Node {
        Shape shape;
        std::vector<double> value;
        const double* external = nullptr;
        std::size_t external_size = 0;
        std::vector<double> grad;
        std::vector<Var> inputs;
        std::function<void(Graph&, std::size_t)> backward;
        bool requires_grad = true;
    };

    const Node& node(Var v) const {
        if (!v.valid() || v.id >= nodes_.size()) throw ShapeError("invalid graph variable");
        return nodes_[v.id];
    }

    Var push(Node n) {
        if (!n.inputs.empty()) {
            n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                          [this](Var v) { return nodes_[v.id].requires_grad; });
        }
        nodes_.push_back(std::move(n));
        return Var{nodes_.size() - 1};
    }

    bool wants_grad(Var v) const { return nodes_[v.id].requires_grad; }

    std::span<double> grad_buffer(Var v) {
        Node& n = nodes_[v.id];
        const std::size_t sz = n.external ? n.external_size : n.value.size();
        if (n.grad.size() != sz) n.grad.assign(sz, 0.0);
        return n.grad;
    }

    std::pair<std::size_t, std::size_t> dims2(Var v) const {
        const Shape& s = shape(v);
        if (s.size() != 2) throw ShapeError("expected a 2-D tensor, got " + shape_str(s));
        return {s[0], s[1]};
    }

    Var binary(Var a, Var b, bool multiply) {
        const Shape& sa = shape(a);
        const Shape& sb = shape(b);
        const std::size_t na = numel(sa), nb = numel(sb);
        const bool same = sa == sb;
        const bool trailing = !same && sb.size() <= sa.size() && nb > 0 &&
                              std::equal(sb.begin(), sb.end(), sa.end() - static_cast<std::ptrdiff_t>(sb.size()));
        if (!same && !trailing) {
            throw ShapeError(std::string(multiply ? "mul" : "add") + " shape mismatch: " + shape_str(sa) + " vs " +
                             shape_str(sb));
        }
        auto av = value(a);
        auto bv = value(b);
        Node out;
        out.shape = sa;
        out.value.resize(na);
        for (std::size_t i = 0; i < na; ++i) {
            const double y = bv[i % nb];
            out.value[i] = multiply ? av[i] * y : av[i] + y;
        }
        out.inputs = {a, b};
        out.backward = [na, nb, multiply](Graph& g, std::size_t self) {
            const Node& o = g.nodes_[self];
            Var a = o.inputs[0], b = o.inputs[1];
            if (multiply) {
                auto av = g.value(a);
                auto bv = g.value(b);
                if (g.wants_grad(a)) {
                    auto ga = g.grad_buffer(a);
                    for (std::size_t i = 0; i < na; ++i) ga[i] += o.grad[i] * bv[i % nb];
                }
                if (g.wants_grad(b)) {
                    auto gb = g.grad_buffer(b);
                    for (std::size_t i = 0; i < na; ++i) gb[i % nb] += o.grad[i] * av[i];
                }
            } else {
                if (g.wants_grad(a)) {
                    auto ga = g.grad_buffer(a);
                    for (std::size_t i = 0; i < na; ++i) ga[i] += o.grad[i];
                }
                if (g.wants_grad(b)) {
                    auto gb = g.grad_buffer(b);
                    for (std::size_t i = 0; i < na; ++i) gb[i % nb] += o.grad[i];
                }
            }
        };
        return push(std::move(out));
    }

    // C[m x n] += A[m x k] * B[k x n]
    static void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                        std::size_t k, std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            double* __restrict crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = a[i * k + p];
                if (aip == 0.0) continue;
                const double* __restrict brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
        }
    }
    // C[m x n] += A[m x k] * B[n x k]^T, via a transposed copy of B so the
    // inner loop is a contiguous axpy.
    static void gemm_nt(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                        std::size_t k, std::size_t n) {
        std::vector<double> bt(k * n);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
        gemm_nn(a, bt.data(), c, m, k, n);
    }
    // C[k x n] += A[m x k]^T * B[m x n]
    static void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict c, std::size_t m,
                        std::size_t k, std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* __restrict brow = b + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = a[i * k + p];
                if (aip == 0.0) continue;
                double* __restrict crow = c + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
        }
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor*, Var> leaves_;
    bool backward_done_ = false;
};

}  // namespace coarse
