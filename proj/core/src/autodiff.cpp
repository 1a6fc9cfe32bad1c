#include "cortex/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "cortex/error.hpp"

namespace cortex::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Eigen::Index;

ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    return ConstMatMap(t.data().data() + offset, static_cast<Index>(rows), static_cast<Index>(cols));
}

MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
    return MatMap(t.data().data() + offset, static_cast<Index>(rows), static_cast<Index>(cols));
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(t.shape()));
    }
}

Tape& tape_of(Var a) {
    if (a.tape == nullptr) throw UsageError("variable is not attached to a tape");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw UsageError("variables belong to different tapes");
    return tape_of(a);
}

}  // namespace

std::size_t shape_size(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_)) {
        throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
    }
}

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) shape_mismatch("reshape", shape_, shape);
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

const Tensor& Var::value() const { return tape_of(*this).value(*this); }
const Tensor& Var::grad() const { return tape_of(*this).grad(*this); }

Var Tape::leaf(Tensor value) {
    if (!value.all_finite()) throw NumericError("leaf: non-finite input");
    nodes_.push_back({std::move(value), {}, true, {}});
    return {this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
    if (!value.all_finite()) throw NumericError("constant: non-finite input");
    nodes_.push_back({std::move(value), {}, false, {}});
    return {this, nodes_.size() - 1};
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
    bool needs = false;
    for (Var v : inputs) {
        if (v.tape != this) throw UsageError(std::string(op) + ": input from a different tape");
        needs = needs || nodes_.at(v.id).requires_grad;
    }
    nodes_.push_back({std::move(value), {}, needs, needs ? std::move(backward) : Backward{}});
    return {this, nodes_.size() - 1};
}

Tensor& Tape::accumulator(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

const Tensor& Tape::grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Tape::backward(Var root) {
    if (root.tape != this) throw UsageError("backward: root belongs to a different tape");
    if (nodes_.at(root.id).value.size() != 1) {
        throw UsageError("backward: root must be scalar, got shape " + shape_string(nodes_[root.id].value.shape()));
    }
    for (auto& n : nodes_) n.grad = Tensor(n.value.shape());
    nodes_[root.id].grad[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward) n.backward(*this, n.grad);
    }
}

// ---- Elementwise ----------------------------------------------------------

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.shape() != y.shape()) shape_mismatch("add", x.shape(), y.shape());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return t.record("add", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
        for (Var v : {a, b}) {
            if (!tp.requires_grad(v)) continue;
            Tensor& acc = tp.accumulator(v);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.shape() != y.shape()) shape_mismatch("sub", x.shape(), y.shape());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return t.record("sub", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(a)) {
            Tensor& acc = tp.accumulator(a);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
        if (tp.requires_grad(b)) {
            Tensor& acc = tp.accumulator(b);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.shape() != y.shape()) shape_mismatch("mul", x.shape(), y.shape());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return t.record("mul", std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
        const Tensor& x = tp.value(a);
        const Tensor& y = tp.value(b);
        if (tp.requires_grad(a)) {
            Tensor& acc = tp.accumulator(a);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * y[i];
        }
        if (tp.requires_grad(b)) {
            Tensor& acc = tp.accumulator(b);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * x[i];
        }
    });
}

Var scale(Var a, double factor) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    for (double& v : out.data()) v *= factor;
    return t.record("scale", std::move(out), {a}, [a, factor](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * factor;
    });
}

Var relu(Var a) {
    Tape& t = tape_of(a);
    Tensor out = a.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return t.record("relu", std::move(out), {a}, [a](Tape& tp, const Tensor& g) {
        const Tensor& x = tp.value(a);
        Tensor& acc = tp.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (x[i] > 0.0) acc[i] += g[i];
        }
    });
}

// ---- Dense ------------------------------------------------------------------

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.extent(1) != y.extent(0)) shape_mismatch("matmul", x.shape(), y.shape());
    const std::size_t M = x.extent(0), K = x.extent(1), N = y.extent(1);
    Tensor out({M, N});
    as_matrix(out, M, N).noalias() = as_matrix(x, M, K) * as_matrix(y, K, N);
    return t.record("matmul", std::move(out), {a, b}, [a, b, M, K, N](Tape& tp, const Tensor& g) {
        auto G = as_matrix(g, M, N);
        if (tp.requires_grad(a)) {
            as_matrix(tp.accumulator(a), M, K).noalias() += G * as_matrix(tp.value(b), K, N).transpose();
        }
        if (tp.requires_grad(b)) {
            as_matrix(tp.accumulator(b), K, N).noalias() += as_matrix(tp.value(a), M, K).transpose() * G;
        }
    });
}

Var add_bias(Var x, Var bias) {
    Tape& t = tape_of(x, bias);
    const Tensor& v = x.value();
    const Tensor& b = bias.value();
    if (b.rank() != 1 || v.rank() == 0 || v.shape().back() != b.extent(0)) shape_mismatch("add_bias", v.shape(), b.shape());
    const std::size_t N = b.extent(0), rows = v.size() / N;
    Tensor out = v;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < N; ++j) out[r * N + j] += b[j];
    }
    return t.record("add_bias", std::move(out), {x, bias}, [x, bias, N, rows](Tape& tp, const Tensor& g) {
        if (tp.requires_grad(x)) {
            Tensor& acc = tp.accumulator(x);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
        if (tp.requires_grad(bias)) {
            Tensor& acc = tp.accumulator(bias);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < N; ++j) acc[j] += g[r * N + j];
            }
        }
    });
}

Var pointwise(Var x, Var weight, Var bias) {
    Tape& t = tape_of(x, weight);
    tape_of(x, bias);
    const Tensor& in = x.value();
    const Tensor& w = weight.value();
    const Tensor& b = bias.value();
    require_rank("pointwise", in, 4);
    if (w.rank() != 2 || w.extent(0) != in.extent(1)) shape_mismatch("pointwise", in.shape(), w.shape());
    const std::size_t B = in.extent(0), C = in.extent(1), P = in.extent(2) * in.extent(3), O = w.extent(1);
    if (b.rank() != 1 || b.extent(0) != O) shape_mismatch("pointwise", w.shape(), b.shape());
    Tensor out({B, O, in.extent(2), in.extent(3)});
    auto W = as_matrix(w, C, O);
    Eigen::Map<const Eigen::VectorXd> bv(b.data().data(), static_cast<Index>(O));
    for (std::size_t s = 0; s < B; ++s) {
        auto Y = as_matrix(out, O, P, s * O * P);
        Y.noalias() = W.transpose() * as_matrix(in, C, P, s * C * P);
        Y.colwise() += bv;
    }
    return t.record("pointwise", std::move(out), {x, weight, bias},
                    [x, weight, bias, B, C, P, O](Tape& tp, const Tensor& g) {
                        auto W = as_matrix(tp.value(weight), C, O);
                        const Tensor& in = tp.value(x);
                        for (std::size_t s = 0; s < B; ++s) {
                            auto G = as_matrix(g, O, P, s * O * P);
                            if (tp.requires_grad(x)) {
                                as_matrix(tp.accumulator(x), C, P, s * C * P).noalias() += W * G;
                            }
                            if (tp.requires_grad(weight)) {
                                as_matrix(tp.accumulator(weight), C, O).noalias() +=
                                    as_matrix(in, C, P, s * C * P) * G.transpose();
                            }
                            if (tp.requires_grad(bias)) {
                                Eigen::Map<Eigen::VectorXd>(tp.accumulator(bias).data().data(), static_cast<Index>(O)) +=
                                    G.rowwise().sum();
                            }
                        }
                    });
}

Var conv2d(Var x, Var weight, Var bias) {
    Tape& t = tape_of(x, weight);
    tape_of(x, bias);
    const Tensor& in = x.value();
    const Tensor& w = weight.value();
    const Tensor& b = bias.value();
    require_rank("conv2d", in, 4);
    if (w.rank() != 4 || w.extent(1) != in.extent(1) || w.extent(2) != 3 || w.extent(3) != 3) {
        shape_mismatch("conv2d", in.shape(), w.shape());
    }
    const std::size_t B = in.extent(0), C = in.extent(1), H = in.extent(2), W = in.extent(3), O = w.extent(0);
    if (b.rank() != 1 || b.extent(0) != O) shape_mismatch("conv2d", w.shape(), b.shape());
    const std::size_t P = H * W, C9 = C * 9;

    auto cols = std::make_shared<std::vector<double>>(B * C9 * P, 0.0);
    for (std::size_t s = 0; s < B; ++s) {
        double* col = cols->data() + s * C9 * P;
        const double* src = in.data().data() + s * C * P;
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t ky = 0; ky < 3; ++ky) {
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    double* row = col + (c * 9 + ky * 3 + kx) * P;
                    for (std::size_t y = 0; y < H; ++y) {
                        std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t xx = 0; xx < W; ++xx) {
                            std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                            row[y * W + xx] = src[c * P + static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)];
                        }
                    }
                }
            }
        }
    }

    Tensor out({B, O, H, W});
    auto Wm = as_matrix(w, O, C9);
    Eigen::Map<const Eigen::VectorXd> bv(b.data().data(), static_cast<Index>(O));
    for (std::size_t s = 0; s < B; ++s) {
        ConstMatMap col(cols->data() + s * C9 * P, static_cast<Index>(C9), static_cast<Index>(P));
        auto Y = as_matrix(out, O, P, s * O * P);
        Y.noalias() = Wm * col;
        Y.colwise() += bv;
    }
    return t.record("conv2d", std::move(out), {x, weight, bias},
                    [x, weight, bias, cols, B, C, H, W, O, P, C9](Tape& tp, const Tensor& g) {
                        auto Wm = as_matrix(tp.value(weight), O, C9);
                        RowMat dcol(static_cast<Index>(C9), static_cast<Index>(P));
                        for (std::size_t s = 0; s < B; ++s) {
                            auto G = as_matrix(g, O, P, s * O * P);
                            ConstMatMap col(cols->data() + s * C9 * P, static_cast<Index>(C9), static_cast<Index>(P));
                            if (tp.requires_grad(weight)) {
                                as_matrix(tp.accumulator(weight), O, C9).noalias() += G * col.transpose();
                            }
                            if (tp.requires_grad(bias)) {
                                Eigen::Map<Eigen::VectorXd>(tp.accumulator(bias).data().data(), static_cast<Index>(O)) +=
                                    G.rowwise().sum();
                            }
                            if (!tp.requires_grad(x)) continue;
                            dcol.noalias() = Wm.transpose() * G;
                            double* dst = tp.accumulator(x).data().data() + s * C * P;
                            for (std::size_t c = 0; c < C; ++c) {
                                for (std::size_t ky = 0; ky < 3; ++ky) {
                                    for (std::size_t kx = 0; kx < 3; ++kx) {
                                        const double* row = dcol.data() + (c * 9 + ky * 3 + kx) * P;
                                        for (std::size_t y = 0; y < H; ++y) {
                                            std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                                            for (std::size_t xx = 0; xx < W; ++xx) {
                                                std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
                                                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) continue;
                                                dst[c * P + static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)] +=
                                                    row[y * W + xx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
}

Var maxpool2(Var x) {
    Tape& t = tape_of(x);
    const Tensor& in = x.value();
    require_rank("maxpool2", in, 4);
    const std::size_t B = in.extent(0), C = in.extent(1), H = in.extent(2), W = in.extent(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError("maxpool2: spatial extents must be even, got " + shape_string(in.shape()));
    }
    const std::size_t Ho = H / 2, Wo = W / 2;
    Tensor out({B, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        for (std::size_t y = 0; y < Ho; ++y) {
            for (std::size_t xx = 0; xx < Wo; ++xx) {
                std::size_t best = bc * H * W + (2 * y) * W + 2 * xx;
                for (std::size_t dy = 0; dy < 2; ++dy) {
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        std::size_t at = bc * H * W + (2 * y + dy) * W + 2 * xx + dx;
                        if (in[at] > in[best]) best = at;
                    }
                }
                std::size_t o = bc * Ho * Wo + y * Wo + xx;
                out[o] = in[best];
                (*argmax)[o] = best;
            }
        }
    }
    return t.record("maxpool2", std::move(out), {x}, [x, argmax](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(x);
        for (std::size_t o = 0; o < g.size(); ++o) acc[(*argmax)[o]] += g[o];
    });
}

Var spatial_mean(Var x) {
    Tape& t = tape_of(x);
    const Tensor& in = x.value();
    require_rank("spatial_mean", in, 4);
    const std::size_t B = in.extent(0), C = in.extent(1), P = in.extent(2) * in.extent(3);
    Tensor out({B, C});
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        double s = 0.0;
        for (std::size_t p = 0; p < P; ++p) s += in[bc * P + p];
        out[bc] = s / static_cast<double>(P);
    }
    return t.record("spatial_mean", std::move(out), {x}, [x, B, C, P](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(x);
        const double inv = 1.0 / static_cast<double>(P);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
            for (std::size_t p = 0; p < P; ++p) acc[bc * P + p] += g[bc] * inv;
        }
    });
}

Var reshape(Var x, Shape shape) {
    Tape& t = tape_of(x);
    Tensor out = x.value().reshaped(std::move(shape));
    return t.record("reshape", std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(x);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    });
}

// ---- Probabilistic ----------------------------------------------------------

namespace {

void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t width, double inv_temp = 1.0) {
    const std::size_t rows = in.size() / width;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = in.data() + r * width;
        double* dst = out.data() + r * width;
        double mx = *std::max_element(src, src + width);
        double total = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
            dst[j] = std::exp((src[j] - mx) * inv_temp);
            total += dst[j];
        }
        for (std::size_t j = 0; j < width; ++j) dst[j] /= total;
    }
}

std::size_t last_extent(const char* op, const Tensor& t) {
    if (t.rank() == 0 || t.shape().back() == 0) throw ShapeError(std::string(op) + ": needs a nonempty last axis");
    return t.shape().back();
}

}  // namespace

Var softmax(Var x) {
    Tape& t = tape_of(x);
    const Tensor& in = x.value();
    const std::size_t n = last_extent("softmax", in);
    Tensor out(in.shape());
    softmax_rows(in.data(), out.data(), n);
    auto probs = std::make_shared<std::vector<double>>(out.data().begin(), out.data().end());
    return t.record("softmax", std::move(out), {x}, [x, n, probs](Tape& tp, const Tensor& g) {
        const auto& s = *probs;
        Tensor& acc = tp.accumulator(x);
        for (std::size_t r = 0; r < s.size() / n; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * s[r * n + j];
            for (std::size_t j = 0; j < n; ++j) acc[r * n + j] += s[r * n + j] * (g[r * n + j] - dot);
        }
    });
}

Var log_softmax(Var x) {
    Tape& t = tape_of(x);
    const Tensor& in = x.value();
    const std::size_t n = last_extent("log_softmax", in);
    const std::size_t rows = in.size() / n;
    Tensor out(in.shape());
    auto probs = std::make_shared<std::vector<double>>(in.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = in.data().data() + r * n;
        double mx = *std::max_element(src, src + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += std::exp(src[j] - mx);
        double lse = mx + std::log(total);
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = src[j] - lse;
            (*probs)[r * n + j] = std::exp(src[j] - lse);
        }
    }
    return t.record("log_softmax", std::move(out), {x}, [x, n, rows, probs](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(x);
        for (std::size_t r = 0; r < rows; ++r) {
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) total += g[r * n + j];
            for (std::size_t j = 0; j < n; ++j) acc[r * n + j] += g[r * n + j] - (*probs)[r * n + j] * total;
        }
    });
}

Var nll(Var log_probs, std::span<const std::uint32_t> labels) {
    Tape& t = tape_of(log_probs);
    const Tensor& lp = log_probs.value();
    require_rank("nll", lp, 2);
    const std::size_t B = lp.extent(0), n = lp.extent(1);
    if (labels.size() != B) {
        throw ShapeError("nll: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
    }
    std::vector<std::uint32_t> lab(labels.begin(), labels.end());
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        if (lab[b] >= n) throw DomainError("nll: label " + std::to_string(lab[b]) + " >= " + std::to_string(n));
        total -= lp[b * n + lab[b]];
    }
    return t.record("nll", Tensor::scalar(total / static_cast<double>(B)), {log_probs},
                    [log_probs, lab = std::move(lab), n](Tape& tp, const Tensor& g) {
                        Tensor& acc = tp.accumulator(log_probs);
                        const double scale = g[0] / static_cast<double>(lab.size());
                        for (std::size_t b = 0; b < lab.size(); ++b) acc[b * n + lab[b]] -= scale;
                    });
}

Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels) {
    return nll(log_softmax(logits), labels);
}

Var pick(Var x, std::span<const std::uint32_t> indices) {
    Tape& t = tape_of(x);
    const Tensor& in = x.value();
    require_rank("pick", in, 2);
    const std::size_t B = in.extent(0), n = in.extent(1);
    if (indices.size() != B) throw ShapeError("pick: index count does not match batch");
    std::vector<std::uint32_t> idx(indices.begin(), indices.end());
    Tensor out({B});
    for (std::size_t b = 0; b < B; ++b) {
        if (idx[b] >= n) throw DomainError("pick: index " + std::to_string(idx[b]) + " >= " + std::to_string(n));
        out[b] = in[b * n + idx[b]];
    }
    return t.record("pick", std::move(out), {x}, [x, idx = std::move(idx), n](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(x);
        for (std::size_t b = 0; b < idx.size(); ++b) acc[b * n + idx[b]] += g[b];
    });
}

// ---- Reductions ---------------------------------------------------------------

Var sum(Var x) {
    Tape& t = tape_of(x);
    const Tensor& in = x.value();
    double s = std::accumulate(in.data().begin(), in.data().end(), 0.0);
    return t.record("sum", Tensor::scalar(s), {x}, [x](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(x);
        for (double& v : acc.data()) v += g[0];
    });
}

Var sum_of_squares(Var x) {
    Tape& t = tape_of(x);
    const Tensor& in = x.value();
    double s = 0.0;
    for (double v : in.data()) s += v * v;
    return t.record("sum_of_squares", Tensor::scalar(s), {x}, [x](Tape& tp, const Tensor& g) {
        const Tensor& in = tp.value(x);
        Tensor& acc = tp.accumulator(x);
        for (std::size_t i = 0; i < in.size(); ++i) acc[i] += 2.0 * in[i] * g[0];
    });
}

// ---- Discrete relaxation --------------------------------------------------------

Tensor sample_gumbel(const Shape& shape, Stream& rng) {
    Tensor noise(shape);
    for (double& v : noise.data()) {
        double u = std::clamp(rng.uniform(), 1e-12, 1.0 - 1e-12);
        v = -std::log(-std::log(u));
    }
    return noise;
}

Var gumbel_softmax(Var logits, const Tensor& noise, double tau, bool hard) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw DomainError("gumbel_softmax: temperature must be positive");
    Tape& t = tape_of(logits);
    const Tensor& in = logits.value();
    require_rank("gumbel_softmax", in, 2);
    if (noise.shape() != in.shape()) shape_mismatch("gumbel_softmax", in.shape(), noise.shape());
    const std::size_t R = in.extent(0), K = in.extent(1);
    std::vector<double> perturbed(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) perturbed[i] = in[i] + noise[i];
    auto soft = std::make_shared<std::vector<double>>(in.size());
    softmax_rows(perturbed, *soft, K, 1.0 / tau);

    Tensor out(in.shape());
    if (hard) {
        for (std::size_t r = 0; r < R; ++r) {
            const double* row = soft->data() + r * K;
            std::size_t best = static_cast<std::size_t>(std::max_element(row, row + K) - row);
            out[r * K + best] = 1.0;
        }
    } else {
        std::copy(soft->begin(), soft->end(), out.data().begin());
    }
    return t.record(hard ? "gumbel_softmax_hard" : "gumbel_softmax", std::move(out), {logits},
                    [logits, soft, R, K, tau](Tape& tp, const Tensor& g) {
                        Tensor& acc = tp.accumulator(logits);
                        for (std::size_t r = 0; r < R; ++r) {
                            const double* y = soft->data() + r * K;
                            const double* gr = g.data().data() + r * K;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < K; ++j) dot += gr[j] * y[j];
                            for (std::size_t j = 0; j < K; ++j) acc[r * K + j] += y[j] * (gr[j] - dot) / tau;
                        }
                    });
}

Var gumbel_softmax(Var logits, double tau, bool hard, Stream& rng) {
    Tensor noise = sample_gumbel(logits.value().shape(), rng);
    return gumbel_softmax(logits, noise, tau, hard);
}

Var place_columns(const Tensor& base, std::span<const std::size_t> positions, Var values) {
    Tape& t = tape_of(values);
    require_rank("place_columns", base, 4);
    if (base.extent(0) != 1) throw ShapeError("place_columns: base batch must be 1, got " + shape_string(base.shape()));
    const std::size_t D = base.extent(1), P = base.extent(2) * base.extent(3);
    const Tensor& v = values.value();
    if (v.rank() != 2 || v.extent(0) != positions.size() || v.extent(1) != D) {
        shape_mismatch("place_columns", base.shape(), v.shape());
    }
    std::vector<std::size_t> pos(positions.begin(), positions.end());
    std::vector<bool> seen(P, false);
    for (std::size_t p : pos) {
        if (p >= P) throw DomainError("place_columns: position " + std::to_string(p) + " out of range");
        if (seen[p]) throw UsageError("place_columns: duplicate position " + std::to_string(p));
        seen[p] = true;
    }
    Tensor out = base;
    for (std::size_t l = 0; l < pos.size(); ++l) {
        for (std::size_t k = 0; k < D; ++k) out[k * P + pos[l]] = v[l * D + k];
    }
    return t.record("place_columns", std::move(out), {values}, [values, pos = std::move(pos), D, P](Tape& tp, const Tensor& g) {
        Tensor& acc = tp.accumulator(values);
        for (std::size_t l = 0; l < pos.size(); ++l) {
            for (std::size_t k = 0; k < D; ++k) acc[l * D + k] += g[k * P + pos[l]];
        }
    });
}

// ---- Checking -------------------------------------------------------------------

namespace {

double evaluate(const ScalarFn& fn, const Tensor& point) {
    Tape tape;
    Var root = fn(tape, tape.leaf(point));
    double v = root.value().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
}

}  // namespace

GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point, double step) {
    if (!(step > 0.0)) throw DomainError("grad_check: step must be positive");
    Tensor analytic;
    {
        Tape tape;
        Var x = tape.leaf(point);
        Var root = fn(tape, x);
        if (!std::isfinite(root.value().item())) throw NumericError("grad_check: non-finite function value");
        tape.backward(root);
        analytic = x.grad();
    }
    GradCheckReport report;
    Tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + step;
        double up = evaluate(fn, probe);
        probe[i] = orig - step;
        double down = evaluate(fn, probe);
        probe[i] = orig;
        double numeric = (up - down) / (2.0 * step);
        double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
        double err = std::abs(analytic[i] - numeric) / denom;
        if (i == 0 || err > report.max_relative_error) report = {err, i, analytic[i], numeric};
    }
    return report;
}

double grad_check(const ScalarFn& fn, const Tensor& point, double step) {
    return grad_check_report(fn, point, step).max_relative_error;
}

}  // namespace cortex::ad
