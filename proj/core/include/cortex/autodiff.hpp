#pragma once

// Define-by-run reverse-mode differentiation over dense row-major tensors.
// All arithmetic is double precision.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "cortex/rng.hpp"

namespace cortex::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape) noexcept;
std::string shape_string(const Shape& shape);

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    /// Throws ShapeError when data.size() != product of extents.
    Tensor(Shape shape, std::vector<double> data);
    static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

    [[nodiscard]] const Shape& shape() const noexcept { return shape_; }
    [[nodiscard]] std::size_t rank() const noexcept { return shape_.size(); }
    [[nodiscard]] std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] std::span<double> data() noexcept { return data_; }
    [[nodiscard]] std::span<const double> data() const noexcept { return data_; }
    [[nodiscard]] std::vector<double>& storage() noexcept { return data_; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    /// The single value of a one-element tensor.
    [[nodiscard]] double item() const;
    [[nodiscard]] Tensor reshaped(Shape shape) const;
    [[nodiscard]] bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

  private:
    Shape shape_;
    std::vector<double> data_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] const Tensor& grad() const;
    [[nodiscard]] const Shape& shape() const { return value().shape(); }
};

class Tape {
  public:
    /// Receives the adjoint of the node's output; accumulates into its inputs.
    using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input. Throws NumericError on non-finite data.
    Var leaf(Tensor value);
    /// Input excluded from differentiation.
    Var constant(Tensor value);

    /// Root must hold exactly one element, otherwise UsageError.
    void backward(Var root);

    [[nodiscard]] const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    /// Adjoint after backward(); zeros for nodes the root does not depend on.
    [[nodiscard]] const Tensor& grad(Var v) const;
    [[nodiscard]] bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }

    // Op-author interface.
    Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);
    /// Adjoint buffer of `v`, allocated on first use.
    Tensor& accumulator(Var v);

  private:
    struct Node {
        Tensor value;
        mutable Tensor grad;
        bool requires_grad = false;
        Backward backward;
    };
    std::vector<Node> nodes_;
};

// ---- Elementwise ----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);

// ---- Dense ------------------------------------------------------------------
/// [M x K] * [K x N] -> [M x N].
Var matmul(Var a, Var b);
/// Adds a length-N bias along the last axis of any tensor whose last extent is N.
Var add_bias(Var x, Var bias);
/// 1x1 convolution: x [B,C,H,W], weight [C,O], bias [O] -> [B,O,H,W].
Var pointwise(Var x, Var weight, Var bias);
/// 3x3 convolution, stride 1, zero padding 1: x [B,C,H,W], weight [O,C,3,3], bias [O] -> [B,O,H,W].
Var conv2d(Var x, Var weight, Var bias);
/// 2x2 max pooling, stride 2; H and W must be even. Ties go to the first element in row-major order.
Var maxpool2(Var x);
/// Mean over H and W: [B,C,H,W] -> [B,C].
Var spatial_mean(Var x);
Var reshape(Var x, Shape shape);

// ---- Probabilistic ----------------------------------------------------------
/// Softmax along the last axis (max-subtracted).
Var softmax(Var x);
Var log_softmax(Var x);
/// Mean negative log-likelihood of log-probabilities [B,n] at integer labels.
Var nll(Var log_probs, std::span<const std::uint32_t> labels);
Var softmax_cross_entropy(Var logits, std::span<const std::uint32_t> labels);
/// Row-wise gather: x [B,n], one index per row -> [B].
Var pick(Var x, std::span<const std::uint32_t> indices);

// ---- Reductions ---------------------------------------------------------------
Var sum(Var x);
Var sum_of_squares(Var x);

// ---- Discrete relaxation --------------------------------------------------------
/// i.i.d. Gumbel(0,1) noise, g = -log(-log(u)) with u clamped to [1e-12, 1 - 1e-12].
Tensor sample_gumbel(const Shape& shape, Stream& rng);

/**
 * Row-wise Gumbel-Softmax on logits [R,K] with fixed noise of the same shape.
 * Soft: y = softmax((logits + noise) / tau). Hard: forward value is the one-hot
 * of argmax y (ties to the smaller index), while the backward pass uses the
 * soft Jacobian y_i (delta_ik - y_k) / tau (straight-through).
 * Throws DomainError when tau <= 0.
 */
Var gumbel_softmax(Var logits, const Tensor& noise, double tau, bool hard);
Var gumbel_softmax(Var logits, double tau, bool hard, Stream& rng);

/**
 * Copies `base` [1,D,H,W] and overwrites the spatial columns listed in
 * `positions` with the rows of `values` [R,D]. Only `values` is differentiable.
 */
Var place_columns(const Tensor& base, std::span<const std::size_t> positions, Var values);

// ---- Checking -------------------------------------------------------------------
using ScalarFn = std::function<Var(Tape&, Var)>;

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

/**
 * Compares backward() against central differences at every coordinate of `point`:
 * max |analytic - cd| / max(|analytic|, |cd|, 1e-8). Throws NumericError when
 * any evaluation is non-finite.
 */
GradCheckReport grad_check_report(const ScalarFn& fn, const Tensor& point, double step = 1e-4);
double grad_check(const ScalarFn& fn, const Tensor& point, double step = 1e-4);

}  // namespace cortex::ad
