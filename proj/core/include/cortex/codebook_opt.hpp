#pragma once

// Codebook-level explanation and editing: a token selection matrix P (one row
// of logits over the codebook per grid position) is optimized through hard
// Gumbel-Softmax with straight-through gradients to raise a concept's
// probability inside a region mask. Also the embedding-optimization baseline
// and the concept-flip evaluation.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cortex/autodiff.hpp"
#include "cortex/dataset.hpp"
#include "cortex/iem.hpp"

namespace cortex::codebook_opt {

/// Per-position flags; 1 = optimizable.
struct RegionMask {
    std::uint32_t side = 0;
    std::vector<std::uint8_t> flags;

    static RegionMask full(std::uint32_t side);
    static RegionMask none(std::uint32_t side);
    /// h x w block with its top-left cell at (row, col). DomainError if it leaves the grid.
    static RegionMask rect(std::uint32_t side, std::uint32_t h, std::uint32_t w, std::uint32_t row, std::uint32_t col);
    /// Parses "HxW@ROW,COL", e.g. "4x4@6,6".
    static RegionMask parse(std::string_view text, std::uint32_t side);

    [[nodiscard]] std::vector<std::size_t> positions() const;
    [[nodiscard]] std::size_t count() const;
};

enum class InitMode { uniform, from_grid };

/// What the optimizer raises: the target probability itself, or its logarithm
/// (same maximizer, but the gradient does not vanish when p is tiny).
enum class Objective { probability, log_probability };
std::string_view objective_name(Objective o) noexcept;
Objective parse_objective(std::string_view name);
std::string_view init_mode_name(InitMode mode) noexcept;
InitMode parse_init_mode(std::string_view name);

struct OptConfig {
    double temperature = 1.0;
    /// Linear anneal target; equal to `temperature` disables annealing.
    double final_temperature = 1.0;
    double learning_rate = 0.5;
    double regularization = 1e-4;  // alpha_reg
    std::uint32_t steps = 3000;
    InitMode init = InitMode::from_grid;
    double smoothing = 0.1;  // epsilon for from-grid init
    std::uint64_t seed = 0;
    std::uint32_t snapshot_interval = 500;
    bool hard = true;
    /// Reuse one noise draw for every step (gradient tests).
    bool frozen_noise = false;
    Objective objective = Objective::log_probability;
    /// Step size of the embedding-optimization baseline.
    double embedding_learning_rate = 5.0;

    void validate() const;
    [[nodiscard]] double temperature_at(std::uint32_t step) const;
};

/// Logits P [m^2, K]. Uniform: all zero. From-grid: log(1-eps+eps/K) at the
/// grid's token, log(eps/K) elsewhere (softmax = eps-smoothed one-hot).
ad::Tensor init_selection(InitMode mode, const TokenGrid* grid, std::uint32_t side, std::size_t codebook_size,
                          double smoothing);

/// Codebook as a [K, d] tensor.
ad::Tensor codebook_tensor(const Codebook& codebook);

/// E = GumbelSoftmax(P, tau) x C laid out as [1, d, m, m].
ad::Var select_embedding(ad::Tape& tape, ad::Var selection, const ad::Tensor& codebook, const ad::Tensor& noise,
                         double tau, bool hard, std::uint32_t side);
Embedding select_embedding(const ad::Tensor& selection, const Codebook& codebook, double tau, bool hard,
                           Stream& rng);

/// -p_concept(E) + alpha_reg * ||E||^2 (or -log p_concept(E) + alpha_reg * ||E||^2).
ad::Var selection_loss(ad::Tape& tape, const iem::IemModel& model, ad::Var embedding, std::uint32_t concept_id,
                       double regularization, Objective objective = Objective::probability);

/// Row-wise argmax over the optimizable rows (ties to the smaller id), in position order.
std::vector<TokenId> extract_tokens(const ad::Tensor& selection, const RegionMask& mask);

/// Copy of `grid` with the masked positions set to `tokens` (position order).
TokenGrid apply_tokens(const TokenGrid& grid, const RegionMask& mask, std::span<const TokenId> tokens);

struct Snapshot {
    std::uint32_t step = 0;
    double loss = 0.0;
    double target_probability = 0.0;
    TokenGrid grid;
};

/// Snapshots evaluate the current discrete readout (extracted or quantized grid).
struct OptTrajectory {
    std::vector<Snapshot> snapshots;
};

/// Steps that get a snapshot: 0, every multiple of the interval, and the last step.
std::vector<std::uint32_t> snapshot_steps(std::uint32_t steps, std::uint32_t interval);

struct OptResult {
    ad::Tensor selection;
    OptTrajectory trajectory;
};

/**
 * Masked gradient descent on the selection logits:
 *   P <- P - lr * (dL/dP . mask)
 * with a hard Gumbel-Softmax forward and straight-through backward (or soft,
 * per config). Positions outside the mask take the start grid's token, or
 * the argmax of their (frozen) row when no start grid is given.
 * Throws UsageError for an empty mask and OptimizationError on a non-finite loss.
 */
OptResult optimize(const iem::IemModel& model, const Codebook& codebook, std::uint32_t concept_id,
                   const RegionMask& mask, const OptConfig& config, const TokenGrid* start = nullptr);

/// One update of the masked rows; exposed for tests. Returns the loss before the update.
double optimize_step(const iem::IemModel& model, const ad::Tensor& codebook, std::uint32_t concept_id,
                     const ad::Tensor& base, std::span<const std::size_t> positions, ad::Tensor& rows,
                     const ad::Tensor& noise, double tau, bool hard, double learning_rate, double regularization,
                     Objective objective = Objective::probability);

struct EditResult {
    TokenGrid edited;
    OptTrajectory trajectory;
    std::vector<std::pair<std::uint32_t, Raster>> rasters;
};

/// Edits `grid` toward `target`: from-grid optimization inside the mask; the rest is preserved exactly.
EditResult edit_grid(const TokenGrid& grid, const RegionMask& mask, std::uint32_t target,
                     const iem::IemModel& model, const Codebook& codebook, const OptConfig& config,
                     std::uint32_t cell_pixels = 8);

struct BaselineResult {
    TokenGrid grid;
    OptTrajectory trajectory;
};

/// Gradient descent on the masked embedding columns, then nearest-token quantization of those columns.
BaselineResult embedding_opt_baseline(const iem::IemModel& model, const Codebook& codebook, const TokenGrid& grid,
                                      std::uint32_t concept_id, const RegionMask& mask, const OptConfig& config);

enum class FlipMethod { token_selection, embedding };
std::string_view flip_method_name(FlipMethod m) noexcept;

struct FlipConfig {
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs{{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}};
    std::uint32_t images = 20;  // per direction
    std::uint32_t region_h = 4, region_w = 4, region_row = 6, region_col = 6;
    OptConfig opt;
};

struct FlipRow {
    std::size_t pair = 0;
    std::uint32_t from = 0;
    std::uint32_t to = 0;
    FlipMethod method = FlipMethod::token_selection;
    double delta_orig = 0.0;
    double delta_targ = 0.0;
    std::size_t trials = 0;
};

/**
 * For each pair (A, B) and both directions, optimizes the first `images` test
 * grids of the source concept toward the other with both methods (against the
 * explainer) and reports the evaluator's mean change in source and target probability.
 */
std::vector<FlipRow> flip_eval(const iem::IemModel& explainer, const iem::IemModel& evaluator,
                               const Codebook& codebook, const Dataset& test, const FlipConfig& config,
                               unsigned threads = 1);

std::string format_flip_csv(std::span<const FlipRow> rows);
std::string format_trajectory_csv(const OptTrajectory& trajectory);

}  // namespace cortex::codebook_opt
