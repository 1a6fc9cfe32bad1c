#pragma once

// Shortcut/bias detection: occurrence counts of concept token sets in
// "neutral" grids, compared between two groups with Cliff's delta.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cortex/dataset.hpp"
#include "cortex/iem.hpp"
#include "cortex/saliency.hpp"

namespace cortex::bias {

struct FrequencySample {
    std::string group;
    std::vector<std::uint32_t> counts;  // one per grid

    [[nodiscard]] double mean() const;
};

/// Per grid, the number of positions whose token id is in `tokens`.
FrequencySample token_frequency(std::span<const TokenGrid> grids, std::span<const TokenId> tokens,
                                std::string group = {});

/// (#{x > y} - #{x < y}) / (Nx * Ny) by full pairwise enumeration. UsageError on an empty group.
double cliffs_delta(std::span<const double> x, std::span<const double> y);
double cliffs_delta(std::span<const std::uint32_t> x, std::span<const std::uint32_t> y);

/// Halved-scale form, sum[I(x>y) + 0.5 I(x=y)] / (Nx Ny) - 0.5 (half the standard value).
double cliffs_delta_literal(std::span<const double> x, std::span<const double> y);

enum class EffectSize { negligible, small, medium, large };
std::string_view effect_size_name(EffectSize e) noexcept;
/// |d| < 0.147 negligible, < 0.33 small, < 0.474 medium, else large. DomainError when |d| > 1.
EffectSize interpret_delta(double delta);

/// Neutral grids: each signature plant comes from group A with probability lambda, else from group B.
struct NeutralWorldSpec {
    double lambda = 0.5;
    std::uint32_t group_a = 0;
    std::uint32_t group_b = 1;

    void validate(const World& world) const;
};

std::pair<TokenGrid, GroundTruth> sample_neutral_grid(const World& world, const NeutralWorldSpec& spec, Stream& rng);
/// Grid i is drawn from stream ("neutral", i).
std::vector<TokenGrid> neutral_grids(const World& world, const NeutralWorldSpec& spec, std::size_t count,
                                     std::uint64_t seed);

struct BiasRow {
    std::uint32_t n = 0;
    std::uint32_t k = 0;
    double mean_a = 0.0;
    double mean_b = 0.0;
    double delta = 0.0;
    EffectSize category = EffectSize::negligible;
    std::size_t count_a = 0;  // N_A
    std::size_t count_b = 0;  // N_B
    std::size_t set_a = 0;    // |T*_concept| for group A
    std::size_t set_b = 0;
    std::vector<TokenId> tokens_a;
    std::vector<TokenId> tokens_b;
};

struct BiasConfig {
    std::uint32_t group_a = 0;
    std::uint32_t group_b = 1;
    std::vector<std::uint32_t> n_values{5, 10, 20};
    std::uint32_t k = 10;
    saliency::SaliencySpec saliency;
    std::uint64_t seed = 0;
};

/// Both groups' concept token sets for one n.
struct GroupSets {
    std::uint32_t n = 0;
    std::uint32_t k = 0;
    std::vector<TokenId> tokens_a;
    std::vector<TokenId> tokens_b;
};

/// Concept sets of both groups from their own training grids (Top-n per image, Top-k aggregate), one entry per n.
std::vector<GroupSets> group_sets(const iem::IemModel& explainer, const Codebook& codebook, const Dataset& train,
                                  const BiasConfig& config, unsigned threads = 1);

/// Counts each group's set in the neutral grids and compares the groups with Cliff's delta.
std::vector<BiasRow> compare_groups(std::span<const GroupSets> sets, std::span<const TokenGrid> neutral);

/**
 * Builds each group's concept set from its own training grids (Top-n per image,
 * Top-k aggregate) for every n, counts the sets in the neutral grids, and
 * compares the groups with Cliff's delta.
 */
std::vector<BiasRow> bias_report(const iem::IemModel& explainer, const Codebook& codebook, const Dataset& train,
                                 std::span<const TokenGrid> neutral, const BiasConfig& config, unsigned threads = 1);

std::string format_bias_csv(std::span<const BiasRow> rows, std::uint64_t seed);
std::string format_bias_text(std::span<const BiasRow> rows, const BiasConfig& config, double lambda);

/// One-sided sign test: P(X >= successes) for X ~ Binomial(trials, 1/2).
double sign_test_p(std::size_t successes, std::size_t trials);

}  // namespace cortex::bias
