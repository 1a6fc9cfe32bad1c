#pragma once

// Sample-level explanation: SmoothGrad over token embeddings, token
// importance scores, per-image and per-concept token sets, the frequency
// baseline, token masking, and the two masking evaluations.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cortex/dataset.hpp"
#include "cortex/iem.hpp"

namespace cortex::saliency {

struct SaliencySpec {
    std::uint32_t samples = 50;  // N
    double noise = 0.1;          // alpha_noise; sigma = noise * (max(E) - min(E))

    void validate() const;
};

/// Averaged input gradient of p_concept, same layout as the embedding.
struct SaliencyMap {
    std::uint32_t concept_id = 0;
    Embedding values;
};

/// Gradient of p_concept with respect to E.
Embedding plain_gradient(const iem::IemModel& model, const Embedding& e, std::uint32_t concept_id);

/**
 * Mean of N gradients of p_concept at E + eps_l, eps_l ~ N(0, sigma^2 I).
 * When sigma is zero (noise 0 or constant E) the plain gradient is returned.
 */
SaliencyMap smoothgrad(const iem::IemModel& model, const Embedding& e, std::uint32_t concept_id,
                       const SaliencySpec& spec, Stream& rng);

/// Per-position max over channels of |S|.
struct TISGrid {
    std::uint32_t side = 0;
    std::vector<double> scores;
};

TISGrid tis(const SaliencyMap& map);

struct ImageToken {
    std::uint32_t position = 0;
    TokenId token = 0;
    double score = 0.0;

    friend bool operator==(const ImageToken&, const ImageToken&) = default;
};

/// All positions ordered by descending score, ties by ascending position.
std::vector<std::uint32_t> rank_positions(const TISGrid& scores);

/// The n highest-scoring positions (n clamps to m^2).
std::vector<ImageToken> top_image_tokens(const TokenGrid& grid, const TISGrid& scores, std::size_t n);

struct ConceptToken {
    TokenId token = 0;
    std::uint32_t frequency = 0;

    friend bool operator==(const ConceptToken&, const ConceptToken&) = default;
};

/// Orders tokens by count descending, then id ascending, and keeps the first k with nonzero count.
std::vector<ConceptToken> top_by_count(std::span<const std::uint32_t> counts, std::size_t k);

/**
 * Counts token ids over the image sets and keeps the k most frequent.
 * By default each occurrence counts; `per_image` counts a token once per image.
 */
std::vector<ConceptToken> aggregate_concept(std::span<const std::vector<ImageToken>> image_sets, std::size_t k,
                                            std::size_t codebook_size, bool per_image = false);

/// Raw token counts over all grids labelled `concept_id`. DomainError if the concept never occurs.
std::vector<ConceptToken> frequency_baseline(const Dataset& data, std::uint32_t concept_id, std::size_t k,
                                             std::size_t codebook_size);

std::vector<TokenId> token_ids(std::span<const ConceptToken> tokens);

/// Fraction of `tokens` that lie in `reference`; 0 for an empty set.
double precision(std::span<const TokenId> tokens, std::span<const TokenId> reference);

struct ImageExplanation {
    std::size_t record = 0;
    std::vector<ImageToken> tokens;
};

struct ExplanationSet {
    std::uint32_t concept_id = 0;
    SaliencySpec spec;
    std::uint32_t top_n = 0;
    std::uint32_t top_k = 0;
    std::uint64_t seed = 0;
    std::vector<ImageExplanation> images;
    std::vector<ConceptToken> concept_tokens;
};

/// TIS grids for the given records, each from its own stream ("smoothgrad", record).
std::vector<TISGrid> tis_for_records(const iem::IemModel& model, const Codebook& codebook,
                                     std::span<const TokenGrid> grids, std::span<const std::size_t> records,
                                     std::uint32_t concept_id, const SaliencySpec& spec, std::uint64_t seed,
                                     unsigned threads = 1);

/// Image-level Top-n sets over `records`, then the concept-level Top-k aggregate.
ExplanationSet explain_concept(const iem::IemModel& model, const Codebook& codebook, std::span<const TokenGrid> grids,
                               std::span<const std::size_t> records, std::uint32_t concept_id,
                               const SaliencySpec& spec, std::uint32_t top_n, std::uint32_t top_k,
                               std::uint64_t seed, unsigned threads = 1, bool per_image = false);

/// Structured-text (JSON) rendering of an explanation set.
std::string format_explanation(const ExplanationSet& set);
void write_explanation(const std::filesystem::path& path, const ExplanationSet& set);

enum class MaskMode { zero, codebook_mean, mask_token };

struct MaskPolicy {
    MaskMode mode = MaskMode::codebook_mean;
    std::optional<TokenId> token;  // required for MaskMode::mask_token
};

std::string_view mask_mode_name(MaskMode mode) noexcept;
MaskMode parse_mask_mode(std::string_view name);

/// The d-vector written into masked positions.
std::vector<double> replacement_vector(const MaskPolicy& policy, const Codebook& codebook);

Embedding mask_positions(const Embedding& e, std::span<const std::uint32_t> positions,
                         std::span<const double> replacement);
/// Replaces every position whose token id is in `tokens`. Returns the number of positions replaced via `masked`.
Embedding mask_token_ids(const Embedding& e, const TokenGrid& grid, std::span<const TokenId> tokens,
                         std::span<const double> replacement, std::size_t* masked = nullptr);

enum class Selector { tis, random };
std::string_view selector_name(Selector s) noexcept;

struct MaskingCurve {
    Selector selector = Selector::tis;
    std::vector<std::uint32_t> n_values;
    /// deltas[i][j]: p_true(masked) - p_true(original) for n_values[i] and image j.
    std::vector<std::vector<double>> deltas;

    [[nodiscard]] double mean(std::size_t i) const;
    [[nodiscard]] double stderr_of_mean(std::size_t i) const;
};

struct MaskingInputs {
    const iem::IemModel* explainer = nullptr;
    const iem::IemModel* evaluator = nullptr;
    const Codebook* codebook = nullptr;
    std::span<const TokenGrid> grids;
    std::span<const std::uint32_t> labels;
};

/**
 * Image-specific masking: for each n, masks the n top-TIS positions (explainer
 * saliency for the true label) or n uniformly chosen positions, and records the
 * change in the evaluator's true-class probability.
 */
MaskingCurve masking_curve(const MaskingInputs& in, Selector selector, std::span<const std::uint32_t> n_values,
                           const MaskPolicy& policy, const SaliencySpec& spec, std::uint64_t seed,
                           unsigned threads = 1);

std::string format_curves_csv(std::span<const MaskingCurve> curves);

struct ConceptMaskResult {
    double delta_accuracy = 0.0;
    double delta_probability = 0.0;
    double mean_masked = 0.0;
    double accuracy_before = 0.0;
};

/**
 * Concept-specific masking: every position of a test image whose token id is
 * in the set of the image's true concept is replaced; reports the evaluator's
 * change in top-1 accuracy and in mean true-class probability, and the mean
 * number of replaced positions.
 */
ConceptMaskResult concept_mask_eval(const iem::IemModel& evaluator, const Codebook& codebook, const Dataset& test,
                                    std::span<const std::vector<TokenId>> concept_sets, const MaskPolicy& policy,
                                    unsigned threads = 1);

}  // namespace cortex::saliency
