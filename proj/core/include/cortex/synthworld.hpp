#pragma once

// Procedural vector-quantized world: a random codebook, concept-labelled
// token grids with planted signature tokens, lookup, quantization, and
// rendering.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cortex/rng.hpp"

namespace cortex {

using TokenId = std::uint32_t;

/// K x d table of token vectors. Components are stored as doubles but are
/// always exactly representable as 32-bit floats, so the file format is lossless.
class Codebook {
  public:
    Codebook() = default;
    /// Validates shape, finiteness and pairwise-distinct rows.
    Codebook(std::size_t size, std::size_t dim, std::vector<double> vectors);

    [[nodiscard]] std::size_t size() const noexcept { return size_; }
    [[nodiscard]] std::size_t dim() const noexcept { return dim_; }
    [[nodiscard]] std::span<const double> row(TokenId token) const;
    [[nodiscard]] std::span<const double> data() const noexcept { return vectors_; }
    /// Mean of all rows (length d).
    [[nodiscard]] std::vector<double> mean_vector() const;

    friend bool operator==(const Codebook&, const Codebook&) = default;

  private:
    std::size_t size_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> vectors_;
};

/// m x m token indices, row-major.
struct TokenGrid {
    std::uint32_t side = 0;
    std::vector<TokenId> tokens;

    [[nodiscard]] std::size_t positions() const noexcept { return tokens.size(); }
    friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

/// d x m x m looked-up tensor, channel-major then row-major spatial.
struct Embedding {
    std::uint32_t dim = 0;
    std::uint32_t side = 0;
    std::vector<double> data;

    [[nodiscard]] std::size_t positions() const noexcept {
        return static_cast<std::size_t>(side) * side;
    }
    [[nodiscard]] double at(std::size_t channel, std::size_t position) const {
        return data[channel * positions() + position];
    }
    /// Copy of the d-vector at a spatial position.
    [[nodiscard]] std::vector<double> column(std::size_t position) const;
    void set_column(std::size_t position, std::span<const double> values);

    friend bool operator==(const Embedding&, const Embedding&) = default;
};

enum class TokenKind : std::uint8_t { background = 0, signature = 1, context = 2 };

struct GroundTruthEntry {
    std::uint32_t position;
    TokenId token;
    TokenKind kind;
};

/// Kind of every position of one grid.
struct GroundTruth {
    std::vector<TokenKind> kinds;

    [[nodiscard]] std::size_t count(TokenKind kind) const noexcept;
    [[nodiscard]] std::vector<GroundTruthEntry> entries(const TokenGrid& grid) const;
    friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct ConceptSpec {
    std::uint32_t id = 0;
    std::vector<TokenId> signature;  // unique to this concept
    std::vector<TokenId> context;    // drawn from the shared pool
};

struct WorldConfig {
    std::uint32_t codebook_size = 512;   // K
    std::uint32_t dim = 64;              // d
    std::uint32_t side = 16;             // m
    std::uint32_t concepts = 10;         // n
    std::uint32_t signature_size = 8;    // |G_i|
    std::uint32_t context_pool = 8;      // shared context tokens
    std::uint32_t context_size = 8;      // per-concept window into the pool
    std::uint32_t signature_plants = 6;  // g
    std::uint32_t context_plants = 10;   // c
    std::uint32_t background_range = 400;
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the first violated constraint.
    void validate() const;
    friend bool operator==(const WorldConfig&, const WorldConfig&) = default;
};

struct World {
    WorldConfig config;
    Codebook codebook;
    std::vector<ConceptSpec> concepts;
    std::vector<TokenId> context_pool;
    std::vector<TokenId> background;
    /// Reserved id never planted in any grid; absent when the partition uses all K ids.
    std::optional<TokenId> mask_token;

    [[nodiscard]] const ConceptSpec& concept_spec(std::uint32_t id) const;
};

/// Codebook rows i.i.d. uniform in [-1, 1]^d; token roles from a seeded permutation.
World build_world(const WorldConfig& config);

/// One grid of `concept_id`: g signature, c context, and m^2 - g - c background positions.
std::pair<TokenGrid, GroundTruth> sample_grid(const World& world, std::uint32_t concept_id, Stream& rng);

Embedding embed(const Codebook& codebook, const TokenGrid& grid);

/// Nearest codebook row by squared distance; ties go to the smaller index.
TokenId quantize(const Codebook& codebook, std::span<const double> z);

/// Quantizes every column of an embedding.
TokenGrid quantize_grid(const Codebook& codebook, const Embedding& embedding);

struct Raster {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<std::uint8_t> rgb;

    friend bool operator==(const Raster&, const Raster&) = default;
};

std::array<std::uint8_t, 3> token_color(TokenId token) noexcept;
Raster render(const TokenGrid& grid, std::uint32_t cell_pixels);
std::vector<std::uint8_t> encode_ppm(const Raster& raster);
void write_ppm(const std::filesystem::path& path, const Raster& raster);

// Codebook file: "CTXC", u32 K, u32 d, K*d f32.
std::vector<std::uint8_t> encode_codebook(const Codebook& codebook);
Codebook decode_codebook(std::span<const std::uint8_t> bytes);
void save_codebook(const std::filesystem::path& path, const Codebook& codebook);
Codebook load_codebook(const std::filesystem::path& path);

}  // namespace cortex
