#include "cortex/synthworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "cortex/binio.hpp"
#include "cortex/error.hpp"

namespace cortex {

Codebook::Codebook(std::size_t size, std::size_t dim, std::vector<double> vectors)
    : size_(size), dim_(dim), vectors_(std::move(vectors)) {
    if (size_ == 0 || dim_ == 0) throw ConfigError("codebook: K and d must be positive");
    if (vectors_.size() != size_ * dim_) {
        throw ShapeError("codebook: expected " + std::to_string(size_ * dim_) + " components, got " +
                         std::to_string(vectors_.size()));
    }
    for (double v : vectors_) {
        if (!std::isfinite(v)) throw DomainError("codebook: non-finite component");
    }
    std::vector<std::size_t> order(size_);
    std::iota(order.begin(), order.end(), 0);
    auto row_less = [&](std::size_t a, std::size_t b) {
        return std::lexicographical_compare(vectors_.begin() + a * dim_, vectors_.begin() + (a + 1) * dim_,
                                            vectors_.begin() + b * dim_, vectors_.begin() + (b + 1) * dim_);
    };
    std::sort(order.begin(), order.end(), row_less);
    for (std::size_t i = 1; i < order.size(); ++i) {
        if (!row_less(order[i - 1], order[i])) {
            throw DomainError("codebook: rows " + std::to_string(order[i - 1]) + " and " +
                              std::to_string(order[i]) + " are identical");
        }
    }
}

std::span<const double> Codebook::row(TokenId token) const {
    if (token >= size_) {
        throw DomainError("token index " + std::to_string(token) + " >= K=" + std::to_string(size_));
    }
    return std::span<const double>(vectors_).subspan(token * dim_, dim_);
}

std::vector<double> Codebook::mean_vector() const {
    std::vector<double> mean(dim_, 0.0);
    for (std::size_t t = 0; t < size_; ++t) {
        for (std::size_t k = 0; k < dim_; ++k) mean[k] += vectors_[t * dim_ + k];
    }
    for (double& v : mean) v /= static_cast<double>(size_);
    return mean;
}

std::vector<double> Embedding::column(std::size_t position) const {
    std::vector<double> out(dim);
    for (std::size_t k = 0; k < dim; ++k) out[k] = data[k * positions() + position];
    return out;
}

void Embedding::set_column(std::size_t position, std::span<const double> values) {
    for (std::size_t k = 0; k < dim; ++k) data[k * positions() + position] = values[k];
}

std::size_t GroundTruth::count(TokenKind kind) const noexcept {
    return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), kind));
}

std::vector<GroundTruthEntry> GroundTruth::entries(const TokenGrid& grid) const {
    std::vector<GroundTruthEntry> out;
    out.reserve(kinds.size());
    for (std::uint32_t p = 0; p < kinds.size(); ++p) out.push_back({p, grid.tokens.at(p), kinds[p]});
    return out;
}

void WorldConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("world config: " + what); };
    if (codebook_size == 0) fail("K must be positive");
    if (codebook_size > 65536) fail("K must be <= 65536 (u16 token storage)");
    if (dim == 0) fail("d must be positive");
    if (side == 0) fail("m must be positive");
    if (concepts == 0) fail("concept count n must be positive");
    if (concepts > 65536) fail("concept count n must be <= 65536");
    std::uint64_t used = std::uint64_t{concepts} * signature_size + context_pool + background_range;
    if (used > codebook_size) {
        fail("n * signature_size + context_pool + background_range = " + std::to_string(used) +
             " exceeds K = " + std::to_string(codebook_size));
    }
    std::uint64_t cells = std::uint64_t{side} * side;
    if (std::uint64_t{signature_plants} + context_plants >= cells) {
        fail("g + c = " + std::to_string(signature_plants + context_plants) + " must be < m^2 = " +
             std::to_string(cells));
    }
    if (signature_plants > 0 && signature_size == 0) fail("g > 0 requires a nonempty signature set");
    if (context_size > context_pool) fail("context_size must be <= context_pool");
    if (context_plants > 0 && context_size == 0) fail("c > 0 requires a nonempty context set");
    if (background_range == 0) fail("background_range must be positive");
}

const ConceptSpec& World::concept_spec(std::uint32_t id) const {
    if (id >= concepts.size()) {
        throw DomainError("unknown concept id " + std::to_string(id) + " (n=" + std::to_string(concepts.size()) + ")");
    }
    return concepts[id];
}

World build_world(const WorldConfig& config) {
    config.validate();
    World world;
    world.config = config;

    const std::size_t K = config.codebook_size;
    const std::size_t d = config.dim;
    Stream cb_rng(config.seed, "codebook");
    std::vector<double> vectors(K * d);
    for (double& v : vectors) v = static_cast<float>(2.0 * cb_rng.uniform() - 1.0);
    world.codebook = Codebook(K, d, std::move(vectors));

    Stream part_rng(config.seed, "partition");
    std::vector<TokenId> perm(K);
    std::iota(perm.begin(), perm.end(), 0U);
    part_rng.shuffle(std::span<TokenId>(perm));

    std::size_t cursor = 0;
    auto take = [&](std::size_t count) {
        std::vector<TokenId> ids(perm.begin() + static_cast<std::ptrdiff_t>(cursor),
                                 perm.begin() + static_cast<std::ptrdiff_t>(cursor + count));
        cursor += count;
        std::sort(ids.begin(), ids.end());
        return ids;
    };
    for (std::uint32_t c = 0; c < config.concepts; ++c) {
        world.concepts.push_back({c, take(config.signature_size), {}});
    }
    // Pool order stays permutation order so windows are seed-dependent.
    world.context_pool.assign(perm.begin() + static_cast<std::ptrdiff_t>(cursor),
                              perm.begin() + static_cast<std::ptrdiff_t>(cursor + config.context_pool));
    cursor += config.context_pool;
    for (auto& spec : world.concepts) {
        for (std::uint32_t i = 0; i < config.context_size; ++i) {
            std::size_t at = (std::size_t{spec.id} * config.context_size + i) % config.context_pool;
            spec.context.push_back(world.context_pool[at]);
        }
        std::sort(spec.context.begin(), spec.context.end());
    }
    world.background = take(config.background_range);
    if (cursor < K) world.mask_token = perm[cursor];
    return world;
}

std::pair<TokenGrid, GroundTruth> sample_grid(const World& world, std::uint32_t concept_id, Stream& rng) {
    const ConceptSpec& spec = world.concept_spec(concept_id);
    const auto& cfg = world.config;
    const std::uint32_t cells = cfg.side * cfg.side;

    TokenGrid grid{cfg.side, std::vector<TokenId>(cells)};
    GroundTruth truth{std::vector<TokenKind>(cells, TokenKind::background)};
    auto planted = rng.sample_without_replacement(cells, cfg.signature_plants + cfg.context_plants);
    for (std::uint32_t i = 0; i < planted.size(); ++i) {
        bool sig = i < cfg.signature_plants;
        truth.kinds[planted[i]] = sig ? TokenKind::signature : TokenKind::context;
    }
    for (std::uint32_t p = 0; p < cells; ++p) {
        switch (truth.kinds[p]) {
            case TokenKind::signature:
                grid.tokens[p] = spec.signature[rng.below(spec.signature.size())];
                break;
            case TokenKind::context:
                grid.tokens[p] = spec.context[rng.below(spec.context.size())];
                break;
            case TokenKind::background:
                grid.tokens[p] = world.background[rng.below(world.background.size())];
                break;
        }
    }
    return {std::move(grid), std::move(truth)};
}

Embedding embed(const Codebook& codebook, const TokenGrid& grid) {
    const std::size_t cells = std::size_t{grid.side} * grid.side;
    if (grid.tokens.size() != cells) {
        throw ShapeError("token grid has " + std::to_string(grid.tokens.size()) + " entries, expected " +
                         std::to_string(cells));
    }
    Embedding e{static_cast<std::uint32_t>(codebook.dim()), grid.side,
                std::vector<double>(codebook.dim() * cells)};
    for (std::size_t p = 0; p < cells; ++p) {
        auto row = codebook.row(grid.tokens[p]);
        for (std::size_t k = 0; k < row.size(); ++k) e.data[k * cells + p] = row[k];
    }
    return e;
}

TokenId quantize(const Codebook& codebook, std::span<const double> z) {
    if (z.size() != codebook.dim()) {
        throw ShapeError("quantize: vector length " + std::to_string(z.size()) + " != d=" +
                         std::to_string(codebook.dim()));
    }
    for (double v : z) {
        if (!std::isfinite(v)) throw DomainError("quantize: non-finite input");
    }
    TokenId best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    auto data = codebook.data();
    const std::size_t d = codebook.dim();
    for (std::size_t t = 0; t < codebook.size(); ++t) {
        double dist = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            double diff = z[k] - data[t * d + k];
            dist += diff * diff;
        }
        if (dist < best_dist) {
            best_dist = dist;
            best = static_cast<TokenId>(t);
        }
    }
    return best;
}

TokenGrid quantize_grid(const Codebook& codebook, const Embedding& embedding) {
    TokenGrid grid{embedding.side, std::vector<TokenId>(embedding.positions())};
    for (std::size_t p = 0; p < embedding.positions(); ++p) {
        grid.tokens[p] = quantize(codebook, embedding.column(p));
    }
    return grid;
}

std::array<std::uint8_t, 3> token_color(TokenId token) noexcept {
    std::uint64_t h = mix64(0x636f6c6f72ULL ^ token);
    return {static_cast<std::uint8_t>(h), static_cast<std::uint8_t>(h >> 8), static_cast<std::uint8_t>(h >> 16)};
}

Raster render(const TokenGrid& grid, std::uint32_t cell_pixels) {
    if (cell_pixels == 0) throw DomainError("render: cell size must be positive");
    Raster r;
    r.width = r.height = grid.side * cell_pixels;
    r.rgb.resize(std::size_t{r.width} * r.height * 3);
    for (std::uint32_t y = 0; y < r.height; ++y) {
        for (std::uint32_t x = 0; x < r.width; ++x) {
            auto color = token_color(grid.tokens[(y / cell_pixels) * grid.side + x / cell_pixels]);
            std::size_t at = (std::size_t{y} * r.width + x) * 3;
            r.rgb[at] = color[0];
            r.rgb[at + 1] = color[1];
            r.rgb[at + 2] = color[2];
        }
    }
    return r;
}

std::vector<std::uint8_t> encode_ppm(const Raster& raster) {
    std::string header = "P6\n" + std::to_string(raster.width) + " " + std::to_string(raster.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), raster.rgb.begin(), raster.rgb.end());
    return out;
}

void write_ppm(const std::filesystem::path& path, const Raster& raster) {
    binio::write_file_atomic(path, encode_ppm(raster));
}

std::vector<std::uint8_t> encode_codebook(const Codebook& codebook) {
    binio::Writer w;
    w.magic("CTXC");
    w.u32(static_cast<std::uint32_t>(codebook.size()));
    w.u32(static_cast<std::uint32_t>(codebook.dim()));
    for (double v : codebook.data()) w.f32(static_cast<float>(v));
    return w.buffer();
}

Codebook decode_codebook(std::span<const std::uint8_t> bytes) {
    binio::Reader r(bytes, "codebook");
    r.expect_magic("CTXC");
    std::uint32_t K = r.u32();
    std::uint32_t d = r.u32();
    if (K == 0 || d == 0) r.fail("K and d must be positive");
    if (r.remaining() != std::size_t{K} * d * 4) r.fail("payload size does not match K*d");
    std::vector<double> vectors(std::size_t{K} * d);
    for (double& v : vectors) v = r.f32();
    try {
        return Codebook(K, d, std::move(vectors));
    } catch (const Error& e) {
        throw FormatError(std::string("codebook: ") + e.what());
    }
}

void save_codebook(const std::filesystem::path& path, const Codebook& codebook) {
    binio::write_file_atomic(path, encode_codebook(codebook));
}

Codebook load_codebook(const std::filesystem::path& path) {
    return decode_codebook(binio::read_file(path));
}

}  // namespace cortex
