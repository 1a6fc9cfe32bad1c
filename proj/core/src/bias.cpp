#include "cortex/bias.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cortex/error.hpp"
#include "cortex/parallel.hpp"

namespace cortex::bias {

double FrequencySample::mean() const {
    if (counts.empty()) return 0.0;
    return static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::uint64_t{0})) /
           static_cast<double>(counts.size());
}

FrequencySample token_frequency(std::span<const TokenGrid> grids, std::span<const TokenId> tokens, std::string group) {
    FrequencySample out{std::move(group), {}};
    out.counts.reserve(grids.size());
    for (const auto& g : grids) {
        std::uint32_t c = 0;
        for (auto t : g.tokens) c += std::find(tokens.begin(), tokens.end(), t) != tokens.end();
        out.counts.push_back(c);
    }
    return out;
}

namespace {

template <class T>
double delta_impl(std::span<const T> x, std::span<const T> y) {
    if (x.empty() || y.empty()) throw UsageError("cliffs_delta: both groups must be nonempty");
    std::int64_t score = 0;
    for (const T& a : x) {
        for (const T& b : y) score += (a > b) - (a < b);
    }
    return static_cast<double>(score) / (static_cast<double>(x.size()) * static_cast<double>(y.size()));
}

}  // namespace

double cliffs_delta(std::span<const double> x, std::span<const double> y) { return delta_impl(x, y); }
double cliffs_delta(std::span<const std::uint32_t> x, std::span<const std::uint32_t> y) { return delta_impl(x, y); }

double cliffs_delta_literal(std::span<const double> x, std::span<const double> y) {
    if (x.empty() || y.empty()) throw UsageError("cliffs_delta: both groups must be nonempty");
    double s = 0.0;
    for (double a : x) {
        for (double b : y) s += (a > b ? 1.0 : 0.0) + (a == b ? 0.5 : 0.0);
    }
    return s / (static_cast<double>(x.size()) * static_cast<double>(y.size())) - 0.5;
}

std::string_view effect_size_name(EffectSize e) noexcept {
    switch (e) {
        case EffectSize::negligible: return "negligible";
        case EffectSize::small: return "small";
        case EffectSize::medium: return "medium";
        case EffectSize::large: return "large";
    }
    return "?";
}

EffectSize interpret_delta(double delta) {
    const double a = std::abs(delta);
    if (!(a <= 1.0)) throw DomainError("interpret_delta: |delta| must not exceed 1");
    if (a < 0.147) return EffectSize::negligible;
    if (a < 0.33) return EffectSize::small;
    if (a < 0.474) return EffectSize::medium;
    return EffectSize::large;
}

void NeutralWorldSpec::validate(const World& world) const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("neutral world: lambda must lie in [0, 1]");
    if (group_a == group_b) throw ConfigError("neutral world: groups must differ");
    (void)world.concept_spec(group_a);
    (void)world.concept_spec(group_b);
}

std::pair<TokenGrid, GroundTruth> sample_neutral_grid(const World& world, const NeutralWorldSpec& spec, Stream& rng) {
    const auto& cfg = world.config;
    const auto& sig_a = world.concept_spec(spec.group_a).signature;
    const auto& sig_b = world.concept_spec(spec.group_b).signature;
    const std::uint32_t cells = cfg.side * cfg.side;

    TokenGrid grid{cfg.side, std::vector<TokenId>(cells)};
    GroundTruth truth{std::vector<TokenKind>(cells, TokenKind::background)};
    auto planted = rng.sample_without_replacement(cells, cfg.signature_plants + cfg.context_plants);
    for (std::uint32_t i = 0; i < planted.size(); ++i) {
        truth.kinds[planted[i]] = i < cfg.signature_plants ? TokenKind::signature : TokenKind::context;
    }
    for (std::uint32_t p = 0; p < cells; ++p) {
        switch (truth.kinds[p]) {
            case TokenKind::signature: {
                const auto& sig = rng.uniform() < spec.lambda ? sig_a : sig_b;
                grid.tokens[p] = sig[rng.below(sig.size())];
                break;
            }
            case TokenKind::context:
                grid.tokens[p] = world.context_pool[rng.below(world.context_pool.size())];
                break;
            case TokenKind::background:
                grid.tokens[p] = world.background[rng.below(world.background.size())];
                break;
        }
    }
    return {std::move(grid), std::move(truth)};
}

std::vector<TokenGrid> neutral_grids(const World& world, const NeutralWorldSpec& spec, std::size_t count,
                                     std::uint64_t seed) {
    spec.validate(world);
    std::vector<TokenGrid> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Stream rng(seed, "neutral", i);
        out.push_back(sample_neutral_grid(world, spec, rng).first);
    }
    return out;
}

std::vector<GroupSets> group_sets(const iem::IemModel& explainer, const Codebook& codebook, const Dataset& train,
                                  const BiasConfig& config, unsigned threads) {
    std::uint32_t max_n = 0;
    for (auto n : config.n_values) {
        if (n == 0) throw UsageError("bias: n must be at least 1");
        max_n = std::max(max_n, n);
    }

    // TIS once per training image; every n is a prefix of the same ranking.
    std::vector<std::vector<saliency::ImageToken>> ranked[2];
    const std::uint32_t ids[2] = {config.group_a, config.group_b};
    for (int g = 0; g < 2; ++g) {
        if (g == 1 && ids[1] == ids[0]) {
            ranked[1] = ranked[0];
            break;
        }
        auto records = train.indices_of(ids[g]);
        if (records.empty()) throw UsageError("bias: no training images of concept " + std::to_string(ids[g]));
        auto scores = saliency::tis_for_records(explainer, codebook, train.grids, records, ids[g], config.saliency,
                                                config.seed, threads);
        for (std::size_t i = 0; i < scores.size(); ++i)
            ranked[g].push_back(saliency::top_image_tokens(train.grids[records[i]], scores[i], max_n));
    }

    std::vector<GroupSets> out;
    for (auto n : config.n_values) {
        GroupSets gs{n, config.k, {}, {}};
        std::vector<TokenId>* dst[2] = {&gs.tokens_a, &gs.tokens_b};
        for (int g = 0; g < 2; ++g) {
            std::vector<std::vector<saliency::ImageToken>> image_sets;
            for (const auto& r : ranked[g])
                image_sets.emplace_back(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(n, r.size())));
            *dst[g] = saliency::token_ids(saliency::aggregate_concept(image_sets, config.k, codebook.size()));
        }
        out.push_back(std::move(gs));
    }
    return out;
}

std::vector<BiasRow> compare_groups(std::span<const GroupSets> sets, std::span<const TokenGrid> neutral) {
    if (neutral.empty()) throw UsageError("bias: no neutral grids");
    std::vector<BiasRow> rows;
    for (const auto& gs : sets) {
        BiasRow row;
        row.n = gs.n;
        row.k = gs.k;
        auto fa = token_frequency(neutral, gs.tokens_a, "A");
        auto fb = token_frequency(neutral, gs.tokens_b, "B");
        row.mean_a = fa.mean();
        row.mean_b = fb.mean();
        row.delta = cliffs_delta(std::span<const std::uint32_t>(fa.counts), std::span<const std::uint32_t>(fb.counts));
        row.category = interpret_delta(row.delta);
        row.count_a = fa.counts.size();
        row.count_b = fb.counts.size();
        row.set_a = gs.tokens_a.size();
        row.set_b = gs.tokens_b.size();
        row.tokens_a = gs.tokens_a;
        row.tokens_b = gs.tokens_b;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<BiasRow> bias_report(const iem::IemModel& explainer, const Codebook& codebook, const Dataset& train,
                                 std::span<const TokenGrid> neutral, const BiasConfig& config, unsigned threads) {
    if (neutral.empty()) throw UsageError("bias: no neutral grids");
    auto sets = group_sets(explainer, codebook, train, config, threads);
    return compare_groups(sets, neutral);
}

std::string format_bias_csv(std::span<const BiasRow> rows, std::uint64_t seed) {
    std::ostringstream os;
    os.precision(17);
    os << "n,group_A_mean,group_B_mean,delta,category,N_A,N_B,seed\n";
    for (const auto& r : rows) {
        os << r.n << ',' << r.mean_a << ',' << r.mean_b << ',' << r.delta << ',' << effect_size_name(r.category) << ','
           << r.count_a << ',' << r.count_b << ',' << seed << '\n';
    }
    return os.str();
}

std::string format_bias_text(std::span<const BiasRow> rows, const BiasConfig& config, double lambda) {
    std::ostringstream os;
    os.precision(6);
    os << "bias report\n"
       << "group A: concept " << config.group_a << "\n"
       << "group B: concept " << config.group_b << "\n"
       << "lambda: " << lambda << "\n"
       << "k: " << config.k << "\n"
       << "seed: " << config.seed << "\n\n";
    for (const auto& r : rows) {
        os << "Top-" << r.n << ": mean A " << r.mean_a << ", mean B " << r.mean_b << ", delta " << r.delta << " ("
           << effect_size_name(r.category) << "), N_A " << r.count_a << ", N_B " << r.count_b << "\n";
        os << "  set A:";
        for (auto t : r.tokens_a) os << ' ' << t;
        os << "\n  set B:";
        for (auto t : r.tokens_b) os << ' ' << t;
        os << '\n';
    }
    return os.str();
}

double sign_test_p(std::size_t successes, std::size_t trials) {
    if (successes > trials) throw DomainError("sign_test_p: successes exceed trials");
    // sum_{i >= s} C(n, i) / 2^n, in log space
    double p = 0.0;
    for (std::size_t i = successes; i <= trials; ++i) {
        const double log_c = std::lgamma(static_cast<double>(trials) + 1) - std::lgamma(static_cast<double>(i) + 1) -
                             std::lgamma(static_cast<double>(trials - i) + 1);
        p += std::exp(log_c - static_cast<double>(trials) * std::log(2.0));
    }
    return std::min(1.0, p);
}

}  // namespace cortex::bias
