#include <doctest.h>

#include <cmath>

#include "cortex/bias.hpp"
#include "cortex/error.hpp"
#include "support.hpp"

using namespace cortex;
using namespace cortex::bias;

namespace {

// Brute-force pairwise oracle.
double oracle_delta(const std::vector<double>& x, const std::vector<double>& y) {
    long long wins = 0, losses = 0;
    for (double a : x) {
        for (double b : y) {
            if (a > b) ++wins;
            if (a < b) ++losses;
        }
    }
    return static_cast<double>(wins - losses) / static_cast<double>(x.size() * y.size());
}

std::vector<double> random_group(Stream& rng) {
    std::vector<double> v(1 + rng.below(50));
    for (auto& x : v) x = static_cast<double>(rng.below(12));  // small range forces ties
    return v;
}

}  // namespace

TEST_SUITE("bias") {

TEST_CASE("token frequency counts") {
    std::vector<TokenGrid> grids{{2, {5, 5, 7, 9}}, {2, {1, 2, 3, 4}}};
    auto f = token_frequency(grids, std::vector<TokenId>{5, 9}, "A");
    CHECK(f.counts == std::vector<std::uint32_t>{3, 0});
    CHECK(f.mean() == 1.5);
    CHECK(token_frequency(grids, std::vector<TokenId>{}).counts == std::vector<std::uint32_t>{0, 0});
    std::vector<TokenId> all(10);
    for (TokenId t = 0; t < 10; ++t) all[t] = t;
    CHECK(token_frequency(grids, all).counts == std::vector<std::uint32_t>{4, 4});
}

TEST_CASE("cliffs delta hand examples") {
    std::vector<double> x{1, 2}, y{2, 3};
    CHECK(cliffs_delta(x, y) == -0.75);
    CHECK(cliffs_delta(x, x) == 0.0);
    CHECK(cliffs_delta(std::vector<double>{5, 6}, std::vector<double>{1, 2, 3}) == 1.0);
    CHECK(cliffs_delta(std::vector<std::uint32_t>{1, 2}, std::vector<std::uint32_t>{2, 3}) == -0.75);
    CHECK_THROWS_AS(cliffs_delta(std::vector<double>{}, y), UsageError);
    // the halved-scale form is the standard value halved
    CHECK(cliffs_delta_literal(x, y) == -0.375);
}

TEST_CASE("cliffs delta agrees with brute force and keeps its invariants") {
    Stream rng(17, "cliff");
    for (int trial = 0; trial < 1000; ++trial) {
        auto x = random_group(rng), y = random_group(rng);
        double d = cliffs_delta(x, y);
        REQUIRE(d == oracle_delta(x, y));
        REQUIRE(cliffs_delta(y, x) == -d);
        REQUIRE(std::abs(d) <= 1.0);
        auto xs = x, ys = y;
        for (auto& v : xs) v = 3 * v + 11;
        for (auto& v : ys) v = 3 * v + 11;
        REQUIRE(cliffs_delta(xs, ys) == d);
        REQUIRE(cliffs_delta_literal(x, y) == doctest::Approx(d / 2).epsilon(1e-12));
    }
}

TEST_CASE("effect size thresholds") {
    CHECK(interpret_delta(0.0) == EffectSize::negligible);
    CHECK(interpret_delta(0.146) == EffectSize::negligible);
    CHECK(interpret_delta(0.147) == EffectSize::small);
    CHECK(interpret_delta(-0.2) == EffectSize::small);
    CHECK(interpret_delta(0.33) == EffectSize::medium);
    CHECK(interpret_delta(0.456) == EffectSize::medium);
    CHECK(interpret_delta(0.474) == EffectSize::large);
    CHECK(interpret_delta(-1.0) == EffectSize::large);
    CHECK_THROWS_AS(interpret_delta(1.01), DomainError);
    CHECK(effect_size_name(EffectSize::medium) == "medium");
}

TEST_CASE("neutral grids plant signature tokens of the two groups") {
    World w = build_world(WorldConfig{});
    NeutralWorldSpec spec{1.0, 0, 1};
    auto grids = neutral_grids(w, spec, 30, 2);
    const auto& a = w.concept_spec(0).signature;
    const auto& b = w.concept_spec(1).signature;
    for (const auto& g : grids) {
        CHECK(token_frequency(std::span(&g, 1), a).counts[0] == 6);
        CHECK(token_frequency(std::span(&g, 1), b).counts[0] == 0);
    }
    CHECK(neutral_grids(w, spec, 30, 2) == grids);
    CHECK_THROWS(NeutralWorldSpec{1.5, 0, 1}.validate(w));
    CHECK_THROWS(NeutralWorldSpec{0.5, 0, 0}.validate(w));
}

TEST_CASE("identical concept sets give delta zero") {
    World w = build_world(testing::tiny_world());
    auto train = generate_split(w, "train", 6);
    auto neutral = neutral_grids(w, {0.5, 0, 1}, 20, 1);
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 1);
    BiasConfig cfg;
    cfg.group_a = 0;
    cfg.group_b = 0;
    cfg.n_values = {3, 6};
    cfg.k = 4;
    cfg.saliency = {3, 0.1};
    auto rows = bias_report(model, w.codebook, train, neutral, cfg, 2);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        CHECK(r.delta == 0.0);
        CHECK(r.tokens_a == r.tokens_b);
        CHECK(r.count_a == 20);
    }
    auto csv = format_bias_csv(rows, 1);
    CHECK(csv.rfind("n,group_A_mean,group_B_mean,delta,category,N_A,N_B,seed\n", 0) == 0);
    CHECK(format_bias_text(rows, cfg, 0.5).find("negligible") != std::string::npos);
}

TEST_CASE("sign test tail probabilities") {
    // oracle: direct binomial sum
    auto tail = [](std::size_t s, std::size_t n) {
        double p = 0;
        for (std::size_t i = s; i <= n; ++i) p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
        return p;
    };
    CHECK(sign_test_p(0, 10) == doctest::Approx(1.0));
    CHECK(sign_test_p(10, 10) == doctest::Approx(1.0 / 1024));
    CHECK(sign_test_p(8, 10) == doctest::Approx(tail(8, 10)));
    CHECK(sign_test_p(70, 100) == doctest::Approx(tail(70, 100)).epsilon(1e-9));
}

}
