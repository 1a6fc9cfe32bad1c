#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cortex/error.hpp"
#include "cortex/saliency.hpp"
#include "support.hpp"

using namespace cortex;
using namespace cortex::saliency;

namespace {

ImageToken tok(TokenId t) { return ImageToken{0, t, 0.0}; }

Embedding random_embedding(std::uint32_t dim, std::uint32_t side, std::uint64_t seed) {
    Embedding e{dim, side, std::vector<double>(static_cast<std::size_t>(dim) * side * side)};
    Stream rng(seed, "test/embedding");
    for (auto& v : e.data) v = 2 * rng.uniform() - 1;
    return e;
}

}  // namespace

TEST_SUITE("saliency") {

TEST_CASE("TIS is the channel-wise max of |S|") {
    SaliencyMap one{0, Embedding{2, 1, {0.3, -0.7}}};
    auto t = tis(one);
    REQUIRE(t.scores.size() == 1);
    CHECK(t.scores[0] == 0.7);

    SaliencyMap zero{0, Embedding{3, 2, std::vector<double>(12, 0.0)}};
    for (double v : tis(zero).scores) CHECK(v == 0.0);

    auto s = random_embedding(4, 3, 1);
    auto doubled = s;
    for (auto& v : doubled.data) v *= 2;
    auto a = tis({0, s}), b = tis({0, doubled});
    for (std::size_t p = 0; p < 9; ++p) {
        double expected = 0;
        for (std::size_t c = 0; c < 4; ++c) expected = std::max(expected, std::abs(s.at(c, p)));
        CHECK(a.scores[p] == expected);
        CHECK(b.scores[p] == 2 * a.scores[p]);
    }
    CHECK(rank_positions(a) == rank_positions(b));
}

TEST_CASE("top image tokens") {
    TokenGrid grid{2, {10, 11, 12, 13}};
    TISGrid scores{2, {0.9, 0.1, 0.5, 0.7}};
    auto top = top_image_tokens(grid, scores, 2);
    REQUIRE(top.size() == 2);
    CHECK(top[0] == ImageToken{0, 10, 0.9});
    CHECK(top[1] == ImageToken{3, 13, 0.7});
    CHECK(top_image_tokens(grid, scores, 4).size() == 4);
    CHECK(top_image_tokens(grid, scores, 9).size() == 4);

    TISGrid flat{2, {0.2, 0.2, 0.2, 0.2}};
    auto first = top_image_tokens(grid, flat, 3);
    CHECK(first[0].position == 0);
    CHECK(first[1].position == 1);
    CHECK(first[2].position == 2);
}

TEST_CASE("concept aggregation") {
    // a=1, b=2, c=3, d=4
    std::vector<std::vector<ImageToken>> sets{{tok(1), tok(2), tok(3)}, {tok(1), tok(2)}, {tok(1), tok(4)}};
    auto top = aggregate_concept(sets, 2, 8);
    REQUIRE(top.size() == 2);
    CHECK(top[0] == ConceptToken{1, 3});
    CHECK(top[1] == ConceptToken{2, 2});
    CHECK(aggregate_concept(sets, 0, 8).empty());

    std::vector<std::vector<ImageToken>> single{{tok(5), tok(3), tok(5)}};
    auto all = aggregate_concept(single, 10, 8);
    REQUIRE(all.size() == 2);
    CHECK(all[0] == ConceptToken{5, 2});
    CHECK(all[1] == ConceptToken{3, 1});
    auto once = aggregate_concept(single, 10, 8, true);
    CHECK(once[0] == ConceptToken{3, 1});  // equal counts: smaller id first
    CHECK(once[1] == ConceptToken{5, 1});
}

TEST_CASE("frequency baseline ranks context above signature when c > g") {
    World w = build_world(WorldConfig{});
    auto data = generate_split(w, "train", 40);
    const std::uint32_t concept_id = 2;
    auto base = frequency_baseline(data, concept_id, 16, w.codebook.size());

    // brute-force counts
    std::vector<std::uint32_t> counts(w.codebook.size(), 0);
    for (auto r : data.indices_of(concept_id)) {
        for (auto t : data.grids[r].tokens) ++counts[t];
    }
    for (const auto& t : base) CHECK(t.frequency == counts[t.token]);

    const auto& spec = w.concept_spec(concept_id);
    auto rank_of = [&](TokenId t) {
        for (std::size_t i = 0; i < base.size(); ++i)
            if (base[i].token == t) return i;
        return base.size();
    };
    std::size_t worst_context = 0, best_signature = base.size();
    for (auto t : spec.context) worst_context = std::max(worst_context, rank_of(t));
    for (auto t : spec.signature) best_signature = std::min(best_signature, rank_of(t));
    CHECK(worst_context < best_signature);

    auto everything = frequency_baseline(data, concept_id, w.codebook.size(), w.codebook.size());
    std::size_t seen = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; });
    CHECK(everything.size() == seen);
    CHECK_THROWS_AS(frequency_baseline(data, 99, 5, w.codebook.size()), DomainError);
}

TEST_CASE("precision against a reference set") {
    std::vector<TokenId> ref{1, 2, 3};
    CHECK(precision(std::vector<TokenId>{1, 2, 7, 8}, ref) == 0.5);
    CHECK(precision(std::vector<TokenId>{}, ref) == 0.0);
}

TEST_CASE("masking identities") {
    World w = build_world(testing::tiny_world());
    Stream rng(1, "m");
    auto grid = sample_grid(w, 0, rng).first;
    auto e = embed(w.codebook, grid);
    auto repl = replacement_vector({MaskMode::zero, {}}, w.codebook);

    CHECK(mask_positions(e, {}, repl) == e);
    std::vector<std::uint32_t> all(grid.tokens.size());
    for (std::uint32_t p = 0; p < all.size(); ++p) all[p] = p;
    for (double v : mask_positions(e, all, repl).data) CHECK(v == 0.0);

    std::size_t masked = 99;
    std::vector<TokenId> absent{static_cast<TokenId>(w.codebook.size() + 5)};
    CHECK(mask_token_ids(e, grid, absent, repl, &masked) == e);
    CHECK(masked == 0);

    std::vector<TokenId> present{grid.tokens[5]};
    auto expected = std::count(grid.tokens.begin(), grid.tokens.end(), grid.tokens[5]);
    auto out = mask_token_ids(e, grid, present, repl, &masked);
    CHECK(masked == static_cast<std::size_t>(expected));
    for (std::size_t c = 0; c < e.dim; ++c) CHECK(out.at(c, 5) == 0.0);

    auto mean = replacement_vector({MaskMode::codebook_mean, {}}, w.codebook);
    for (std::size_t c = 0; c < w.codebook.dim(); ++c) {
        double s = 0;
        for (TokenId t = 0; t < w.codebook.size(); ++t) s += w.codebook.row(t)[c];
        CHECK(mean[c] == doctest::Approx(s / w.codebook.size()).epsilon(1e-12));
    }
    CHECK_THROWS_AS(replacement_vector({MaskMode::mask_token, {}}, w.codebook), UsageError);
    CHECK(parse_mask_mode("mask-token") == MaskMode::mask_token);
    CHECK(mask_mode_name(parse_mask_mode("mean")) == "mean");
    CHECK_THROWS(parse_mask_mode("blur"));
}

TEST_CASE("plain gradient matches finite differences of the probability") {
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 6, 0.0);
    auto e = random_embedding(6, 8, 3);
    auto g = plain_gradient(model, e, 1);
    const double h = 1e-5;
    for (std::size_t i = 0; i < e.data.size(); i += 7) {
        auto up = e, down = e;
        up.data[i] += h;
        down.data[i] -= h;
        double cd = (iem::forward(model, up)[1] - iem::forward(model, down)[1]) / (2 * h);
        CHECK(g.data[i] == doctest::Approx(cd).epsilon(1e-5).scale(1e-6));
    }
}

TEST_CASE("smoothgrad degenerates to the plain gradient when sigma is zero") {
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 6);
    auto e = random_embedding(6, 8, 4);
    auto plain = plain_gradient(model, e, 2);
    Stream rng(1, "sg");
    CHECK(smoothgrad(model, e, 2, {7, 0.0}, rng).values == plain);

    Embedding flat{6, 8, std::vector<double>(6 * 64, 0.25)};
    CHECK(smoothgrad(model, flat, 2, {7, 0.3}, rng).values == plain_gradient(model, flat, 2));
}

TEST_CASE("smoothgrad is the mean of gradients at the perturbed inputs") {
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 8, 0.0);
    auto e = random_embedding(6, 8, 5);
    SaliencySpec spec{5, 0.2};
    Stream rng(3, "sg"), replay(3, "sg");
    auto batched = smoothgrad(model, e, 0, spec, rng);

    const auto [lo, hi] = std::minmax_element(e.data.begin(), e.data.end());
    const double sigma = spec.noise * (*hi - *lo);
    std::vector<double> mean(e.data.size(), 0.0);
    for (std::uint32_t l = 0; l < spec.samples; ++l) {
        auto noisy = e;
        for (auto& v : noisy.data) v += sigma * replay.normal();
        auto g = plain_gradient(model, noisy, 0);
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += g.data[i] / spec.samples;
    }
    for (std::size_t i = 0; i < mean.size(); ++i) CHECK(batched.values.data[i] == doctest::Approx(mean[i]).epsilon(1e-10).scale(1e-12));
}

TEST_CASE("explanations are deterministic and serialize to JSON") {
    World w = build_world(testing::tiny_world());
    auto data = generate_split(w, "train", 4);
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 1);
    auto records = data.indices_of(1);
    auto a = explain_concept(model, w.codebook, data.grids, records, 1, {4, 0.1}, 5, 3, 9, 1);
    auto b = explain_concept(model, w.codebook, data.grids, records, 1, {4, 0.1}, 5, 3, 9, 3);
    auto text = format_explanation(a);
    CHECK(text == format_explanation(b));
    auto j = nlohmann::json::parse(text);
    CHECK(j["concept"] == 1);
    CHECK(j["images"].size() == records.size());
    CHECK(j["images"][0]["tokens"].size() == 5);
    CHECK(j["concept_tokens"].size() <= 3);
    CHECK_THROWS_AS(explain_concept(model, w.codebook, data.grids, records, 1, {4, 0.1}, 0, 3, 9), UsageError);
}

TEST_CASE("masking curves: n = 0 is exact and random seeds agree") {
    World w = build_world(testing::tiny_world());
    auto data = generate_split(w, "test", 40);
    auto explainer = iem::IemModel::initialize(testing::tiny_arch(), 1);
    auto evaluator = iem::IemModel::initialize(testing::tiny_arch(), 2);
    MaskingInputs in{&explainer, &evaluator, &w.codebook, data.grids, data.labels};
    std::vector<std::uint32_t> ns{0, 4, 16};
    auto tis_curve = masking_curve(in, Selector::tis, ns, {}, {3, 0.1}, 1, 2);
    auto r1 = masking_curve(in, Selector::random, ns, {}, {}, 1, 2);
    auto r2 = masking_curve(in, Selector::random, ns, {}, {}, 2, 1);
    for (double d : tis_curve.deltas[0]) CHECK(d == 0.0);
    CHECK(tis_curve.mean(0) == 0.0);
    for (std::size_t i = 0; i < ns.size(); ++i) CHECK(std::abs(r1.mean(i) - r2.mean(i)) < 0.05);

    // oracle: recompute one image's delta at n = 4 for the random selector
    Stream rng(1, "mask/random", 7);
    std::vector<std::uint32_t> order(64);
    for (std::uint32_t p = 0; p < 64; ++p) order[p] = p;
    rng.shuffle(std::span<std::uint32_t>(order));
    auto e = embed(w.codebook, data.grids[7]);
    auto m = mask_positions(e, std::span(order).first(4), w.codebook.mean_vector());
    double expected = iem::forward(evaluator, m)[data.labels[7]] - iem::forward(evaluator, e)[data.labels[7]];
    CHECK(r1.deltas[1][7] == doctest::Approx(expected).epsilon(1e-12));

    std::vector<MaskingCurve> curves{tis_curve, r1};
    auto csv = format_curves_csv(curves);
    CHECK(csv.rfind("n,method,mean_delta_p,stderr\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
}

TEST_CASE("concept masking with empty sets changes nothing") {
    World w = build_world(testing::tiny_world());
    auto data = generate_split(w, "test", 10);
    auto evaluator = iem::IemModel::initialize(testing::tiny_arch(), 2);
    std::vector<std::vector<TokenId>> empty(3);
    auto r = concept_mask_eval(evaluator, w.codebook, data, empty, {});
    CHECK(r.delta_accuracy == 0.0);
    CHECK(r.delta_probability == 0.0);
    CHECK(r.mean_masked == 0.0);

    std::vector<std::vector<TokenId>> all(3);
    for (auto& s : all)
        for (TokenId t = 0; t < w.codebook.size(); ++t) s.push_back(t);
    auto full = concept_mask_eval(evaluator, w.codebook, data, all, {});
    CHECK(full.mean_masked == 64.0);
}

}
