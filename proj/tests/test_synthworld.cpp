#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "cortex/error.hpp"
#include "cortex/synthworld.hpp"
#include "support.hpp"

using namespace cortex;

TEST_SUITE("synthworld") {

TEST_CASE("default world has disjoint signature sets") {
    WorldConfig cfg;  // K=512, m=16, n=10
    World w = build_world(cfg);
    REQUIRE(w.concepts.size() == 10);
    for (std::size_t a = 0; a < w.concepts.size(); ++a) {
        for (std::size_t b = a + 1; b < w.concepts.size(); ++b) {
            for (auto t : w.concepts[a].signature) {
                for (auto u : w.concepts[b].signature) CHECK(t != u);
            }
        }
    }
    // signature tokens are never background or context
    std::set<TokenId> other(w.background.begin(), w.background.end());
    other.insert(w.context_pool.begin(), w.context_pool.end());
    for (const auto& c : w.concepts) {
        for (auto t : c.signature) CHECK(other.count(t) == 0);
    }
    if (w.mask_token) {
        CHECK(other.count(*w.mask_token) == 0);
    }
}

TEST_CASE("codebook rows lie in [-1, 1] and are float-representable") {
    World w = build_world(testing::tiny_world());
    for (double v : w.codebook.data()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
        CHECK(static_cast<double>(static_cast<float>(v)) == v);
    }
}

TEST_CASE("config violations name the constraint") {
    WorldConfig c;
    c.concepts = 100;  // 100 * 8 > 512
    CHECK_THROWS_AS(build_world(c), ConfigError);
    WorldConfig d;
    d.signature_plants = 200;
    d.context_plants = 56;  // g + c = m^2
    CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("same seed gives identical worlds") {
    auto a = build_world(testing::tiny_world(5));
    auto b = build_world(testing::tiny_world(5));
    auto c = build_world(testing::tiny_world(6));
    CHECK(a.codebook == b.codebook);
    CHECK(a.concepts[0].signature == b.concepts[0].signature);
    CHECK_FALSE(a.codebook == c.codebook);
}

TEST_CASE("sample_grid plants exactly g signature and c context tokens") {
    WorldConfig cfg;
    World w = build_world(cfg);
    for (std::uint32_t i = 0; i < 20; ++i) {
        Stream rng(1, "t", i);
        auto [grid, truth] = sample_grid(w, i % 10, rng);
        REQUIRE(grid.tokens.size() == 256);
        CHECK(truth.count(TokenKind::signature) == 6);
        CHECK(truth.count(TokenKind::context) == 10);
        CHECK(truth.count(TokenKind::background) == 240);
        const auto& spec = w.concept_spec(i % 10);
        for (const auto& e : truth.entries(grid)) {
            if (e.kind == TokenKind::signature)
                CHECK(std::find(spec.signature.begin(), spec.signature.end(), e.token) != spec.signature.end());
            if (e.kind == TokenKind::context)
                CHECK(std::find(spec.context.begin(), spec.context.end(), e.token) != spec.context.end());
        }
    }
}

TEST_CASE("g = 0 plants no signature tokens") {
    WorldConfig cfg;
    cfg.signature_plants = 0;
    World w = build_world(cfg);
    Stream rng(1, "t");
    auto [grid, truth] = sample_grid(w, 3, rng);
    CHECK(truth.count(TokenKind::signature) == 0);
}

TEST_CASE("distinct streams give different position sets") {
    World w = build_world(WorldConfig{});
    int differ = 0;
    for (std::uint32_t i = 0; i < 100; ++i) {
        Stream a(1, "a", i), b(1, "b", i);
        auto ga = sample_grid(w, 0, a).second;
        auto gb = sample_grid(w, 0, b).second;
        differ += !(ga == gb);
    }
    CHECK(differ >= 99);
}

TEST_CASE("unknown concept is a domain error") {
    World w = build_world(testing::tiny_world());
    Stream rng(1, "t");
    CHECK_THROWS_AS(sample_grid(w, 3, rng), DomainError);
}

TEST_CASE("embed looks up rows exactly") {
    Codebook cb(2, 1, {1.0, -1.0});
    TokenGrid g{2, {0, 1, 1, 0}};
    auto e = embed(cb, g);
    CHECK(e.data == std::vector<double>{1, -1, -1, 1});

    World w = build_world(testing::tiny_world());
    Stream rng(4, "g");
    auto grid = sample_grid(w, 1, rng).first;
    auto emb = embed(w.codebook, grid);
    for (std::size_t p = 0; p < grid.tokens.size(); ++p) {
        auto row = w.codebook.row(grid.tokens[p]);
        CHECK(emb.column(p) == std::vector<double>(row.begin(), row.end()));
    }
    CHECK(quantize_grid(w.codebook, emb) == grid);

    TokenGrid bad{2, {0, 1, 2, 0}};
    CHECK_THROWS_AS(embed(cb, bad), DomainError);
}

TEST_CASE("quantize: nearest row, ties to the smaller index") {
    Codebook cb(2, 1, {0.0, 2.0});
    CHECK(quantize(cb, std::vector<double>{0.9}) == 0);
    CHECK(quantize(cb, std::vector<double>{1.1}) == 1);
    CHECK(quantize(cb, std::vector<double>{1.0}) == 0);

    Codebook c6(6, 1, {5, 6, 7, 0, 9, 2});
    CHECK(quantize(c6, std::vector<double>{1.0}) == 3);  // rows 3 (0) and 5 (2) equidistant

    World w = build_world(testing::tiny_world());
    auto row = w.codebook.row(7);
    CHECK(quantize(w.codebook, row) == 7);
    CHECK_THROWS_AS(quantize(cb, std::vector<double>{std::nan("")}), DomainError);
}

TEST_CASE("codebook rejects duplicate rows and non-finite values") {
    CHECK_THROWS_WITH(Codebook(2, 2, {1, 2, 1, 2}), doctest::Contains("identical"));
    CHECK_THROWS(Codebook(1, 2, {1, std::numeric_limits<double>::infinity()}));
    CHECK_THROWS_AS(Codebook(2, 2, {1, 2, 3}), ShapeError);
}

TEST_CASE("render: size, determinism and locality") {
    World w = build_world(WorldConfig{});
    Stream rng(1, "r");
    auto grid = sample_grid(w, 0, rng).first;
    auto a = render(grid, 8);
    CHECK(a.width == 128);
    CHECK(a.height == 128);
    CHECK(encode_ppm(a) == encode_ppm(render(grid, 8)));

    auto other = grid;
    other.tokens[17] = other.tokens[17] == 0 ? 1 : 0;  // row 1, col 1
    auto b = render(other, 8);
    bool inside = false;
    for (std::uint32_t y = 0; y < 128; ++y) {
        for (std::uint32_t x = 0; x < 128; ++x) {
            bool same = true;
            for (int ch = 0; ch < 3; ++ch) same &= a.rgb[(y * 128 + x) * 3 + ch] == b.rgb[(y * 128 + x) * 3 + ch];
            bool in_cell = y / 8 == 1 && x / 8 == 1;
            if (!in_cell) REQUIRE(same);
            inside |= !same;
        }
    }
    CHECK(inside);

    auto ppm = encode_ppm(a);
    std::string header(ppm.begin(), ppm.begin() + 15);
    CHECK(header == "P6\n128 128\n255\n");
    CHECK(ppm.size() == 15 + 128 * 128 * 3);
}

TEST_CASE("codebook file round-trips") {
    World w = build_world(testing::tiny_world());
    auto bytes = encode_codebook(w.codebook);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CTXC");
    CHECK(bytes.size() == 12 + 64 * 6 * 4);
    auto back = decode_codebook(bytes);
    CHECK(back == w.codebook);
    CHECK(encode_codebook(back) == bytes);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_codebook(bytes), FormatError);
}

}
