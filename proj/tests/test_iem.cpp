#include <doctest.h>

#include <cmath>

#include "cortex/binio.hpp"
#include "cortex/error.hpp"
#include "cortex/iem.hpp"
#include "support.hpp"

using namespace cortex;

namespace {

Embedding random_embedding(std::uint32_t dim, std::uint32_t side, std::uint64_t seed) {
    Embedding e{dim, side, std::vector<double>(static_cast<std::size_t>(dim) * side * side)};
    Stream rng(seed, "test/embedding");
    for (auto& v : e.data) v = 2 * rng.uniform() - 1;
    return e;
}

}  // namespace

TEST_SUITE("iem") {

TEST_CASE("architecture tags") {
    CHECK(iem::parse_architecture("pool-mlp") == iem::Architecture::pool_mlp);
    CHECK(iem::parse_architecture("small-conv") == iem::Architecture::small_conv);
    CHECK(iem::architecture_tag(iem::Architecture::small_conv) == "small-conv");
    CHECK_THROWS_AS(iem::parse_architecture("resnet"), DomainError);
}

TEST_CASE("zero head weights give a uniform distribution") {
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 1);
    auto& w = model.parameter("head2.w");
    std::fill(w.data().begin(), w.data().end(), 0.0);
    auto p = iem::forward(model, random_embedding(6, 8, 2));
    REQUIRE(p.size() == 3);
    for (double v : p) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("probabilities sum to one") {
    for (auto arch : {iem::Architecture::pool_mlp, iem::Architecture::small_conv}) {
        auto model = iem::IemModel::initialize(testing::tiny_arch(arch), 3);
        for (std::uint64_t s = 0; s < 5; ++s) {
            auto p = iem::forward(model, random_embedding(6, 8, s));
            double total = 0;
            for (double v : p) total += v;
            CHECK(std::abs(total - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("pool-mlp is invariant to permuting positions") {
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 5, 0.0);
    auto e = random_embedding(6, 8, 7);
    auto swapped = e;
    auto a = e.column(3), b = e.column(40);
    swapped.set_column(3, b);
    swapped.set_column(40, a);
    auto p = iem::forward(model, e), q = iem::forward(model, swapped);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-12));
}

TEST_CASE("input shape is validated") {
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 1);
    CHECK_THROWS_AS(model.check_input({1, 5, 8, 8}), ShapeError);
    CHECK_THROWS_AS(model.check_input({1, 6, 8}), ShapeError);
    auto conv = iem::IemModel::initialize(testing::tiny_arch(iem::Architecture::small_conv), 1);
    CHECK_THROWS_AS(conv.check_input({1, 6, 6, 6}), ShapeError);  // two 2x2 pools need side % 4 == 0
    CHECK_NOTHROW(conv.check_input({2, 6, 8, 8}));
}

TEST_CASE("label rank and metrics under the tie-break") {
    std::vector<double> p{0.2, 0.5, 0.2, 0.1};
    CHECK(iem::label_rank(p, 1) == 0);
    CHECK(iem::label_rank(p, 0) == 1);
    CHECK(iem::label_rank(p, 2) == 2);
    CHECK(iem::label_rank(p, 3) == 3);

    // uniform predictions on a balanced 10-class set: brute-force count of hits
    std::vector<std::vector<double>> probs(100, std::vector<double>(10, 0.1));
    std::vector<std::uint32_t> labels(100);
    for (std::uint32_t i = 0; i < 100; ++i) labels[i] = i % 10;
    auto m = iem::metrics_from_probabilities(probs, labels);
    std::size_t hit1 = 0, hit3 = 0, hit5 = 0;
    for (auto l : labels) {
        hit1 += l < 1;
        hit3 += l < 3;
        hit5 += l < 5;
    }
    CHECK(m.top1 == hit1 / 100.0);
    CHECK(m.top3 == hit3 / 100.0);
    CHECK(m.top5 == hit5 / 100.0);
    CHECK(m.loss == doctest::Approx(std::log(10.0)));
    CHECK_THROWS_AS(iem::metrics_from_probabilities({}, std::vector<std::uint32_t>{}), UsageError);
}

TEST_CASE("checkpoint round-trip and validation") {
    auto dir = testing::scratch("iem_ckpt");
    for (auto arch : {iem::Architecture::pool_mlp, iem::Architecture::small_conv}) {
        auto model = iem::IemModel::initialize(testing::tiny_arch(arch), 9);
        iem::save_checkpoint(model, dir / "m.ckpt");
        auto back = iem::load_checkpoint(dir / "m.ckpt");
        CHECK(back == model);
        CHECK(iem::encode_checkpoint(back) == iem::encode_checkpoint(model));
        for (std::uint64_t s = 0; s < 10; ++s) {
            auto e = random_embedding(6, 8, s);
            CHECK(iem::forward(back, e) == iem::forward(model, e));
        }
    }
    auto bytes = iem::encode_checkpoint(iem::IemModel::initialize(testing::tiny_arch(), 9));
    SUBCASE("truncated") {
        for (std::size_t cut : {std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
            std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
            CHECK_THROWS_AS(iem::decode_checkpoint(part), FormatError);
        }
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(iem::decode_checkpoint(bytes), FormatError);
    }
    SUBCASE("version mismatch") {
        bytes[4] = 2;
        CHECK_THROWS_AS(iem::decode_checkpoint(bytes), VersionError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(iem::load_checkpoint(dir / "absent.ckpt"), IoError);
    }
}

TEST_CASE("training is deterministic and learns the tiny world") {
    World w = build_world(testing::learnable_world());
    auto bundle = gen_dataset(w, {60, 10, 10});
    iem::TrainConfig cfg;
    cfg.epochs = 6;
    cfg.seed = 4;
    auto init = iem::IemModel::initialize(testing::learnable_arch(), 4, -0.5);
    auto a = iem::train(init, bundle.train, bundle.val, w.codebook, cfg);
    auto b = iem::train(init, bundle.train, bundle.val, w.codebook, cfg, 3);
    CHECK(a.model == b.model);
    CHECK(a.best_epoch == b.best_epoch);
    REQUIRE(a.history.size() == 6);
    CHECK(a.history.back().train_loss < a.history.front().train_loss);
    CHECK(iem::evaluate(a.model, bundle.val, w.codebook).top1 > 0.8);

    iem::TrainConfig bad = cfg;
    bad.learning_rate = -1;
    CHECK_THROWS(bad.validate(bundle.train.size()));
}

TEST_CASE("predict matches forward and ignores the thread count") {
    World w = build_world(testing::tiny_world());
    auto data = generate_split(w, "test", 3);
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 2);
    auto one = iem::predict(model, w.codebook, data.grids, 1);
    auto many = iem::predict(model, w.codebook, data.grids, 4);
    CHECK(one == many);
    CHECK(one[4] == iem::forward(model, embed(w.codebook, data.grids[4])));
}

}
