#include <doctest.h>

#include <cmath>

#include "cortex/codebook_opt.hpp"
#include "cortex/error.hpp"
#include "support.hpp"

using namespace cortex;
using namespace cortex::codebook_opt;
using cortex::ad::Tensor;

namespace {

struct Fixture {
    World world = build_world(testing::tiny_world(21));
    iem::IemModel model = iem::IemModel::initialize(testing::tiny_arch(), 5, 0.0);
    TokenGrid grid;

    Fixture() {
        Stream rng(2, "fixture");
        grid = sample_grid(world, 0, rng).first;
    }
};

}  // namespace

TEST_SUITE("codebook_opt") {

TEST_CASE("region masks") {
    auto r = RegionMask::parse("2x3@1,4", 8);
    CHECK(r.count() == 6);
    CHECK(r.positions() == std::vector<std::size_t>{12, 13, 14, 20, 21, 22});
    CHECK(RegionMask::full(4).count() == 16);
    CHECK(RegionMask::none(4).count() == 0);
    CHECK_THROWS_AS(RegionMask::rect(8, 4, 4, 6, 6), DomainError);
    CHECK_THROWS_AS(RegionMask::parse("4x4", 8), UsageError);
    CHECK_THROWS_AS(RegionMask::parse("4x4@1,1z", 8), UsageError);
    CHECK(parse_objective("log-probability") == Objective::log_probability);
    CHECK(parse_init_mode("from-grid") == InitMode::from_grid);
}

TEST_CASE("selection initialization") {
    Fixture f;
    auto uni = init_selection(InitMode::uniform, nullptr, 8, 64, 0.1);
    for (double v : uni.data()) CHECK(v == 0.0);

    auto sel = init_selection(InitMode::from_grid, &f.grid, 8, 64, 0.1);
    for (std::size_t p = 0; p < 64; ++p) {
        double z = 0;
        for (std::size_t k = 0; k < 64; ++k) z += std::exp(sel[p * 64 + k]);
        CHECK(std::exp(sel[p * 64 + f.grid.tokens[p]]) / z == doctest::Approx(1 - 0.1 + 0.1 / 64));
    }
    CHECK(extract_tokens(sel, RegionMask::full(8)) == f.grid.tokens);
    CHECK_THROWS_AS(init_selection(InitMode::from_grid, nullptr, 8, 64, 0.1), UsageError);
}

TEST_CASE("extract tokens breaks ties toward the smaller id") {
    Tensor sel({1, 3}, {0.1, 0.9, 0.9});
    CHECK(extract_tokens(sel, RegionMask::full(1)) == std::vector<TokenId>{1});
}

TEST_CASE("selected embeddings") {
    Fixture f;
    const auto cb = codebook_tensor(f.world.codebook);
    Stream rng(4, "sel");
    auto sel = init_selection(InitMode::uniform, nullptr, 8, 64, 0.1);
    for (auto& v : sel.storage()) v = rng.normal();

    // hard mode: every column is an exact codebook row
    auto hard = select_embedding(sel, f.world.codebook, 0.7, true, rng);
    auto grid = quantize_grid(f.world.codebook, hard);
    CHECK(embed(f.world.codebook, grid) == hard);

    // soft mode, uniform logits, zero noise: the codebook mean
    ad::Tape tape;
    Tensor zeros({64, 64}, 0.0);
    auto e = select_embedding(tape, tape.constant(zeros), cb, zeros, 1.3, false, 8);
    auto mean = f.world.codebook.mean_vector();
    auto emb = iem::from_tensor(e.value());
    for (std::size_t p = 0; p < 64; ++p) {
        for (std::size_t c = 0; c < 6; ++c) CHECK(emb.at(c, p) == doctest::Approx(mean[c]).epsilon(1e-12));
    }

    // saturated one-hot logits reproduce embed() of the argmax grid regardless of tau
    auto onehot = init_selection(InitMode::from_grid, &f.grid, 8, 64, 1e-300);
    for (double tau : {0.5, 2.0}) {
        ad::Tape t;
        auto v = select_embedding(t, t.constant(onehot), cb, zeros, tau, false, 8);
        CHECK(iem::from_tensor(v.value()) == embed(f.world.codebook, f.grid));
    }
}

TEST_CASE("loss bounds") {
    Fixture f;
    ad::Tape tape;
    auto e = tape.constant(iem::to_tensor(embed(f.world.codebook, f.grid)));
    double l = selection_loss(tape, f.model, e, 1, 0.0).value().item();
    CHECK(l <= 0.0);
    CHECK(l >= -1.0);
    CHECK(l == doctest::Approx(-iem::forward(f.model, embed(f.world.codebook, f.grid))[1]).epsilon(1e-12));

    Embedding zero{6, 8, std::vector<double>(6 * 64, 0.0)};
    auto z = tape.constant(iem::to_tensor(zero));
    CHECK(selection_loss(tape, f.model, z, 2, 0.5).value().item() ==
          doctest::Approx(-iem::forward(f.model, zero)[2]).epsilon(1e-12));
    CHECK_THROWS_AS(selection_loss(tape, f.model, z, 3, 0.0), DomainError);
}

TEST_CASE("loss gradient through the soft relaxation checks against finite differences") {
    // small codebook and a masked block, as in the optimizer, keep the adjoints well above
    // the finite-difference noise floor
    auto cfg = testing::tiny_world(21);
    cfg.codebook_size = 16;
    cfg.concepts = 2;
    cfg.signature_size = 2;
    cfg.context_pool = 2;
    cfg.context_size = 2;
    cfg.background_range = 10;
    cfg.signature_plants = 2;
    cfg.context_plants = 2;
    World world = build_world(cfg);
    Stream g(2, "fixture");
    auto grid = sample_grid(world, 0, g).first;
    auto model = iem::IemModel::initialize(testing::tiny_arch(), 5, 0.0);
    const auto cb = codebook_tensor(world.codebook);
    const auto positions = RegionMask::rect(8, 2, 2, 3, 3).positions();
    const auto base = iem::to_tensor(embed(world.codebook, grid));
    Stream rng(6, "gc");
    auto noise = ad::sample_gumbel({4, 16}, rng);
    Tensor point({4, 16});
    for (auto& v : point.storage()) v = rng.normal();
    for (auto obj : {Objective::probability, Objective::log_probability}) {
        auto fn = [&](ad::Tape& t, ad::Var p) {
            auto rows = ad::matmul(ad::gumbel_softmax(p, noise, 0.9, false), t.constant(cb));
            return selection_loss(t, model, ad::place_columns(base, positions, rows), 1, 1e-3, obj);
        };
        CHECK(ad::grad_check(fn, point) < 1e-4);
    }
}

TEST_CASE("straight-through update equals the hand-derived update") {
    Fixture f;
    const auto cb = codebook_tensor(f.world.codebook);
    auto mask = RegionMask::rect(8, 2, 2, 3, 3);
    auto positions = mask.positions();
    const std::size_t R = positions.size(), K = 64, d = 6;
    const auto base = iem::to_tensor(embed(f.world.codebook, f.grid));
    Stream rng(9, "st");
    Tensor rows({R, K});
    for (auto& v : rows.storage()) v = rng.normal();
    auto noise = ad::sample_gumbel({R, K}, rng);
    const double tau = 0.8, lr = 0.3, reg = 1e-3;

    for (auto obj : {Objective::probability, Objective::log_probability}) {
        // oracle: forward with the hard one-hot rows, dL/dE by reverse mode on E alone,
        // then chain through the codebook and the soft Jacobian y_k (delta_kj - y_j) / tau
        std::vector<double> soft(R * K);
        std::vector<std::size_t> arg(R);
        for (std::size_t r = 0; r < R; ++r) {
            double mx = -1e300, z = 0;
            for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, (rows[r * K + k] + noise[r * K + k]) / tau);
            for (std::size_t k = 0; k < K; ++k) z += soft[r * K + k] = std::exp((rows[r * K + k] + noise[r * K + k]) / tau - mx);
            arg[r] = 0;
            for (std::size_t k = 0; k < K; ++k) {
                soft[r * K + k] /= z;
                if (soft[r * K + k] > soft[r * K + arg[r]]) arg[r] = k;
            }
        }
        Tensor hard_e = base;
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < d; ++c) hard_e[c * 64 + positions[r]] = cb[arg[r] * d + c];
        ad::Tape tape;
        auto ev = tape.leaf(hard_e);
        auto loss = selection_loss(tape, f.model, ev, 2, reg, obj);
        tape.backward(loss);
        const Tensor& ge = ev.grad();

        Tensor expected = rows;
        for (std::size_t r = 0; r < R; ++r) {
            std::vector<double> gy(K, 0.0);
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t c = 0; c < d; ++c) gy[k] += ge[c * 64 + positions[r]] * cb[k * d + c];
            double dot = 0;
            for (std::size_t k = 0; k < K; ++k) dot += gy[k] * soft[r * K + k];
            for (std::size_t j = 0; j < K; ++j) expected[r * K + j] -= lr * soft[r * K + j] * (gy[j] - dot) / tau;
        }

        Tensor updated = rows;
        double value = optimize_step(f.model, cb, 2, base, positions, updated, noise, tau, true, lr, reg, obj);
        CHECK(value == doctest::Approx(loss.value().item()).epsilon(1e-12));
        double worst = 0;
        for (std::size_t i = 0; i < rows.size(); ++i) worst = std::max(worst, std::abs(updated[i] - expected[i]));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("snapshot rule") {
    CHECK(snapshot_steps(3000, 500) == std::vector<std::uint32_t>{0, 500, 1000, 1500, 2000, 2500, 3000});
    CHECK(snapshot_steps(10, 4) == std::vector<std::uint32_t>{0, 4, 8, 10});
    CHECK(snapshot_steps(0, 5) == std::vector<std::uint32_t>{0});
    CHECK_THROWS_AS(snapshot_steps(10, 0), ConfigError);
}

TEST_CASE("optimization keeps the unmasked positions and is reproducible") {
    Fixture f;
    auto mask = RegionMask::rect(8, 3, 3, 2, 2);
    OptConfig cfg;
    cfg.steps = 40;
    cfg.snapshot_interval = 10;
    cfg.seed = 3;
    auto a = optimize(f.model, f.world.codebook, 1, mask, cfg, &f.grid);
    auto b = optimize(f.model, f.world.codebook, 1, mask, cfg, &f.grid);
    CHECK(a.selection == b.selection);
    REQUIRE(a.trajectory.snapshots.size() == 5);
    for (const auto& s : a.trajectory.snapshots) {
        for (std::size_t p = 0; p < 64; ++p)
            if (!mask.flags[p]) CHECK(s.grid.tokens[p] == f.grid.tokens[p]);
    }
    auto init = init_selection(InitMode::from_grid, &f.grid, 8, 64, cfg.smoothing);
    for (std::size_t p = 0; p < 64; ++p) {
        if (mask.flags[p]) continue;
        for (std::size_t k = 0; k < 64; ++k) CHECK(a.selection[p * 64 + k] == init[p * 64 + k]);
    }

    OptConfig zero = cfg;
    zero.steps = 0;
    auto z = optimize(f.model, f.world.codebook, 1, mask, zero, &f.grid);
    CHECK(apply_tokens(f.grid, mask, extract_tokens(z.selection, mask)) == f.grid);
    REQUIRE(z.trajectory.snapshots.size() == 1);
    CHECK(z.trajectory.snapshots[0].grid == f.grid);

    auto single = RegionMask::rect(8, 1, 1, 4, 4);
    CHECK(extract_tokens(optimize(f.model, f.world.codebook, 1, single, cfg, &f.grid).selection, single).size() == 1);

    CHECK_THROWS_AS(optimize(f.model, f.world.codebook, 1, RegionMask::none(8), cfg, &f.grid), UsageError);
    CHECK_THROWS_AS(optimize(f.model, f.world.codebook, 1, mask, cfg, nullptr), UsageError);

    OptConfig uni = cfg;
    uni.init = InitMode::uniform;
    auto full = optimize(f.model, f.world.codebook, 2, RegionMask::full(8), uni);
    CHECK(full.trajectory.snapshots.back().grid.tokens.size() == 64);
}

TEST_CASE("optimization raises the target on a trained model") {
    World w = build_world(testing::learnable_world());
    auto bundle = gen_dataset(w, {60, 10, 10});
    iem::TrainConfig tc;
    tc.epochs = 8;
    auto model = iem::train(iem::IemModel::initialize(testing::learnable_arch(), 1, -0.5), bundle.train, bundle.val,
                            w.codebook, tc).model;
    auto grid = bundle.test.grids[bundle.test.indices_of(0)[0]];
    OptConfig cfg;
    cfg.steps = 1000;
    cfg.learning_rate = 2.0;
    cfg.snapshot_interval = 250;
    auto edit = edit_grid(grid, RegionMask::rect(8, 3, 3, 2, 2), 1, model, w.codebook, cfg, 4);
    const auto& snaps = edit.trajectory.snapshots;
    CHECK(snaps.back().target_probability > snaps.front().target_probability);
    CHECK(edit.rasters.size() == snaps.size());
    CHECK(edit.rasters[0].second.width == 32);
}

TEST_CASE("embedding baseline with zero steps returns the original grid") {
    Fixture f;
    OptConfig cfg;
    cfg.steps = 0;
    auto r = embedding_opt_baseline(f.model, f.world.codebook, f.grid, 1, RegionMask::rect(8, 2, 2, 0, 0), cfg);
    CHECK(r.grid == f.grid);
}

TEST_CASE("flip evaluation with zero steps changes nothing") {
    World w = build_world(testing::tiny_world());
    auto test = generate_split(w, "test", 3);
    auto ex = iem::IemModel::initialize(testing::tiny_arch(), 1);
    auto ev = iem::IemModel::initialize(testing::tiny_arch(), 2);
    FlipConfig cfg;
    cfg.pairs = {{0, 1}};
    cfg.images = 2;
    cfg.region_h = cfg.region_w = 2;
    cfg.region_row = cfg.region_col = 3;
    cfg.opt.steps = 0;
    auto rows = flip_eval(ex, ev, w.codebook, test, cfg, 2);
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
        CHECK(r.delta_orig == 0.0);
        CHECK(r.delta_targ == 0.0);
        CHECK(r.trials == 2);
    }
    auto csv = format_flip_csv(rows);
    CHECK(csv.rfind("pair,direction,method,dP_orig_mean,dP_targ_mean,trials\n", 0) == 0);
    CHECK(csv.find("0->1") != std::string::npos);
    CHECK(csv.find("1->0") != std::string::npos);
}

}
