#include <benchmark/benchmark.h>

#include <numeric>

#include "cortex/bias.hpp"
#include "cortex/codebook_opt.hpp"
#include "cortex/dataset.hpp"
#include "cortex/iem.hpp"
#include "cortex/saliency.hpp"

using namespace cortex;

namespace {

// Default world, a handful of grids per split; models are untrained (cost does not depend on the weights).
const DatasetBundle& bundle() {
    static const DatasetBundle b = gen_dataset(build_world(WorldConfig{}), SplitCounts{4, 1, 1});
    return b;
}

iem::IemModel model(iem::Architecture arch) {
    iem::ArchSpec spec;
    spec.arch = arch;
    return iem::IemModel::initialize(spec, 0);
}

void BM_BuildWorld(benchmark::State& state) {
    for (auto _ : state) benchmark::DoNotOptimize(build_world(WorldConfig{}));
}
BENCHMARK(BM_BuildWorld)->Unit(benchmark::kMillisecond);

void BM_ForwardBackward(benchmark::State& state) {
    const auto m = model(static_cast<iem::Architecture>(state.range(0)));
    const auto& b = bundle();
    std::vector<std::size_t> idx(static_cast<std::size_t>(state.range(1)));
    std::iota(idx.begin(), idx.end(), 0);
    const auto batch = iem::embed_batch(b.world.codebook, b.train.grids, idx);
    std::vector<std::uint32_t> labels;
    for (auto i : idx) labels.push_back(b.train.labels[i]);
    for (auto _ : state) {
        ad::Tape tape;
        std::vector<ad::Var> params;
        for (const auto& p : m.parameters()) params.push_back(tape.leaf(p.value));
        auto loss = ad::softmax_cross_entropy(m.logits(tape, tape.constant(batch), params), labels);
        tape.backward(loss);
        benchmark::DoNotOptimize(params[0].grad());
    }
    state.SetItemsProcessed(state.iterations() * state.range(1));
}
BENCHMARK(BM_ForwardBackward)
    ->ArgNames({"arch", "batch"})
    ->Args({static_cast<int>(iem::Architecture::pool_mlp), 1})
    ->Args({static_cast<int>(iem::Architecture::pool_mlp), 32})
    ->Args({static_cast<int>(iem::Architecture::small_conv), 1})
    ->Unit(benchmark::kMillisecond);

void BM_SmoothGrad(benchmark::State& state) {
    const auto m = model(iem::Architecture::pool_mlp);
    const auto& b = bundle();
    const auto e = embed(b.world.codebook, b.train.grids[0]);
    saliency::SaliencySpec spec;
    spec.samples = static_cast<std::uint32_t>(state.range(0));
    Stream rng(0, "bench");
    for (auto _ : state) benchmark::DoNotOptimize(saliency::smoothgrad(m, e, b.train.labels[0], spec, rng));
}
BENCHMARK(BM_SmoothGrad)->Arg(1)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_OptimizeStep(benchmark::State& state) {
    const auto m = model(iem::Architecture::pool_mlp);
    const auto& b = bundle();
    const auto cb = codebook_opt::codebook_tensor(b.world.codebook);
    const auto base = iem::to_tensor(embed(b.world.codebook, b.train.grids[0]));
    const auto positions = codebook_opt::RegionMask::rect(16, 4, 4, 6, 6).positions();
    const std::size_t K = b.world.codebook.size();
    ad::Tensor rows({positions.size(), K});
    Stream rng(1, "bench");
    for (auto& v : rows.storage()) v = rng.normal();
    for (auto _ : state) {
        auto noise = ad::sample_gumbel(rows.shape(), rng);
        benchmark::DoNotOptimize(
            codebook_opt::optimize_step(m, cb, 1, base, positions, rows, noise, 1.0, true, 0.5, 1e-4));
    }
}
BENCHMARK(BM_OptimizeStep)->Unit(benchmark::kMicrosecond);

void BM_CliffsDelta(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::vector<std::uint32_t> x(n), y(n);
    Stream rng(2, "bench");
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = static_cast<std::uint32_t>(rng.below(20));
        y[i] = static_cast<std::uint32_t>(rng.below(20));
    }
    for (auto _ : state) benchmark::DoNotOptimize(bias::cliffs_delta(x, y));
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_CliffsDelta)->Arg(100)->Arg(1000)->Complexity();

}  // namespace

BENCHMARK_MAIN();
