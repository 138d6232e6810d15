#include <benchmark/benchmark.h>

#include <random>

#include "mhmamba/autodiff.hpp"
#include "mhmamba/blocks.hpp"
#include "mhmamba/kernels.hpp"
#include "mhmamba/ssm.hpp"

namespace {

using namespace mhm;

template <typename V>
void fill(V&& values, std::mt19937_64& rng) {
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    for (auto& e : values) e = d(rng);
}

// One head of the first stage: 12 channels, 16 states.
struct ScanFixture {
    ssm::SequenceView<float> x;
    ssm::ScanWeights<float> w;

    explicit ScanFixture(std::int64_t tokens) : x(1, tokens, 12) {
        std::mt19937_64 rng(7);
        w = ssm::SSMHeadParams<float>::init(12, 16, rng).weights();
        fill(x.data, rng);
    }
};

void BM_ScanSequential(benchmark::State& state) {
    ScanFixture f(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(ssm::scan_sequential(f.x, f.w));
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ScanSequential)->RangeMultiplier(2)->Range(4096, 32768)->Unit(benchmark::kMillisecond)->Complexity(benchmark::oN);

void BM_ScanBlocked(benchmark::State& state) {
    ScanFixture f(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(ssm::scan_blocked(f.x, f.w, 256));
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_ScanBlocked)->RangeMultiplier(2)->Range(4096, 32768)->Unit(benchmark::kMillisecond)->Complexity(benchmark::oN);

void BM_Conv3d(benchmark::State& state) {
    const std::int64_t n = state.range(0);
    std::mt19937_64 rng(3);
    Volume5<float> x(Shape5(1, 48, n, n, n));
    Volume5<float> w(Shape5(48, 48, 3, 3, 3));
    fill(x.data(), rng);
    fill(w.data(), rng);
    const kernels::ConvGeometry g{1, 1, 1};
    for (auto _ : state) benchmark::DoNotOptimize(kernels::conv3d<float>(x, w, nullptr, g));
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Conv3d)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_MhmBlock(benchmark::State& state) {
    const std::int64_t n = state.range(0);
    std::mt19937_64 rng(5);
    const auto p = blocks::MHMBlockParams<float>::init(48, 4, 16, 4, rng);
    Volume5<float> x(Shape5(1, 48, n, n, n));
    fill(x.data(), rng);
    for (auto _ : state) {
        ad::Tape<float> t(false);
        benchmark::DoNotOptimize(blocks::block_forward(t.constant(x), p, blocks::MhmOptions{}).value());
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_MhmBlock)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
