#include <benchmark/benchmark.h>

#include "bridgeseg/synthgen.hpp"

using namespace bridgeseg;

static void BM_GenerateWsi(benchmark::State& state) {
    const int side = static_cast<int>(state.range(0));
    uint64_t seed = 0;
    for (auto _ : state) {
        SyntheticWsi wsi = generate_wsi(seed++, side, side, reference_class_freqs());
        benchmark::DoNotOptimize(wsi.labels.data.data());
    }
}
BENCHMARK(BM_GenerateWsi)->Arg(512)->Arg(1024)->Unit(benchmark::kMillisecond);

static void BM_NearWhiteFilter(benchmark::State& state) {
    SyntheticWsi wsi = generate_wsi(3, 512, 512, reference_class_freqs());
    for (auto _ : state) {
        double f = near_white_fraction(wsi.image);
        benchmark::DoNotOptimize(f);
    }
}
BENCHMARK(BM_NearWhiteFilter);
