#include <benchmark/benchmark.h>

#include "bridgeseg/refiner.hpp"

using namespace bridgeseg;

static void BM_BuildSchedule(benchmark::State& state) {
    for (auto _ : state) {
        BridgeSchedule s = build_schedule(static_cast<int>(state.range(0)), 1.0);
        benchmark::DoNotOptimize(s.delta.data());
    }
}
BENCHMARK(BM_BuildSchedule)->Arg(200)->Arg(1000);

static void BM_ForwardSample(benchmark::State& state) {
    Rng rng(1);
    BridgeSchedule sched = build_schedule(200, 1.0);
    ProbMask x0, y;
    x0.kind = MaskKind::OneHot;
    x0.values = Tensor::zeros({kNumClasses, 128, 128});
    for (int yy = 0; yy < 128; ++yy) {
        for (int xx = 0; xx < 128; ++xx) x0.values.at3(static_cast<int>(rng.below(7)), yy, xx) = 1.0;
    }
    y.kind = MaskKind::Coarse;
    y.values = Tensor::full({kNumClasses, 128, 128}, 1.0 / kNumClasses);
    for (auto _ : state) {
        auto [xt, eps] = forward_sample(x0, y, 100, sched, rng);
        benchmark::DoNotOptimize(xt.values.ptr());
        benchmark::DoNotOptimize(eps.ptr());
    }
}
BENCHMARK(BM_ForwardSample);

static void BM_PosteriorMoments(benchmark::State& state) {
    BridgeSchedule sched = build_schedule(200, 1.0);
    double acc = 0.0;
    for (auto _ : state) {
        for (int t = 2; t <= 200; t += 7) {
            GaussianMoments m = posterior_moments(0.3, 0.9, -0.2, t, t - 1, sched);
            acc += m.mean + m.var;
        }
        benchmark::DoNotOptimize(acc);
    }
}
BENCHMARK(BM_PosteriorMoments);

BENCHMARK_MAIN();
