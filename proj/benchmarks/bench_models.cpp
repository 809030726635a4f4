#include <benchmark/benchmark.h>

#include "bridgeseg/classifier.hpp"
#include "bridgeseg/refiner.hpp"

using namespace bridgeseg;

static void BM_ClassifyRegion(benchmark::State& state) {
    ClassifierModel model = init_classifier(TinyVitConfig{}, 1);
    Rng rng(2);
    RgbImage region(128, 128, 3);
    for (auto& v : region.data) v = static_cast<uint8_t>(rng.below(256));
    for (auto _ : state) {
        ProbMask mask = classify_region(model, region, 16);
        benchmark::DoNotOptimize(mask.values.ptr());
    }
}
BENCHMARK(BM_ClassifyRegion);

static void BM_DenoiserForward(benchmark::State& state) {
    RefinerConfig cfg;
    RefinerState st = init_refiner(cfg, 3);
    Rng rng(4);
    Tensor z = Tensor::randn({kNumClasses + cfg.cond_features, 128, 128}, rng);
    for (auto _ : state) {
        Tensor out = st.denoiser.forward(z, 0.5, false);
        benchmark::DoNotOptimize(out.ptr());
    }
}
BENCHMARK(BM_DenoiserForward)->Unit(benchmark::kMillisecond);

static void BM_RefinerTrainStep(benchmark::State& state) {
    RefinerConfig cfg;
    RefinerState st = init_refiner(cfg, 5);
    Rng rng(6);
    const int side = static_cast<int>(state.range(0));
    Tensor x0 = Tensor::zeros({kNumClasses, side, side});
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) x0.at3(static_cast<int>(rng.below(7)), y, x) = 1.0;
    }
    Tensor y = Tensor::full({kNumClasses, side, side}, 1.0 / kNumClasses);
    Tensor o = Tensor::zeros({3, side, side});
    for (auto& v : o.data) v = rng.uniform();
    for (auto _ : state) {
        RefinerLosses l = refiner_train_step(st, x0, y, o, rng);
        benchmark::DoNotOptimize(l.l_ref);
    }
}
BENCHMARK(BM_RefinerTrainStep)->Arg(64)->Arg(128)->Unit(benchmark::kMillisecond);

static void BM_SampleRefined(benchmark::State& state) {
    RefinerConfig cfg;
    RefinerState st = init_refiner(cfg, 7);
    Rng rng(8);
    ProbMask y;
    y.kind = MaskKind::Coarse;
    y.values = Tensor::full({kNumClasses, 128, 128}, 1.0 / kNumClasses);
    Tensor o = Tensor::zeros({3, 128, 128});
    for (auto& v : o.data) v = rng.uniform();
    for (auto _ : state) {
        Rng srng(9);
        ProbMask out = sample_refined(st, y, o, static_cast<int>(state.range(0)),
                                      SampleMode::Ddim, srng);
        benchmark::DoNotOptimize(out.values.ptr());
    }
}
BENCHMARK(BM_SampleRefined)->Arg(5)->Arg(20)->Unit(benchmark::kMillisecond);
