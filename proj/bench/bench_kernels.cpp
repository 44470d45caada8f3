#include <benchmark/benchmark.h>

#include "crit/env.hpp"
#include "crit/kernels.hpp"
#include "crit/stage1.hpp"
#include "crit/stage2.hpp"

using namespace crit;

namespace {

struct Setup {
    LabeledDataset ds;
    FilterModel filter;
    BBNModel classifier;

    Setup() {
        const auto env = EnvConfig::standard(2);
        ds = build_dataset(generate_episodes(env, 500, 3), 10, env.horizon_h, {"bench", 3, {}});
        filter = FilterModel(ds.input_dim(), nn::MlpSpec{});
        Rng rng(1);
        filter.init(rng);
        filter.fit_standardizer(ds);
        classifier = BBNModel(ds.input_dim(), BBNArchitecture{});
        classifier.init(rng);
        classifier.fit_standardizer(ds);
    }
};

const Setup& setup() {
    static const Setup s;
    return s;
}

void BM_FilterScoreParallel(benchmark::State& state) {
    const auto& s = setup();
    const auto chunk = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) {
        auto out = kernels::score(s.ds, {}, [&](const nn::Matrix& X, std::span<double> o) {
            const nn::Vector v = s.filter.score(X);
            std::copy(v.data(), v.data() + v.size(), o.begin());
        }, chunk);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * s.ds.size()));
}
BENCHMARK(BM_FilterScoreParallel)->Arg(256)->Arg(4096)->Unit(benchmark::kMillisecond);

void BM_FilterScoreSerial(benchmark::State& state) {
    const auto& s = setup();
    for (auto _ : state) {
        auto out = kernels::score_serial(s.ds, {}, [&](std::span<const double> x) { return s.filter.score_reference(x); });
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * s.ds.size()));
}
BENCHMARK(BM_FilterScoreSerial)->Unit(benchmark::kMillisecond);

void BM_ClassifierPredictParallel(benchmark::State& state) {
    const auto& s = setup();
    for (auto _ : state) {
        auto out = s.classifier.predict_dataset(s.ds);
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * s.ds.size()));
}
BENCHMARK(BM_ClassifierPredictParallel)->Unit(benchmark::kMillisecond);

void BM_ClassifierPredictSerial(benchmark::State& state) {
    const auto& s = setup();
    for (auto _ : state) {
        auto out = kernels::score_serial(s.ds, {}, [&](std::span<const double> x) { return s.classifier.predict_reference(x); });
        benchmark::DoNotOptimize(out.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * s.ds.size()));
}
BENCHMARK(BM_ClassifierPredictSerial)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
