#include <benchmark/benchmark.h>

#include "stepleak/model.hpp"
#include "stepleak/rng.hpp"

using namespace stepleak;

static void BM_ReferenceEvalExpf(benchmark::State& state) {
    Rng rng(1);
    std::vector<float> xs(1024);
    for (auto& x : xs) x = static_cast<float>(rng.uniform(-120.0, 120.0));
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(reference_eval(LeakFnKind::expf_tlibc, xs[i++ & 1023]));
    }
}
BENCHMARK(BM_ReferenceEvalExpf);

static void BM_Classify(benchmark::State& state) {
    const RegionMap& map = region_map_for(LeakFnKind::logistic_framework);
    Rng rng(2);
    std::vector<float> xs(1024);
    for (auto& x : xs) x = static_cast<float>(rng.uniform(-200.0, 200.0));
    std::size_t i = 0;
    for (auto _ : state) {
        benchmark::DoNotOptimize(map.classify(xs[i++ & 1023]));
    }
}
BENCHMARK(BM_Classify);

static void BM_DeriveRegionMap(benchmark::State& state) {
    for (auto _ : state) {
        benchmark::DoNotOptimize(RegionMap::derive(LeakFnKind::expf_tlibc));
    }
}
BENCHMARK(BM_DeriveRegionMap)->Unit(benchmark::kMillisecond);
