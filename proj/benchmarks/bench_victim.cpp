#include <benchmark/benchmark.h>

#include "stepleak/oracle.hpp"
#include "stepleak/rng.hpp"
#include "stepleak/trace.hpp"

using namespace stepleak;

static void BM_InferPreset(benchmark::State& state, const char* preset) {
    const ModelSpec m = preset_model(preset, 1);
    Rng rng(3);
    std::vector<float> x(static_cast<std::size_t>(m.n_inputs()));
    for (auto& v : x) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto _ : state) {
        benchmark::DoNotOptimize(infer(m, x));
    }
}
BENCHMARK_CAPTURE(BM_InferPreset, insurance, "insurance");
BENCHMARK_CAPTURE(BM_InferPreset, mult, "mult");
BENCHMARK_CAPTURE(BM_InferPreset, mnist, "mnist")->Unit(benchmark::kMicrosecond);

static void BM_TraceRoundTrip(benchmark::State& state) {
    const ModelSpec m = preset_model("mult", 1);
    const InferResult r = infer(m, std::vector<float>{0.4f, -0.7f});
    const PageLayout layout;
    for (auto _ : state) {
        const TraceLog t = emit_trace(r.log, layout);
        benchmark::DoNotOptimize(parse_trace(t, layout, m.layers));
    }
}
BENCHMARK(BM_TraceRoundTrip);
