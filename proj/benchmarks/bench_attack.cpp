#include <benchmark/benchmark.h>

#include "stepleak/attack.hpp"
#include "stepleak/rng.hpp"

using namespace stepleak;

namespace {

ModelSpec bench_layer(int n_inputs, int n_neurons) {
    ModelSpec m;
    m.seed = 9;
    m.layers = {{n_inputs, n_neurons, make_activation(Activation::exponential)}};
    Rng rng(9);
    std::vector<float> w(static_cast<std::size_t>(n_inputs) * n_neurons);
    std::vector<float> b(n_neurons);
    for (auto& v : w) v = static_cast<float>(rng.normal(0.0, 0.3));
    for (auto& v : b) v = static_cast<float>(rng.normal(0.0, 0.3));
    m.weights = {std::move(w)};
    m.biases = {std::move(b)};
    return m;
}

}  // namespace

static void BM_BinarySearchThreshold(benchmark::State& state) {
    const ModelSpec m = bench_layer(4, 1);
    Oracle o(m, OracleMode::direct);
    const std::vector<float> locked = {0.1f, -0.2f, 0.3f, 0.0f};
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            binary_search_threshold(o, 0, 0, locked, 1000.0f, static_cast<int>(state.range(0))));
    }
}
BENCHMARK(BM_BinarySearchThreshold)->Arg(20)->Arg(55);

static void BM_RecoverLayer(benchmark::State& state) {
    const ModelSpec m = bench_layer(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
    AttackConfig cfg;
    cfg.max_depth = 25;
    for (auto _ : state) {
        Oracle o(m, OracleMode::direct);
        benchmark::DoNotOptimize(recover_first_layer(o, cfg));
    }
}
BENCHMARK(BM_RecoverLayer)->Args({4, 4})->Args({8, 16})->Unit(benchmark::kMillisecond);
