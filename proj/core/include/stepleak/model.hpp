#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "stepleak/region_map.hpp"

// Minimal binary32 feedforward inference engine.  All arithmetic is float32
// with a fixed accumulation order (input index 0 upward, bias last), so the
// pre-activation a chosen input produces is bit-reproducible.  Every neuron
// activation runs the instrumented reference implementation of its leak
// function and logs one observation per leaky-function invocation.

namespace stepleak {

enum class Activation { exponential, sigmoid, tanh, relu };

std::string_view activation_name(Activation a);
Activation activation_from_name(std::string_view name);

struct ActivationKind {
    Activation fn{};
    LeakFnKind leak{};

    bool operator==(const ActivationKind&) const = default;
};

// Default leak-function binding; relu binds to the branchless (constant
// count) compilation unless the branchy variant is requested.
ActivationKind make_activation(Activation fn, bool branchy_relu = false);

// Output range metadata; open endpoints exclude the bound.
struct OutputRange {
    double lo, hi;
    bool lo_open, hi_open;

    bool contains(double y) const {
        if (lo_open ? y <= lo : y < lo) return false;
        if (hi_open ? y >= hi : y > hi) return false;
        return true;
    }
};

OutputRange output_range(Activation a);

// Interval on which the activation is mathematically invertible; nullopt for
// relu.  inverse_activation is only defined on that interval.
std::optional<OutputRange> invertible_on(Activation a);
double inverse_activation(Activation a, double y);

// Shared, lazily derived region maps (immutable after derivation).
const RegionMap& region_map_for(LeakFnKind kind);
const RegionMap& activation_map(const ActivationKind& k);

struct LayerSpec {
    int n_inputs = 0;
    int n_neurons = 0;
    ActivationKind activation;

    bool operator==(const LayerSpec&) const = default;
};

// One leaky-function invocation as the victim saw it: the observable in the
// invocation's own map plus the run shape a trace would expose.
struct LeakEvent {
    Observation obs;
    LeakEventShape shape;
};

struct NeuronLog {
    std::array<LeakEvent, 2> events{};
    int n_events = 0;
};

struct LayerLog {
    ActivationKind activation;
    std::vector<NeuronLog> neurons;
};

struct LeakLog {
    std::vector<LayerLog> layers;
};

class ModelError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct ModelSpec {
    std::vector<LayerSpec> layers;
    std::vector<std::vector<float>> weights;  // per layer, row-major n_neurons x n_inputs
    std::vector<std::vector<float>> biases;   // per layer, n_neurons
    std::uint64_t seed = 0;

    float weight(int layer, int neuron, int input) const {
        return weights[layer][static_cast<std::size_t>(neuron) * layers[layer].n_inputs + input];
    }
    float bias(int layer, int neuron) const { return biases[layer][neuron]; }

    int n_inputs() const { return layers.front().n_inputs; }
    int n_outputs() const { return layers.back().n_neurons; }

    // shape chaining + finite parameters
    void validate() const;
};

struct InferResult {
    std::vector<float> output;
    LeakLog log;
};

// Computes one float32 pre-activation with the canonical accumulation order.
float preactivation(const ModelSpec& m, int layer, int neuron, std::span<const float> layer_input);

// Full forward pass with leakage log.  Throws ModelError on arity mismatch.
InferResult infer(const ModelSpec& m, std::span<const float> input);

// Evaluates one activation, returning the float32 result and its leak events.
struct ActivationEval {
    float value;
    std::array<LeakEvent, 2> events{};
    int n_events = 0;
};
ActivationEval eval_activation(const ActivationKind& k, float sigma);

// Observable the attack sees for one neuron (resolved in the activation's
// own Sigma-space map; for tanh the ordered pair of exp calls).
Observation neuron_observable(const ActivationKind& k, const NeuronLog& n);

// Framework instructions of the wrapper around a direct expf activation
// (constant; the wrapper has no input-dependent branch).  Trace emission
// adds it to the framework run of exponential layers.
std::uint32_t expeval_wrapper_ops();

// Case-study presets: "insurance" (11->100 exponential, 100->10 relu,
// 10->1 relu), "mult" (2->4 sigmoid, 4->8 sigmoid, 8->1 relu), "mnist"
// (784->128 sigmoid, 128->10 relu).  Weights and biases are seeded
// normal(0, 0.3) draws from named substreams.
ModelSpec preset_model(const std::string& name, std::uint64_t seed);

// JSON with float32 parameters serialized as hex bit patterns; round trips
// are bit-exact.  Throws ModelError on malformed files, shape-chain
// violations, or non-finite parameters.
void save_model(const ModelSpec& m, const std::string& path);
ModelSpec load_model(const std::string& path);
void write_model(const ModelSpec& m, std::ostream& os);
ModelSpec read_model(std::istream& is);

}  // namespace stepleak
