#include "stepleak/model.hpp"

#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <unordered_map>

#include "stepleak/rng.hpp"

#include <json.hpp>

namespace stepleak {
namespace {

// Framework-page instructions of the ExpEval-style wrapper around a direct
// expf activation.  The wrapper has no input-dependent branch; this constant
// is what the trace channel shows between two maths-library runs.
constexpr std::uint32_t kExpEvalWrapperOps = 7;

using nlohmann::json;

std::string f32_hex(float v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%08x", float_bits(v));
    return buf;
}

float f32_from_hex(const std::string& s) {
    if (s.size() != 8 || s.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos) {
        throw ModelError("model file: bad float32 hex value '" + s + "'");
    }
    return float_from_bits(static_cast<std::uint32_t>(std::stoul(s, nullptr, 16)));
}

}  // namespace

std::string_view activation_name(Activation a) {
    switch (a) {
        case Activation::exponential: return "exponential";
        case Activation::sigmoid: return "sigmoid";
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
    }
    return "?";
}

Activation activation_from_name(std::string_view name) {
    for (Activation a : {Activation::exponential, Activation::sigmoid, Activation::tanh, Activation::relu}) {
        if (activation_name(a) == name) return a;
    }
    throw ModelError("unknown activation: " + std::string(name));
}

ActivationKind make_activation(Activation fn, bool branchy_relu) {
    switch (fn) {
        case Activation::exponential: return {fn, LeakFnKind::expf_tlibc};
        case Activation::sigmoid: return {fn, LeakFnKind::logistic_framework};
        case Activation::tanh: return {fn, LeakFnKind::tanh_two_exp};
        case Activation::relu:
            return {fn, branchy_relu ? LeakFnKind::relu_branchy : LeakFnKind::relu_branchless};
    }
    throw ModelError("bad activation");
}

OutputRange output_range(Activation a) {
    switch (a) {
        case Activation::exponential: return {0.0, std::numeric_limits<double>::infinity(), true, true};
        case Activation::sigmoid: return {0.0, 1.0, true, true};
        case Activation::tanh: return {-1.0, 1.0, true, true};
        case Activation::relu: return {0.0, std::numeric_limits<double>::infinity(), false, true};
    }
    throw ModelError("bad activation");
}

std::optional<OutputRange> invertible_on(Activation a) {
    switch (a) {
        case Activation::exponential: return OutputRange{0.0, std::numeric_limits<double>::infinity(), true, true};
        case Activation::sigmoid: return OutputRange{0.0, 1.0, true, true};
        case Activation::tanh: return OutputRange{-1.0, 1.0, true, true};
        case Activation::relu: return std::nullopt;
    }
    throw ModelError("bad activation");
}

double inverse_activation(Activation a, double y) {
    switch (a) {
        case Activation::exponential: return std::log(y);
        case Activation::sigmoid: return std::log(y / (1.0 - y));
        case Activation::tanh: return std::atanh(y);
        case Activation::relu: break;
    }
    throw ModelError("activation has no inverse");
}

const RegionMap& region_map_for(LeakFnKind kind) {
    static std::mutex mu;
    static std::unordered_map<int, RegionMap> maps;
    std::scoped_lock lock(mu);
    auto it = maps.find(static_cast<int>(kind));
    if (it == maps.end()) {
        it = maps.emplace(static_cast<int>(kind), RegionMap::derive(kind)).first;
    }
    return it->second;
}

const RegionMap& activation_map(const ActivationKind& k) { return region_map_for(k.leak); }

void ModelSpec::validate() const {
    if (layers.empty()) throw ModelError("model has no layers");
    if (weights.size() != layers.size() || biases.size() != layers.size()) {
        throw ModelError("model: weights/biases do not match layer count");
    }
    for (std::size_t k = 0; k < layers.size(); ++k) {
        const LayerSpec& l = layers[k];
        if (l.n_inputs < 1 || l.n_neurons < 1) throw ModelError("model: empty layer");
        if (k > 0 && layers[k - 1].n_neurons != l.n_inputs) {
            throw ModelError("model: layer shapes do not chain");
        }
        if (weights[k].size() != static_cast<std::size_t>(l.n_inputs) * l.n_neurons) {
            throw ModelError("model: weight matrix dimension mismatch");
        }
        if (biases[k].size() != static_cast<std::size_t>(l.n_neurons)) {
            throw ModelError("model: bias vector dimension mismatch");
        }
        for (float w : weights[k]) {
            if (!std::isfinite(w)) throw ModelError("model: non-finite weight");
        }
        for (float b : biases[k]) {
            if (!std::isfinite(b)) throw ModelError("model: non-finite bias");
        }
    }
}

float preactivation(const ModelSpec& m, int layer, int neuron, std::span<const float> layer_input) {
    const LayerSpec& l = m.layers[layer];
    const float* w = m.weights[layer].data() + static_cast<std::size_t>(neuron) * l.n_inputs;
    float acc = 0.0f;
    for (int j = 0; j < l.n_inputs; ++j) {
        acc += w[j] * layer_input[j];  // one float32 multiply, one float32 add
    }
    acc += m.biases[layer][neuron];
    return acc;
}

ActivationEval eval_activation(const ActivationKind& k, float sigma) {
    ActivationEval out;
    const EvalResult r = reference_eval(k.leak, sigma);
    out.value = r.value;
    out.n_events = r.n_events;
    const RegionMap& own_map = activation_map(k);
    for (int i = 0; i < r.n_events; ++i) {
        out.events[i].shape = r.events[i];
        if (k.fn == Activation::tanh) {
            // each exp call observes the expf map
            LeakEventShape libm_only{0, r.events[i].libm_count, true};
            const Region* reg = region_map_for(LeakFnKind::expf_tlibc)
                                    .resolve_events(std::span<const LeakEventShape>{&libm_only, 1});
            out.events[i].obs = Observation{reg->id, libm_only.libm_count};
        } else {
            const Region* reg =
                own_map.resolve_events(std::span<const LeakEventShape>{&r.events[i], 1});
            out.events[i].obs = Observation{reg->id, r.events[i].fw_count + r.events[i].libm_count};
        }
    }
    return out;
}

Observation neuron_observable(const ActivationKind& k, const NeuronLog& n) {
    EventSig sig;
    sig.n = n.n_events;
    for (int i = 0; i < n.n_events; ++i) sig.ev[i] = n.events[i].shape;
    const Region* reg = activation_map(k).resolve_events(sig);
    if (!reg) throw ModelError("neuron log does not match any region of its activation");
    return Observation{reg->id, reg->instr_count};
}

InferResult infer(const ModelSpec& m, std::span<const float> input) {
    if (static_cast<int>(input.size()) != m.n_inputs()) {
        throw ModelError("infer: input arity mismatch");
    }
    InferResult res;
    res.log.layers.resize(m.layers.size());
    std::vector<float> cur(input.begin(), input.end());
    std::vector<float> next;
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        const LayerSpec& l = m.layers[k];
        next.assign(l.n_neurons, 0.0f);
        res.log.layers[k].activation = l.activation;
        res.log.layers[k].neurons.resize(l.n_neurons);
        for (int n = 0; n < l.n_neurons; ++n) {
            const float sigma = preactivation(m, static_cast<int>(k), n, cur);
            const ActivationEval ev = eval_activation(l.activation, sigma);
            next[n] = ev.value;
            NeuronLog& nl = res.log.layers[k].neurons[n];
            nl.n_events = ev.n_events;
            for (int i = 0; i < ev.n_events; ++i) nl.events[i] = ev.events[i];
        }
        cur.swap(next);
    }
    res.output = std::move(cur);
    return res;
}

ModelSpec preset_model(const std::string& name, std::uint64_t seed) {
    std::vector<LayerSpec> layers;
    if (name == "insurance") {
        layers = {{11, 100, make_activation(Activation::exponential)},
                  {100, 10, make_activation(Activation::relu)},
                  {10, 1, make_activation(Activation::relu)}};
    } else if (name == "mult") {
        layers = {{2, 4, make_activation(Activation::sigmoid)},
                  {4, 8, make_activation(Activation::sigmoid)},
                  {8, 1, make_activation(Activation::relu)}};
    } else if (name == "mnist") {
        layers = {{784, 128, make_activation(Activation::sigmoid)},
                  {128, 10, make_activation(Activation::relu)}};
    } else {
        throw ModelError("unknown preset: " + name);
    }

    ModelSpec m;
    m.seed = seed;
    m.layers = std::move(layers);
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        const LayerSpec& l = m.layers[k];
        Rng wrng = substream(seed, "model-weights", k);
        Rng brng = substream(seed, "model-biases", k);
        std::vector<float> w(static_cast<std::size_t>(l.n_inputs) * l.n_neurons);
        std::vector<float> b(l.n_neurons);
        for (auto& v : w) v = static_cast<float>(wrng.normal(0.0, 0.3));
        for (auto& v : b) v = static_cast<float>(brng.normal(0.0, 0.3));
        m.weights.push_back(std::move(w));
        m.biases.push_back(std::move(b));
    }
    m.validate();
    return m;
}

void write_model(const ModelSpec& m, std::ostream& os) {
    json j;
    j["seed"] = m.seed;
    j["layers"] = json::array();
    for (const LayerSpec& l : m.layers) {
        j["layers"].push_back({{"inputs", l.n_inputs},
                               {"neurons", l.n_neurons},
                               {"activation", std::string(activation_name(l.activation.fn))},
                               {"leak", std::string(leakfn_name(l.activation.leak))}});
    }
    j["weights"] = json::array();
    j["biases"] = json::array();
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
        json w = json::array(), b = json::array();
        for (float v : m.weights[k]) w.push_back(f32_hex(v));
        for (float v : m.biases[k]) b.push_back(f32_hex(v));
        j["weights"].push_back(std::move(w));
        j["biases"].push_back(std::move(b));
    }
    os << j.dump(1) << '\n';
}

ModelSpec read_model(std::istream& is) {
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ModelError(std::string("model file: ") + e.what());
    }
    ModelSpec m;
    try {
        m.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& jl : j.at("layers")) {
            LayerSpec l;
            l.n_inputs = jl.at("inputs").get<int>();
            l.n_neurons = jl.at("neurons").get<int>();
            l.activation.fn = activation_from_name(jl.at("activation").get<std::string>());
            l.activation.leak = leakfn_from_name(jl.at("leak").get<std::string>());
            m.layers.push_back(l);
        }
        for (const auto& jw : j.at("weights")) {
            std::vector<float> w;
            for (const auto& v : jw) w.push_back(f32_from_hex(v.get<std::string>()));
            m.weights.push_back(std::move(w));
        }
        for (const auto& jb : j.at("biases")) {
            std::vector<float> b;
            for (const auto& v : jb) b.push_back(f32_from_hex(v.get<std::string>()));
            m.biases.push_back(std::move(b));
        }
    } catch (const json::exception& e) {
        throw ModelError(std::string("model file: ") + e.what());
    }
    m.validate();
    return m;
}

void save_model(const ModelSpec& m, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw ModelError("cannot open for write: " + path);
    write_model(m, os);
}

ModelSpec load_model(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ModelError("cannot open: " + path);
    return read_model(is);
}

std::uint32_t expeval_wrapper_ops() { return kExpEvalWrapperOps; }

}  // namespace stepleak
