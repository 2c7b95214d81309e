#include "stepleak/oracle.hpp"

namespace stepleak {
namespace {

std::uint64_t fnv(std::uint64_t h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 1099511628211ull;
    }
    return h;
}

std::uint64_t input_hash(std::span<const float> input) {
    std::uint64_t h = 1469598103934665603ull;
    for (float x : input) h = fnv(h, float_bits(x));
    return h;
}

std::uint64_t result_digest(const QueryResult& r) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& layer : r.layers) {
        for (const Observation& o : layer) {
            h = fnv(h, static_cast<std::uint64_t>(o.region.index));
            h = fnv(h, o.instr_count);
        }
    }
    return h;
}

}  // namespace

std::string_view oracle_mode_name(OracleMode m) {
    return m == OracleMode::direct ? "direct" : "trace";
}

OracleMode oracle_mode_from_name(std::string_view name) {
    if (name == "direct") return OracleMode::direct;
    if (name == "trace") return OracleMode::trace;
    throw std::invalid_argument("unknown oracle mode: " + std::string(name));
}

Oracle::Oracle(ModelSpec model, OracleMode mode, PageLayout layout)
    : model_(std::move(model)), mode_(mode), layout_(layout) {
    model_.validate();
}

QueryResult Oracle::query(std::span<const float> input) {
    ++count_;
    ++by_phase_[phase_];

    const InferResult inf = infer(model_, input);
    QueryResult res;
    res.output = inf.output;
    res.layers.resize(model_.layers.size());

    if (mode_ == OracleMode::direct) {
        for (std::size_t k = 0; k < inf.log.layers.size(); ++k) {
            const auto& layer = inf.log.layers[k];
            res.layers[k].reserve(layer.neurons.size());
            for (const NeuronLog& n : layer.neurons) {
                res.layers[k].push_back(neuron_observable(layer.activation, n));
            }
        }
    } else {
        const TraceLog t = emit_trace(inf.log, layout_);
        std::vector<LayerSpec> arch;
        arch.reserve(model_.layers.size());
        for (const LayerSpec& l : model_.layers) arch.push_back(l);
        ParsedTrace parsed;
        try {
            parsed = parse_trace(t, layout_, arch);
        } catch (const IncompleteTrace&) {
            ++incomplete_;
            throw;
        }
        for (std::size_t k = 0; k < parsed.layers.size(); ++k) {
            const RegionMap& map = activation_map(model_.layers[k].activation);
            res.layers[k].reserve(parsed.layers[k].size());
            for (const auto& sig : parsed.sigs[k]) {
                const Region* reg = map.resolve_events(sig);
                if (!reg) throw AmbiguousCount("trace oracle: unresolvable neuron");
                res.layers[k].push_back(Observation{reg->id, reg->instr_count});
            }
        }
    }

    const std::uint64_t h = input_hash(input);
    const std::uint64_t d = result_digest(res);
    auto [it, fresh] = guard_.emplace(h, d);
    if (!fresh && it->second != d) ++nondet_;
    return res;
}

}  // namespace stepleak
