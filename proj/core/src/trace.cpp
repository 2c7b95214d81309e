#include "stepleak/trace.hpp"

#include <istream>
#include <ostream>
#include <sstream>

#include "stepleak/rng.hpp"

namespace stepleak {
namespace {

std::uint32_t wrapper_ops(const ActivationKind& k) {
    return k.fn == Activation::exponential ? expeval_wrapper_ops() : 0;
}

class RunCursor {
  public:
    RunCursor(const TraceLog& t, const PageLayout& layout) : t_(t), layout_(layout) {}

    bool done() const { return i_ >= t_.runs.size(); }

    TraceRun peek() const {
        if (done()) throw IncompleteTrace("trace ended early");
        TraceRun r = t_.runs[i_];
        const std::int64_t adj = static_cast<std::int64_t>(r.count) - layout_.fusion_offset;
        if (adj < 1) throw AmbiguousCount("run count below fusion offset");
        r.count = static_cast<std::uint32_t>(adj);
        return r;
    }

    TraceRun take() {
        TraceRun r = peek();
        ++i_;
        return r;
    }

  private:
    const TraceLog& t_;
    const PageLayout& layout_;
    std::size_t i_ = 0;
};

}  // namespace

TraceLog emit_trace(const LeakLog& log, const PageLayout& layout) {
    TraceLog t;
    auto push = [&t, &layout](std::uint64_t page, std::uint32_t count) {
        const std::uint32_t emitted =
            static_cast<std::uint32_t>(static_cast<std::int64_t>(count) + layout.fusion_offset);
        if (!t.runs.empty() && t.runs.back().page == page) {
            throw TraceError("emit would merge two runs on one page");
        }
        t.runs.push_back({page, emitted});
    };

    if (log.layers.empty()) return t;

    push(layout.dispatch_page, layout.layer_marker_count);
    for (std::size_t k = 0; k < log.layers.size(); ++k) {
        const LayerLog& layer = log.layers[k];
        for (const NeuronLog& n : layer.neurons) {
            for (int e = 0; e < n.n_events; ++e) {
                const LeakEventShape& shape = n.events[e].shape;
                if (!t.runs.empty() && t.runs.back().page == layout.framework_page) {
                    push(layout.dispatch_page, layout.glue_count);
                }
                push(layout.framework_page, shape.fw_count + wrapper_ops(layer.activation));
                if (shape.libm_called) push(layout.libm_page, shape.libm_count);
            }
        }
        // closing marker doubles as the next layer's opening marker
        push(layout.dispatch_page, layout.layer_marker_count);
    }
    return t;
}

ParsedTrace parse_trace(const TraceLog& t, const PageLayout& layout,
                        const std::vector<LayerSpec>& arch) {
    // maximal-run invariant first: a merged or split trace is not parseable
    for (std::size_t i = 1; i < t.runs.size(); ++i) {
        if (t.runs[i].page == t.runs[i - 1].page) {
            throw IncompleteTrace("consecutive runs on one page");
        }
    }

    ParsedTrace out;
    if (arch.empty()) {
        if (!t.runs.empty()) throw IncompleteTrace("trace for empty architecture has runs");
        return out;
    }

    RunCursor cur(t, layout);
    auto expect_marker = [&] {
        const TraceRun r = cur.take();
        if (r.page != layout.dispatch_page || r.count != layout.layer_marker_count) {
            throw IncompleteTrace("missing layer marker");
        }
    };

    expect_marker();
    for (const LayerSpec& l : arch) {
        const ActivationKind kind = l.activation;
        const RegionMap& map = activation_map(kind);
        const std::uint32_t wrap = wrapper_ops(kind);
        const int events_per_neuron = (kind.fn == Activation::tanh) ? 2 : 1;

        std::vector<std::vector<RegionId>> neurons;
        std::vector<EventSig> neuron_sigs;
        for (int n = 0; n < l.n_neurons; ++n) {
            EventSig sig;
            sig.n = events_per_neuron;
            for (int e = 0; e < events_per_neuron; ++e) {
                TraceRun r = cur.peek();
                if (r.page == layout.dispatch_page && r.count == layout.glue_count) {
                    cur.take();
                    r = cur.peek();
                }
                if (r.page != layout.framework_page) {
                    throw IncompleteTrace("expected a framework run");
                }
                cur.take();
                if (r.count < wrap) throw AmbiguousCount("framework run shorter than wrapper");
                LeakEventShape shape;
                shape.fw_count = r.count - wrap;
                // does any region of this activation call into the maths
                // library from a branch with this framework count?
                bool fw_known = false;
                bool libm_expected = false;
                auto scan = [&](const Region& reg) {
                    if (e < reg.sig.n && reg.sig.ev[e].fw_count == shape.fw_count) {
                        fw_known = true;
                        if (reg.sig.ev[e].libm_called) libm_expected = true;
                    }
                };
                for (const Region& reg : map.intervals()) scan(reg);
                for (const Region& reg : map.points()) scan(reg);
                scan(map.nan_region());
                if (!fw_known) throw AmbiguousCount("framework count matches no branch");
                if (libm_expected) {
                    const TraceRun lr = cur.take();
                    if (lr.page != layout.libm_page) {
                        throw IncompleteTrace("expected a maths-library run");
                    }
                    shape.libm_called = true;
                    shape.libm_count = lr.count;
                }
                sig.ev[e] = shape;
            }

            std::vector<RegionId> ids;
            if (kind.fn == Activation::tanh) {
                const RegionMap& expf_map = region_map_for(LeakFnKind::expf_tlibc);
                for (int e = 0; e < sig.n; ++e) {
                    LeakEventShape libm_only{0, sig.ev[e].libm_count, true};
                    const Region* reg =
                        expf_map.resolve_events(std::span<const LeakEventShape>{&libm_only, 1});
                    if (!reg) throw AmbiguousCount("exp call count matches no region");
                    ids.push_back(reg->id);
                }
                // the pair must also resolve in the tanh map, or the two
                // counts are mutually inconsistent
                if (!map.resolve_events(sig)) throw AmbiguousCount("inconsistent exp call pair");
            } else {
                const Region* reg = map.resolve_events(sig);
                if (!reg) throw AmbiguousCount("count matches no region of the activation");
                ids.push_back(reg->id);
            }
            neurons.push_back(std::move(ids));
            neuron_sigs.push_back(sig);
        }
        expect_marker();
        out.layers.push_back(std::move(neurons));
        out.sigs.push_back(std::move(neuron_sigs));
    }
    if (!cur.done()) throw IncompleteTrace("trailing runs after final marker");
    return out;
}

bool parsed_matches_log(const ParsedTrace& parsed, const LeakLog& log) {
    if (parsed.layers.size() != log.layers.size()) return false;
    for (std::size_t k = 0; k < log.layers.size(); ++k) {
        const auto& pl = parsed.layers[k];
        const auto& ll = log.layers[k].neurons;
        if (pl.size() != ll.size()) return false;
        for (std::size_t n = 0; n < ll.size(); ++n) {
            if (static_cast<int>(pl[n].size()) != ll[n].n_events) return false;
            for (int e = 0; e < ll[n].n_events; ++e) {
                if (!(pl[n][e] == ll[n].events[e].obs.region)) return false;
            }
        }
    }
    return true;
}

TraceLog corrupt_trace(const TraceLog& t, CorruptMode mode, std::uint64_t seed) {
    Rng rng = substream(seed, "trace-corruption");
    TraceLog out = t;
    if (out.runs.empty()) return out;
    switch (mode) {
        case CorruptMode::truncate: {
            const std::size_t k = 1 + rng.below(std::min<std::size_t>(out.runs.size(), 6));
            out.runs.resize(out.runs.size() - std::min(k, out.runs.size()));
            break;
        }
        case CorruptMode::drop_run: {
            const std::size_t i = rng.below(out.runs.size());
            out.runs.erase(out.runs.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
        case CorruptMode::perturb_count: {
            std::vector<std::size_t> structural;
            for (std::size_t i = 0; i < out.runs.size(); ++i) {
                if (out.runs[i].page == t.runs.front().page) structural.push_back(i);
            }
            const std::size_t i = structural[rng.below(structural.size())];
            out.runs[i].count += 1;
            break;
        }
    }
    return out;
}

void write_trace(const TraceLog& t, std::ostream& os) {
    for (const TraceRun& r : t.runs) {
        os << "P " << std::hex << r.page << std::dec << ' ' << r.count << '\n';
    }
}

TraceLog read_trace(std::istream& is) {
    TraceLog t;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag, page_hex;
        std::uint32_t count;
        if (!(ls >> tag >> page_hex >> count) || tag != "P") {
            throw TraceError("trace file: bad line '" + line + "'");
        }
        t.runs.push_back({std::stoull(page_hex, nullptr, 16), count});
    }
    return t;
}

}  // namespace stepleak
