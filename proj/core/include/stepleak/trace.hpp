#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "stepleak/model.hpp"

// Synthetic single-step trace channel.  A trace is the sequence of maximal
// (page, instruction count) runs an instruction-granular page-access monitor
// would record for one inference: a dispatch-page marker run brackets each
// layer, every leaky invocation shows up as a framework-page run, and
// branches that reach the maths library add a maths-page run.  Where two
// framework runs would touch (a branch with no library call, relu layers), a
// small constant dispatch-page glue run keeps runs maximal, standing in for
// the interpreter bookkeeping a real trace shows between activations.
//
// The parser inverts the structure using only page identities and counts,
// never sub-page offsets, and rejects anything that does not reproduce a
// unique per-neuron region assignment.

namespace stepleak {

struct PageLayout {
    std::uint64_t dispatch_page = 0x2c000;
    std::uint64_t framework_page = 0x25000;
    std::uint64_t libm_page = 0x2b000;
    std::uint32_t layer_marker_count = 18;
    std::uint32_t glue_count = 4;
    // Macro-op fusion makes step counts vary slightly but deterministically
    // between monitoring setups; modeled as a constant offset on every run.
    std::int32_t fusion_offset = 0;
};

struct TraceRun {
    std::uint64_t page = 0;
    std::uint32_t count = 0;

    bool operator==(const TraceRun&) const = default;
};

struct TraceLog {
    std::vector<TraceRun> runs;

    bool operator==(const TraceLog&) const = default;
};

class TraceError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
// Missing markers, truncated layers, or a neuron count mismatch.
class IncompleteTrace : public TraceError {
  public:
    using TraceError::TraceError;
};
// A run count matching no region of the layer's activation.
class AmbiguousCount : public TraceError {
  public:
    using TraceError::TraceError;
};

TraceLog emit_trace(const LeakLog& log, const PageLayout& layout);

// Per layer, per neuron, per leaky invocation: the observable region id
// (tanh layers report two per neuron), plus the raw run shapes so callers
// can re-resolve a whole neuron in its Sigma-space map.
struct ParsedTrace {
    std::vector<std::vector<std::vector<RegionId>>> layers;
    std::vector<std::vector<EventSig>> sigs;
};

ParsedTrace parse_trace(const TraceLog& t, const PageLayout& layout,
                        const std::vector<LayerSpec>& arch);

// True when the parsed regions equal the log's per-event observations.
bool parsed_matches_log(const ParsedTrace& parsed, const LeakLog& log);

enum class CorruptMode { truncate, drop_run, perturb_count };

// Deterministic corruption for rejection testing.  truncate drops trailing
// runs; drop_run removes one interior run; perturb_count bumps a structural
// (dispatch-page) run by one, per the marker 18->19 case.
TraceLog corrupt_trace(const TraceLog& t, CorruptMode mode, std::uint64_t seed);

// Line format: `P <page-hex> <count-decimal>`
void write_trace(const TraceLog& t, std::ostream& os);
TraceLog read_trace(std::istream& is);

}  // namespace stepleak
