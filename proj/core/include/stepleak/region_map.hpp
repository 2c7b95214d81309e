#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stepleak/float_bits.hpp"
#include "stepleak/leakfn.hpp"

// Derived instruction-count region maps.
//
// A RegionMap partitions the float32 line (plus NaN and the infinities) into
// maximal runs of inputs that drive the reference implementation down the
// same branch path.  Boundaries are exact: for every boundary b, the path
// differs between b and the next float up.  Maps are derived once by probing
// reference_eval on a coarse grid and bisecting every class change down to
// adjacent floats; derived maps are exported as text files and versioned as
// test fixtures.
//
// Magnitude-symmetric bands (the inner expf regions, the mirrored standard
// logistic bands) share instruction counts, so an observed count does not
// always identify the side of the axis.  classify() therefore returns the
// canonical observable region for what was measured (the positive-side
// representative), while the map itself keeps side-precise intervals that
// thresholds_of() reports.

namespace stepleak {

struct RegionId {
    std::string label;
    int index = -1;  // position in the map (intervals, then points, then nan)

    bool operator==(const RegionId&) const = default;
};

// Event-shape signature of one region: the framework/libm run counts an
// invocation in this region produces.  This is what a trace exposes.
struct EventSig {
    std::array<LeakEventShape, 2> ev{};
    int n = 0;

    bool operator==(const EventSig&) const = default;
};

struct Region {
    RegionId id;
    std::int64_t lo_key = 0;  // inclusive total-order bounds; finite floats only
    std::int64_t hi_key = 0;
    std::uint32_t instr_count = 0;
    EventSig sig;

    float lo() const { return float_from_key(lo_key); }
    float hi() const { return float_from_key(hi_key); }
    bool contains(float x) const {
        const std::int64_t k = total_order_key(x);
        return lo_key <= k && k <= hi_key;
    }

    bool operator==(const Region&) const = default;
};

struct Observation {
    RegionId region;  // canonical observable region
    std::uint32_t instr_count = 0;

    bool operator==(const Observation&) const = default;
};

// The exact border between two adjacent interval regions: `value` is the
// greatest float still classified in the lower region; one ulp up starts the
// upper region.
struct Threshold {
    float value = 0.0f;
    RegionId below;
    RegionId above;
    LeakFnKind fn_kind{};
};

class DerivationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class RegionMap {
  public:
    // Probes reference_eval over a coarse grid (64 log-spaced points per
    // binade, both signs, plus 0, +-inf, NaN) and bisects every class change
    // to adjacent floats.  Fails if a kind declared leaky shows fewer than
    // two classes.
    static RegionMap derive(LeakFnKind kind);

    LeakFnKind kind() const { return kind_; }
    const std::vector<Region>& intervals() const { return intervals_; }
    const std::vector<Region>& points() const { return points_; }
    const Region& nan_region() const { return nan_; }

    // Side-precise interval lookup; x must be finite.
    const Region& interval_containing(float x) const;

    // Observable classification: total over all float32 including NaN/Inf.
    Observation classify(float x) const;

    // Resolves the observable region from the framework/libm runs of one
    // invocation (what a parsed trace provides).  Null when no region of
    // this map produces that shape.
    const Region* resolve_events(std::span<const LeakEventShape> events) const;
    const Region* resolve_events(const EventSig& sig) const;

    // Canonical observable region for a side-precise region id.
    const RegionId& observable_for(const RegionId& id) const;

    std::vector<Threshold> thresholds() const;

    // Saturation = the extreme interval regions and the infinity points
    // beyond them; where a calibration probe provably lands once |Sigma| is
    // large enough of the right sign.
    bool is_right_saturated(const RegionId& observable) const;
    bool is_left_saturated(const RegionId& observable) const;
    Threshold right_saturation_threshold() const;  // last interval border
    Threshold left_saturation_threshold() const;   // first interval border

    const Region* find_label(std::string_view label) const;

    // Text format, one region per line:
    //   R <label> <lo-bits-hex> <hi-bits-hex> <count> <shape>
    //   P <label> <bits-hex> <count> <shape>
    //   N <label> <count> <shape>
    // where <shape> is fw:libm pairs joined by '+', '-' for no libm call.
    void export_text(std::ostream& os) const;
    static RegionMap import_text(std::istream& is);

    bool operator==(const RegionMap& o) const {
        return kind_ == o.kind_ && intervals_ == o.intervals_ && points_ == o.points_ && nan_ == o.nan_;
    }

  private:
    RegionMap() = default;
    void assign_labels();
    void build_resolution();
    const Region& region_at(int slot) const;

    LeakFnKind kind_{};
    std::vector<Region> intervals_;  // sorted by lo_key
    std::vector<Region> points_;     // -inf, +inf
    Region nan_;
    // event-shape -> region slot (intervals, then points, then nan;
    // positive-side representative wins count collisions).  Slots, not
    // pointers, so the map stays movable.
    std::vector<std::pair<EventSig, int>> resolution_;
};

}  // namespace stepleak
