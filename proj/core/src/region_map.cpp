#include "stepleak/region_map.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

namespace stepleak {
namespace {

EventSig sig_of(const EvalResult& r) {
    EventSig s;
    s.n = r.n_events;
    for (int i = 0; i < r.n_events; ++i) s.ev[i] = r.events[i];
    return s;
}

std::vector<std::int64_t> coarse_grid() {
    std::vector<std::int64_t> keys;
    keys.reserve(2 * 255 * 64 + 3);
    for (std::uint32_t sign = 0; sign < 2; ++sign) {
        for (std::uint32_t e = 0; e < 255; ++e) {        // exponent field; 255 = inf/nan
            for (std::uint32_t j = 0; j < 64; ++j) {     // 64 points per binade
                std::uint32_t bits = (e << 23) | (j << 17);
                if (sign) bits |= 0x8000'0000u;
                keys.push_back(total_order_key(float_from_bits(bits)));
            }
        }
    }
    keys.push_back(total_order_key(kMaxFinite));
    keys.push_back(total_order_key(-kMaxFinite));
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    return keys;
}

const std::vector<std::string>& interval_labels(LeakFnKind kind, std::size_t n) {
    static const std::vector<std::string> expf_labels = {
        "Underflow", "NormalNeg", "SubnormNeg", "Inner3Neg", "Inner2Neg", "Inner1Neg",
        "TooSmall",  "Inner1Pos", "Inner2Pos",  "NormalPos", "Overflow"};
    static const std::vector<std::string> logistic_labels = {
        "Underflow",   "NormalNeg",   "SubnormNeg", "ExpNeg",      "StdOuterNeg", "StdMidNeg",
        "StdInnerNeg", "StdTiny",     "StdInnerPos", "StdMidPos",  "StdOuterPos", "SaturateOne"};
    static const std::vector<std::string> tanh_labels = {
        "SatNeg",  "FarNeg", "SubNeg", "OuterNeg", "MidNeg", "InnerNeg", "Tiny",
        "InnerPos", "MidPos", "OuterPos", "SubPos", "FarPos", "SatPos"};
    static const std::vector<std::string> branchy_labels = {"NonPositive", "Positive"};
    static const std::vector<std::string> branchless_labels = {"All"};
    static const std::vector<std::string> empty;

    switch (kind) {
        case LeakFnKind::expf_tlibc:
            if (n == expf_labels.size()) return expf_labels;
            break;
        case LeakFnKind::logistic_framework:
            if (n == logistic_labels.size()) return logistic_labels;
            break;
        case LeakFnKind::tanh_two_exp:
            if (n == tanh_labels.size()) return tanh_labels;
            break;
        case LeakFnKind::relu_branchy:
            if (n == branchy_labels.size()) return branchy_labels;
            break;
        case LeakFnKind::relu_branchless:
            if (n == branchless_labels.size()) return branchless_labels;
            break;
    }
    return empty;
}

std::string shape_string(const EventSig& s) {
    std::ostringstream os;
    for (int i = 0; i < s.n; ++i) {
        if (i) os << '+';
        os << s.ev[i].fw_count << ':';
        if (s.ev[i].libm_called) os << s.ev[i].libm_count; else os << '-';
    }
    return os.str();
}

EventSig shape_from_string(const std::string& text) {
    EventSig s;
    std::istringstream is(text);
    std::string part;
    while (std::getline(is, part, '+')) {
        if (s.n >= 2) throw std::runtime_error("region map: too many events in shape");
        const auto colon = part.find(':');
        if (colon == std::string::npos) throw std::runtime_error("region map: bad shape " + text);
        LeakEventShape ev;
        ev.fw_count = static_cast<std::uint32_t>(std::stoul(part.substr(0, colon)));
        const std::string lib = part.substr(colon + 1);
        if (lib == "-") {
            ev.libm_called = false;
            ev.libm_count = 0;
        } else {
            ev.libm_called = true;
            ev.libm_count = static_cast<std::uint32_t>(std::stoul(lib));
        }
        s.ev[s.n++] = ev;
    }
    return s;
}

}  // namespace

RegionMap RegionMap::derive(LeakFnKind kind) {
    RegionMap m;
    m.kind_ = kind;

    const auto grid = coarse_grid();
    auto eval_key = [kind](std::int64_t k) { return reference_eval(kind, float_from_key(k)); };

    // Walk the grid; bisect every signature change to adjacent keys.  After a
    // boundary is pinned, re-test the current grid point so multiple
    // boundaries inside one coarse segment are all found.
    std::vector<std::pair<std::int64_t, EvalResult>> starts;
    starts.emplace_back(grid.front(), eval_key(grid.front()));
    for (std::size_t i = 1; i < grid.size(); ++i) {
        for (;;) {
            const EvalResult& prev = starts.back().second;
            EvalResult cur = eval_key(grid[i]);
            if (cur.same_path(prev)) break;
            std::int64_t lo = std::max(starts.back().first, grid[i - 1]);
            std::int64_t hi = grid[i];
            EvalResult lo_sig = eval_key(lo);
            if (!lo_sig.same_path(prev)) throw DerivationError("region map: non-monotone signature walk");
            while (hi - lo > 1) {
                const std::int64_t mid = lo + (hi - lo) / 2;
                EvalResult ms = eval_key(mid);
                if (ms.same_path(lo_sig)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            starts.emplace_back(hi, eval_key(hi));
        }
    }

    const std::int64_t last_key = total_order_key(kMaxFinite);
    for (std::size_t r = 0; r < starts.size(); ++r) {
        Region reg;
        reg.lo_key = starts[r].first;
        reg.hi_key = (r + 1 < starts.size()) ? starts[r + 1].first - 1 : last_key;
        reg.instr_count = starts[r].second.total_count;
        reg.sig = sig_of(starts[r].second);
        m.intervals_.push_back(reg);
    }

    if (leakfn_declared_leaky(kind) && m.intervals_.size() < 2) {
        throw DerivationError("leaky function shows a single class: " +
                              std::string(leakfn_name(kind)));
    }

    for (float inf : {-kInf, kInf}) {
        const EvalResult r = reference_eval(kind, inf);
        Region reg;
        reg.lo_key = reg.hi_key = (inf < 0) ? std::numeric_limits<std::int64_t>::min()
                                            : std::numeric_limits<std::int64_t>::max();
        reg.instr_count = r.total_count;
        reg.sig = sig_of(r);
        m.points_.push_back(reg);
    }

    const EvalResult nan_r = reference_eval(kind, float_from_bits(0x7fc00000u));
    m.nan_.instr_count = nan_r.total_count;
    m.nan_.sig = sig_of(nan_r);

    m.assign_labels();
    m.build_resolution();
    return m;
}

void RegionMap::assign_labels() {
    const auto& named = interval_labels(kind_, intervals_.size());
    int index = 0;
    for (std::size_t i = 0; i < intervals_.size(); ++i) {
        std::string label;
        if (!named.empty()) {
            label = named[i];
        } else {
            label = "B" + std::to_string(i);
        }
        intervals_[i].id = RegionId{std::move(label), index++};
    }
    points_[0].id = RegionId{"InfNeg", index++};
    points_[1].id = RegionId{"InfPos", index++};
    nan_.id = RegionId{"NaN", index++};
}

const Region& RegionMap::region_at(int slot) const {
    const int n = static_cast<int>(intervals_.size());
    if (slot < n) return intervals_[slot];
    if (slot < n + 2) return points_[slot - n];
    return nan_;
}

void RegionMap::build_resolution() {
    resolution_.clear();
    const int n = static_cast<int>(intervals_.size());
    auto add_interval = [this](int idx) {
        const Region& r = intervals_[idx];
        for (auto& [sig, slot] : resolution_) {
            if (sig == r.sig) {
                // collision: the interval with the larger lo (the
                // positive-side band) is the canonical observable
                if (region_at(slot).lo_key < r.lo_key) slot = idx;
                return;
            }
        }
        resolution_.emplace_back(r.sig, idx);
    };
    for (int i = 0; i < n; ++i) add_interval(i);
    // points and nan resolve to themselves only if their shape is unclaimed
    for (int p = 0; p < 2; ++p) {
        if (!resolve_events(points_[p].sig)) resolution_.emplace_back(points_[p].sig, n + p);
    }
    if (!resolve_events(nan_.sig)) resolution_.emplace_back(nan_.sig, n + 2);
}

const Region& RegionMap::interval_containing(float x) const {
    const std::int64_t k = total_order_key(x);
    auto it = std::upper_bound(intervals_.begin(), intervals_.end(), k,
                               [](std::int64_t key, const Region& r) { return key < r.lo_key; });
    if (it == intervals_.begin()) throw std::out_of_range("interval_containing: below map");
    --it;
    if (k > it->hi_key) throw std::out_of_range("interval_containing: gap in map");
    return *it;
}

Observation RegionMap::classify(float x) const {
    const Region* side_precise;
    if (std::isnan(x)) {
        side_precise = &nan_;
    } else if (std::isinf(x)) {
        side_precise = &points_[x < 0 ? 0 : 1];
    } else {
        side_precise = &interval_containing(x);
    }
    const Region* obs = resolve_events(side_precise->sig);
    return Observation{obs->id, side_precise->instr_count};
}

const Region* RegionMap::resolve_events(const EventSig& sig) const {
    for (const auto& [s, slot] : resolution_) {
        if (s == sig) return &region_at(slot);
    }
    return nullptr;
}

const Region* RegionMap::resolve_events(std::span<const LeakEventShape> events) const {
    EventSig s;
    if (events.size() > 2) return nullptr;
    s.n = static_cast<int>(events.size());
    for (std::size_t i = 0; i < events.size(); ++i) s.ev[i] = events[i];
    return resolve_events(s);
}

const RegionId& RegionMap::observable_for(const RegionId& id) const {
    auto locate = [&]() -> const Region* {
        for (const Region& r : intervals_)
            if (r.id == id) return &r;
        for (const Region& r : points_)
            if (r.id == id) return &r;
        if (nan_.id == id) return &nan_;
        return nullptr;
    };
    const Region* r = locate();
    if (!r) throw std::invalid_argument("unknown region id: " + id.label);
    return resolve_events(r->sig)->id;
}

std::vector<Threshold> RegionMap::thresholds() const {
    std::vector<Threshold> out;
    for (std::size_t i = 0; i + 1 < intervals_.size(); ++i) {
        Threshold t;
        t.value = intervals_[i].hi();
        t.below = intervals_[i].id;
        t.above = intervals_[i + 1].id;
        t.fn_kind = kind_;
        out.push_back(std::move(t));
    }
    return out;
}

bool RegionMap::is_right_saturated(const RegionId& observable) const {
    if (intervals_.size() < 2) return false;
    if (observable == resolve_events(intervals_.back().sig)->id) return true;
    return observable == resolve_events(points_[1].sig)->id;
}

bool RegionMap::is_left_saturated(const RegionId& observable) const {
    if (intervals_.size() < 2) return false;
    if (observable == resolve_events(intervals_.front().sig)->id) return true;
    return observable == resolve_events(points_[0].sig)->id;
}

Threshold RegionMap::right_saturation_threshold() const {
    const auto ts = thresholds();
    if (ts.empty()) throw std::logic_error("no thresholds in map");
    return ts.back();
}

Threshold RegionMap::left_saturation_threshold() const {
    const auto ts = thresholds();
    if (ts.empty()) throw std::logic_error("no thresholds in map");
    return ts.front();
}

const Region* RegionMap::find_label(std::string_view label) const {
    for (const Region& r : intervals_)
        if (r.id.label == label) return &r;
    for (const Region& r : points_)
        if (r.id.label == label) return &r;
    if (nan_.id.label == label) return &nan_;
    return nullptr;
}

void RegionMap::export_text(std::ostream& os) const {
    os << "regionmap " << leakfn_name(kind_) << " v1\n";
    char buf[32];
    for (const Region& r : intervals_) {
        std::snprintf(buf, sizeof buf, "%08x %08x", float_bits(r.lo()), float_bits(r.hi()));
        os << "R " << r.id.label << ' ' << buf << ' ' << r.instr_count << ' ' << shape_string(r.sig)
           << '\n';
    }
    for (std::size_t i = 0; i < points_.size(); ++i) {
        const Region& r = points_[i];
        std::snprintf(buf, sizeof buf, "%08x", float_bits(i == 0 ? -kInf : kInf));
        os << "P " << r.id.label << ' ' << buf << ' ' << r.instr_count << ' ' << shape_string(r.sig)
           << '\n';
    }
    os << "N " << nan_.id.label << ' ' << nan_.instr_count << ' ' << shape_string(nan_.sig) << '\n';
}

RegionMap RegionMap::import_text(std::istream& is) {
    RegionMap m;
    std::string word, kind_name, version;
    if (!(is >> word >> kind_name >> version) || word != "regionmap" || version != "v1") {
        throw std::runtime_error("region map: bad header");
    }
    m.kind_ = leakfn_from_name(kind_name);

    std::string tag;
    int index = 0;
    while (is >> tag) {
        Region r;
        std::string label, shape;
        if (tag == "R") {
            std::string lo_hex, hi_hex;
            std::uint32_t count;
            if (!(is >> label >> lo_hex >> hi_hex >> count >> shape))
                throw std::runtime_error("region map: bad R line");
            r.lo_key = total_order_key(float_from_bits(std::stoul(lo_hex, nullptr, 16)));
            r.hi_key = total_order_key(float_from_bits(std::stoul(hi_hex, nullptr, 16)));
            r.instr_count = count;
            r.sig = shape_from_string(shape);
            r.id = RegionId{label, index++};
            m.intervals_.push_back(std::move(r));
        } else if (tag == "P") {
            std::string bits_hex;
            std::uint32_t count;
            if (!(is >> label >> bits_hex >> count >> shape))
                throw std::runtime_error("region map: bad P line");
            const float v = float_from_bits(std::stoul(bits_hex, nullptr, 16));
            r.lo_key = r.hi_key = (v < 0) ? std::numeric_limits<std::int64_t>::min()
                                          : std::numeric_limits<std::int64_t>::max();
            r.instr_count = count;
            r.sig = shape_from_string(shape);
            r.id = RegionId{label, index++};
            m.points_.push_back(std::move(r));
        } else if (tag == "N") {
            std::uint32_t count;
            if (!(is >> label >> count >> shape)) throw std::runtime_error("region map: bad N line");
            r.instr_count = count;
            r.sig = shape_from_string(shape);
            r.id = RegionId{label, index++};
            m.nan_ = std::move(r);
        } else {
            throw std::runtime_error("region map: unknown tag " + tag);
        }
    }

    if (m.points_.size() != 2) throw std::runtime_error("region map: expected two point regions");
    // partition sanity: contiguous intervals over the finite line
    const std::int64_t lo = total_order_key(-kMaxFinite);
    const std::int64_t hi = total_order_key(kMaxFinite);
    if (m.intervals_.empty() || m.intervals_.front().lo_key != lo || m.intervals_.back().hi_key != hi)
        throw std::runtime_error("region map: intervals do not span the finite line");
    for (std::size_t i = 0; i + 1 < m.intervals_.size(); ++i) {
        if (m.intervals_[i].hi_key + 1 != m.intervals_[i + 1].lo_key)
            throw std::runtime_error("region map: gap or overlap between intervals");
    }
    m.build_resolution();
    return m;
}

}  // namespace stepleak
