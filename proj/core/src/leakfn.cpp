#include "stepleak/leakfn.hpp"

#include <stdexcept>

namespace stepleak {
namespace {

// fdlibm expf constants, defined by bit pattern so the reference is hermetic
// (no dependence on the host libm).
const float kOne = 1.0f;
const float kHugeVal = 1.0e+30f;
const float kTwom100 = float_from_bits(0x0d800000u);  // 2^-100
const std::array<float, 2> kHalf = {0.5f, -0.5f};
const std::array<float, 2> kLn2Hi = {float_from_bits(0x3f317200u), float_from_bits(0xbf317200u)};
const std::array<float, 2> kLn2Lo = {float_from_bits(0x35bfbe8eu), float_from_bits(0xb5bfbe8eu)};
const float kInvLn2 = float_from_bits(0x3fb8aa3bu);
const float kP1 = float_from_bits(0x3e2aaaabu);
const float kP2 = float_from_bits(0xbb360b61u);
const float kP3 = float_from_bits(0x388ab355u);
const float kP4 = float_from_bits(0xb5ddea0eu);
const float kP5 = float_from_bits(0x3331bb4cu);

// Accumulates the instruction ticks and branch bits of one evaluation.
// Framework ops land in the current event's fw_count; ops between
// begin_libm()/end_libm() land in its libm_count.
class Probe {
  public:
    explicit Probe(EvalResult& r) : r_(r) {
        r_.n_events = 1;
    }

    void op(std::uint32_t n = 1) {
        r_.total_count += n;
        auto& ev = r_.events[r_.n_events - 1];
        if (in_libm_) ev.libm_count += n; else ev.fw_count += n;
    }

    // Compare-and-jump: two instructions either way.
    bool br(bool taken) {
        op(2);
        record(taken);
        return taken;
    }

    // Second conditional jump off flags already set: one instruction.
    bool br1(bool taken) {
        op(1);
        record(taken);
        return taken;
    }

    void begin_libm() {
        in_libm_ = true;
        r_.events[r_.n_events - 1].libm_called = true;
    }
    void end_libm() { in_libm_ = false; }

    void next_event() { ++r_.n_events; }

  private:
    void record(bool taken) {
        if (taken) r_.path |= (1ull << r_.path_len);
        ++r_.path_len;
    }

    EvalResult& r_;
    bool in_libm_ = false;
};

float with_exponent_added(float y, int k) {
    return float_from_bits(float_bits(y) + (static_cast<std::uint32_t>(k) << 23));
}

// fdlibm e_expf.c, branch for branch.  Eleven finite-input paths plus the
// NaN/±Inf specials.
float expf_core(float x, Probe& p) {
    const std::uint32_t ix = float_bits(x);
    const std::uint32_t xsb = ix >> 31;
    const std::uint32_t hx = ix & 0x7fffffffu;
    p.op(5);  // entry, get float word, copy, shift, mask

    float hi = 0.0f;
    float lo = 0.0f;
    int k = 0;
    if (p.br(hx >= kExpfSaturationMagBits)) {  // |x| >= 88.721...
        if (p.br(hx > 0x7f800000u)) {          // NaN
            p.op(2);
            return x + x;
        }
        if (p.br(hx == 0x7f800000u)) {  // exp(+-inf) = {inf, 0}
            p.op(2);
            if (xsb == 0) {
                p.op(1);
                return x;
            }
            p.op(2);
            return 0.0f;
        }
        p.op(1);  // load o_threshold
        if (p.br(x > kExpfOverflowBound)) {
            p.op(3);
            return kHugeVal * kHugeVal;  // overflow
        }
        if (p.br1(x < kExpfUnderflowBound)) {
            p.op(3);
            return kTwom100 * kTwom100;  // underflow
        }
        // |x| in [88.72..., 103.97...]: falls through to the reduction
    }
    p.op(3);  // zero hi/lo/k
    if (p.br(hx > 0x3eb17218u)) {      // |x| > 0.5 ln2
        if (p.br(hx < 0x3F851592u)) {  // and |x| < 1.5 ln2
            p.op(5);
            hi = x - kLn2Hi[xsb];
            lo = kLn2Lo[xsb];
            k = 1 - static_cast<int>(xsb) - static_cast<int>(xsb);
        } else {
            p.op(12);
            k = static_cast<int>(kInvLn2 * x + kHalf[xsb]);
            const float t = static_cast<float>(k);
            hi = x - t * kLn2Hi[0];  // t*ln2HI is exact here
            lo = t * kLn2Lo[0];
        }
        p.op(1);
        x = hi - lo;
    } else if (p.br(hx < 0x31800000u)) {  // |x| < 2^-28
        p.op(2);
        if (p.br(kHugeVal + x > kOne)) {  // triggers inexact; always taken
            p.op(3);
            return kOne + x;
        }
    }
    p.op(11);  // x*x and the degree-5 polynomial
    const float t = x * x;
    const float c = x - t * (kP1 + t * (kP2 + t * (kP3 + t * (kP4 + t * kP5))));
    if (p.br(k == 0)) {
        p.op(8);
        return kOne - ((x * c / (c - 2.0f)) - x);
    }
    p.op(8);
    const float y = kOne - ((lo - (x * c / (2.0f - c))) - hi);
    if (p.br(k >= -125)) {
        p.op(5);
        return with_exponent_added(y, k);
    }
    p.op(6);
    return with_exponent_added(y, k + 100) * kTwom100;
}

float expf_entry(float x, Probe& p) {
    p.begin_libm();
    const float y = expf_core(x, p);
    p.end_libm();
    return y;
}

// Framework-level Logistic(): saturate / direct-exp / standard branches, the
// latter two calling into the maths library.
float logistic_core(float val, Probe& p) {
    p.op(2);  // load input, load cutoff_upper
    if (p.br(val > kLogisticCutoffUpper)) {
        p.op(2);
        return 1.0f;
    }
    p.op(1);  // load cutoff_lower
    if (p.br(val < kLogisticCutoffLower)) {
        p.op(1);
        const float e = expf_entry(val, p);
        p.op(1);
        return e;
    }
    p.op(2);  // negate, call setup
    const float e = expf_entry(-val, p);
    p.op(3);  // 1+e, divide, store
    return 1.0f / (1.0f + e);
}

// tanh as (e^x - e^-x) / (e^x + e^-x): two discrete expf calls, so one
// neuron activation produces two maths-library visits.
float tanh_core(float x, Probe& p) {
    p.op(2);
    const float ep = expf_entry(x, p);
    p.op(1);
    p.next_event();
    p.op(2);  // negate, call setup
    const float en = expf_entry(-x, p);
    p.op(4);  // sub, add, div, store
    return (ep - en) / (ep + en);
}

// std::max(0, x) at -O0: COMISS then a conditional jump; the taken-x side
// runs one extra jump to reach the epilogue.
float relu_branchy_core(float x, Probe& p) {
    p.op(9);  // prologue, spills, operand loads
    if (p.br(0.0f < x)) {
        p.op(4);  // select x, jump to epilogue, pop, ret
        return x;
    }
    p.op(3);  // select 0, pop, ret
    return 0.0f;
}

// std::max(0, x) at -Os: CMOVA, one straight-line path for every input.
float relu_branchless_core(float x, Probe& p) {
    p.op(9);
    return x > 0.0f ? x : 0.0f;
}

}  // namespace

std::string_view leakfn_name(LeakFnKind k) {
    switch (k) {
        case LeakFnKind::expf_tlibc: return "expf";
        case LeakFnKind::logistic_framework: return "logistic";
        case LeakFnKind::tanh_two_exp: return "tanh2exp";
        case LeakFnKind::relu_branchy: return "relu_branchy";
        case LeakFnKind::relu_branchless: return "relu_branchless";
    }
    return "?";
}

LeakFnKind leakfn_from_name(std::string_view name) {
    for (LeakFnKind k : kAllLeakFnKinds) {
        if (leakfn_name(k) == name) return k;
    }
    throw std::invalid_argument("unknown leak function: " + std::string(name));
}

EvalResult reference_eval(LeakFnKind kind, float x) {
    EvalResult r;
    Probe p(r);
    switch (kind) {
        case LeakFnKind::expf_tlibc: r.value = expf_entry(x, p); break;
        case LeakFnKind::logistic_framework: r.value = logistic_core(x, p); break;
        case LeakFnKind::tanh_two_exp: r.value = tanh_core(x, p); break;
        case LeakFnKind::relu_branchy: r.value = relu_branchy_core(x, p); break;
        case LeakFnKind::relu_branchless: r.value = relu_branchless_core(x, p); break;
    }
    return r;
}

}  // namespace stepleak
