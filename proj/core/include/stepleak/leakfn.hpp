#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include "stepleak/float_bits.hpp"

// Instrumented reference implementations of the leaky activation-path
// functions.  Each function is written as the straight-line/branch structure
// of the code it models (an fdlibm-style expf, the framework-level Logistic
// wrapper, a two-exp tanh, std::max-based relu at two optimisation levels),
// with an explicit per-instruction tick so an evaluation yields both the
// float32 result and a deterministic instruction count per branch path.
//
// Counts model instructions on two pages: the framework page (wrapper code)
// and the maths-library page (expf itself).  Only relative distinctness of
// counts between paths carries information; the overflow/underflow early
// returns of expf are pinned to 17/18.

namespace stepleak {

enum class LeakFnKind {
    expf_tlibc,          // direct expf, fdlibm branch structure
    logistic_framework,  // three-branch Logistic() wrapper around expf
    tanh_two_exp,        // tanh via two discrete expf calls
    relu_branchy,        // std::max compiled with a conditional jump
    relu_branchless,     // std::max compiled to a conditional move
};

inline constexpr std::array<LeakFnKind, 5> kAllLeakFnKinds = {
    LeakFnKind::expf_tlibc,     LeakFnKind::logistic_framework, LeakFnKind::tanh_two_exp,
    LeakFnKind::relu_branchy,   LeakFnKind::relu_branchless,
};

std::string_view leakfn_name(LeakFnKind k);
LeakFnKind leakfn_from_name(std::string_view name);

// A kind declared leaky must produce at least two observable classes.
inline bool leakfn_declared_leaky(LeakFnKind k) { return k != LeakFnKind::relu_branchless; }

// One invocation of the underlying leaky unit: instructions executed on the
// framework page plus, when the branch reaches the maths library, the expf
// instruction count.  tanh produces two of these per evaluation.
struct LeakEventShape {
    std::uint32_t fw_count = 0;
    std::uint32_t libm_count = 0;
    bool libm_called = false;

    bool operator==(const LeakEventShape&) const = default;
};

struct EvalResult {
    float value = 0.0f;
    std::uint64_t path = 0;  // branch decisions, first branch in the LSB
    int path_len = 0;
    std::uint32_t total_count = 0;  // all instructions, framework + libm
    std::array<LeakEventShape, 2> events{};
    int n_events = 0;

    // Signature identifying the branch path (regions are maximal runs of
    // inputs with equal signatures).
    bool same_path(const EvalResult& o) const {
        return path == o.path && path_len == o.path_len && total_count == o.total_count &&
               n_events == o.n_events && events == o.events;
    }
};

// Evaluates the reference implementation of `kind` at x.  Total function:
// NaN and infinities take their own paths.
EvalResult reference_eval(LeakFnKind kind, float x);

// expf branch constants (fdlibm bit patterns).  Exposed because tests pin
// boundaries against them.
inline const float kExpfOverflowBound = float_from_bits(0x42b17180u);    //  88.72168
inline const float kExpfUnderflowBound = float_from_bits(0xc2cff1b5u);   // -103.97208
inline constexpr std::uint32_t kExpfSaturationMagBits = 0x42b17218u;     //  88.722839: |x| >= this saturates or falls through
inline const float kLogisticCutoffUpper = 16.619047164916992188f;
inline const float kLogisticCutoffLower = -9.0f;

}  // namespace stepleak
