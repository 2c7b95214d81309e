#pragma once

#include <bit>
#include <cstdint>
#include <limits>

// Bit-level float32 helpers.  Region boundaries, thresholds, and file formats
// all work on exact bit patterns, never on decimal round trips.

namespace stepleak {

inline std::uint32_t float_bits(float x) { return std::bit_cast<std::uint32_t>(x); }
inline float float_from_bits(std::uint32_t b) { return std::bit_cast<float>(b); }

// Maps a finite float to a key that orders like the real line:
// negative floats reverse-ordered, -0 and +0 collapse to adjacent keys.
inline std::int64_t total_order_key(float x) {
    const std::uint32_t b = float_bits(x);
    if (b & 0x8000'0000u) {
        return -static_cast<std::int64_t>(b & 0x7fff'ffffu);
    }
    return static_cast<std::int64_t>(b);
}

inline float float_from_key(std::int64_t k) {
    if (k < 0) return float_from_bits(static_cast<std::uint32_t>(-k) | 0x8000'0000u);
    return float_from_bits(static_cast<std::uint32_t>(k));
}

// Next float32 toward +inf.  Not defined for +inf/NaN inputs.
inline float next_float_up(float x) {
    if (x == 0.0f) return float_from_bits(1u);  // smallest positive subnormal
    std::uint32_t b = float_bits(x);
    if (b & 0x8000'0000u) --b; else ++b;
    return float_from_bits(b);
}

inline float next_float_down(float x) {
    if (x == 0.0f) return float_from_bits(0x8000'0001u);
    std::uint32_t b = float_bits(x);
    if (b & 0x8000'0000u) ++b; else --b;
    return float_from_bits(b);
}

inline bool ulp_adjacent(float lo, float hi) {
    return total_order_key(hi) - total_order_key(lo) <= 1;
}

// Midpoint in bit space; lands strictly between lo and hi unless they are
// ulp-adjacent already.
inline float bit_midpoint(float lo, float hi) {
    const std::int64_t a = total_order_key(lo);
    const std::int64_t b = total_order_key(hi);
    return float_from_key(a + (b - a) / 2);
}

inline constexpr float kMaxFinite = std::numeric_limits<float>::max();
inline constexpr float kInf = std::numeric_limits<float>::infinity();

}  // namespace stepleak
