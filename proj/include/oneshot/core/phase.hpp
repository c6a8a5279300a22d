#pragma once

#include <cmath>

namespace oneshot {

/// Wrap to the half-open cycle [0, 1).
inline double wrap01(double p) {
    double w = p - std::floor(p);
    if (w >= 1.0) w = 0.0;
    return w;
}

/// Same as wrap01 but guarantees the float result is also < 1.
inline float wrap01f(double p) {
    float w = static_cast<float>(wrap01(p));
    if (w >= 1.0f) w = 0.0f;
    return w;
}

/// Reduce a phase difference to the circular interval (-0.5, 0.5].
inline double circ(double d) {
    double r = d - std::floor(d);  // [0, 1)
    if (r > 0.5) r -= 1.0;
    return r;
}

/// Unwrapped value of `phase` closest to `reference` (both in cycles).
inline double unwrap_near(double phase, double reference) {
    return reference + circ(phase - reference);
}

}  // namespace oneshot
