#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "oneshot/core/image.hpp"

namespace oneshot {

inline std::vector<double> gaussian_kernel(double sigma, double radius_sigmas = 3.0) {
    const int r = std::max(1, static_cast<int>(std::ceil(radius_sigmas * sigma)));
    std::vector<double> k(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[i + r];
    }
    for (double& v : k) v /= sum;
    return k;
}

enum class Border { Replicate, Zero };

/// Separable correlation; borders replicate the edge pixel or read as zero.
inline ImageD filter_separable(const ImageD& src, const std::vector<double>& kx, const std::vector<double>& ky,
                               Border border = Border::Replicate) {
    const int w = src.width(), h = src.height();
    const int rx = static_cast<int>(kx.size() / 2), ry = static_cast<int>(ky.size() / 2);
    ImageD tmp(w, h), out(w, h);
    for (int y = 0; y < h; ++y) {
        const double* in = src.row(y);
        double* o = tmp.row(y);
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int k = -rx; k <= rx; ++k) {
                const int xx = x + k;
                if (xx >= 0 && xx < w) acc += kx[k + rx] * in[xx];
                else if (border == Border::Replicate) acc += kx[k + rx] * in[std::clamp(xx, 0, w - 1)];
            }
            o[x] = acc;
        }
    }
    for (int y = 0; y < h; ++y) {
        double* o = out.row(y);
        for (int k = -ry; k <= ry; ++k) {
            if (border == Border::Zero && (y + k < 0 || y + k >= h)) continue;
            const double wk = ky[k + ry];
            const double* in = tmp.row(std::clamp(y + k, 0, h - 1));
            for (int x = 0; x < w; ++x) o[x] += wk * in[x];
        }
    }
    return out;
}

inline ImageD gaussian_blur(const ImageD& src, double sigma) {
    auto k = gaussian_kernel(sigma);
    return filter_separable(src, k, k);
}

/// Mean over a (2r+1)^2 window, replicate borders.
inline ImageD box_mean(const ImageD& src, int r) {
    std::vector<double> k(2 * r + 1, 1.0 / (2 * r + 1));
    return filter_separable(src, k, k);
}

/// Max over a (2r+1)^2 window.
inline ImageD box_max(const ImageD& src, int r) {
    const int w = src.width(), h = src.height();
    ImageD tmp(w, h), out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double m = src(x, y);
            for (int k = std::max(0, x - r); k <= std::min(w - 1, x + r); ++k) m = std::max(m, src(k, y));
            tmp(x, y) = m;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double m = tmp(x, y);
            for (int k = std::max(0, y - r); k <= std::min(h - 1, y + r); ++k) m = std::max(m, tmp(x, k));
            out(x, y) = m;
        }
    return out;
}

}  // namespace oneshot
