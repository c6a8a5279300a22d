#pragma once

// Image-side grid graph and wrapped phase.
//
// Classical stand-ins for the learned front end: a Gabor quadrature filter yields the wrapped phase
// per axis, node glyphs are box-filter peaks inside the phase-(0, 0) zone of each cell, edges follow
// the local phase Jacobian, and candidate labels come from the epipolar segment plus the observed code.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"
#include "oneshot/core/filter.hpp"
#include "oneshot/core/geometry.hpp"
#include "oneshot/core/grid_io.hpp"
#include "oneshot/core/image.hpp"
#include "oneshot/core/parallel.hpp"
#include "oneshot/core/phase.hpp"
#include "oneshot/pattern.hpp"

namespace oneshot {

// --- types -------------------------------------------------------------------------

struct Candidate {
    std::int32_t id = 0;
    double prob = 0.0;
    friend bool operator==(const Candidate&, const Candidate&) = default;
};

inline constexpr int kUnknownCode = -1;

struct GraphNode {
    Vec2 pixel = Vec2::Zero();
    int code = kUnknownCode;
    std::vector<Candidate> candidates;  // descending probability
};

struct GraphEdge {
    std::int32_t from = 0;
    std::int32_t to = 0;
    Direction dir = Direction::Right;
};

/// Detected grid graph. `links[n][d]` is the neighbor of node n in direction d, or kNoNode.
struct DetectedGraph {
    std::vector<GraphNode> nodes;
    std::vector<std::array<std::int32_t, 4>> links;

    std::size_t size() const { return nodes.size(); }

    std::int32_t add_node(GraphNode n) {
        nodes.push_back(std::move(n));
        links.push_back({kNoNode, kNoNode, kNoNode, kNoNode});
        return static_cast<std::int32_t>(nodes.size() - 1);
    }

    std::int32_t neighbor(std::int32_t n, Direction d) const { return links[static_cast<std::size_t>(n)][index_of(d)]; }

    /// Adds a -> b in direction d and the reverse link b -> a.
    void link(std::int32_t a, std::int32_t b, Direction d) {
        links[static_cast<std::size_t>(a)][index_of(d)] = b;
        links[static_cast<std::size_t>(b)][index_of(opposite(d))] = a;
    }

    /// All directed edges (both orientations of every link).
    std::vector<GraphEdge> edges() const {
        std::vector<GraphEdge> out;
        for (std::size_t n = 0; n < links.size(); ++n)
            for (auto d : kDirections)
                if (links[n][index_of(d)] != kNoNode) out.push_back({static_cast<std::int32_t>(n), links[n][index_of(d)], d});
        return out;
    }

    /// Throws FormatError on any broken invariant; `id_limit` bounds candidate IDs when > 0.
    void validate(int id_limit = 0) const {
        if (links.size() != nodes.size()) throw FormatError("graph: link table size mismatch");
        for (std::size_t n = 0; n < nodes.size(); ++n) {
            const auto& node = nodes[n];
            const std::string where = "graph node " + std::to_string(n);
            if (node.code != kUnknownCode && (node.code < 0 || node.code >= kNumCodes))
                throw FormatError(where + ": code out of range");
            double sum = 0.0;
            for (std::size_t k = 0; k < node.candidates.size(); ++k) {
                const auto& c = node.candidates[k];
                if (!(c.prob > 0.0 && c.prob <= 1.0)) throw FormatError(where + ": candidate probability outside (0, 1]");
                if (c.id < 0 || (id_limit > 0 && c.id >= id_limit))
                    throw FormatError(where + ": candidate id " + std::to_string(c.id) + " outside the pattern");
                if (k > 0 && c.prob > node.candidates[k - 1].prob) throw FormatError(where + ": candidates not sorted by probability");
                sum += c.prob;
            }
            if (sum > 1.0 + 1e-9) throw FormatError(where + ": candidate probabilities sum above 1");
            for (auto d : kDirections) {
                const auto m = links[n][index_of(d)];
                if (m == kNoNode) continue;
                if (m < 0 || static_cast<std::size_t>(m) >= nodes.size()) throw FormatError(where + ": edge to missing node");
                if (links[static_cast<std::size_t>(m)][index_of(opposite(d))] != static_cast<std::int32_t>(n))
                    throw FormatError(where + ": edge direction tags inconsistent");
            }
        }
    }
};

struct WrappedPhaseMaps {
    ImageF phase_u;
    ImageF phase_v;
    ImageF mask;  // confidence in [0, 1]; 0 exactly where the phase is undefined

    int width() const { return phase_u.width(); }
    int height() const { return phase_u.height(); }

    void validate() const {
        if (!phase_u.same_shape(phase_v) || !phase_u.same_shape(mask)) throw FormatError("phase maps: dimension mismatch");
        for (int y = 0; y < height(); ++y)
            for (int x = 0; x < width(); ++x) {
                const auto at = " at (" + std::to_string(x) + ", " + std::to_string(y) + ")";
                if (!(phase_u(x, y) >= 0.0f && phase_u(x, y) < 1.0f)) throw FormatError("phase_u outside [0, 1)" + at);
                if (!(phase_v(x, y) >= 0.0f && phase_v(x, y) < 1.0f)) throw FormatError("phase_v outside [0, 1)" + at);
                if (!(mask(x, y) >= 0.0f && mask(x, y) <= 1.0f)) throw FormatError("mask outside [0, 1]" + at);
            }
    }
};

// --- pre-filter ------------------------------------------------------------------------

/// Optional min-max local normalization: (I - G(erode I)) / (G(dilate I) - G(erode I)), scaled to [0, 255].
inline ImageU8 normalize_local_contrast(const ImageU8& img, int radius = 15, double sigma = 5.0) {
    const ImageD src = convert<double>(img);
    ImageD neg(src.width(), src.height());
    for (std::size_t i = 0; i < src.size(); ++i) neg.pixels()[i] = -src.pixels()[i];
    ImageD hi = gaussian_blur(box_max(src, radius), sigma);
    ImageD lo = box_max(neg, radius);
    for (auto& v : lo.pixels()) v = -v;
    lo = gaussian_blur(lo, sigma);
    ImageD out(src.width(), src.height());
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double range = hi.pixels()[i] - lo.pixels()[i];
        out.pixels()[i] = range > 1.0 ? 255.0 * std::clamp((src.pixels()[i] - lo.pixels()[i]) / range, 0.0, 1.0) : 0.0;
    }
    return quantize(out);
}

// --- wrapped phase ----------------------------------------------------------------------

struct PhaseEstimatorParams {
    double period_x = 0.0;       // camera px per cell along x; 0 = estimate by autocorrelation
    double period_y = 0.0;
    double sigma_factor = 0.5;   // Gabor envelope sigma as a fraction of the period
    double min_amplitude = 2.0;  // absolute response floor (gray levels)
    double rel_threshold = 0.15; // response floor relative to the 90th percentile
    double min_coverage = 0.75;  // fraction of the filter footprint that must fall inside the image
};

/// Dominant period of the image along x (axis 0) or y (axis 1): peak of the autocorrelation of each
/// scan line, summed over lines. Returns nullopt when no periodic structure is found.
inline std::optional<double> estimate_period(const ImageU8& img, int axis) {
    const int n = axis == 0 ? img.width() : img.height();
    const int m = axis == 0 ? img.height() : img.width();
    if (n < 16 || m < 1) return std::nullopt;
    const int max_lag = n / 3;
    std::vector<double> r(static_cast<std::size_t>(max_lag + 2), 0.0);
    std::vector<double> line(static_cast<std::size_t>(n));
    for (int b = 0; b < m; b += 2) {
        double mean = 0;
        for (int a = 0; a < n; ++a) mean += line[a] = axis == 0 ? img(a, b) : img(b, a);
        mean /= n;
        for (double& v : line) v -= mean;
        for (int lag = 0; lag <= max_lag + 1; ++lag) {
            double s = 0;
            for (int a = 0; a + lag < n; ++a) s += line[a] * line[a + lag];
            r[lag] += s / n;
        }
    }
    if (!(r[0] > 1e-6)) return std::nullopt;
    // Smallest lag whose peak is comparable to the strongest one; surface structure can make a
    // multiple of the carrier period win by a small margin.
    std::vector<int> peaks;
    double strongest = 0;
    for (int lag = 4; lag <= max_lag; ++lag)
        if (r[lag] >= r[lag - 1] && r[lag] >= r[lag + 1] && r[lag] > 0.1 * r[0]) {
            peaks.push_back(lag);
            strongest = std::max(strongest, r[lag]);
        }
    if (peaks.empty()) return std::nullopt;
    int best = peaks.front();
    for (int lag : peaks)
        if (r[lag] >= 0.7 * strongest) {
            best = lag;
            break;
        }
    const double den = r[best - 1] - 2 * r[best] + r[best + 1];
    const double off = den < 0 ? std::clamp(0.5 * (r[best - 1] - r[best + 1]) / den, -0.5, 0.5) : 0.0;
    return best + off;
}

namespace detail {

struct QuadratureResponse {
    ImageD phase;      // cycles in [0, 1), 0.5 on bright line centers
    ImageD amplitude;
    ImageD coverage;   // fraction of the filter mass inside the image
};

/// Complex Gabor along `axis` with period T, Gaussian smoothing across it; zero padding.
inline QuadratureResponse quadrature(const ImageD& hp, int axis, double period, double sigma_along, double sigma_across) {
    const int w = hp.width(), h = hp.height();
    const int ra = std::max(1, static_cast<int>(std::ceil(3 * sigma_along)));
    const int rc = std::max(1, static_cast<int>(std::ceil(3 * sigma_across)));
    std::vector<std::complex<double>> ka(2 * ra + 1);
    std::vector<double> ga(2 * ra + 1), kc(2 * rc + 1);
    double sa = 0, sc = 0;
    for (int k = -ra; k <= ra; ++k) {
        ga[k + ra] = std::exp(-0.5 * k * k / (sigma_along * sigma_along));
        sa += ga[k + ra];
    }
    for (int k = -ra; k <= ra; ++k) {
        ga[k + ra] /= sa;
        ka[k + ra] = ga[k + ra] * std::polar(1.0, -2.0 * M_PI * k / period);
    }
    for (int k = -rc; k <= rc; ++k) {
        kc[k + rc] = std::exp(-0.5 * k * k / (sigma_across * sigma_across));
        sc += kc[k + rc];
    }
    for (double& v : kc) v /= sc;

    const int n_along = axis == 0 ? w : h;
    const int n_across = axis == 0 ? h : w;
    auto at = [&](int along, int across) { return axis == 0 ? hp(along, across) : hp(across, along); };

    std::vector<double> cov_along(static_cast<std::size_t>(n_along)), cov_across(static_cast<std::size_t>(n_across));
    for (int a = 0; a < n_along; ++a) {
        double s = 0;
        for (int k = -ra; k <= ra; ++k)
            if (a + k >= 0 && a + k < n_along) s += ga[k + ra];
        cov_along[a] = s;
    }
    for (int c = 0; c < n_across; ++c) {
        double s = 0;
        for (int k = -rc; k <= rc; ++k)
            if (c + k >= 0 && c + k < n_across) s += kc[k + rc];
        cov_across[c] = s;
    }

    // Pass 1: along-axis complex filtering, stored [across][along].
    std::vector<std::complex<double>> tmp(static_cast<std::size_t>(n_along) * n_across);
    parallel_for(0, n_across, [&](int c) {
        for (int a = 0; a < n_along; ++a) {
            std::complex<double> acc = 0;
            const int lo = std::max(-ra, -a), hi = std::min(ra, n_along - 1 - a);
            for (int k = lo; k <= hi; ++k) acc += ka[k + ra] * at(a + k, c);
            tmp[static_cast<std::size_t>(c) * n_along + a] = acc;
        }
    });
    QuadratureResponse out{ImageD(w, h), ImageD(w, h), ImageD(w, h)};
    // Pass 2: across-axis real smoothing.
    parallel_for(0, n_across, [&](int c) {
        const int lo = std::max(-rc, -c), hi = std::min(rc, n_across - 1 - c);
        for (int a = 0; a < n_along; ++a) {
            std::complex<double> acc = 0;
            for (int k = lo; k <= hi; ++k) acc += kc[k + rc] * tmp[static_cast<std::size_t>(c + k) * n_along + a];
            const int x = axis == 0 ? a : c, y = axis == 0 ? c : a;
            out.phase(x, y) = wrap01(std::arg(acc) / (2 * M_PI) + 0.5);
            out.amplitude(x, y) = std::abs(acc);
            out.coverage(x, y) = cov_along[a] * cov_across[c];
        }
    });
    return out;
}

inline double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    const auto k = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
}

}  // namespace detail

struct PeriodEstimate {
    double x = 0.0;
    double y = 0.0;
};

inline PeriodEstimate resolve_periods(const ImageU8& image, const PhaseEstimatorParams& p) {
    PeriodEstimate t{p.period_x, p.period_y};
    if (!(t.x > 0)) {
        auto e = estimate_period(image, 0);
        if (!e) throw StageError("detect", "could not estimate the pattern period along x; pass an explicit --period");
        t.x = *e;
    }
    if (!(t.y > 0)) {
        auto e = estimate_period(image, 1);
        if (!e) throw StageError("detect", "could not estimate the pattern period along y; pass an explicit --period");
        t.y = *e;
    }
    return t;
}

/// Per-pixel wrapped phase by quadrature filtering at the local pattern period.
/// Phase is 0.5 on line centers and 0 on node centers, increasing toward +x / +y.
inline WrappedPhaseMaps estimate_wrapped_phase(const ImageU8& image, const PhaseEstimatorParams& params = {}) {
    const int w = image.width(), h = image.height();
    WrappedPhaseMaps out{ImageF(w, h, 0.0f), ImageF(w, h, 0.0f), ImageF(w, h, 0.0f)};
    if (w == 0 || h == 0) return out;
    const ImageD src = convert<double>(image);
    const bool flat = std::all_of(image.pixels().begin(), image.pixels().end(), [&](auto v) { return v == image.pixels()[0]; });
    if (flat) return out;  // no carrier
    const PeriodEstimate t = resolve_periods(image, params);

    ImageD hp = gaussian_blur(src, 0.5 * std::max(t.x, t.y));
    for (std::size_t i = 0; i < hp.size(); ++i) hp.pixels()[i] = src.pixels()[i] - hp.pixels()[i];

    const auto ru = detail::quadrature(hp, 0, t.x, params.sigma_factor * t.x, params.sigma_factor * t.y);
    const auto rv = detail::quadrature(hp, 1, t.y, params.sigma_factor * t.y, params.sigma_factor * t.x);

    auto floor_of = [&](const ImageD& amp) {
        std::vector<double> v(amp.pixels().begin(), amp.pixels().end());
        return std::max(params.min_amplitude, params.rel_threshold * detail::percentile(std::move(v), 0.9));
    };
    const double fu = floor_of(ru.amplitude), fv = floor_of(rv.amplitude);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double cu = ru.amplitude(x, y) < fu ? 0.0 : std::min(1.0, ru.amplitude(x, y) / (2 * fu));
            const double cv = rv.amplitude(x, y) < fv ? 0.0 : std::min(1.0, rv.amplitude(x, y) / (2 * fv));
            double m = std::min(cu, cv);
            if (ru.coverage(x, y) < params.min_coverage || rv.coverage(x, y) < params.min_coverage) m = 0.0;
            out.mask(x, y) = static_cast<float>(m);
            if (m > 0.0) {
                out.phase_u(x, y) = wrap01f(ru.phase(x, y));
                out.phase_v(x, y) = wrap01f(rv.phase(x, y));
            }
        }
    return out;
}

// --- node detection ------------------------------------------------------------------------

struct CandidateParams {
    int top_k = 5;
    double z_min = 0.6;                 // depth prior for the epipolar segment (m, camera frame)
    double z_max = 1.8;
    double max_distance = 0.5;          // in cells
    double sigma = 0.25;                // proximity scale, in cells
    double code_mismatch_weight = 0.05; // weight multiplier when the observed code differs
};

struct DetectorParams {
    PhaseEstimatorParams phase;
    double gate = 0.25;                // |phase| window around node centers, cycles
    double response_threshold = 0.2;   // glyph response relative to the local maximum intensity
    double min_code_score = 0.4;       // normalized correlation needed to accept a code
    double link_tolerance = 0.3;       // neighbor search radius, in cells
    bool normalize = false;            // optional min-max local normalization pre-filter
    CandidateParams candidates;
};

struct Detection {
    DetectedGraph graph;
    WrappedPhaseMaps phase;
    PeriodEstimate period;
};

/// Local phase Jacobian d(phase_u, phase_v)/d(x, y) in cycles per pixel around `p`.
inline std::optional<Eigen::Matrix2d> phase_jacobian(const WrappedPhaseMaps& ph, const Vec2& p, int radius) {
    const int x0 = static_cast<int>(std::lround(p.x())), y0 = static_cast<int>(std::lround(p.y()));
    Eigen::Matrix2d acc = Eigen::Matrix2d::Zero();
    int n = 0;
    for (int y = y0 - radius; y <= y0 + radius; ++y)
        for (int x = x0 - radius; x <= x0 + radius; ++x) {
            if (x < 1 || y < 1 || x + 1 >= ph.width() || y + 1 >= ph.height()) continue;
            if (ph.mask(x - 1, y) <= 0 || ph.mask(x + 1, y) <= 0 || ph.mask(x, y - 1) <= 0 || ph.mask(x, y + 1) <= 0) continue;
            acc(0, 0) += 0.5 * circ(ph.phase_u(x + 1, y) - ph.phase_u(x - 1, y));
            acc(0, 1) += 0.5 * circ(ph.phase_u(x, y + 1) - ph.phase_u(x, y - 1));
            acc(1, 0) += 0.5 * circ(ph.phase_v(x + 1, y) - ph.phase_v(x - 1, y));
            acc(1, 1) += 0.5 * circ(ph.phase_v(x, y + 1) - ph.phase_v(x, y - 1));
            ++n;
        }
    if (n < 3) return std::nullopt;
    acc /= n;
    if (std::abs(acc.determinant()) < 1e-8) return std::nullopt;
    return acc;
}

namespace detail {

inline double sample_circ(const ImageF& img, const Vec2& p) {
    // Circular bilinear interpolation for wrapped values.
    const double x = p.x(), y = p.y();
    if (!(x >= 0 && y >= 0 && x <= img.width() - 1 && y <= img.height() - 1)) return 0.0;
    const int x0 = std::min(static_cast<int>(x), img.width() - 1), y0 = std::min(static_cast<int>(y), img.height() - 1);
    const int x1 = std::min(x0 + 1, img.width() - 1), y1 = std::min(y0 + 1, img.height() - 1);
    const double fx = x - x0, fy = y - y0;
    const double ref = img(x0, y0);
    const double v = (1 - fy) * ((1 - fx) * ref + fx * unwrap_near(img(x1, y0), ref)) +
                     fy * ((1 - fx) * unwrap_near(img(x0, y1), ref) + fx * unwrap_near(img(x1, y1), ref));
    return wrap01(v);
}

/// Spatial hash over node pixels for neighbor lookups.
class NodeIndex {
public:
    NodeIndex(const std::vector<GraphNode>& nodes, double cell) : nodes_(nodes), cell_(std::max(cell, 1.0)) {
        for (std::size_t i = 0; i < nodes.size(); ++i) buckets_[key(nodes[i].pixel)].push_back(static_cast<std::int32_t>(i));
    }

    /// Nearest node to q within `radius`, or kNoNode.
    std::int32_t nearest(const Vec2& q, double radius) const {
        std::int32_t best = kNoNode;
        double best_d = radius;
        const long bx = static_cast<long>(std::floor(q.x() / cell_)), by = static_cast<long>(std::floor(q.y() / cell_));
        const long reach = static_cast<long>(std::ceil(radius / cell_));
        for (long dy = -reach; dy <= reach; ++dy)
            for (long dx = -reach; dx <= reach; ++dx) {
                auto it = buckets_.find(pack(bx + dx, by + dy));
                if (it == buckets_.end()) continue;
                for (auto i : it->second) {
                    const double d = (nodes_[static_cast<std::size_t>(i)].pixel - q).norm();
                    if (d < best_d || (d == best_d && best != kNoNode && i < best)) {
                        best_d = d;
                        best = i;
                    }
                }
            }
        return best;
    }

private:
    static long long pack(long a, long b) { return (static_cast<long long>(a) << 32) ^ static_cast<long long>(b & 0xffffffffL); }
    long long key(const Vec2& p) const {
        return pack(static_cast<long>(std::floor(p.x() / cell_)), static_cast<long>(std::floor(p.y() / cell_)));
    }

    const std::vector<GraphNode>& nodes_;
    double cell_;
    std::unordered_map<long long, std::vector<std::int32_t>> buckets_;
};

}  // namespace detail

/// Glyph peaks: box-filter maxima inside the phase-(0, 0) zone of each cell, refined by a quadratic fit.
inline std::vector<GraphNode> detect_nodes(const ImageU8& image, const WrappedPhaseMaps& phase, const PeriodEstimate& t,
                                           const GridPattern& pattern, const DetectorParams& params) {
    std::vector<GraphNode> nodes;
    const int w = image.width(), h = image.height();
    if (w == 0 || h == 0) return nodes;
    const double scale = 0.5 * (t.x / pattern.period_u + t.y / pattern.period_v);  // camera px per projector px
    const int r_box = std::max(1, static_cast<int>(std::floor((kGlyphSize / 2 + 0.5) * scale)));
    const int r_nms = std::max(2, static_cast<int>(std::lround(0.3 * std::min(t.x, t.y))));
    const ImageD src = convert<double>(image);
    const ImageD resp = box_mean(src, r_box);
    const ImageD local_max = box_max(src, std::max(2, static_cast<int>(std::lround(0.5 * std::max(t.x, t.y)))));

    // Only pixels inside the node zone of a cell compete, so line crossings never shadow sparse glyphs.
    ImageU8 zone(w, h, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            zone(x, y) = phase.mask(x, y) > 0.0f && std::abs(circ(phase.phase_u(x, y))) <= params.gate &&
                         std::abs(circ(phase.phase_v(x, y))) <= params.gate;
    for (int y = 1; y + 1 < h; ++y)
        for (int x = 1; x + 1 < w; ++x) {
            if (!zone(x, y)) continue;
            const double r0 = resp(x, y);
            if (r0 <= params.response_threshold * local_max(x, y) || r0 <= 1.0) continue;
            bool is_max = true;
            for (int dy = -r_nms; dy <= r_nms && is_max; ++dy)
                for (int dx = -r_nms; dx <= r_nms; ++dx) {
                    if (!resp.contains(x + dx, y + dy) || (dx == 0 && dy == 0) || !zone(x + dx, y + dy)) continue;
                    const double rn = resp(x + dx, y + dy);
                    // ties go to the first pixel in raster order
                    if (rn > r0 || (rn == r0 && (dy < 0 || (dy == 0 && dx < 0)))) {
                        is_max = false;
                        break;
                    }
                }
            if (!is_max) continue;
            auto refine = [](double a, double b, double c) {
                const double den = a - 2 * b + c;
                return den < 0 ? std::clamp(0.5 * (a - c) / den, -0.5, 0.5) : 0.0;
            };
            GraphNode n;
            n.pixel = Vec2(x + refine(resp(x - 1, y), r0, resp(x + 1, y)), y + refine(resp(x, y - 1), r0, resp(x, y + 1)));
            nodes.push_back(std::move(n));
        }
    return nodes;
}

/// Links each node to its lattice neighbors predicted by the local phase Jacobian. A link needs a
/// mutual match and a line crossing (phase 0.5) at the midpoint.
inline void link_nodes(DetectedGraph& g, const WrappedPhaseMaps& phase, const PeriodEstimate& t, double tolerance = 0.3) {
    for (auto& l : g.links) l = {kNoNode, kNoNode, kNoNode, kNoNode};
    const int jr = std::max(2, static_cast<int>(std::lround(0.2 * std::min(t.x, t.y))));
    detail::NodeIndex index(g.nodes, std::max(t.x, t.y));
    std::vector<std::optional<Eigen::Matrix2d>> inv_j(g.size());
    for (std::size_t n = 0; n < g.size(); ++n)
        if (auto j = phase_jacobian(phase, g.nodes[n].pixel, jr)) inv_j[n] = j->inverse();

    auto predict = [&](std::size_t n, Direction d) -> std::int32_t {
        if (!inv_j[n]) return kNoNode;
        Eigen::Vector2d step = Eigen::Vector2d::Zero();
        switch (d) {
            case Direction::Up: step = {0, -1}; break;
            case Direction::Down: step = {0, 1}; break;
            case Direction::Left: step = {-1, 0}; break;
            case Direction::Right: step = {1, 0}; break;
        }
        const Vec2 delta = *inv_j[n] * step;
        return index.nearest(g.nodes[n].pixel + delta, tolerance * delta.norm());
    };
    for (std::size_t a = 0; a < g.size(); ++a)
        for (auto d : {Direction::Right, Direction::Down}) {
            const auto b = predict(a, d);
            if (b == kNoNode || b == static_cast<std::int32_t>(a)) continue;
            if (predict(static_cast<std::size_t>(b), opposite(d)) != static_cast<std::int32_t>(a)) continue;
            const Vec2 mid = 0.5 * (g.nodes[a].pixel + g.nodes[static_cast<std::size_t>(b)].pixel);
            const auto& ph = d == Direction::Right ? phase.phase_u : phase.phase_v;
            if (std::abs(circ(detail::sample_circ(ph, mid) - 0.5)) > 0.2) continue;
            if (g.links[a][index_of(d)] != kNoNode || g.links[static_cast<std::size_t>(b)][index_of(opposite(d))] != kNoNode) continue;
            g.link(static_cast<std::int32_t>(a), b, d);
        }
}

/// Glyph class by normalized correlation of a resampled patch against each template.
inline void classify_codes(DetectedGraph& g, const ImageU8& image, const WrappedPhaseMaps& phase, const PeriodEstimate& t,
                           const GridPattern& pattern, double min_score) {
    constexpr int r = kGlyphSize / 2 + 1;  // one ring of background around the glyph
    constexpr int n = 2 * r + 1;
    std::array<std::array<double, n * n>, kNumCodes> templ{};
    for (int c = 0; c < kNumCodes; ++c) {
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const bool in = std::abs(dx) <= kGlyphSize / 2 && std::abs(dy) <= kGlyphSize / 2;
                templ[c][(dy + r) * n + dx + r] = in ? glyphs()[c][dy + kGlyphSize / 2][dx + kGlyphSize / 2] : 0.0;
            }
    }
    auto normalize = [](std::array<double, n * n>& v) {
        double m = 0;
        for (double x : v) m += x;
        m /= v.size();
        double s = 0;
        for (double& x : v) {
            x -= m;
            s += x * x;
        }
        s = std::sqrt(s);
        if (s > 1e-12)
            for (double& x : v) x /= s;
        return s > 1e-12;
    };
    for (auto& tp : templ) normalize(tp);
    const int jr = std::max(2, static_cast<int>(std::lround(0.2 * std::min(t.x, t.y))));
    for (auto& node : g.nodes) {
        node.code = kUnknownCode;
        Eigen::Matrix2d inv;
        if (auto j = phase_jacobian(phase, node.pixel, jr)) {
            inv = j->inverse();
        } else {
            inv << t.x, 0, 0, t.y;  // axis-aligned fallback
        }
        std::array<double, n * n> patch{};
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const Vec2 q = node.pixel + inv * Eigen::Vector2d(static_cast<double>(dx) / pattern.period_u,
                                                                  static_cast<double>(dy) / pattern.period_v);
                patch[(dy + r) * n + dx + r] = sample_bilinear(image, q.x(), q.y(), 0.0);
            }
        if (!normalize(patch)) continue;
        double best = min_score;
        for (int c = 0; c < kNumCodes; ++c) {
            double s = 0;
            for (int k = 0; k < n * n; ++k) s += patch[k] * templ[c][k];
            if (s > best) {
                best = s;
                node.code = c;
            }
        }
    }
}

/// Epipolar segment of a camera pixel in the projector for depths [z_min, z_max].
inline std::optional<std::pair<Vec2, Vec2>> epipolar_segment(const Rig& rig, const Vec2& pixel, double z_min, double z_max) {
    const Ray r = rig.camera.ray(pixel.x(), pixel.y());
    const double dz = rig.camera.rotation.row(2).dot(r.dir);
    if (!(dz > 0)) return std::nullopt;
    auto a = rig.projector.project(r.at(z_min / dz));
    auto b = rig.projector.project(r.at(z_max / dz));
    if (!a || !b) return std::nullopt;
    return std::make_pair(*a, *b);
}

inline double distance_to_segment(const Vec2& p, const Vec2& a, const Vec2& b) {
    const Vec2 ab = b - a;
    const double len2 = ab.squaredNorm();
    const double s = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    return (a + s * ab - p).norm();
}

/// Ranked candidate labels: pattern nodes near the epipolar segment, weighted by proximity and code
/// agreement; probabilities are normalized over every node within reach, so each list sums to <= 1.
/// Without calibration every code-compatible node is equally likely.
inline void assign_candidates(DetectedGraph& g, const GridPattern& pattern, const std::optional<Rig>& rig,
                              const CandidateParams& params) {
    const double cell = std::min(pattern.period_u, pattern.period_v);
    for (auto& node : g.nodes) {
        node.candidates.clear();
        std::vector<Candidate> all;
        if (rig) {
            auto seg = epipolar_segment(*rig, node.pixel, params.z_min, params.z_max);
            if (!seg) continue;
            for (int i = 0; i < pattern.rows; ++i)
                for (int j = 0; j < pattern.cols; ++j) {
                    const double d = distance_to_segment(Vec2(pattern.node_u(j), pattern.node_v(i)), seg->first, seg->second);
                    if (d > params.max_distance * cell) continue;
                    double wgt = std::exp(-0.5 * d * d / std::pow(params.sigma * cell, 2));
                    if (node.code != kUnknownCode && node.code != pattern.code(i, j)) wgt *= params.code_mismatch_weight;
                    if (wgt > 0) all.push_back({pattern.id(i, j), wgt});
                }
        } else {
            for (int id = 0; id < pattern.node_count(); ++id)
                if (node.code == kUnknownCode || pattern.code_of(id) == node.code) all.push_back({id, 1.0});
        }
        double total = 0;
        for (const auto& c : all) total += c.prob;
        if (all.empty() || !(total > 0)) continue;
        std::stable_sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
            return a.prob > b.prob || (a.prob == b.prob && a.id < b.id);
        });
        if (static_cast<int>(all.size()) > params.top_k) all.resize(static_cast<std::size_t>(params.top_k));
        for (auto& c : all) c.prob = std::min(1.0, c.prob / total);
        node.candidates = std::move(all);
    }
}

/// Removes nodes that satisfy `drop` and remaps links.
template <typename Pred>
DetectedGraph filter_nodes(const DetectedGraph& g, Pred&& drop) {
    std::vector<std::int32_t> remap(g.size(), kNoNode);
    DetectedGraph out;
    for (std::size_t n = 0; n < g.size(); ++n)
        if (!drop(g.nodes[n])) remap[n] = out.add_node(g.nodes[n]);
    for (std::size_t n = 0; n < g.size(); ++n) {
        if (remap[n] == kNoNode) continue;
        for (auto d : kDirections) {
            const auto m = g.links[n][index_of(d)];
            if (m != kNoNode && remap[static_cast<std::size_t>(m)] != kNoNode)
                out.links[static_cast<std::size_t>(remap[n])][index_of(d)] = remap[static_cast<std::size_t>(m)];
        }
    }
    return out;
}

/// Full front end: wrapped phase, node peaks, links, codes and candidate lists. Nodes without any
/// candidate are dropped.
inline Detection detect_graph(const ImageU8& input, const GridPattern& pattern, const std::optional<Rig>& rig = std::nullopt,
                              const DetectorParams& params = {}) {
    const ImageU8 image = params.normalize ? normalize_local_contrast(input) : input;
    Detection det;
    const bool flat = std::all_of(image.pixels().begin(), image.pixels().end(), [&](auto v) { return v == image.pixels()[0]; });
    if (image.empty() || flat) {
        det.phase = estimate_wrapped_phase(image, params.phase);
        return det;
    }
    det.period = resolve_periods(image, params.phase);
    PhaseEstimatorParams pp = params.phase;
    pp.period_x = det.period.x;
    pp.period_y = det.period.y;
    det.phase = estimate_wrapped_phase(image, pp);
    for (auto& n : detect_nodes(image, det.phase, det.period, pattern, params)) det.graph.add_node(std::move(n));
    link_nodes(det.graph, det.phase, det.period, params.link_tolerance);
    classify_codes(det.graph, image, det.phase, det.period, pattern, params.min_code_score);
    assign_candidates(det.graph, pattern, rig, params.candidates);
    det.graph = filter_nodes(det.graph, [](const GraphNode& n) { return n.candidates.empty(); });
    return det;
}

/// Stress knob for correspondence refinement: exactly round(q * N) nodes with a known true label get a
/// random nearby impostor (within two lattice steps) ranked above the truth.
inline void corrupt_candidates(DetectedGraph& g, const std::vector<std::int32_t>& truth, const GridPattern& pattern, double q,
                               std::uint64_t seed) {
    if (q <= 0) return;
    std::vector<std::size_t> eligible;
    for (std::size_t n = 0; n < g.size(); ++n)
        if (n < truth.size() && pattern.contains_id(truth[n])) eligible.push_back(n);
    std::mt19937_64 rng(seed);
    std::shuffle(eligible.begin(), eligible.end(), rng);
    const auto count = static_cast<std::size_t>(std::lround(std::clamp(q, 0.0, 1.0) * static_cast<double>(eligible.size())));
    for (std::size_t k = 0; k < count; ++k) {
        auto& node = g.nodes[eligible[k]];
        const std::int32_t t = truth[eligible[k]];
        const int ti = pattern.row_of(t), tj = pattern.col_of(t);
        std::vector<std::int32_t> pool;
        for (int di = -2; di <= 2; ++di)
            for (int dj = -2; dj <= 2; ++dj) {
                const int i = ti + di, j = tj + dj;
                if ((di || dj) && i >= 0 && j >= 0 && i < pattern.rows && j < pattern.cols) pool.push_back(pattern.id(i, j));
            }
        if (pool.empty()) continue;
        const std::int32_t impostor = pool[rng() % pool.size()];
        std::vector<double> probs;
        for (const auto& c : node.candidates) probs.push_back(c.prob);
        const double old_sum = std::accumulate(probs.begin(), probs.end(), 0.0);
        std::vector<std::int32_t> ids = {impostor, t};
        for (const auto& c : node.candidates)
            if (c.id != impostor && c.id != t) ids.push_back(c.id);
        while (probs.size() < ids.size()) probs.push_back(probs.empty() ? 0.5 : 0.5 * probs.back());
        const double new_sum = std::accumulate(probs.begin(), probs.end(), 0.0);
        const double scale = old_sum > 0 ? std::min(1.0, old_sum) / new_sum : 1.0 / new_sum;
        node.candidates.clear();
        for (std::size_t r = 0; r < ids.size(); ++r) node.candidates.push_back({ids[r], probs[r] * scale});
    }
}

// --- file formats ------------------------------------------------------------------------

inline nlohmann::json to_json(const DetectedGraph& g) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : g.nodes) {
        nlohmann::json cands = nlohmann::json::array();
        for (const auto& c : n.candidates) cands.push_back({{"id", c.id}, {"prob", c.prob}});
        nodes.push_back({{"pixel", {n.pixel.x(), n.pixel.y()}},
                         {"code", n.code == kUnknownCode ? nlohmann::json(nullptr) : nlohmann::json(n.code)},
                         {"candidates", cands}});
    }
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& e : g.edges()) edges.push_back({{"from", e.from}, {"to", e.to}, {"dir", to_string(e.dir)}});
    return {{"nodes", nodes}, {"edges", edges}};
}

namespace detail {
inline GraphNode node_from_json(const nlohmann::json& j, std::size_t index) {
    const std::string where = "node " + std::to_string(index);
    GraphNode n;
    const auto& px = j.at("pixel");
    if (!px.is_array() || px.size() != 2) throw FormatError(where + ": pixel must be [x, y]");
    n.pixel = Vec2(px[0].get<double>(), px[1].get<double>());
    if (j.contains("code") && !j["code"].is_null()) n.code = j["code"].get<int>();
    for (const auto& c : j.at("candidates")) n.candidates.push_back({c.at("id").get<std::int32_t>(), c.at("prob").get<double>()});
    return n;
}
}  // namespace detail

/// Accepts either the full graph object {"nodes", "edges"} or a bare candidate array
/// [{pixel, code, candidates:[{id, prob}]}] (edges then come from `link_nodes`).
inline DetectedGraph graph_from_json(const nlohmann::json& j, const GridPattern& pattern) {
    DetectedGraph g;
    try {
        const auto& nodes = j.is_array() ? j : j.at("nodes");
        for (std::size_t i = 0; i < nodes.size(); ++i) g.add_node(detail::node_from_json(nodes[i], i));
        if (j.is_object() && j.contains("edges")) {
            for (std::size_t k = 0; k < j["edges"].size(); ++k) {
                const auto& e = j["edges"][k];
                const auto a = e.at("from").get<std::int32_t>(), b = e.at("to").get<std::int32_t>();
                if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= g.size() || static_cast<std::size_t>(b) >= g.size())
                    throw FormatError("edge " + std::to_string(k) + ": node index out of range");
                const Direction d = direction_from_string(e.at("dir").get<std::string>());
                const auto existing = g.links[static_cast<std::size_t>(a)][index_of(d)];
                if (existing != kNoNode && existing != b) throw FormatError("edge " + std::to_string(k) + ": conflicting link");
                g.links[static_cast<std::size_t>(a)][index_of(d)] = b;
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("graph: ") + e.what());
    }
    g.validate(pattern.node_count());
    return g;
}

inline void write_phase_maps(const WrappedPhaseMaps& m, const std::string& prefix, const nlohmann::json& meta = {}) {
    nlohmann::json h = meta.is_object() ? meta : nlohmann::json::object();
    h["name"] = "phase_u";
    write_grid(prefix + "phase_u.grid", m.phase_u, h);
    h["name"] = "phase_v";
    write_grid(prefix + "phase_v.grid", m.phase_v, h);
    h["name"] = "phase_mask";
    write_grid(prefix + "phase_mask.grid", m.mask, h);
}

/// Reads and validates external phase maps; a missing mask path means full confidence everywhere.
inline WrappedPhaseMaps read_phase_maps(const std::string& phase_u, const std::string& phase_v, const std::string& mask = "") {
    WrappedPhaseMaps m;
    m.phase_u = read_grid<float>(phase_u).image;
    m.phase_v = read_grid<float>(phase_v).image;
    m.mask = mask.empty() ? ImageF(m.phase_u.width(), m.phase_u.height(), 1.0f) : read_grid<float>(mask).image;
    try {
        m.validate();
    } catch (const FormatError& e) {
        throw FormatError(phase_u + " / " + phase_v + ": " + e.what());
    }
    return m;
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open " + path);
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": " + e.what());
    }
}

/// Ingests externally computed phase maps and candidate lists (e.g. from trained networks).
inline std::pair<WrappedPhaseMaps, DetectedGraph> ingest_external(const std::string& phase_u, const std::string& phase_v,
                                                                  const std::string& mask, const std::string& candidates,
                                                                  const GridPattern& pattern,
                                                                  const PhaseEstimatorParams& period_hint = {}) {
    auto maps = read_phase_maps(phase_u, phase_v, mask);
    const auto j = read_json_file(candidates);
    DetectedGraph g;
    try {
        g = graph_from_json(j, pattern);
    } catch (const FormatError& e) {
        throw FormatError(candidates + ": " + e.what());
    }
    if (j.is_array() && g.size() > 1) {
        PeriodEstimate t{period_hint.period_x, period_hint.period_y};
        if (!(t.x > 0) || !(t.y > 0)) {
            // Spacing from the phase gradient: median over confident pixels.
            std::vector<double> gx, gy;
            for (int y = 1; y + 1 < maps.height(); y += 3)
                for (int x = 1; x + 1 < maps.width(); x += 3)
                    if (maps.mask(x, y) > 0.5f) {
                        gx.push_back(std::abs(0.5 * circ(maps.phase_u(x + 1, y) - maps.phase_u(x - 1, y))));
                        gy.push_back(std::abs(0.5 * circ(maps.phase_v(x, y + 1) - maps.phase_v(x, y - 1))));
                    }
            const double mx = detail::percentile(gx, 0.5), my = detail::percentile(gy, 0.5);
            t = {mx > 1e-6 ? 1.0 / mx : 16.0, my > 1e-6 ? 1.0 / my : 16.0};
        }
        link_nodes(g, maps, t);
    }
    return {std::move(maps), std::move(g)};
}

}  // namespace oneshot
