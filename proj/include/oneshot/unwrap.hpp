#pragma once

// Line-anchored phase correction and unwrapping.
//
// Grid lines sit at phase 0.5 by construction, so the wrapped phase measured on a detected line is a
// direct reading of the local phase error. Readings are densified by normalized Gaussian
// interpolation, subtracted, and the corrected phase is unwrapped by region growing from labeled nodes.

#include <algorithm>
#include <array>
#include <climits>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "oneshot/core/error.hpp"
#include "oneshot/core/filter.hpp"
#include "oneshot/core/grid_io.hpp"
#include "oneshot/core/image.hpp"
#include "oneshot/core/phase.hpp"
#include "oneshot/graphext.hpp"
#include "oneshot/mrf.hpp"
#include "oneshot/pattern.hpp"

namespace oneshot {

/// U: vertical lines (constant projector column), carried by phase_u. V: horizontal lines, phase_v.
enum class PhaseAxis : std::uint8_t { U = 0, V = 1 };

inline const char* to_string(PhaseAxis a) { return a == PhaseAxis::U ? "u" : "v"; }

struct LineCurve {
    PhaseAxis axis = PhaseAxis::U;
    std::vector<Vec2> points;  // ~1 px arc-length spacing
    bool straight = false;     // too short for a spline; least-squares line instead
};

// --- curve fitting -----------------------------------------------------------------------

/// Bright-line centers along a path: at each path point the intensity profile across the line
/// (direction `across`, +-half_window px) is reduced to the centroid of its upper half. Profiles
/// without a clear isolated peak (flat, or bright at the window ends as at line crossings) are skipped.
inline std::vector<Vec2> trace_line_centroids(const ImageU8& image, const std::vector<Vec2>& path, const std::vector<Vec2>& across,
                                              double half_window, double min_contrast = 20.0) {
    std::vector<Vec2> out;
    const double step = 0.25;
    const int n = static_cast<int>(std::floor(half_window / step));
    std::vector<double> prof(static_cast<std::size_t>(2 * n + 1));
    for (std::size_t k = 0; k < path.size(); ++k) {
        const Vec2 dir = across[std::min(k, across.size() - 1)].normalized();
        bool inside = true;
        for (int s = -n; s <= n; ++s) {
            const Vec2 q = path[k] + (s * step) * dir;
            if (q.x() < 0 || q.y() < 0 || q.x() > image.width() - 1 || q.y() > image.height() - 1) {
                inside = false;
                break;
            }
            prof[s + n] = sample_bilinear(image, q.x(), q.y());
        }
        if (!inside) continue;
        const auto [lo, hi] = std::minmax_element(prof.begin(), prof.end());
        const double range = *hi - *lo;
        if (range < min_contrast) continue;
        const double cut = *lo + 0.5 * range;
        if (prof.front() > cut || prof.back() > cut) continue;
        double sw = 0, ss = 0;
        for (int s = -n; s <= n; ++s) {
            const double w = std::max(0.0, prof[s + n] - cut);
            sw += w;
            ss += w * s * step;
        }
        if (sw <= 0) continue;
        out.push_back(path[k] + (ss / sw) * dir);
    }
    return out;
}

namespace detail {

inline Eigen::Vector4d cubic_bspline_basis(double u) {
    const double u2 = u * u, u3 = u2 * u;
    return Eigen::Vector4d((1 - u) * (1 - u) * (1 - u) / 6.0, (3 * u3 - 6 * u2 + 4) / 6.0, (-3 * u3 + 3 * u2 + 3 * u + 1) / 6.0,
                           u3 / 6.0);
}

inline std::vector<Vec2> resample_by_arc_length(const std::vector<Vec2>& dense, double spacing) {
    std::vector<Vec2> out;
    if (dense.empty()) return out;
    out.push_back(dense.front());
    double carry = 0;
    for (std::size_t k = 1; k < dense.size(); ++k) {
        const Vec2 a = dense[k - 1], b = dense[k];
        const double len = (b - a).norm();
        double pos = spacing - carry;
        while (pos <= len) {
            out.push_back(a + (pos / len) * (b - a));
            pos += spacing;
        }
        carry = len - (pos - spacing);
    }
    return out;
}

}  // namespace detail

/// Least-squares uniform cubic B-spline through `samples`, as offset-from-axis over the principal
/// direction. n_spans < 1 (fewer than four control points) falls back to a straight line.
inline LineCurve fit_bspline(const std::vector<Vec2>& samples, PhaseAxis axis, int n_spans, double spacing = 1.0) {
    LineCurve curve;
    curve.axis = axis;
    if (samples.size() < 2) {
        curve.points = samples;
        curve.straight = true;
        return curve;
    }
    Vec2 mean = Vec2::Zero();
    for (const auto& p : samples) mean += p;
    mean /= static_cast<double>(samples.size());
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (const auto& p : samples) cov += (p - mean) * (p - mean).transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(cov);
    const Vec2 tangent = es.eigenvectors().col(1);
    const Vec2 normal(-tangent.y(), tangent.x());
    std::vector<double> t, o;
    for (const auto& p : samples) {
        t.push_back((p - mean).dot(tangent));
        o.push_back((p - mean).dot(normal));
    }
    const double t0 = *std::min_element(t.begin(), t.end()), t1 = *std::max_element(t.begin(), t.end());
    std::function<double(double)> offset;
    const int m = static_cast<int>(samples.size());
    if (n_spans < 1 || m < n_spans + 3 || t1 - t0 < 1e-9) {
        curve.straight = true;
        Eigen::MatrixXd a(m, 2);
        Eigen::VectorXd b(m);
        for (int i = 0; i < m; ++i) {
            a(i, 0) = 1;
            a(i, 1) = t[i];
            b(i) = o[i];
        }
        const Eigen::Vector2d c = a.colPivHouseholderQr().solve(b);
        offset = [c](double tt) { return c(0) + c(1) * tt; };
    } else {
        const int nc = n_spans + 3;
        const double h = (t1 - t0) / n_spans;
        auto locate = [&](double tt, int& k, double& u) {
            const double s = std::clamp((tt - t0) / h, 0.0, static_cast<double>(n_spans));
            k = std::min(static_cast<int>(std::floor(s)), n_spans - 1);
            u = s - k;
        };
        Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(nc, nc);
        Eigen::VectorXd atb = Eigen::VectorXd::Zero(nc);
        for (int i = 0; i < m; ++i) {
            int k;
            double u;
            locate(t[i], k, u);
            const Eigen::Vector4d bas = detail::cubic_bspline_basis(u);
            for (int r = 0; r < 4; ++r) {
                atb(k + r) += bas(r) * o[i];
                for (int c = 0; c < 4; ++c) ata(k + r, k + c) += bas(r) * bas(c);
            }
        }
        // Light second-difference damping keeps spans without samples well posed.
        const double reg = 1e-4 * m / nc;
        for (int k = 1; k + 1 < nc; ++k) {
            const int idx[3] = {k - 1, k, k + 1};
            const double w[3] = {1, -2, 1};
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) ata(idx[r], idx[c]) += reg * w[r] * w[c];
        }
        const Eigen::VectorXd ctrl = ata.ldlt().solve(atb);
        offset = [ctrl, locate](double tt) {
            int k;
            double u;
            locate(tt, k, u);
            return detail::cubic_bspline_basis(u).dot(ctrl.segment<4>(k));
        };
    }
    std::vector<Vec2> dense;
    const double dt = 0.1 * spacing;
    for (double tt = t0; tt <= t1 + 1e-9; tt += dt) dense.push_back(mean + tt * tangent + offset(tt) * normal);
    curve.points = detail::resample_by_arc_length(dense, spacing);
    return curve;
}

/// Subpixel curves for every chain of collinear edges. A vertical line crosses each right-edge; the
/// right-edges stacked through down-links form its chain (horizontal lines likewise).
inline std::vector<LineCurve> fit_line_curves(const DetectedGraph& g, const ImageU8& image, double window_frac = 0.3) {
    std::vector<LineCurve> curves;
    for (auto axis : {PhaseAxis::U, PhaseAxis::V}) {
        const Direction edge = axis == PhaseAxis::U ? Direction::Right : Direction::Down;
        const Direction along = axis == PhaseAxis::U ? Direction::Down : Direction::Right;
        const Direction back = opposite(along);
        // An edge continues below/right when both endpoints have along-links that are joined by an edge too.
        auto next = [&](std::int32_t a) -> std::int32_t {
            const auto b = g.neighbor(a, edge);
            const auto a2 = g.neighbor(a, along);
            if (b == kNoNode || a2 == kNoNode) return kNoNode;
            const auto b2 = g.neighbor(a2, edge);
            return b2 != kNoNode && b2 == g.neighbor(b, along) ? a2 : kNoNode;
        };
        auto has_prev = [&](std::int32_t a) {
            const auto a0 = g.neighbor(a, back);
            return a0 != kNoNode && next(a0) == a;
        };
        for (std::size_t start = 0; start < g.size(); ++start) {
            const auto s = static_cast<std::int32_t>(start);
            if (g.neighbor(s, edge) == kNoNode || has_prev(s)) continue;
            std::vector<Vec2> anchors, dirs;
            double len_sum = 0;
            for (std::int32_t a = s; a != kNoNode; a = next(a)) {
                const Vec2 pa = g.nodes[static_cast<std::size_t>(a)].pixel;
                const Vec2 pb = g.nodes[static_cast<std::size_t>(g.neighbor(a, edge))].pixel;
                anchors.push_back(0.5 * (pa + pb));
                dirs.push_back(pb - pa);
                len_sum += (pb - pa).norm();
                if (anchors.size() > g.size()) break;  // malformed links
            }
            const double cell = len_sum / static_cast<double>(anchors.size());
            // Path: anchors joined by straight pieces, extended half a cell past both ends.
            auto perp = [&](const Vec2& d) {
                Vec2 p(-d.y(), d.x());
                if (axis == PhaseAxis::V) p = -p;  // points along +along for either axis
                return p;
            };
            std::vector<Vec2> path, across;
            auto push_segment = [&](const Vec2& a, const Vec2& b, const Vec2& da, const Vec2& db) {
                const double len = (b - a).norm();
                const int steps = std::max(1, static_cast<int>(std::ceil(len)));
                for (int k = 0; k < steps; ++k) {
                    const double f = static_cast<double>(k) / steps;
                    path.push_back(a + f * (b - a));
                    across.push_back((1 - f) * da + f * db);
                }
            };
            const Vec2 ext0 = anchors.front() - 0.5 * perp(dirs.front());
            const Vec2 ext1 = anchors.back() + 0.5 * perp(dirs.back());
            push_segment(ext0, anchors.front(), dirs.front(), dirs.front());
            for (std::size_t k = 0; k + 1 < anchors.size(); ++k) push_segment(anchors[k], anchors[k + 1], dirs[k], dirs[k + 1]);
            push_segment(anchors.back(), ext1, dirs.back(), dirs.back());
            path.push_back(ext1);
            across.push_back(dirs.back());
            const auto samples = trace_line_centroids(image, path, across, window_frac * cell);
            curves.push_back(fit_bspline(samples, axis, static_cast<int>(anchors.size()) - 1));
        }
    }
    return curves;
}

// --- corrections ---------------------------------------------------------------------------

struct LineSample {
    Vec2 pixel = Vec2::Zero();
    PhaseAxis axis = PhaseAxis::U;
    double c = 0.0;       // circ(phase - 0.5)
    double weight = 1.0;
};

using LineSampleSet = std::vector<LineSample>;

/// c = circ(phase - 0.5) at every curve point inside the phase mask.
inline LineSampleSet sample_corrections(const std::vector<LineCurve>& curves, const WrappedPhaseMaps& phase) {
    LineSampleSet out;
    for (const auto& curve : curves) {
        const auto& ph = curve.axis == PhaseAxis::U ? phase.phase_u : phase.phase_v;
        for (const auto& p : curve.points) {
            const int x = static_cast<int>(std::lround(p.x())), y = static_cast<int>(std::lround(p.y()));
            if (!phase.mask.contains(x, y) || phase.mask(x, y) <= 0.0f) continue;
            if (p.x() < 0 || p.y() < 0 || p.x() > phase.width() - 1 || p.y() > phase.height() - 1) continue;
            out.push_back({p, curve.axis, circ(detail::sample_circ(ph, p) - 0.5), 1.0});
        }
    }
    return out;
}

struct CorrectionMap {
    ImageD value;   // dense correction, 0 off the mask
    ImageD weight;  // sum of kernel weights
    ImageU8 mask;   // weight >= w_min

    bool empty() const { return value.empty(); }
};

/// Normalized Gaussian interpolation of the samples of one axis. Samples are splatted bilinearly onto
/// the pixel grid and both the weighted sum and the weight are filtered with the unnormalized kernel
/// exp(-r^2 / 2 sigma^2), truncated at 4 sigma.
inline CorrectionMap densify_correction(const LineSampleSet& samples, PhaseAxis axis, double sigma, int width, int height,
                                        double w_min = 1e-3) {
    CorrectionMap m{ImageD(width, height, 0.0), ImageD(width, height, 0.0), ImageU8(width, height, 0)};
    if (!(sigma > 0)) throw ConfigError("densify: sigma must be positive");
    ImageD num(width, height, 0.0), den(width, height, 0.0);
    bool any = false;
    for (const auto& s : samples) {
        if (s.axis != axis || !(s.weight > 0)) continue;
        const double x = s.pixel.x(), y = s.pixel.y();
        const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
        const double fx = x - x0, fy = y - y0;
        const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1}, ys[4] = {y0, y0, y0 + 1, y0 + 1};
        for (int k = 0; k < 4; ++k) {
            if (!num.contains(xs[k], ys[k]) || wts[k] == 0) continue;
            num(xs[k], ys[k]) += s.weight * wts[k] * s.c;
            den(xs[k], ys[k]) += s.weight * wts[k];
            any = true;
        }
    }
    if (!any) return m;
    const int r = static_cast<int>(std::ceil(4 * sigma));
    std::vector<double> k(2 * r + 1);
    for (int i = -r; i <= r; ++i) k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    num = filter_separable(num, k, k, Border::Zero);
    m.weight = filter_separable(den, k, k, Border::Zero);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            if (m.weight(x, y) >= w_min && m.weight(x, y) > 0.0) {
                m.mask(x, y) = 1;
                m.value(x, y) = std::clamp(num(x, y) / m.weight(x, y), -0.5, 0.5);
            }
    return m;
}

/// phase' = wrap(phase - c) where both the phase mask and the correction mask hold.
inline WrappedPhaseMaps apply_correction(const WrappedPhaseMaps& phase, const CorrectionMap& cu, const CorrectionMap& cv) {
    WrappedPhaseMaps out = phase;
    for (const CorrectionMap* c : {&cu, &cv})
        if (!c->empty() && (c->value.width() != phase.width() || c->value.height() != phase.height()))
            throw StageError("unwrap", "correction map dimensions differ from the phase maps");
    for (int y = 0; y < phase.height(); ++y)
        for (int x = 0; x < phase.width(); ++x) {
            if (phase.mask(x, y) <= 0.0f) continue;
            if (!cu.empty() && cu.mask(x, y)) out.phase_u(x, y) = wrap01f(phase.phase_u(x, y) - cu.value(x, y));
            if (!cv.empty() && cv.mask(x, y)) out.phase_v(x, y) = wrap01f(phase.phase_v(x, y) - cv.value(x, y));
        }
    return out;
}

/// Median edge length of the graph in pixels (the camera-side period), or `fallback`.
inline double median_node_spacing(const DetectedGraph& g, double fallback = 16.0) {
    std::vector<double> len;
    for (const auto& e : g.edges())
        len.push_back((g.nodes[static_cast<std::size_t>(e.from)].pixel - g.nodes[static_cast<std::size_t>(e.to)].pixel).norm());
    if (len.empty()) return fallback;
    std::nth_element(len.begin(), len.begin() + static_cast<std::ptrdiff_t>(len.size() / 2), len.end());
    return len[len.size() / 2];
}

struct PhaseRefinement {
    std::vector<LineCurve> curves;
    LineSampleSet samples;
    CorrectionMap correction_u, correction_v;
    WrappedPhaseMaps corrected;
    double sigma = 0.0;
};

/// Curves, samples, dense corrections and the corrected phase in one call. sigma <= 0 uses the
/// median node spacing.
inline PhaseRefinement refine_phase(const DetectedGraph& g, const ImageU8& image, const WrappedPhaseMaps& phase, double sigma = 0.0) {
    PhaseRefinement r;
    r.sigma = sigma > 0 ? sigma : median_node_spacing(g, 16.0);
    r.curves = fit_line_curves(g, image);
    r.samples = sample_corrections(r.curves, phase);
    r.correction_u = densify_correction(r.samples, PhaseAxis::U, r.sigma, phase.width(), phase.height());
    r.correction_v = densify_correction(r.samples, PhaseAxis::V, r.sigma, phase.width(), phase.height());
    r.corrected = apply_correction(phase, r.correction_u, r.correction_v);
    return r;
}

// --- unwrapping ------------------------------------------------------------------------------

struct CorrespondenceMap {
    ImageD u;       // absolute projector column (px)
    ImageD v;       // absolute projector row (px)
    ImageU8 valid;

    int width() const { return u.width(); }
    int height() const { return u.height(); }
};

struct UnwrapParams {
    double max_step = 0.3;       // largest phase change between 4-neighbors inside a region (cycles)
    double seed_tolerance = 0.3; // a node's wrapped phase must be this close to 0 to seed
};

namespace detail {

constexpr int kNoCell = INT_MIN;

struct GrowResult {
    ImageI32 ku, kv, owner;
};

inline GrowResult grow_cells(const WrappedPhaseMaps& ph, const std::vector<std::pair<Eigen::Vector2i, std::array<int, 3>>>& seeds,
                             double max_step) {
    const int w = ph.width(), h = ph.height();
    GrowResult r{ImageI32(w, h, kNoCell), ImageI32(w, h, kNoCell), ImageI32(w, h, -1)};
    std::deque<Eigen::Vector2i> queue;
    for (const auto& [p, cell] : seeds) {
        if (r.owner(p.x(), p.y()) != -1) continue;
        r.ku(p.x(), p.y()) = cell[0];
        r.kv(p.x(), p.y()) = cell[1];
        r.owner(p.x(), p.y()) = cell[2];
        queue.push_back(p);
    }
    static constexpr int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
    while (!queue.empty()) {
        const Eigen::Vector2i p = queue.front();
        queue.pop_front();
        const double pu = ph.phase_u(p.x(), p.y()), pv = ph.phase_v(p.x(), p.y());
        for (int k = 0; k < 4; ++k) {
            const int qx = p.x() + dx[k], qy = p.y() + dy[k];
            if (qx < 0 || qy < 0 || qx >= w || qy >= h || r.owner(qx, qy) != -1 || ph.mask(qx, qy) <= 0.0f) continue;
            const double du = circ(ph.phase_u(qx, qy) - pu), dv = circ(ph.phase_v(qx, qy) - pv);
            if (std::abs(du) > max_step || std::abs(dv) > max_step) continue;
            r.ku(qx, qy) = static_cast<int>(std::lround(r.ku(p.x(), p.y()) + pu + du - ph.phase_u(qx, qy)));
            r.kv(qx, qy) = static_cast<int>(std::lround(r.kv(p.x(), p.y()) + pv + dv - ph.phase_v(qx, qy)));
            r.owner(qx, qy) = r.owner(p.x(), p.y());
            queue.push_back({qx, qy});
        }
    }
    return r;
}

/// True when the unwrapped values of two neighbors differ by their circular phase difference.
inline bool consistent(const WrappedPhaseMaps& ph, const GrowResult& g, int ax, int ay, int bx, int by) {
    const double ua = g.ku(ax, ay) + static_cast<double>(ph.phase_u(ax, ay)), ub = g.ku(bx, by) + static_cast<double>(ph.phase_u(bx, by));
    const double va = g.kv(ax, ay) + static_cast<double>(ph.phase_v(ax, ay)), vb = g.kv(bx, by) + static_cast<double>(ph.phase_v(bx, by));
    return std::abs(ub - ua - circ(ph.phase_u(bx, by) - ph.phase_u(ax, ay))) < 0.5 &&
           std::abs(vb - va - circ(ph.phase_v(bx, by) - ph.phase_v(ax, ay))) < 0.5;
}


/// Regions whose shared borders mostly agree are merged into components; components are then
/// accepted largest first (by pixel count) unless they conflict with one already accepted.
inline std::vector<char> consistent_regions(const WrappedPhaseMaps& ph, const GrowResult& grown, std::size_t n_regions, double max_step) {
    const int w = ph.width(), h = ph.height();
    std::map<std::pair<int, int>, std::pair<long, long>> border;  // (agree, disagree) per region pair
    std::vector<long> area(n_regions, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int o = grown.owner(x, y);
            if (o < 0) continue;
            ++area[static_cast<std::size_t>(o)];
            for (const auto& [bx, by] : {std::pair{x + 1, y}, std::pair{x, y + 1}}) {
                if (bx >= w || by >= h) continue;
                const int ob = grown.owner(bx, by);
                if (ob < 0 || ob == o) continue;
                if (std::abs(circ(ph.phase_u(bx, by) - ph.phase_u(x, y))) > max_step ||
                    std::abs(circ(ph.phase_v(bx, by) - ph.phase_v(x, y))) > max_step)
                    continue;
                auto& c = border[{std::min(o, ob), std::max(o, ob)}];
                (consistent(ph, grown, x, y, bx, by) ? c.first : c.second)++;
            }
        }
    std::vector<int> parent(n_regions);
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int a) { return parent[static_cast<std::size_t>(a)] == a ? a : parent[static_cast<std::size_t>(a)] = find(parent[static_cast<std::size_t>(a)]); };
    for (const auto& [k, c] : border)
        if (c.first > c.second) parent[static_cast<std::size_t>(find(k.first))] = find(k.second);
    std::vector<long> comp_area(n_regions, 0);
    std::vector<std::set<int>> conflicts(n_regions);
    for (std::size_t r = 0; r < n_regions; ++r) comp_area[static_cast<std::size_t>(find(static_cast<int>(r)))] += area[r];
    for (const auto& [k, c] : border)
        if (c.first <= c.second) {
            const int a = find(k.first), b = find(k.second);
            if (a == b) continue;
            conflicts[static_cast<std::size_t>(a)].insert(b);
            conflicts[static_cast<std::size_t>(b)].insert(a);
        }
    std::vector<int> order;
    for (std::size_t r = 0; r < n_regions; ++r)
        if (find(static_cast<int>(r)) == static_cast<int>(r) && comp_area[r] > 0) order.push_back(static_cast<int>(r));
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return comp_area[static_cast<std::size_t>(a)] > comp_area[static_cast<std::size_t>(b)]; });
    std::vector<char> comp_ok(n_regions, 0);
    for (int c : order) {
        bool ok = true;
        for (int o : conflicts[static_cast<std::size_t>(c)]) ok = ok && !comp_ok[static_cast<std::size_t>(o)];
        comp_ok[static_cast<std::size_t>(c)] = ok;
    }
    std::vector<char> accepted(n_regions, 0);
    for (std::size_t r = 0; r < n_regions; ++r) accepted[r] = comp_ok[static_cast<std::size_t>(find(static_cast<int>(r)))];
    return accepted;
}
}  // namespace detail

/// Absolute projector coordinates from wrapped phase and node labels. Each labeled node seeds its
/// cell index; cells propagate to 4-neighbors while the phase changes smoothly. Regions that conflict
/// with a larger mutually consistent set of regions (wrong labels) are dropped and the growth is
/// repeated; pixels still on a disagreeing border are masked.
inline CorrespondenceMap unwrap(const WrappedPhaseMaps& ph, const Labeling& labels, const DetectedGraph& g, const GridPattern& pattern,
                                const UnwrapParams& params = {}) {
    const int w = ph.width(), h = ph.height();
    CorrespondenceMap out{ImageD(w, h, 0.0), ImageD(w, h, 0.0), ImageU8(w, h, 0)};
    if (labels.size() != g.size()) throw StageError("unwrap", "labeling size does not match the graph");
    std::vector<std::pair<Eigen::Vector2i, std::array<int, 3>>> seeds;
    for (std::size_t n = 0; n < g.size(); ++n) {
        const auto l = labels[n];
        if (l == kNoNode) continue;
        if (!pattern.contains_id(l)) throw StageError("unwrap", "label of node " + std::to_string(n) + " outside the pattern");
        const int x = static_cast<int>(std::lround(g.nodes[n].pixel.x())), y = static_cast<int>(std::lround(g.nodes[n].pixel.y()));
        if (!ph.mask.contains(x, y) || ph.mask(x, y) <= 0.0f) continue;
        const double fu = ph.phase_u(x, y), fv = ph.phase_v(x, y);
        if (std::abs(circ(fu)) > params.seed_tolerance || std::abs(circ(fv)) > params.seed_tolerance) continue;
        const int j = pattern.col_of(l), i = pattern.row_of(l);
        seeds.push_back({{x, y}, {static_cast<int>(std::lround(j - fu)), static_cast<int>(std::lround(i - fv)), static_cast<int>(n)}});
    }
    if (seeds.empty()) return out;
    // Raster order of seeds keeps the growth deterministic.
    std::stable_sort(seeds.begin(), seeds.end(), [](const auto& a, const auto& b) {
        return a.first.y() < b.first.y() || (a.first.y() == b.first.y() && a.first.x() < b.first.x());
    });

    auto grown = detail::grow_cells(ph, seeds, params.max_step);
    const std::vector<char> accepted = detail::consistent_regions(ph, grown, g.size(), params.max_step);
    std::vector<std::pair<Eigen::Vector2i, std::array<int, 3>>> kept;
    for (const auto& s : seeds)
        if (accepted[static_cast<std::size_t>(s.second[2])]) kept.push_back(s);
    if (kept.size() != seeds.size()) grown = detail::grow_cells(ph, kept, params.max_step);

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (grown.owner(x, y) < 0) continue;
            bool ok = true;
            for (const auto& [bx, by] : {std::pair{x + 1, y}, std::pair{x - 1, y}, std::pair{x, y + 1}, std::pair{x, y - 1}}) {
                if (bx < 0 || by < 0 || bx >= w || by >= h || grown.owner(bx, by) < 0) continue;
                if (std::abs(circ(ph.phase_u(bx, by) - ph.phase_u(x, y))) > params.max_step ||
                    std::abs(circ(ph.phase_v(bx, by) - ph.phase_v(x, y))) > params.max_step)
                    continue;
                ok = ok && detail::consistent(ph, grown, x, y, bx, by);
            }
            if (!ok) continue;
            const double u = (grown.ku(x, y) + static_cast<double>(ph.phase_u(x, y))) * pattern.period_u;
            const double v = (grown.kv(x, y) + static_cast<double>(ph.phase_v(x, y))) * pattern.period_v;
            if (u < -0.5 || v < -0.5 || u > pattern.width - 0.5 || v > pattern.height - 0.5) continue;
            out.u(x, y) = u;
            out.v(x, y) = v;
            out.valid(x, y) = 1;
        }
    return out;
}

inline void write_correspondence(const CorrespondenceMap& m, const std::string& prefix, const nlohmann::json& meta = {}) {
    nlohmann::json hd = meta.is_object() ? meta : nlohmann::json::object();
    hd["name"] = "proj_u";
    write_grid(prefix + "proj_u.grid", convert<float>(m.u), hd);
    hd["name"] = "proj_v";
    write_grid(prefix + "proj_v.grid", convert<float>(m.v), hd);
    hd["name"] = "proj_valid";
    write_grid(prefix + "proj_valid.grid", m.valid, hd);
}

inline CorrespondenceMap read_correspondence(const std::string& prefix) {
    CorrespondenceMap m;
    m.u = convert<double>(read_grid<float>(prefix + "proj_u.grid").image);
    m.v = convert<double>(read_grid<float>(prefix + "proj_v.grid").image);
    m.valid = read_grid<std::uint8_t>(prefix + "proj_valid.grid").image;
    if (!m.u.same_shape(m.v) || !m.u.same_shape(m.valid)) throw FormatError(prefix + ": correspondence maps differ in size");
    return m;
}

}  // namespace oneshot
