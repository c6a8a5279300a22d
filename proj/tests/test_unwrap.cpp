#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "oneshot/simulator.hpp"
#include "oneshot/unwrap.hpp"
#include "test_support.hpp"

namespace oneshot {
namespace {

// Dark image with one bright 3-px line along the curve x = x0 + a sin(2 pi y / lambda).
ImageU8 line_image(int w, int h, double x0, double a, double lambda) {
    ImageD img(w, h, 20.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double c = x0 + (lambda > 0 ? a * std::sin(2 * M_PI * y / lambda) : 0.0);
            const double d = std::abs(x - c);
            img(x, y) += 200.0 * std::clamp(2.0 - d, 0.0, 1.0);  // plateau |d| < 1, linear ramp to 2
        }
    return quantize(img);
}

std::vector<Vec2> vertical_path(double x, int y0, int y1) {
    std::vector<Vec2> p;
    for (int y = y0; y <= y1; ++y) p.emplace_back(x, y);
    return p;
}

WrappedPhaseMaps gt_phase(const SceneCapture& cap) {
    WrappedPhaseMaps m{cap.gt_phase_u, cap.gt_phase_v, ImageF(cap.foreground.width(), cap.foreground.height(), 0.0f)};
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) m.mask(x, y) = cap.foreground(x, y) ? 1.0f : 0.0f;
    return m;
}

TEST(LineCurves, StraightLineCentroidsAreSubpixel) {
    auto img = line_image(80, 120, 40.37, 0, 0);
    auto pts = trace_line_centroids(img, vertical_path(38.0, 5, 114), {Vec2(1, 0)}, 6.0);
    ASSERT_EQ(pts.size(), 110u);
    for (const auto& p : pts) EXPECT_NEAR(p.x(), 40.37, 0.1);
    auto curve = fit_bspline(pts, PhaseAxis::U, 4);
    EXPECT_FALSE(curve.straight);
    for (const auto& p : curve.points) EXPECT_NEAR(p.x(), 40.37, 0.1);
}

TEST(LineCurves, SinusoidalLineFollowsTheCurve) {
    auto img = line_image(80, 200, 40.0, 2.0, 64.0);
    auto pts = trace_line_centroids(img, vertical_path(40.0, 5, 194), {Vec2(1, 0)}, 6.0);
    auto curve = fit_bspline(pts, PhaseAxis::U, 12);
    ASSERT_GT(curve.points.size(), 150u);
    std::vector<double> e;
    for (const auto& p : curve.points) e.push_back(p.x() - (40.0 + 2.0 * std::sin(2 * M_PI * p.y() / 64.0)));
    EXPECT_LT(testing::rms(e), 0.3);
    // Arc-length spacing of 1 px; chords on a curve are slightly shorter.
    for (std::size_t k = 1; k < curve.points.size(); ++k) EXPECT_NEAR((curve.points[k] - curve.points[k - 1]).norm(), 1.0, 1e-3);
}

TEST(LineCurves, ShortChainFallsBackToStraight) {
    std::vector<Vec2> pts = {{10, 0}, {10.2, 5}, {10.1, 10}};
    auto curve = fit_bspline(pts, PhaseAxis::V, 0);
    EXPECT_TRUE(curve.straight);
    EXPECT_GT(curve.points.size(), 8u);
}

TEST(LineCurves, CrossingProfilesAreSkipped) {
    ImageU8 flat(40, 40, 180);
    EXPECT_TRUE(trace_line_centroids(flat, vertical_path(20, 5, 30), {Vec2(1, 0)}, 5.0).empty());
}

TEST(Correction, SampleArithmetic) {
    // c = circ(phase - 0.5): 0.62 -> 0.12, 0.02 -> -0.48.
    WrappedPhaseMaps m{ImageF(10, 10, 0.62f), ImageF(10, 10, 0.02f), ImageF(10, 10, 1.0f)};
    LineCurve cu{PhaseAxis::U, {Vec2(4, 4)}, true}, cv{PhaseAxis::V, {Vec2(5, 5)}, true};
    auto s = sample_corrections({cu, cv}, m);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_NEAR(s[0].c, 0.12, 1e-6);
    EXPECT_NEAR(s[1].c, -0.48, 1e-6);
}

LineSampleSet grid_samples(const std::function<double(double, double)>& f, int w, int h, int step) {
    LineSampleSet s;
    for (int y = 0; y < h; y += step)
        for (int x = 0; x < w; ++x) s.push_back({Vec2(x + 0.3, y + 0.6), PhaseAxis::U, f(x + 0.3, y + 0.6), 1.0});
    return s;
}

TEST(Densify, ConstantIsReproduced) {
    auto s = grid_samples([](double, double) { return 0.07; }, 60, 60, 12);
    auto m = densify_correction(s, PhaseAxis::U, 8.0, 60, 60);
    for (int y = 0; y < 60; ++y)
        for (int x = 0; x < 60; ++x) {
            ASSERT_TRUE(m.mask(x, y));
            EXPECT_NEAR(m.value(x, y), 0.07, 1e-9);
        }
}

TEST(Densify, LinearFieldWithinFivePercentInside) {
    auto f = [](double x, double y) { return 0.001 * x + 0.0005 * y; };
    auto m = densify_correction(grid_samples(f, 120, 120, 10), PhaseAxis::U, 8.0, 120, 120);
    for (int y = 30; y < 90; ++y)
        for (int x = 30; x < 90; ++x) EXPECT_NEAR(m.value(x, y), f(x, y), 0.05 * f(x, y));
}

TEST(Densify, SingleSampleSpreadsItsValue) {
    LineSampleSet s = {{Vec2(20, 20), PhaseAxis::U, -0.2, 1.0}};
    auto m = densify_correction(s, PhaseAxis::U, 4.0, 40, 40);
    EXPECT_NEAR(m.value(20, 20), -0.2, 1e-12);
    EXPECT_NEAR(m.value(27, 22), -0.2, 1e-12);
    EXPECT_FALSE(m.mask(0, 0));  // beyond 4 sigma
    EXPECT_EQ(m.value(0, 0), 0.0);
}

TEST(Densify, InvariantToSampleWeightScale) {
    auto s = grid_samples([](double x, double y) { return 0.1 * std::sin(x / 9.0) * std::cos(y / 7.0); }, 50, 50, 7);
    auto a = densify_correction(s, PhaseAxis::U, 5.0, 50, 50);
    for (auto& v : s) v.weight *= 3.7;
    auto b = densify_correction(s, PhaseAxis::U, 5.0, 50, 50, 3.7e-3);
    for (int y = 0; y < 50; ++y)
        for (int x = 0; x < 50; ++x) {
            EXPECT_EQ(a.mask(x, y), b.mask(x, y));
            EXPECT_NEAR(a.value(x, y), b.value(x, y), 1e-12);
        }
}

TEST(Densify, OtherAxisIgnoredAndBadSigmaRejected) {
    LineSampleSet s = {{Vec2(5, 5), PhaseAxis::V, 0.3, 1.0}};
    const auto m = densify_correction(s, PhaseAxis::U, 2.0, 10, 10);
    EXPECT_EQ(std::count(m.mask.pixels().begin(), m.mask.pixels().end(), 1), 0);
    EXPECT_THROW(densify_correction(s, PhaseAxis::U, 0.0, 10, 10), ConfigError);
}

TEST(Densify, ZeroThresholdLeavesUnreachedPixelsEmpty) {
    LineSampleSet s = {{Vec2(2, 2), PhaseAxis::U, 0.3, 1.0}};
    const auto m = densify_correction(s, PhaseAxis::U, 0.5, 40, 10, 0.0);
    EXPECT_EQ(m.mask(39, 9), 0);
    EXPECT_EQ(m.value(39, 9), 0.0);
    EXPECT_NEAR(m.value(2, 2), 0.3, 1e-12);
}

TEST(Correction, ApplySubtracts) {
    WrappedPhaseMaps m{ImageF(4, 4, 0.1f), ImageF(4, 4, 0.1f), ImageF(4, 4, 1.0f)};
    CorrectionMap c{ImageD(4, 4, -0.05), ImageD(4, 4, 1.0), ImageU8(4, 4, 1)};
    auto out = apply_correction(m, c, CorrectionMap{});
    EXPECT_NEAR(out.phase_u(1, 1), 0.15, 1e-6);
    EXPECT_NEAR(out.phase_v(1, 1), 0.1, 1e-6);
    CorrectionMap wrong{ImageD(3, 4, 0.0), ImageD(3, 4, 1.0), ImageU8(3, 4, 1)};
    EXPECT_THROW(apply_correction(m, wrong, CorrectionMap{}), StageError);
}

class RenderedFixture : public ::testing::Test {
protected:
    Rig rig = default_rig();
    GridPattern pattern = testing::vga_pattern();
};

TEST_F(RenderedFixture, SmoothBiasIsLargelyRemoved) {
    auto cap = render_capture(make_sinusoid_scene(1.0, 0.02, 0.2), rig, pattern);
    auto gt = gt_phase(cap);
    auto biased = gt;
    auto bias = [](int x, int y) { return 0.06 * std::sin(x / 90.0 + 0.3) * std::cos(y / 110.0); };
    for (int y = 0; y < gt.height(); ++y)
        for (int x = 0; x < gt.width(); ++x) {
            biased.phase_u(x, y) = wrap01f(gt.phase_u(x, y) + bias(x, y));
            biased.phase_v(x, y) = wrap01f(gt.phase_v(x, y) - 0.7 * bias(x, y));
        }
    auto det = detect_graph(cap.image, pattern, rig);
    auto r = refine_phase(det.graph, cap.image, biased);
    ASSERT_GT(r.curves.size(), 40u);
    std::vector<double> before, after;
    for (int y = 60; y < 420; ++y)
        for (int x = 80; x < 560; ++x) {
            if (!cap.foreground(x, y)) continue;
            before.push_back(circ(biased.phase_u(x, y) - gt.phase_u(x, y)));
            before.push_back(circ(biased.phase_v(x, y) - gt.phase_v(x, y)));
            after.push_back(circ(r.corrected.phase_u(x, y) - gt.phase_u(x, y)));
            after.push_back(circ(r.corrected.phase_v(x, y) - gt.phase_v(x, y)));
        }
    EXPECT_LE(testing::rms(after), 0.35 * testing::rms(before));
}

TEST_F(RenderedFixture, UnwrapFromTrueLabelsMatchesGroundTruth) {
    auto cap = render_capture(make_tilted_plane(1.0), rig, pattern);
    auto ph = gt_phase(cap);
    auto det = detect_graph(cap.image, pattern, rig);
    Labeling truth;
    for (const auto& n : det.graph.nodes)
        truth.push_back(cap.gt_node_id(static_cast<int>(std::lround(n.pixel.x())), static_cast<int>(std::lround(n.pixel.y()))));
    auto corr = unwrap(ph, truth, det.graph, pattern);

    long valid = 0, fg = 0;
    std::vector<double> e;
    for (int y = 0; y < corr.height(); ++y)
        for (int x = 0; x < corr.width(); ++x) {
            fg += cap.foreground(x, y);
            if (!corr.valid(x, y)) continue;
            ++valid;
            ASSERT_TRUE(cap.foreground(x, y));
            const Vec2 g = gt_projector_coords(cap, pattern, x, y);
            e.push_back(corr.u(x, y) - g.x());
            e.push_back(corr.v(x, y) - g.y());
        }
    EXPECT_GT(valid, 0.95 * fg);
    EXPECT_LT(testing::rms(e), 0.1);

    // At a node the unwrapped coordinate is the node's lattice position up to the phase reading.
    for (std::size_t n = 0; n < det.graph.size(); ++n) {
        const int x = static_cast<int>(std::lround(det.graph.nodes[n].pixel.x()));
        const int y = static_cast<int>(std::lround(det.graph.nodes[n].pixel.y()));
        if (!corr.valid(x, y)) continue;
        EXPECT_NEAR(corr.u(x, y), pattern.node_u(pattern.col_of(truth[n])), 0.3 * pattern.period_u);
        EXPECT_NEAR(corr.v(x, y), pattern.node_v(pattern.row_of(truth[n])), 0.3 * pattern.period_v);
    }
}

TEST_F(RenderedFixture, RelabelShiftsCoordinatesByOnePeriod) {
    auto cap = render_capture(make_tilted_plane(1.0), rig, pattern);
    auto ph = gt_phase(cap);
    auto det = detect_graph(cap.image, pattern, rig);
    Labeling truth, shifted;
    for (const auto& n : det.graph.nodes) {
        const auto t = cap.gt_node_id(static_cast<int>(std::lround(n.pixel.x())), static_cast<int>(std::lround(n.pixel.y())));
        truth.push_back(t);
        shifted.push_back(pattern.col_of(t) + 1 < pattern.cols ? t + 1 : kNoNode);
    }
    auto a = unwrap(ph, truth, det.graph, pattern);
    auto b = unwrap(ph, shifted, det.graph, pattern);
    long both = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x)
            if (a.valid(x, y) && b.valid(x, y)) {
                ++both;
                EXPECT_NEAR(b.u(x, y) - a.u(x, y), pattern.period_u, 1e-9);
                EXPECT_NEAR(b.v(x, y), a.v(x, y), 1e-9);
            }
    EXPECT_GT(both, 100000);
}

TEST_F(RenderedFixture, WrongRegionIsDroppedNotPropagated) {
    auto cap = render_capture(make_tilted_plane(1.0), rig, pattern);
    auto ph = gt_phase(cap);
    auto det = detect_graph(cap.image, pattern, rig);
    Labeling x;
    for (const auto& n : det.graph.nodes)
        x.push_back(cap.gt_node_id(static_cast<int>(std::lround(n.pixel.x())), static_cast<int>(std::lround(n.pixel.y()))));
    // One isolated wrong label among correct neighbors.
    const std::size_t bad = det.graph.size() / 2;
    x[bad] = pattern.col_of(x[bad]) + 3 < pattern.cols ? x[bad] + 3 : x[bad] - 3;
    auto corr = unwrap(ph, x, det.graph, pattern);
    long wrong = 0;
    for (int y = 0; y < corr.height(); ++y)
        for (int xx = 0; xx < corr.width(); ++xx)
            if (corr.valid(xx, y)) wrong += std::abs(corr.u(xx, y) - gt_projector_coords(cap, pattern, xx, y).x()) > 1.0;
    EXPECT_EQ(wrong, 0);
}

TEST(Unwrap, RejectsMismatchedLabels) {
    WrappedPhaseMaps m{ImageF(4, 4, 0.0f), ImageF(4, 4, 0.0f), ImageF(4, 4, 1.0f)};
    DetectedGraph g;
    g.add_node({Vec2(1, 1), 0, {{0, 1.0}}});
    auto p = testing::small_pattern();
    EXPECT_THROW(unwrap(m, {}, g, p), StageError);
    EXPECT_THROW(unwrap(m, {p.node_count()}, g, p), StageError);
}

TEST(Correspondence, GridRoundTrip) {
    CorrespondenceMap m{ImageD(5, 3, 0.0), ImageD(5, 3, 0.0), ImageU8(5, 3, 0)};
    m.u(2, 1) = 123.25;
    m.v(2, 1) = 77.5;
    m.valid(2, 1) = 1;
    auto dir = std::filesystem::temp_directory_path() / "oneshot_unwrap_rt";
    std::filesystem::create_directories(dir);
    write_correspondence(m, (dir / "").string());
    auto r = read_correspondence((dir / "").string());
    EXPECT_EQ(r.u(2, 1), 123.25);
    EXPECT_EQ(r.v(2, 1), 77.5);
    EXPECT_TRUE(std::ranges::equal(r.valid.pixels(), m.valid.pixels()));
}

}  // namespace
}  // namespace oneshot
