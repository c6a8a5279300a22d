// Acceptance suite: one PASS/FAIL line per criterion. Exit status is nonzero if any criterion fails.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "oneshot/oneshot.hpp"
#include "test_support.hpp"

namespace oneshot::acceptance {
namespace {

// Pinned thresholds.
constexpr int kC1Instances = 200;
constexpr double kC1VoteEqualMin = 0.70;
constexpr double kC1IcmEqualMin = 0.80;
constexpr double kC1Seconds = 10.0;
constexpr double kEnergyTol = 1e-9;

constexpr int kC3Seeds = 100;
constexpr double kC3CorruptionQ = 0.2;
constexpr double kC3VoteMin = 0.95;
constexpr double kC3BaselineMax = 0.80;
constexpr double kC3Seconds = 30.0;

constexpr double kC4RatioMax = 0.75;

constexpr double kC5TruthPathMm = 0.1;
constexpr double kC5FullPathMm = 1.0;
constexpr double kC5SecondsPerImage = 30.0;

constexpr double kC6Mean = 60.0;
constexpr double kC6Std = 180.0;
constexpr double kC6RelTol = 0.02;
constexpr int kC6Size = 512;

constexpr int kC7Cases = 1000;

constexpr double kC8CircRmseMax = 0.05;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

fs::path g_work;

// 1. Heuristic solvers against exhaustive MAP on small instances.
Outcome c1_exact_map_agreement() {
    const auto pattern = generate_pattern(12, 12, 16, 16, 1);
    const auto adj = adjacency(pattern);
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> q(0.0, 0.5);
    int vote_eq = 0, icm_eq = 0, below = 0;
    const auto t0 = Clock::now();
    for (int k = 0; k < kC1Instances; ++k) {
        InstanceOptions o;
        o.rows = 1 + static_cast<int>(rng() % 3);
        o.cols = 1 + static_cast<int>(rng() % 3);
        o.max_candidates = 5;
        o.random_count = true;
        o.corruption = q(rng);
        const auto inst = synthetic_instance(pattern, o, rng());
        const double lambda = default_lambda(inst.graph);
        const double best = energy(inst.graph, adj, brute_force_map(inst.graph, adj, lambda).labels, lambda);
        const double ev = energy(inst.graph, adj, vote_refine(inst.graph, adj).labels, lambda);
        const double ei = energy(inst.graph, adj, icm_refine(inst.graph, adj, lambda).labels, lambda);
        below += ev < best - kEnergyTol || ei < best - kEnergyTol;
        vote_eq += std::abs(ev - best) <= kEnergyTol;
        icm_eq += std::abs(ei - best) <= kEnergyTol;
    }
    const double secs = seconds_since(t0);
    const double fv = static_cast<double>(vote_eq) / kC1Instances, fi = static_cast<double>(icm_eq) / kC1Instances;
    return {below == 0 && fv >= kC1VoteEqualMin && fi >= kC1IcmEqualMin && secs < kC1Seconds,
            fmt("vote=MAP %.3f (>= %.2f), icm=MAP %.3f (>= %.2f), below-MAP %d, %.2f s (< %.0f)", fv, kC1VoteEqualMin, fi,
                kC1IcmEqualMin, below, secs, kC1Seconds)};
}

// 2. Worked voting example: candidates 183, 261, 244 at a node with four fixed neighbors on a
// column-major 5-row lattice.
Outcome c2_worked_example() {
    const PatternAdjacency adj = lattice_adjacency(5, 60, true);
    DetectedGraph g;
    auto add = [&](double x, double y, std::vector<Candidate> c) {
        GraphNode n;
        n.pixel = Vec2(x, y);
        n.candidates = std::move(c);
        return g.add_node(n);
    };
    const auto up = add(20, 0, {{260, 1.0}});
    const auto left = add(0, 20, {{256, 1.0}});
    const auto target = add(20, 20, {{183, 0.5}, {261, 0.3}, {244, 0.2}});
    const auto right = add(40, 20, {{188, 1.0}});
    const auto down = add(20, 40, {{262, 1.0}});
    g.link(target, up, Direction::Up);
    g.link(target, left, Direction::Left);
    g.link(target, right, Direction::Right);
    g.link(target, down, Direction::Down);
    const auto scores = candidate_scores(g, adj, top_candidates(g), static_cast<std::size_t>(target));
    const auto r = vote_refine(g, adj);
    const auto selected = r.labels[static_cast<std::size_t>(target)];
    return {scores[0] == 1 && selected == 261,
            fmt("score(183)=%d (expect 1), score(261)=%d, score(244)=%d, selected %d (expect 261)", scores[0], scores[1], scores[2],
                selected)};
}

// 3. Label recovery on 10x10 windows with a fraction q of nodes ranked below an impostor.
Outcome c3_corruption_recovery() {
    const auto pattern = generate_pattern(30, 40, 16, 16, 1);
    const auto adj = adjacency(pattern);
    double before = 0, after = 0;
    const auto t0 = Clock::now();
    for (std::uint64_t seed = 0; seed < kC3Seeds; ++seed) {
        const auto inst = synthetic_instance(pattern, {10, 10, 5, false, kC3CorruptionQ}, 1000 + seed);
        before += label_accuracy(top_candidates(inst.graph), inst.truth);
        after += label_accuracy(vote_refine(inst.graph, adj).labels, inst.truth);
    }
    const double secs = seconds_since(t0);
    before /= kC3Seeds;
    after /= kC3Seeds;
    return {after >= kC3VoteMin && before <= kC3BaselineMax && secs < kC3Seconds,
            fmt("vote %.4f (>= %.2f), no-refine %.4f (<= %.2f), %.2f s (< %.0f)", after, kC3VoteMin, before, kC3BaselineMax, secs,
                kC3Seconds)};
}

// 4. Phase correction on a high-frequency surface with an injected smooth phase bias.
Outcome c4_phase_correction_ratio() {
    const nlohmann::json base = {{"out_dir", (g_work / "c4").string()},
                                 {"seed", 7},
                                 {"scene", {{"type", "sinusoid"}, {"distance", 1.0}, {"amplitude", 0.02}, {"wavelength", 0.2}}},
                                 {"phase", {{"bias_amplitude", 0.05}, {"bias_scale_px", 400.0}}}};
    const auto r = run_ablation(base, resolve_variants(base, {"no-phase-correction", "phase-correction"}));
    const auto& v = r.table.at("variants");
    const double before = v[0].at("metrics").at("depth_rmse_mm").get<double>();
    const double after = v[1].at("metrics").at("depth_rmse_mm").get<double>();
    const double ratio = before > 0 ? after / before : 1e9;
    return {ratio <= kC4RatioMax, fmt("depth RMSE %.3f mm -> %.3f mm, ratio %.3f (<= %.2f)", before, after, ratio, kC4RatioMax)};
}

// 5. Noiseless frontal plane at 1 m through the true-label path and the full detection path.
Outcome c5_geometric_exactness() {
    auto run = [](const std::string& name, nlohmann::json user) {
        user["out_dir"] = (g_work / name).string();
        user["seed"] = 3;
        user["scene"] = {{"type", "tilted_plane"}, {"distance", 1.0}};
        return run_pipeline(parse_config(user));
    };
    const auto truth = run("c5_truth", {{"correspondence", {{"labels", "truth"}}}, {"phase", {{"source", "truth"}}}});
    const auto full = run("c5_full", nlohmann::json::object());
    const double et = truth.metrics.plane_fit_rmse_mm, ef = full.metrics.plane_fit_rmse_mm;
    const double st = truth.timing.at("total").get<double>() / 1000.0, sf = full.timing.at("total").get<double>() / 1000.0;
    const bool ok = et >= 0 && ef >= 0 && et < kC5TruthPathMm && ef < kC5FullPathMm && st <= kC5SecondsPerImage &&
                    sf <= kC5SecondsPerImage && full.metrics.coverage > 0.5;
    return {ok, fmt("truth path %.4f mm (< %.1f), full path %.4f mm (< %.1f), coverage %.3f, %.2f s / %.2f s (<= %.0f)", et,
                    kC5TruthPathMm, ef, kC5FullPathMm, full.metrics.coverage, st, sf, kC5SecondsPerImage)};
}

// 6. Float-path augmentation noise statistics on a blank image, and the roll whitelist.
Outcome c6_augmentation_statistics() {
    AugmentConfig cfg;
    cfg.rng_seed = 12345;
    const ImageD out = augment_float(ImageD(kC6Size, kC6Size, 0.0), cfg);
    double s = 0, s2 = 0;
    for (double v : out.pixels()) s += v;
    const double n = static_cast<double>(out.pixels().size()), mean = s / n;
    for (double v : out.pixels()) s2 += (v - mean) * (v - mean);
    const double sd = std::sqrt(s2 / (n - 1));
    bool rolls_ok = true;
    for (double r = -10.0; r <= 10.0; r += 0.5) {
        AugmentConfig c;
        c.roll_degrees = r;
        const bool listed = std::find(kRollSet.begin(), kRollSet.end(), r) != kRollSet.end();
        bool accepted = true;
        try {
            c.validate();
        } catch (const ConfigError&) {
            accepted = false;
        }
        rolls_ok = rolls_ok && accepted == listed;
    }
    const bool ok = std::abs(mean - kC6Mean) <= kC6RelTol * kC6Mean && std::abs(sd - kC6Std) <= kC6RelTol * kC6Std && rolls_ok;
    return {ok, fmt("mean %.3f (60 +- 2%%), std %.3f (180 +- 2%%), roll whitelist %s", mean, sd, rolls_ok ? "enforced" : "violated")};
}

// 7. Fuzzed invariants, kC7Cases cases per property.
struct PropertyResult {
    std::string name;
    int violations = 0;
};

PropertyResult prop_icm_monotone(std::mt19937_64& rng) {
    const auto pattern = generate_pattern(20, 20, 16, 16, 5);
    const auto adj = adjacency(pattern);
    std::uniform_real_distribution<double> q(0.0, 0.6), lam(0.0, 5.0);
    int bad = 0;
    for (int k = 0; k < kC7Cases; ++k) {
        InstanceOptions o{1 + static_cast<int>(rng() % 6), 1 + static_cast<int>(rng() % 6), 5, true, q(rng)};
        const auto inst = synthetic_instance(pattern, o, rng());
        const double lambda = lam(rng);
        const auto r = icm_refine(inst.graph, adj, lambda);
        bool ok = !r.energy_trace.empty() && std::abs(r.energy_trace.front() - energy(inst.graph, adj, top_candidates(inst.graph), lambda)) < 1e-9;
        for (std::size_t s = 1; s < r.energy_trace.size(); ++s) ok = ok && r.energy_trace[s] <= r.energy_trace[s - 1] + kEnergyTol;
        const double e = energy(inst.graph, adj, r.labels, lambda);
        ok = ok && std::abs(e - r.energy_trace.back()) < 1e-9;
        // Converged ICM is a single-site local minimum.
        if (r.converged) {
            Labeling x = r.labels;
            for (std::size_t n = 0; n < x.size() && ok; ++n) {
                const auto keep = x[n];
                for (const auto& c : inst.graph.nodes[n].candidates) {
                    x[n] = c.id;
                    ok = ok && energy(inst.graph, adj, x, lambda) >= e - kEnergyTol;
                }
                x[n] = keep;
            }
        }
        bad += !ok;
    }
    return {"icm energy monotone + local minimum", bad};
}

PropertyResult prop_densify_normalization(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    int bad = 0;
    for (int k = 0; k < kC7Cases; ++k) {
        const int w = 20 + static_cast<int>(rng() % 30), h = 15 + static_cast<int>(rng() % 25);
        const double sigma = 0.5 + 4.0 * unit(rng);
        const double scale = std::pow(10.0, -3.0 + 6.0 * unit(rng));
        LineSampleSet a;
        const int n = 1 + static_cast<int>(rng() % 60);
        for (int s = 0; s < n; ++s)
            a.push_back({Vec2(unit(rng) * (w - 1), unit(rng) * (h - 1)), rng() % 2 ? PhaseAxis::U : PhaseAxis::V, unit(rng) - 0.5,
                         0.1 + unit(rng)});
        LineSampleSet b = a;
        for (auto& s : b) s.weight *= scale;
        const auto ma = densify_correction(a, PhaseAxis::U, sigma, w, h, 0.0);
        const auto mb = densify_correction(b, PhaseAxis::U, sigma, w, h, 0.0);
        bool ok = true;
        for (int y = 0; y < h && ok; ++y)
            for (int x = 0; x < w && ok; ++x) {
                ok = std::abs(mb.weight(x, y) - scale * ma.weight(x, y)) <= 1e-9 * std::max(1.0, scale * ma.weight(x, y));
                if (ma.weight(x, y) > 1e-12 && mb.weight(x, y) > 1e-12) ok = ok && std::abs(ma.value(x, y) - mb.value(x, y)) <= 1e-9;
                ok = ok && std::abs(ma.value(x, y)) <= 0.5;
            }
        bad += !ok;
    }
    return {"densify normalization invariance", bad};
}

PropertyResult prop_triangulation_reprojection(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    int bad = 0;
    for (int k = 0; k < kC7Cases; ++k) {
        Rig rig = testing::small_rig();
        rig.projector.rotation = rotation_about_y(-20.0 + 40.0 * unit(rng));
        rig.projector.translation = Vec3(0.05 + 0.35 * unit(rng), -0.05 + 0.1 * unit(rng), -0.05 + 0.1 * unit(rng));
        const int w = rig.camera.width, h = rig.camera.height;
        CorrespondenceMap m{ImageD(w, h, 0.0), ImageD(w, h, 0.0), ImageU8(w, h, 0)};
        for (int s = 0; s < 20; ++s) {
            const int x = static_cast<int>(rng() % static_cast<std::uint64_t>(w)), y = static_cast<int>(rng() % static_cast<std::uint64_t>(h));
            const Ray r = rig.camera.ray(x, y);
            const Vec3 p = r.at(0.5 + 2.5 * unit(rng));
            const auto uv = rig.projector.project(p);
            if (!uv) continue;
            m.u(x, y) = uv->x();
            m.v(x, y) = uv->y();
            m.valid(x, y) = 1;
        }
        const auto t = triangulate(m, rig);
        bool ok = true;
        for (std::size_t i = 0; i < t.cloud.size() && ok; ++i) {
            const auto px = t.cloud.pixels[i];
            const auto c = rig.camera.project(t.cloud.points[i]);
            const auto pp = rig.projector.project(t.cloud.points[i]);
            ok = c && pp && (*c - px.cast<double>()).norm() < 0.01 && std::abs(pp->x() - m.u(px.x(), px.y())) < 0.05;
        }
        bad += !ok;
    }
    return {"triangulation reprojection", bad};
}

PropertyResult prop_unwrap_relabel(std::mt19937_64& rng) {
    struct Fixture {
        WrappedPhaseMaps phase;
        DetectedGraph graph;
        Labeling truth;
    };
    const Rig rig = testing::small_rig();
    const auto pattern = testing::small_pattern(3);
    std::vector<Fixture> fixtures;
    for (int f = 0; f < 6; ++f) {
        const auto cap = render_capture(make_tilted_plane(0.9 + 0.05 * f, -15.0 + 6.0 * f, 8.0 - 3.0 * f), rig, pattern);
        auto det = detect_graph(cap.image, pattern, rig);
        Labeling truth;
        for (const auto& n : det.graph.nodes)
            truth.push_back(cap.gt_node_id(static_cast<int>(std::lround(n.pixel.x())), static_cast<int>(std::lround(n.pixel.y()))));
        fixtures.push_back({estimate_wrapped_phase(cap.image), std::move(det.graph), std::move(truth)});
    }
    int bad = 0;
    for (int k = 0; k < kC7Cases; ++k) {
        const auto& fx = fixtures[rng() % fixtures.size()];
        const int di = static_cast<int>(rng() % 5) - 2, dj = static_cast<int>(rng() % 5) - 2;
        const double keep = 0.3 + 0.7 * static_cast<double>(rng() % 1000) / 1000.0;
        Labeling a = fx.truth, b(a.size(), kNoNode);
        for (std::size_t n = 0; n < a.size(); ++n) {
            if (static_cast<double>(rng() % 1000) / 1000.0 >= keep) a[n] = kNoNode;
            if (a[n] == kNoNode) continue;
            const int i = pattern.row_of(a[n]) + di, j = pattern.col_of(a[n]) + dj;
            if (i >= 0 && j >= 0 && i < pattern.rows && j < pattern.cols) b[n] = pattern.id(i, j);
            else a[n] = kNoNode;  // keep the two labelings on the same node set
        }
        const auto ca = unwrap(fx.phase, a, fx.graph, pattern);
        const auto cb = unwrap(fx.phase, b, fx.graph, pattern);
        bool ok = true;
        for (int y = 0; y < ca.height() && ok; ++y)
            for (int x = 0; x < ca.width() && ok; ++x) {
                // Shifted coordinates that leave the projector raster are dropped by design.
                const double su = ca.u(x, y) + dj * pattern.period_u, sv = ca.v(x, y) + di * pattern.period_v;
                const bool inside = su >= -0.5 && sv >= -0.5 && su <= pattern.width - 0.5 && sv <= pattern.height - 0.5;
                if (cb.valid(x, y)) ok = ca.valid(x, y) && std::abs(cb.u(x, y) - su) < 1e-9 && std::abs(cb.v(x, y) - sv) < 1e-9;
                else ok = !(ca.valid(x, y) && inside);
            }
        bad += !ok;
    }
    return {"unwrap relabel equivariance", bad};
}

PropertyResult prop_type_invariants(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> wide(-1e6, 1e6), tiny(-1e-12, 1e-12);
    int bad = 0;
    for (int k = 0; k < kC7Cases; ++k) {
        bool ok = true;
        try {
            const int rows = 2 + static_cast<int>(rng() % 12), cols = 2 + static_cast<int>(rng() % 12);
            const auto p = generate_pattern(rows, cols, 8 + static_cast<int>(rng() % 24), 8 + static_cast<int>(rng() % 24), rng());
            p.validate();
            const auto adj = adjacency(p);
            adj.validate();
            for (int id = 0; id < p.node_count(); ++id) ok = ok && p.id(p.row_of(id), p.col_of(id)) == id;
            const auto inst = synthetic_instance(p, {1 + static_cast<int>(rng() % rows), 1 + static_cast<int>(rng() % cols), 5, true, 0.3}, rng());
            inst.graph.validate(p.node_count());
            const auto back = graph_from_json(nlohmann::json::parse(to_json(inst.graph).dump()), p);
            ok = ok && back.links == inst.graph.links && back.size() == inst.graph.size();
            for (std::size_t n = 0; n < back.size() && ok; ++n) ok = back.nodes[n].candidates == inst.graph.nodes[n].candidates;
            for (double v : {wide(rng), tiny(rng), -static_cast<double>(rng() % 100)}) {
                const double w = wrap01(v);
                const float wf = wrap01f(v);
                const double c = circ(v);
                ok = ok && w >= 0.0 && w < 1.0 && wf >= 0.0f && wf < 1.0f && c > -0.5 && c <= 0.5;
            }
        } catch (const std::exception&) {
            ok = false;
        }
        bad += !ok;
    }
    return {"type invariants", bad};
}

Outcome c7_invariants() {
    std::mt19937_64 rng(777);
    std::vector<PropertyResult> results;
    for (auto* prop : {prop_icm_monotone, prop_densify_normalization, prop_triangulation_reprojection, prop_unwrap_relabel,
                       prop_type_invariants})
        results.push_back(prop(rng));
    std::string detail = fmt("%d cases each:", kC7Cases);
    int total = 0;
    for (const auto& r : results) {
        detail += " " + r.name + " " + std::to_string(r.violations) + ";";
        total += r.violations;
    }
    detail += " violations " + std::to_string(total);
    return {total == 0, detail};
}

// 8. Classical phase estimator against rendered ground truth on noiseless VGA captures.
Outcome c8_phase_estimator() {
    const Rig rig = default_rig();
    const auto pattern = testing::vga_pattern();
    const std::vector<std::pair<std::string, Scene>> scenes = {
        {"frontal", make_tilted_plane(1.0)},
        {"tilted", make_tilted_plane(1.1, 20.0, -10.0)},
        {"sinusoid", make_sinusoid_scene(1.0, 0.02, 0.2)}};
    bool ok = true;
    std::string detail;
    for (const auto& [name, scene] : scenes) {
        const auto cap = render_capture(scene, rig, pattern);
        const auto m = estimate_wrapped_phase(cap.image);
        std::vector<double> e;
        long fg = 0;
        for (int y = 0; y < cap.image.height(); ++y)
            for (int x = 0; x < cap.image.width(); ++x) {
                fg += cap.foreground(x, y) != 0;
                if (m.mask(x, y) > 0 && cap.foreground(x, y)) {
                    e.push_back(circ(m.phase_u(x, y) - cap.gt_phase_u(x, y)));
                    e.push_back(circ(m.phase_v(x, y) - cap.gt_phase_v(x, y)));
                }
            }
        const double rmse = testing::rms(e);
        const double covered = fg ? 0.5 * static_cast<double>(e.size()) / static_cast<double>(fg) : 0.0;
        ok = ok && !e.empty() && rmse < kC8CircRmseMax;
        detail += fmt("%s %.4f (mask %.2f); ", name.c_str(), rmse, covered);
    }
    detail += fmt("limit %.2f cycles", kC8CircRmseMax);
    return {ok, detail};
}

}  // namespace
}  // namespace oneshot::acceptance

int main(int argc, char** argv) {
    using namespace oneshot::acceptance;
    g_work = argc > 1 ? oneshot::fs::path(argv[1]) : oneshot::fs::temp_directory_path() / "oneshot_acceptance";
    oneshot::fs::remove_all(g_work);
    oneshot::fs::create_directories(g_work);
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"C1 exact-MAP agreement", c1_exact_map_agreement},
        {"C2 worked voting example", c2_worked_example},
        {"C3 corruption recovery", c3_corruption_recovery},
        {"C4 phase-correction ratio", c4_phase_correction_ratio},
        {"C5 geometric exactness", c5_geometric_exactness},
        {"C6 augmentation statistics", c6_augmentation_statistics},
        {"C7 fuzzed invariants", c7_invariants},
        {"C8 phase estimator accuracy", c8_phase_estimator}};
    int failed = 0;
    for (const auto& [name, fn] : criteria) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
