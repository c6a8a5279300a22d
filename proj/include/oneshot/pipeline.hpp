#pragma once

// Pipeline configuration, file-based stages and the end-to-end and ablation runners.
//
// Every stage reads its inputs from and writes its outputs to a run directory, so any stage product
// can be replaced by an external file of the same format.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"
#include "oneshot/core/geometry.hpp"
#include "oneshot/core/grid_io.hpp"
#include "oneshot/core/image.hpp"
#include "oneshot/graphext.hpp"
#include "oneshot/mrf.hpp"
#include "oneshot/pattern.hpp"
#include "oneshot/recon.hpp"
#include "oneshot/simulator.hpp"
#include "oneshot/unwrap.hpp"

namespace oneshot {

namespace fs = std::filesystem;

// --- configuration -----------------------------------------------------------------------

/// 64-bit FNV-1a as 16 hex digits.
inline std::string fnv1a_hex(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline nlohmann::json default_config_json() {
    return nlohmann::json::parse(R"({
      "seed": 0,
      "out_dir": "out",
      "pattern": {"rows": 30, "cols": 40, "period_u": 16, "period_v": 16, "code_seed": 1, "width": 640, "height": 480},
      "calibration": "default",
      "scene": {"type": "tilted_plane", "distance": 1.0},
      "render": {"ambient": 0.0},
      "augment": {"enabled": false, "noise_mean": 60.0, "noise_std": 180.0, "roll_degrees": 0.0,
                  "brightness_scale": 1.0, "allow_any_roll": false},
      "detector": {"period_x": 0.0, "period_y": 0.0, "sigma_factor": 0.5, "min_amplitude": 2.0, "rel_threshold": 0.15,
                   "gate": 0.25, "response_threshold": 0.2, "min_code_score": 0.4, "link_tolerance": 0.3,
                   "normalize": false, "top_k": 5, "z_min": 0.6, "z_max": 1.8, "max_distance": 0.5,
                   "candidate_sigma": 0.25, "code_mismatch_weight": 0.05},
      "correspondence": {"labels": "solver", "solver": "vote", "max_sweeps": 50, "corruption": 0.0},
      "phase": {"source": "estimated", "correction": true, "sigma": 0.0, "bias_amplitude": 0.0, "bias_scale_px": 400.0},
      "output": {"ply": "binary", "profile_row": -1}
    })");
}

struct PipelineConfig {
    nlohmann::json resolved;  // defaults merged with the user document
    std::string hash;         // over `resolved` without out_dir
    std::uint64_t seed = 0;
    fs::path out_dir = "out";
    GridPattern pattern;
    Rig rig;
    nlohmann::json scene_spec;
    RenderOptions render;
    bool augment_enabled = false;
    AugmentConfig augment;
    DetectorParams detector;
    std::string label_source = "solver";  // solver | truth
    std::string solver = "vote";          // none | vote | icm | exact
    std::optional<double> lambda;
    int max_sweeps = 50;
    double corruption = 0.0;
    std::string phase_source = "estimated";  // estimated | truth
    bool phase_correction = true;
    double sigma = 0.0;
    double bias_amplitude = 0.0;
    double bias_scale_px = 400.0;
    std::string ply = "binary";  // binary | ascii | none
    int profile_row = -1;

    nlohmann::json meta() const { return {{"config_hash", hash}, {"seed", seed}}; }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(section + ": expected an object");
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError(section + ": unknown key '" + k + "'");
}

template <typename T>
T one_of(const nlohmann::json& j, const std::string& key, const std::set<T>& values, const std::string& section) {
    const T v = j.at(key).get<T>();
    if (!values.count(v)) throw ConfigError(section + "." + key + ": unsupported value " + nlohmann::json(v).dump());
    return v;
}

}  // namespace detail

/// Validates `user` against the schema, merges it over the defaults and builds the typed config.
/// Relative calibration paths resolve against `base_dir`.
inline PipelineConfig parse_config(const nlohmann::json& user, const fs::path& base_dir = ".") {
    using detail::check_keys;
    check_keys(user, "config",
               {"seed", "out_dir", "pattern", "calibration", "scene", "render", "augment", "detector", "correspondence", "phase",
                "output", "variants"});
    const auto defaults = default_config_json();
    const std::map<std::string, std::set<std::string>> sections = {
        {"pattern", {"rows", "cols", "period_u", "period_v", "code_seed", "width", "height"}},
        {"render", {"ambient"}},
        {"augment", {"enabled", "noise_mean", "noise_std", "roll_degrees", "brightness_scale", "rng_seed", "allow_any_roll"}},
        {"detector", {}},
        {"correspondence", {"labels", "solver", "lambda", "max_sweeps", "corruption"}},
        {"phase", {"source", "correction", "sigma", "bias_amplitude", "bias_scale_px"}},
        {"output", {"ply", "profile_row"}}};
    for (const auto& [name, keys] : sections) {
        if (!user.contains(name)) continue;
        std::set<std::string> allowed = keys;
        if (name == "detector")
            for (const auto& [k, v] : defaults.at("detector").items()) allowed.insert(k);
        check_keys(user.at(name), name, allowed);
    }

    PipelineConfig c;
    c.resolved = defaults;
    for (const auto& [k, v] : user.items()) {
        if (k == "variants") continue;
        if (k == "scene" || k == "calibration") c.resolved[k] = v;  // replaced whole
        else if (v.is_object() && c.resolved[k].is_object()) c.resolved[k].update(v);
        else c.resolved[k] = v;
    }
    const auto& r = c.resolved;
    try {
        c.seed = r.at("seed").get<std::uint64_t>();
        c.out_dir = r.at("out_dir").get<std::string>();

        const auto& p = r.at("pattern");
        c.pattern = generate_pattern(p.at("rows").get<int>(), p.at("cols").get<int>(), p.at("period_u").get<int>(),
                                     p.at("period_v").get<int>(), p.at("code_seed").get<std::uint64_t>(), p.at("width").get<int>(),
                                     p.at("height").get<int>());

        const auto& cal = r.at("calibration");
        if (cal.is_string() && cal.get<std::string>() == "default") {
            c.rig = default_rig();
        } else if (cal.is_string()) {
            fs::path path = cal.get<std::string>();
            if (path.is_relative()) path = base_dir / path;
            if (!fs::exists(path)) throw ConfigError("calibration: file not found: " + path.string());
            c.rig = rig_from_json(read_json_file(path.string()));
        } else {
            c.rig = rig_from_json(cal);
        }
        c.rig.validate();

        c.scene_spec = r.at("scene");
        (void)scene_from_json(c.scene_spec);  // validates

        c.render.ambient = r.at("render").at("ambient").get<double>();
        if (!(c.render.ambient >= 0.0 && c.render.ambient <= 1.0)) throw ConfigError("render.ambient must be in [0, 1]");

        const auto& a = r.at("augment");
        c.augment_enabled = a.at("enabled").get<bool>();
        c.augment = augment_from_json(a);
        if (!a.contains("rng_seed")) c.augment.rng_seed = splitmix64(c.seed);

        const auto& d = r.at("detector");
        auto& dp = c.detector;
        dp.phase.period_x = d.at("period_x").get<double>();
        dp.phase.period_y = d.at("period_y").get<double>();
        dp.phase.sigma_factor = d.at("sigma_factor").get<double>();
        dp.phase.min_amplitude = d.at("min_amplitude").get<double>();
        dp.phase.rel_threshold = d.at("rel_threshold").get<double>();
        dp.gate = d.at("gate").get<double>();
        dp.response_threshold = d.at("response_threshold").get<double>();
        dp.min_code_score = d.at("min_code_score").get<double>();
        dp.link_tolerance = d.at("link_tolerance").get<double>();
        dp.normalize = d.at("normalize").get<bool>();
        dp.candidates.top_k = d.at("top_k").get<int>();
        dp.candidates.z_min = d.at("z_min").get<double>();
        dp.candidates.z_max = d.at("z_max").get<double>();
        dp.candidates.max_distance = d.at("max_distance").get<double>();
        dp.candidates.sigma = d.at("candidate_sigma").get<double>();
        dp.candidates.code_mismatch_weight = d.at("code_mismatch_weight").get<double>();
        if (dp.phase.period_x < 0 || dp.phase.period_y < 0) throw ConfigError("detector: periods must be >= 0");
        if (!(dp.phase.sigma_factor > 0)) throw ConfigError("detector.sigma_factor must be positive");
        if (dp.candidates.top_k < 1) throw ConfigError("detector.top_k must be >= 1");
        if (!(dp.candidates.z_min > 0 && dp.candidates.z_max > dp.candidates.z_min))
            throw ConfigError("detector: need 0 < z_min < z_max");

        const auto& cr = r.at("correspondence");
        c.label_source = detail::one_of<std::string>(cr, "labels", {"solver", "truth"}, "correspondence");
        c.solver = detail::one_of<std::string>(cr, "solver", {"none", "vote", "icm", "exact"}, "correspondence");
        if (cr.contains("lambda") && !cr.at("lambda").is_null()) {
            c.lambda = cr.at("lambda").get<double>();
            if (!(*c.lambda >= 0)) throw ConfigError("correspondence.lambda must be >= 0");
        }
        c.max_sweeps = cr.at("max_sweeps").get<int>();
        if (c.max_sweeps < 1) throw ConfigError("correspondence.max_sweeps must be >= 1");
        c.corruption = cr.at("corruption").get<double>();
        if (!(c.corruption >= 0 && c.corruption <= 1)) throw ConfigError("correspondence.corruption must be in [0, 1]");

        const auto& ph = r.at("phase");
        c.phase_source = detail::one_of<std::string>(ph, "source", {"estimated", "truth"}, "phase");
        c.phase_correction = ph.at("correction").get<bool>();
        c.sigma = ph.at("sigma").get<double>();
        c.bias_amplitude = ph.at("bias_amplitude").get<double>();
        c.bias_scale_px = ph.at("bias_scale_px").get<double>();
        if (c.sigma < 0) throw ConfigError("phase.sigma must be >= 0 (0 = automatic)");
        if (!(std::abs(c.bias_amplitude) < 0.5)) throw ConfigError("phase.bias_amplitude must be below 0.5 cycles");
        if (!(c.bias_scale_px > 0)) throw ConfigError("phase.bias_scale_px must be positive");

        const auto& o = r.at("output");
        c.ply = detail::one_of<std::string>(o, "ply", {"binary", "ascii", "none"}, "output");
        c.profile_row = o.at("profile_row").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    if (c.pattern.width != c.rig.projector.width || c.pattern.height != c.rig.projector.height)
        throw ConfigError("pattern resolution must match the projector resolution");

    nlohmann::json hashed = c.resolved;
    hashed.erase("out_dir");
    c.hash = fnv1a_hex(hashed.dump());
    return c;
}

inline PipelineConfig load_config(const std::string& path) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
    nlohmann::json j;
    try {
        std::ifstream is(path);
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_config(j, fs::path(path).parent_path());
}

// --- stage files ---------------------------------------------------------------------------

inline void write_json_file(const fs::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::string prefix_of(const fs::path& dir) { return (dir / "").string(); }

/// pattern.json and the projector raster pattern.pgm.
inline void write_pattern_files(const GridPattern& p, const fs::path& dir, const nlohmann::json& meta) {
    fs::create_directories(dir);
    nlohmann::json j = to_json(p);
    j.update(meta);
    write_json_file(dir / "pattern.json", j);
    write_pgm(rasterize_pattern(p), (dir / "pattern.pgm").string(), "config_hash " + meta.value("config_hash", std::string()));
}

inline GridPattern read_pattern_file(const std::string& path) {
    auto p = pattern_from_json(read_json_file(path));
    p.validate();
    return p;
}

/// capture.pgm, ground-truth grids and manifest.json.
inline SceneCapture simulate_stage(const nlohmann::json& scene_spec, const Rig& rig, const GridPattern& pattern, bool augment_enabled,
                                   const AugmentConfig& aug, const RenderOptions& render, const fs::path& dir, const nlohmann::json& meta) {
    fs::create_directories(dir);
    const Scene scene = scene_from_json(scene_spec);
    SceneCapture cap = render_capture(scene, rig, pattern, render);
    const ImageU8 clean = cap.image;
    if (augment_enabled) cap.image = augment(clean, aug);
    const std::string tag = "config_hash " + meta.value("config_hash", std::string());
    write_pgm(cap.image, (dir / "capture.pgm").string(), tag);
    if (augment_enabled) write_pgm(clean, (dir / "capture_clean.pgm").string(), tag);
    auto grid = [&](const std::string& name, const auto& img) {
        nlohmann::json h = meta;
        h["name"] = name;
        write_grid((dir / (name + ".grid")).string(), img, h);
    };
    grid("gt_depth", cap.gt_depth);
    grid("gt_phase_u", cap.gt_phase_u);
    grid("gt_phase_v", cap.gt_phase_v);
    grid("gt_node_id", cap.gt_node_id);
    grid("gt_code", cap.gt_code);
    grid("gt_foreground", cap.foreground);
    nlohmann::json manifest = meta;
    manifest.update({{"scene", scene.spec},
                     {"rig", to_json(rig)},
                     {"pattern", {{"rows", pattern.rows}, {"cols", pattern.cols}, {"code_seed", pattern.code_seed}}},
                     {"augment", augment_enabled ? to_json(aug) : nlohmann::json(nullptr)},
                     {"ambient", render.ambient},
                     {"empty", cap.empty}});
    write_json_file(dir / "manifest.json", manifest);
    return cap;
}

/// Reads the simulator's ground truth back from `dir`.
inline SceneCapture read_ground_truth(const fs::path& dir) {
    SceneCapture cap;
    cap.image = read_pgm((dir / "capture.pgm").string());
    cap.gt_depth = read_grid<float>((dir / "gt_depth.grid").string()).image;
    cap.gt_phase_u = read_grid<float>((dir / "gt_phase_u.grid").string()).image;
    cap.gt_phase_v = read_grid<float>((dir / "gt_phase_v.grid").string()).image;
    cap.gt_node_id = read_grid<std::int32_t>((dir / "gt_node_id.grid").string()).image;
    cap.gt_code = read_grid<std::int32_t>((dir / "gt_code.grid").string()).image;
    cap.foreground = read_grid<std::uint8_t>((dir / "gt_foreground.grid").string()).image;
    cap.empty = std::none_of(cap.foreground.pixels().begin(), cap.foreground.pixels().end(), [](auto v) { return v != 0; });
    if (!cap.gt_depth.same_shape(cap.image) || !cap.foreground.same_shape(cap.image))
        throw FormatError(dir.string() + ": ground-truth maps differ in size from the capture");
    return cap;
}

/// Scene plane (normal . X = offset) when the manifest describes a planar scene.
inline std::optional<Plane> scene_plane(const nlohmann::json& scene_spec) {
    const Scene s = scene_from_json(scene_spec);
    if (const auto* p = std::get_if<PlaneSurface>(&s.surface)) return Plane{p->normal, p->offset};
    return std::nullopt;
}

/// True node per graph node from the ground-truth id map (kNoNode off the surface).
inline Labeling truth_labels(const DetectedGraph& g, const SceneCapture& cap) {
    Labeling t;
    for (const auto& n : g.nodes) {
        const int x = static_cast<int>(std::lround(n.pixel.x())), y = static_cast<int>(std::lround(n.pixel.y()));
        t.push_back(cap.gt_node_id.contains(x, y) && cap.foreground(x, y) ? cap.gt_node_id(x, y) : kNoNode);
    }
    return t;
}

/// graph.json and the wrapped phase maps.
inline Detection detect_stage(const ImageU8& image, const GridPattern& pattern, const std::optional<Rig>& rig, const DetectorParams& params,
                              const fs::path& dir, const nlohmann::json& meta) {
    fs::create_directories(dir);
    Detection det = detect_graph(image, pattern, rig, params);
    nlohmann::json j = to_json(det.graph);
    j.update(meta);
    j["period"] = {det.period.x, det.period.y};
    write_json_file(dir / "graph.json", j);
    write_phase_maps(det.phase, prefix_of(dir), meta);
    return det;
}

inline DetectedGraph read_graph_file(const std::string& path, const GridPattern& pattern) {
    return graph_from_json(read_json_file(path), pattern);
}

struct RefineOutput {
    RefineResult result;
    double lambda = 0.0;
    double energy = 0.0;
};

/// Labels one graph with the chosen solver; "none" keeps the top-ranked candidate.
inline RefineOutput solve_labels(const DetectedGraph& g, const GridPattern& pattern, const std::string& solver,
                                 std::optional<double> lambda, int max_sweeps) {
    const auto adj = adjacency(pattern);
    RefineOutput out;
    out.lambda = lambda.value_or(g.size() ? default_lambda(g) : 1.0);
    if (g.size() == 0) {
        out.result.converged = true;
        return out;
    }
    if (solver == "none") {
        require_candidates(g);
        out.result.labels = top_candidates(g);
        out.result.converged = true;
        for (std::size_t n = 0; n < g.size(); ++n) out.result.scores.push_back(vote_score(g, adj, out.result.labels, n, out.result.labels[n]));
    } else if (solver == "vote") {
        out.result = vote_refine(g, adj, max_sweeps);
    } else if (solver == "icm") {
        out.result = icm_refine(g, adj, out.lambda, max_sweeps);
    } else if (solver == "exact") {
        out.result = brute_force_map(g, adj, out.lambda);
    } else {
        throw ConfigError("unknown solver '" + solver + "'");
    }
    out.energy = energy(g, adj, out.result.labels, out.lambda);
    return out;
}

inline RefineOutput refine_stage(const DetectedGraph& g, const GridPattern& pattern, const std::string& solver, std::optional<double> lambda,
                                 int max_sweeps, const fs::path& dir, const nlohmann::json& meta) {
    fs::create_directories(dir);
    auto out = solve_labels(g, pattern, solver, lambda, max_sweeps);
    nlohmann::json j = to_json(out.result, solver, out.lambda, out.energy);
    j.update(meta);
    write_json_file(dir / "labels.json", j);
    return out;
}

/// Smooth synthetic phase bias used by the refinement experiments (cycles).
inline WrappedPhaseMaps add_phase_bias(const WrappedPhaseMaps& m, double amplitude, double scale_px) {
    WrappedPhaseMaps out = m;
    const double k = 2 * M_PI / scale_px;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) {
            if (m.mask(x, y) <= 0.0f) continue;
            const double bu = amplitude * std::sin(k * x + 0.3) * std::cos(k * y / 1.3);
            const double bv = -amplitude * std::cos(k * x / 1.2 + 0.7) * std::sin(k * y + 0.2);
            out.phase_u(x, y) = wrap01f(m.phase_u(x, y) + bu);
            out.phase_v(x, y) = wrap01f(m.phase_v(x, y) + bv);
        }
    return out;
}

inline WrappedPhaseMaps phase_from_truth(const SceneCapture& cap) {
    WrappedPhaseMaps m{cap.gt_phase_u, cap.gt_phase_v, ImageF(cap.gt_phase_u.width(), cap.gt_phase_u.height(), 0.0f)};
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x) m.mask(x, y) = cap.foreground(x, y) ? 1.0f : 0.0f;
    return m;
}

struct UnwrapOutput {
    std::optional<PhaseRefinement> refinement;
    CorrespondenceMap correspondence;
};

/// Optional line-anchored correction, then unwrapping. Writes correction and correspondence grids.
inline UnwrapOutput unwrap_stage(const WrappedPhaseMaps& phase, const ImageU8& image, const DetectedGraph& g, const Labeling& labels,
                                 const GridPattern& pattern, bool correction, double sigma, const fs::path& dir, const nlohmann::json& meta) {
    fs::create_directories(dir);
    UnwrapOutput out;
    const WrappedPhaseMaps* used = &phase;
    if (correction) {
        out.refinement = refine_phase(g, image, phase, sigma);
        used = &out.refinement->corrected;
        nlohmann::json h = meta;
        h["sigma"] = out.refinement->sigma;
        h["name"] = "correction_u";
        write_grid((dir / "correction_u.grid").string(), convert<float>(out.refinement->correction_u.value.empty()
                                                                             ? ImageD(phase.width(), phase.height(), 0.0)
                                                                             : out.refinement->correction_u.value), h);
        h["name"] = "correction_v";
        write_grid((dir / "correction_v.grid").string(), convert<float>(out.refinement->correction_v.value.empty()
                                                                             ? ImageD(phase.width(), phase.height(), 0.0)
                                                                             : out.refinement->correction_v.value), h);
        write_phase_maps(*used, prefix_of(dir) + "corrected_", meta);
    }
    out.correspondence = unwrap(*used, labels, g, pattern);
    write_correspondence(out.correspondence, prefix_of(dir), meta);
    return out;
}

/// depth.grid (float32 camera z, 0 = invalid) and cloud.ply.
inline Triangulation reconstruct_stage(const CorrespondenceMap& corr, const Rig& rig, const ImageU8* intensity, const std::string& ply,
                                       const fs::path& dir, const nlohmann::json& meta) {
    fs::create_directories(dir);
    Triangulation t = triangulate(corr, rig, intensity);
    nlohmann::json h = meta;
    h["name"] = "depth";
    h["dropped_parallel"] = t.dropped_parallel;
    h["dropped_behind"] = t.dropped_behind;
    h["ray_ray"] = t.ray_ray;
    write_grid((dir / "depth.grid").string(), convert<float>(t.depth), h);
    if (ply != "none")
        write_ply(t.cloud, (dir / "cloud.ply").string(), ply == "binary", {"config_hash " + meta.value("config_hash", std::string())});
    return t;
}

/// metrics.json and profile.csv. `extra` is merged into the metrics document.
inline MetricsReport eval_stage(const ImageF& pred_depth, const PinholeModel& camera, const SceneCapture& gt, const std::optional<Plane>& plane,
                                int profile_row, const fs::path& dir, const nlohmann::json& meta, const nlohmann::json& extra = {}) {
    fs::create_directories(dir);
    const Triangulation t = triangulation_from_depth(pred_depth, camera);
    const MetricsReport m = evaluate(t, gt.gt_depth, gt.foreground, plane);
    nlohmann::json j = to_json(m);
    j.update(meta);
    if (extra.is_object()) j.update(extra);
    write_json_file(dir / "metrics.json", j);
    const int row = profile_row >= 0 ? profile_row : pred_depth.height() / 2;
    std::ofstream csv(dir / "profile.csv");
    csv << "# config_hash " << meta.value("config_hash", std::string()) << '\n' << profile_csv(t, gt.gt_depth, gt.foreground, row);
    return m;
}

// --- runners ---------------------------------------------------------------------------------

struct PipelineResult {
    MetricsReport metrics;
    nlohmann::json metrics_json;  // as written to metrics.json
    nlohmann::json timing;        // ms per stage and total
    fs::path dir;
};

namespace detail {

/// Runs one stage, timing it and mapping unexpected failures to StageError(stage, cause).
template <typename Fn>
auto run_stage(const std::string& name, nlohmann::json& timing, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    auto record = [&] { timing[name] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count(); };
    try {
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            record();
        } else {
            auto r = fn();
            record();
            return r;
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

inline double accuracy_known(const Labeling& x, const Labeling& truth) {
    std::size_t n = 0, ok = 0;
    for (std::size_t k = 0; k < x.size() && k < truth.size(); ++k) {
        if (truth[k] == kNoNode) continue;
        ++n;
        ok += x[k] == truth[k];
    }
    return n ? static_cast<double>(ok) / static_cast<double>(n) : 0.0;
}

}  // namespace detail

/// gen-pattern, simulate, detect, refine, unwrap, reconstruct, eval. Every stage communicates through
/// files in cfg.out_dir; metrics.json holds no timings so reruns are byte-identical.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
    const fs::path dir = cfg.out_dir;
    fs::create_directories(dir);
    const auto meta = cfg.meta();
    const auto t_start = std::chrono::steady_clock::now();
    nlohmann::json timing = nlohmann::json::object();
    {
        nlohmann::json resolved = cfg.resolved;
        resolved["config_hash"] = cfg.hash;
        write_json_file(dir / "config.json", resolved);
    }

    detail::run_stage("gen-pattern", timing, [&] { write_pattern_files(cfg.pattern, dir, meta); });
    detail::run_stage("simulate", timing, [&] {
        const auto pattern = read_pattern_file((dir / "pattern.json").string());
        simulate_stage(cfg.scene_spec, cfg.rig, pattern, cfg.augment_enabled, cfg.augment, cfg.render, dir, meta);
    });
    const GridPattern pattern = read_pattern_file((dir / "pattern.json").string());
    const SceneCapture gt = detail::run_stage("load-capture", timing, [&] { return read_ground_truth(dir); });
    timing.erase("load-capture");

    detail::run_stage("detect", timing, [&] { detect_stage(gt.image, pattern, cfg.rig, cfg.detector, dir, meta); });

    nlohmann::json label_stats;
    DetectedGraph graph;
    Labeling labels;
    detail::run_stage("refine", timing, [&] {
        graph = read_graph_file((dir / "graph.json").string(), pattern);
        const Labeling truth = truth_labels(graph, gt);
        if (cfg.corruption > 0) {
            corrupt_candidates(graph, truth, pattern, cfg.corruption, splitmix64(cfg.seed ^ 0x51ab1e5ULL));
            nlohmann::json j = to_json(graph);
            j.update(meta);
            write_json_file(dir / "graph_corrupted.json", j);
        }
        if (cfg.label_source == "truth") {
            RefineResult r;
            r.labels = truth;
            r.converged = true;
            nlohmann::json j = to_json(r, "truth", 0.0, 0.0);
            j.update(meta);
            write_json_file(dir / "labels.json", j);
        } else {
            refine_stage(graph, pattern, cfg.solver, cfg.lambda, cfg.max_sweeps, dir, meta);
        }
        labels = labels_from_json(read_json_file((dir / "labels.json").string()), graph, pattern);
        const Labeling top = graph.size() ? top_candidates(graph) : Labeling{};
        label_stats = {{"nodes", graph.size()},
                       {"nodes_with_truth", std::count_if(truth.begin(), truth.end(), [](auto t) { return t != kNoNode; })},
                       {"label_accuracy", detail::accuracy_known(labels, truth)},
                       {"top_candidate_accuracy", detail::accuracy_known(top, truth)}};
    });

    detail::run_stage("unwrap", timing, [&] {
        WrappedPhaseMaps phase = cfg.phase_source == "truth"
                                     ? phase_from_truth(gt)
                                     : read_phase_maps(prefix_of(dir) + "phase_u.grid", prefix_of(dir) + "phase_v.grid", prefix_of(dir) + "phase_mask.grid");
        if (cfg.bias_amplitude != 0.0) phase = add_phase_bias(phase, cfg.bias_amplitude, cfg.bias_scale_px);
        if (cfg.phase_source == "truth" || cfg.bias_amplitude != 0.0) write_phase_maps(phase, prefix_of(dir) + "input_", meta);
        unwrap_stage(phase, gt.image, graph, labels, pattern, cfg.phase_correction, cfg.sigma, dir, meta);
    });
    detail::run_stage("reconstruct", timing, [&] {
        const auto corr = read_correspondence(prefix_of(dir));
        reconstruct_stage(corr, cfg.rig, &gt.image, cfg.ply, dir, meta);
    });

    PipelineResult res;
    res.dir = dir;
    detail::run_stage("eval", timing, [&] {
        const auto depth = read_grid<float>((dir / "depth.grid").string());
        nlohmann::json extra = {{"labels", label_stats},
                                {"triangulation",
                                 {{"dropped_parallel", depth.header.value("dropped_parallel", 0)},
                                  {"dropped_behind", depth.header.value("dropped_behind", 0)},
                                  {"ray_ray", depth.header.value("ray_ray", 0)}}},
                                {"plane_target", scene_plane(cfg.scene_spec).has_value()}};
        res.metrics = eval_stage(depth.image, cfg.rig.camera, gt, scene_plane(cfg.scene_spec), cfg.profile_row, dir, meta, extra);
    });
    timing["total"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t_start).count();
    nlohmann::json tj = timing;
    tj.update(meta);
    write_json_file(dir / "timing.json", tj);
    res.metrics_json = read_json_file((dir / "metrics.json").string());
    res.timing = timing;
    return res;
}

/// Named configuration patches understood by run_ablation.
inline std::optional<nlohmann::json> builtin_variant(const std::string& name) {
    static const std::map<std::string, nlohmann::json> table = {
        {"no-refine", {{"correspondence", {{"solver", "none"}}}}},
        {"vote-refine", {{"correspondence", {{"solver", "vote"}}}}},
        {"icm-refine", {{"correspondence", {{"solver", "icm"}}}}},
        {"no-phase-correction", {{"phase", {{"correction", false}}}}},
        {"phase-correction", {{"phase", {{"correction", true}}}}},
        {"truth-labels", {{"correspondence", {{"labels", "truth"}}}}},
        {"truth-phase", {{"phase", {{"source", "truth"}}}}}};
    const auto it = table.find(name);
    if (it == table.end()) return std::nullopt;
    return std::optional<nlohmann::json>(std::in_place, it->second);
}

struct AblationResult {
    nlohmann::json table;  // ablation.json content
    std::string csv;
};

/// Runs the base configuration once per variant (a name plus a patch merged over the base document) in
/// out_dir/<name> and tabulates metrics with deltas against the first variant.
inline AblationResult run_ablation(const nlohmann::json& base_user, const std::vector<std::pair<std::string, nlohmann::json>>& variants,
                                   const fs::path& base_dir = ".") {
    if (variants.size() < 2) throw ConfigError("ablation needs at least two variants");
    const PipelineConfig base = parse_config(base_user, base_dir);
    std::set<std::string> names;
    for (const auto& [name, patch] : variants) {
        if (name.empty() || name.find_first_of("/\\") != std::string::npos) throw ConfigError("invalid variant name '" + name + "'");
        if (!names.insert(name).second) throw ConfigError("duplicate variant '" + name + "'");
        if (!patch.is_object()) throw ConfigError("variant '" + name + "': patch must be an object");
    }
    AblationResult out;
    out.table = {{"config_hash", base.hash}, {"seed", base.seed}, {"variants", nlohmann::json::array()}};
    std::ostringstream csv;
    csv.precision(10);
    csv << "variant,rmse_mm,depth_rmse_mm,plane_fit_rmse_mm,coverage,inlier_fraction,label_accuracy,delta_rmse_mm,rmse_ratio\n";
    std::optional<nlohmann::json> first;
    for (const auto& [name, patch] : variants) {
        nlohmann::json user = base_user;
        user.erase("variants");
        for (const auto& [k, v] : patch.items()) {
            if (user.contains(k) && user[k].is_object() && v.is_object() && k != "scene" && k != "calibration") user[k].update(v);
            else user[k] = v;
        }
        user["out_dir"] = (base.out_dir / name).string();
        const PipelineConfig cfg = parse_config(user, base_dir);
        const auto r = run_pipeline(cfg);
        const auto& m = r.metrics_json;
        if (!first) first.emplace(m);
        const double rmse = m.at("rmse_mm").get<double>(), rmse0 = first->at("rmse_mm").get<double>();
        nlohmann::json row = {{"name", name},
                              {"patch", patch},
                              {"config_hash", cfg.hash},
                              {"metrics", m},
                              {"delta", {{"rmse_mm", rmse - rmse0},
                                         {"rmse_ratio", rmse0 > 0 ? rmse / rmse0 : 0.0},
                                         {"label_accuracy", m.at("labels").at("label_accuracy").get<double>() -
                                                                first->at("labels").at("label_accuracy").get<double>()}}}};
        csv << name << ',' << rmse << ',' << m.at("depth_rmse_mm").get<double>() << ',' << m.at("plane_fit_rmse_mm").get<double>() << ','
            << m.at("coverage").get<double>() << ',' << m.at("inlier_fraction").get<double>() << ','
            << m.at("labels").at("label_accuracy").get<double>() << ',' << rmse - rmse0 << ',' << (rmse0 > 0 ? rmse / rmse0 : 0.0) << '\n';
        out.table["variants"].push_back(std::move(row));
    }
    out.csv = csv.str();
    fs::create_directories(base.out_dir);
    write_json_file(base.out_dir / "ablation.json", out.table);
    std::ofstream(base.out_dir / "ablation.csv") << "# config_hash " << base.hash << '\n' << out.csv;
    return out;
}

/// Variant list from names (built-ins) and/or the config's "variants". The object form {name: patch}
/// runs in name order; the array form [{"name": ..., <patch keys>}] keeps file order.
inline std::vector<std::pair<std::string, nlohmann::json>> resolve_variants(const nlohmann::json& config, const std::vector<std::string>& names) {
    std::vector<std::pair<std::string, nlohmann::json>> custom;
    if (config.contains("variants")) {
        const auto& v = config.at("variants");
        if (v.is_object()) {
            for (const auto& [k, patch] : v.items()) custom.emplace_back(k, patch);
        } else if (v.is_array()) {
            for (const auto& e : v) {
                if (!e.is_object() || !e.contains("name") || !e.at("name").is_string())
                    throw ConfigError("variants: array entries need a string \"name\"");
                nlohmann::json patch = e;
                patch.erase("name");
                custom.emplace_back(e.at("name").get<std::string>(), std::move(patch));
            }
        } else {
            throw ConfigError("variants: expected an object of name -> patch or an array of named patches");
        }
    }
    if (names.empty()) return custom;
    std::vector<std::pair<std::string, nlohmann::json>> out;
    for (const auto& n : names) {
        const auto it = std::find_if(custom.begin(), custom.end(), [&](const auto& c) { return c.first == n; });
        if (it != custom.end()) out.push_back(*it);
        else if (auto b = builtin_variant(n)) out.emplace_back(n, *b);
        else throw ConfigError("unknown variant '" + n + "'");
    }
    return out;
}

}  // namespace oneshot
