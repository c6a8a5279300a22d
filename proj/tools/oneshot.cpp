// oneshot: command-line front end for the structured-light pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oneshot/oneshot.hpp"

namespace {

using namespace oneshot;
namespace fs = std::filesystem;

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    int threads = 0;
};

nlohmann::json user_config(const Globals& g) {
    nlohmann::json j = nlohmann::json::object();
    if (!g.config.empty()) {
        if (!fs::exists(g.config)) throw ConfigError("config file not found: " + g.config);
        try {
            std::ifstream is(g.config);
            j = nlohmann::json::parse(is);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(g.config + ": " + e.what());
        }
    }
    if (g.seed) j["seed"] = *g.seed;
    if (!g.out_dir.empty()) j["out_dir"] = g.out_dir;
    return j;
}

fs::path config_dir(const Globals& g) { return g.config.empty() ? fs::path(".") : fs::path(g.config).parent_path(); }

PipelineConfig effective_config(const Globals& g) { return parse_config(user_config(g), config_dir(g)); }

Rig rig_or_config(const std::string& calib, const PipelineConfig& cfg) {
    if (calib.empty()) return cfg.rig;
    if (!fs::exists(calib)) throw ConfigError("calibration file not found: " + calib);
    Rig r = rig_from_json(read_json_file(calib));
    r.validate();
    return r;
}

void require_file(const std::string& path, const std::string& what) {
    if (!fs::exists(path)) throw ConfigError(what + " not found: " + path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"One-shot structured-light scanning: pattern, simulation, decoding and reconstruction"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Pipeline configuration (JSON)");
    app.add_option("--seed", g.seed, "Override the configuration seed");
    app.add_option("--out-dir", g.out_dir, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads (default: hardware concurrency)")->check(CLI::NonNegativeNumber);
    app.fallthrough();

    // gen-pattern
    auto* gen = app.add_subcommand("gen-pattern", "Generate a coded grid pattern (pattern.json, pattern.pgm)");
    int rows = 30, cols = 40, period = 16, width = 640, height = 480;
    std::optional<int> period_u, period_v;
    std::uint64_t code_seed = 1;
    gen->add_option("--rows", rows, "Lattice rows")->capture_default_str();
    gen->add_option("--cols", cols, "Lattice columns")->capture_default_str();
    gen->add_option("--period", period, "Cell size in projector pixels (both axes)")->capture_default_str();
    gen->add_option("--period-u", period_u, "Horizontal cell size");
    gen->add_option("--period-v", period_v, "Vertical cell size");
    gen->add_option("--code-seed", code_seed, "Seed for the code layout")->capture_default_str();
    gen->add_option("--width", width, "Projector width")->capture_default_str();
    gen->add_option("--height", height, "Projector height")->capture_default_str();

    // simulate
    auto* sim = app.add_subcommand("simulate", "Render a synthetic capture with ground truth");
    std::string scene_path, pattern_path;
    sim->add_option("--scene", scene_path, "Scene JSON (default: the configuration's scene)");
    sim->add_option("--pattern", pattern_path, "pattern.json (default: generated from the configuration)");
    std::string sim_calib;
    sim->add_option("--calib", sim_calib, "Calibration JSON (default: the configuration's)");

    // detect
    auto* det = app.add_subcommand("detect", "Wrapped phase and grid graph with candidate labels");
    std::string image_path, det_calib, det_out;
    bool uncalibrated = false;
    det->add_option("--image", image_path, "Captured image (binary PGM)")->required();
    det->add_option("--pattern", pattern_path, "pattern.json")->required();
    det->add_option("--calib", det_calib, "Calibration JSON for epipolar candidates");
    det->add_flag("--uncalibrated", uncalibrated, "Code-only candidates, no epipolar prior");
    det->add_option("--out", det_out, "Output directory (default: --out-dir)");

    // refine
    auto* ref = app.add_subcommand("refine", "Correspondence refinement over the detected graph");
    std::string graph_path, solver = "vote", ref_out;
    std::optional<double> lambda;
    int max_sweeps = 50;
    ref->add_option("--graph", graph_path, "graph.json")->required();
    ref->add_option("--pattern", pattern_path, "pattern.json")->required();
    ref->add_option("--solver", solver, "Solver")->check(CLI::IsMember({"none", "vote", "icm", "exact"}))->capture_default_str();
    ref->add_option("--lambda", lambda, "Smoothness weight (default: from candidate probabilities)");
    ref->add_option("--max-sweeps", max_sweeps, "Sweep limit")->capture_default_str();
    ref->add_option("--out", ref_out, "Output directory (default: --out-dir)");

    // unwrap
    auto* unw = app.add_subcommand("unwrap", "Phase correction and unwrapping to projector coordinates");
    std::string phase_prefix, labels_path, unw_image, unw_out;
    double sigma = 0.0;
    bool no_correction = false;
    unw->add_option("--phase", phase_prefix, "Directory (or prefix) holding phase_u/phase_v/phase_mask.grid")->required();
    unw->add_option("--graph", graph_path, "graph.json")->required();
    unw->add_option("--labels", labels_path, "labels.json")->required();
    unw->add_option("--pattern", pattern_path, "pattern.json")->required();
    unw->add_option("--image", unw_image, "Captured image; required for line-anchored correction");
    unw->add_option("--sigma", sigma, "Densification kernel sigma in px (0 = median node spacing)")->capture_default_str();
    unw->add_flag("--no-correction", no_correction, "Skip the line-anchored phase correction");
    unw->add_option("--out", unw_out, "Output directory (default: --out-dir)");

    // reconstruct
    auto* rec = app.add_subcommand("reconstruct", "Triangulate a correspondence map");
    std::string corr_prefix, rec_calib, rec_out, ply_mode = "binary";
    rec->add_option("--corr", corr_prefix, "Directory (or prefix) holding proj_u/proj_v/proj_valid.grid")->required();
    rec->add_option("--calib", rec_calib, "Calibration JSON (default: the configuration's)");
    rec->add_option("--out", rec_out, "Output directory (default: --out-dir)");
    rec->add_option("--ply", ply_mode, "PLY encoding")->check(CLI::IsMember({"binary", "ascii", "none"}))->capture_default_str();

    // eval
    auto* ev = app.add_subcommand("eval", "Compare a depth map against simulator ground truth");
    std::string pred_path, gt_dir, report_dir, ev_calib;
    int profile_row = -1;
    ev->add_option("--pred", pred_path, "Predicted depth.grid")->required();
    ev->add_option("--gt", gt_dir, "Simulation directory with ground truth and manifest.json")->required();
    ev->add_option("--report", report_dir, "Output directory for metrics.json and profile.csv (default: --out-dir)");
    ev->add_option("--calib", ev_calib, "Calibration JSON (default: the manifest's rig)");
    ev->add_option("--profile-row", profile_row, "Scanline for profile.csv (default: middle row)");

    // pipeline / ablate
    auto* pipe = app.add_subcommand("pipeline", "Run every stage from one configuration");
    auto* abl = app.add_subcommand("ablate", "Run configuration variants and tabulate their metrics");
    std::vector<std::string> variant_names;
    abl->add_option("--variants", variant_names, "Variant names (built-in or from the configuration's \"variants\")")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (g.threads > 0) set_thread_count(g.threads);
        auto out_for = [&](const std::string& explicit_out, const PipelineConfig& cfg) {
            return fs::path(explicit_out.empty() ? cfg.out_dir : fs::path(explicit_out));
        };

        if (*gen) {
            PipelineConfig cfg = effective_config(g);
            const GridPattern p = generate_pattern(rows, cols, period_u.value_or(period), period_v.value_or(period), code_seed, width, height);
            p.validate();
            write_pattern_files(p, cfg.out_dir, cfg.meta());
            std::cout << "wrote " << (cfg.out_dir / "pattern.json").string() << "\n";
        } else if (*sim) {
            nlohmann::json user = user_config(g);
            if (!scene_path.empty()) {
                require_file(scene_path, "scene");
                user["scene"] = read_json_file(scene_path);
            }
            PipelineConfig cfg = parse_config(user, config_dir(g));
            GridPattern p = cfg.pattern;
            if (!pattern_path.empty()) {
                require_file(pattern_path, "pattern");
                p = read_pattern_file(pattern_path);
            }
            const Rig rig = rig_or_config(sim_calib, cfg);
            if (p.width != rig.projector.width || p.height != rig.projector.height)
                throw ConfigError("pattern resolution must match the projector resolution");
            const auto cap = simulate_stage(cfg.scene_spec, rig, p, cfg.augment_enabled, cfg.augment, cfg.render, cfg.out_dir, cfg.meta());
            if (cap.empty) std::cerr << "warning: the scene is outside the view of camera or projector (empty capture)\n";
            std::cout << "wrote " << (cfg.out_dir / "capture.pgm").string() << "\n";
        } else if (*det) {
            PipelineConfig cfg = effective_config(g);
            require_file(image_path, "image");
            require_file(pattern_path, "pattern");
            const auto p = read_pattern_file(pattern_path);
            std::optional<Rig> rig;
            if (!uncalibrated) rig = rig_or_config(det_calib, cfg);
            const auto d = detect_stage(read_pgm(image_path), p, rig, cfg.detector, out_for(det_out, cfg), cfg.meta());
            std::cout << d.graph.size() << " nodes, " << d.graph.edges().size() << " edges\n";
        } else if (*ref) {
            PipelineConfig cfg = effective_config(g);
            require_file(graph_path, "graph");
            require_file(pattern_path, "pattern");
            const auto p = read_pattern_file(pattern_path);
            const auto graph = read_graph_file(graph_path, p);
            const auto r = refine_stage(graph, p, solver, lambda, max_sweeps, out_for(ref_out, cfg), cfg.meta());
            std::cout << solver << ": " << r.result.sweeps << " sweeps, energy " << r.energy << (r.result.converged ? "" : " (not converged)")
                      << "\n";
        } else if (*unw) {
            PipelineConfig cfg = effective_config(g);
            for (const auto& [path, what] : {std::pair{graph_path, "graph"}, {labels_path, "labels"}, {pattern_path, "pattern"}})
                require_file(path, what);
            std::string prefix = phase_prefix;
            if (fs::is_directory(prefix)) prefix = (fs::path(prefix) / "").string();
            const auto p = read_pattern_file(pattern_path);
            const auto graph = read_graph_file(graph_path, p);
            const auto labels = labels_from_json(read_json_file(labels_path), graph, p);
            const std::string mask = fs::exists(prefix + "phase_mask.grid") ? prefix + "phase_mask.grid" : "";
            const auto phase = read_phase_maps(prefix + "phase_u.grid", prefix + "phase_v.grid", mask);
            const bool correct = !no_correction;
            if (correct && unw_image.empty()) throw ConfigError("unwrap: --image is required unless --no-correction is given");
            const ImageU8 image = correct ? read_pgm(unw_image) : ImageU8(phase.width(), phase.height(), 0);
            const auto r = unwrap_stage(phase, image, graph, labels, p, correct, sigma, out_for(unw_out, cfg), cfg.meta());
            long valid = std::count(r.correspondence.valid.pixels().begin(), r.correspondence.valid.pixels().end(), 1);
            std::cout << valid << " pixels with projector coordinates\n";
        } else if (*rec) {
            PipelineConfig cfg = effective_config(g);
            std::string prefix = corr_prefix;
            if (fs::is_directory(prefix)) prefix = (fs::path(prefix) / "").string();
            const auto corr = read_correspondence(prefix);
            const auto t = reconstruct_stage(corr, rig_or_config(rec_calib, cfg), nullptr, ply_mode, out_for(rec_out, cfg), cfg.meta());
            std::cout << t.cloud.size() << " points (" << t.dropped_parallel << " near-parallel, " << t.dropped_behind << " behind a device dropped)\n";
        } else if (*ev) {
            PipelineConfig cfg = effective_config(g);
            require_file(pred_path, "prediction");
            const fs::path gdir = gt_dir;
            require_file((gdir / "manifest.json").string(), "ground-truth manifest");
            const auto manifest = read_json_file((gdir / "manifest.json").string());
            const Rig rig = ev_calib.empty() ? rig_from_json(manifest.at("rig")) : rig_or_config(ev_calib, cfg);
            const auto gt = read_ground_truth(gdir);
            const auto depth = read_grid<float>(pred_path).image;
            const auto m = eval_stage(depth, rig.camera, gt, scene_plane(manifest.at("scene")), profile_row, out_for(report_dir, cfg), cfg.meta());
            std::cout << "rmse " << m.rmse_mm << " mm, coverage " << m.coverage << "\n";
        } else if (*pipe) {
            const PipelineConfig cfg = effective_config(g);
            const auto r = run_pipeline(cfg);
            std::cout << "rmse " << r.metrics.rmse_mm << " mm, coverage " << r.metrics.coverage << ", label accuracy "
                      << r.metrics_json.at("labels").at("label_accuracy").get<double>() << ", total " << r.timing.at("total").get<double>()
                      << " ms\n";
        } else if (*abl) {
            const nlohmann::json user = user_config(g);
            const auto variants = resolve_variants(user, variant_names);
            const auto r = run_ablation(user, variants, config_dir(g));
            std::cout << r.csv;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const StageError& e) {
        std::cerr << "stage failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
