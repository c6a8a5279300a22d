#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "oneshot/pipeline.hpp"

namespace oneshot {
namespace {

fs::path temp_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("oneshot_pipeline_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), {}};
}

TEST(Config, DefaultsParse) {
    const auto c = parse_config(nlohmann::json::object());
    EXPECT_EQ(c.pattern.rows, 30);
    EXPECT_EQ(c.pattern.cols, 40);
    EXPECT_EQ(c.solver, "vote");
    EXPECT_TRUE(c.phase_correction);
    EXPECT_EQ(c.hash.size(), 16u);
}

TEST(Config, SchemaViolationsAreConfigErrors) {
    EXPECT_THROW(parse_config({{"bogus", 1}}), ConfigError);
    EXPECT_THROW(parse_config({{"phase", {{"sigmaa", 2}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"correspondence", {{"solver", "magic"}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"correspondence", {{"corruption", 1.5}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"calibration", "does/not/exist.json"}}), ConfigError);
    EXPECT_THROW(parse_config({{"scene", {{"type", "teapot"}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"pattern", {{"rows", "many"}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"augment", {{"roll_degrees", 3.0}}}}), ConfigError);
    EXPECT_THROW(parse_config({{"pattern", {{"width", 800}}}}), ConfigError);  // differs from the projector
}

TEST(Config, HashIgnoresOutputDirectoryButNotSeed) {
    const auto a = parse_config({{"out_dir", "x"}, {"seed", 1}});
    const auto b = parse_config({{"out_dir", "y"}, {"seed", 1}});
    const auto c = parse_config({{"out_dir", "x"}, {"seed", 2}});
    EXPECT_EQ(a.hash, b.hash);
    EXPECT_NE(a.hash, c.hash);
    EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
    EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Config, CalibrationFileResolvesRelativeToConfig) {
    const auto dir = temp_dir("calib");
    write_json_file(dir / "rig.json", to_json(default_rig()));
    write_json_file(dir / "cfg.json", {{"calibration", "rig.json"}});
    const auto c = load_config((dir / "cfg.json").string());
    EXPECT_NEAR(c.rig.baseline(), 0.2, 1e-12);
    EXPECT_THROW(load_config((dir / "missing.json").string()), ConfigError);
}

TEST(Stage, UnexpectedFailureNamesTheStage) {
    nlohmann::json timing;
    try {
        detail::run_stage("detect", timing, [] { throw std::runtime_error("boom"); });
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "detect");
        EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
    }
    EXPECT_THROW(detail::run_stage("x", timing, [] { throw ConfigError("bad"); }), ConfigError);
}

class PipelineRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_a = temp_dir("run_a");
        dir_b = temp_dir("run_b");
        result = new PipelineResult(run_pipeline(parse_config({{"out_dir", dir_a.string()}, {"seed", 5}})));
        run_pipeline(parse_config({{"out_dir", dir_b.string()}, {"seed", 5}}));
    }
    static void TearDownTestSuite() { delete result; }
    static inline fs::path dir_a, dir_b;
    static inline PipelineResult* result = nullptr;
};

TEST_F(PipelineRun, DefaultPlaneSmoke) {
    ASSERT_TRUE(fs::exists(dir_a / "metrics.json"));
    EXPECT_GT(result->metrics.coverage, 0.8);
    EXPECT_LT(result->metrics.rmse_mm, 1.0);
    EXPECT_GT(result->metrics_json.at("labels").at("label_accuracy").get<double>(), 0.9);
    EXPECT_LE(result->timing.at("total").get<double>(), 30000.0);
}

TEST_F(PipelineRun, RerunIsByteIdentical) {
    for (const char* f : {"metrics.json", "depth.grid", "proj_u.grid", "graph.json", "labels.json", "cloud.ply", "profile.csv", "capture.pgm"})
        EXPECT_EQ(slurp(dir_a / f), slurp(dir_b / f)) << f;
    EXPECT_EQ(slurp(dir_a / "metrics.json").find("total"), std::string::npos);  // timings live in timing.json
}

TEST_F(PipelineRun, EveryArtifactCarriesTheConfigHash) {
    const std::string hash = result->metrics_json.at("config_hash").get<std::string>();
    for (const auto& entry : fs::directory_iterator(dir_a)) {
        const auto content = slurp(entry.path());
        const auto ext = entry.path().extension().string();
        if (ext == ".json")
            EXPECT_EQ(nlohmann::json::parse(content).at("config_hash").get<std::string>(), hash) << entry.path();
        else if (ext == ".grid" || ext == ".csv" || ext == ".ply" || ext == ".pgm")
            EXPECT_NE(content.substr(0, 256).find(hash), std::string::npos) << entry.path();
    }
}

TEST(Ablation, RejectsTooFewVariants) {
    EXPECT_THROW(run_ablation(nlohmann::json::object(), {}), ConfigError);
    EXPECT_THROW(run_ablation(nlohmann::json::object(), {{"vote-refine", *builtin_variant("vote-refine")}}), ConfigError);
    EXPECT_THROW(resolve_variants(nlohmann::json::object(), {"no-such-variant"}), ConfigError);
    EXPECT_THROW(run_ablation(nlohmann::json::object(), {{"a", nlohmann::json::object()}, {"a", nlohmann::json::object()}}), ConfigError);
}

TEST(Ablation, VariantArrayKeepsFileOrder) {
    const nlohmann::json cfg = {{"variants", {{{"name", "zeta"}, {"seed", 2}}, {{"name", "alpha"}, {"seed", 3}}}}};
    const auto v = resolve_variants(cfg, {});
    ASSERT_EQ(v.size(), 2u);
    EXPECT_EQ(v[0].first, "zeta");
    EXPECT_EQ(v[0].second, nlohmann::json({{"seed", 2}}));
    EXPECT_EQ(resolve_variants(cfg, {"alpha", "no-refine"})[0].second, nlohmann::json({{"seed", 3}}));
    EXPECT_THROW(resolve_variants({{"variants", {{{"seed", 2}}}}}, {}), ConfigError);
    EXPECT_THROW(resolve_variants({{"variants", 3}}, {}), ConfigError);
}

TEST(Ablation, VoteRefineBeatsNoRefineOnCorruptedCandidates) {
    const auto dir = temp_dir("ablate_labels");
    const nlohmann::json base = {{"out_dir", dir.string()}, {"seed", 11}, {"correspondence", {{"corruption", 0.2}}}};
    const auto r = run_ablation(base, resolve_variants(base, {"no-refine", "vote-refine"}));
    const auto& v = r.table.at("variants");
    ASSERT_EQ(v.size(), 2u);
    const double before = v[0].at("metrics").at("labels").at("label_accuracy").get<double>();
    const double after = v[1].at("metrics").at("labels").at("label_accuracy").get<double>();
    EXPECT_GT(after, before);
    EXPECT_TRUE(fs::exists(dir / "ablation.csv"));
    EXPECT_TRUE(fs::exists(dir / "no-refine" / "metrics.json"));
}

TEST(Pipeline, SceneOutsideTheViewGivesEmptyResult) {
    const auto dir = temp_dir("empty");
    const auto cfg = parse_config({{"out_dir", dir.string()}, {"scene", {{"type", "plane"}, {"normal", {0, 0, 1}}, {"offset", -1.0}}}});
    const auto r = run_pipeline(cfg);
    EXPECT_EQ(r.metrics.coverage, 0.0);
    EXPECT_EQ(r.metrics.points, 0);
    EXPECT_EQ(read_json_file((dir / "manifest.json").string()).at("empty").get<bool>(), true);
}

TEST(Pipeline, CorruptStageInputAbortsWithStageName) {
    const auto dir = temp_dir("corrupt");
    const auto cfg = parse_config({{"out_dir", dir.string()}});
    run_pipeline(cfg);
    std::ofstream(dir / "graph.json") << "{ not json";
    try {
        read_graph_file((dir / "graph.json").string(), cfg.pattern);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("graph.json"), std::string::npos);
    }
}

}  // namespace
}  // namespace oneshot
