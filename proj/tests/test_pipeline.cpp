#include "support.hpp"

#include <latent_atlas/pipeline.hpp>

#include <gtest/gtest.h>

#include <sys/wait.h>

using namespace latent_atlas;
namespace lp = latent_atlas::pipeline;
namespace fs = std::filesystem;

namespace {

/// Two 6-D blobs with a binary, a categorical and a continuous target column.
fs::path write_fixture(const std::string& name) {
    const auto dir = test_support::scratch("pipeline_" + name);
    std::vector<double> y;
    const auto X = test_support::two_blobs(60, 6, {0, 1}, 4.0, 13, &y);
    std::string csv = "id,f0,f1,f2,f3,f4,f5,group,shape,score\n";
    for (std::size_t i = 0; i < X.rows(); ++i) {
        csv += "s" + std::to_string(i);
        for (std::size_t f = 0; f < 6; ++f) csv += "," + format_double(X(i, f));
        csv += "," + std::string(y[i] > 0 ? "1" : "0") + "," + (i % 3 == 0 ? "round" : y[i] > 0 ? "square" : "star") + "," + format_double(X(i, 0) + X(i, 2));
        csv += "\n";
    }
    write_file_atomic(dir / "data.csv", csv);
    return dir;
}

nlohmann::json base_config() {
    return nlohmann::json::parse(R"({
      "seed": 3,
      "output_dir": "out",
      "datasets": {"embed": {"path": "data.csv"}},
      "split": {"test_fraction": 0.25},
      "targets": [
        {"column": "group", "type": "binary"},
        {"column": "shape", "type": "categorical"},
        {"column": "score", "type": "continuous"}
      ],
      "embedder": {"k": 10, "epochs": 80},
      "dls": {"overlap_target": 0.1, "r_max": 128},
      "statmap": {"min_pixels": 3},
      "predictor": {"n_perms": 3, "k": 3, "n_trees": 8}
    })");
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "config.json") {
    write_file_atomic(dir / name, j.dump(2));
    return dir / name;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(LATENT_ATLAS_CLI) + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), root).string();
        if (rel.rfind("timings/", 0) == 0 || rel == "report.json") continue;
        out[rel] = read_file(e.path());
    }
    return out;
}

} // namespace

TEST(Config, UnknownKeysAreErrors) {
    const auto dir = write_fixture("cfg");
    auto j = base_config();
    j["sead"] = 1;
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
    j = base_config();
    j["embedder"]["min_dsit"] = 0.1;
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
    j = base_config();
    j["targets"][0]["kind"] = "binary";
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
}

TEST(Config, StructuralRules) {
    const auto dir = write_fixture("cfg2");
    EXPECT_NO_THROW(lp::parse_config(base_config(), dir));
    auto j = base_config();
    j.erase("seed");
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
    j = base_config();
    j["precomputed"] = {{"path", "data.csv"}};
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
    j = base_config();
    j.erase("embedder");
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
    j = base_config();
    j["datasets"]["embed"]["path"] = "missing.csv";
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
    j = base_config();
    j["dls"]["binning"] = "ceil";
    EXPECT_THROW(lp::parse_config(j, dir), ConfigError);
}

TEST(Config, EchoFillsDefaults) {
    const auto dir = write_fixture("echo");
    const auto cfg = lp::parse_config(base_config(), dir);
    const auto echo = lp::echo_config(cfg);
    EXPECT_EQ(echo["embedder"]["min_dist"], 0.1);
    EXPECT_EQ(echo["statmap"]["r_min"], 0.2);
    EXPECT_EQ(echo["statmap"]["sigma"], "auto");
    EXPECT_EQ(echo["predictor"]["n_trees"], 8);
    EXPECT_FALSE(echo.contains("output_dir"));
}

TEST(Pipeline, StagesComposeToMonolithicRun) {
    const auto dir = write_fixture("compose");
    const auto cfg_path = write_config(dir, base_config());
    const auto cfg = lp::load_config(cfg_path);
    const auto whole = lp::make_context(cfg, (dir / "whole").string(), 2);
    lp::run_pipeline(whole);
    const auto staged = lp::make_context(cfg, (dir / "staged").string(), 1);
    lp::stage_ingest(staged);
    lp::stage_embed(staged);
    lp::stage_transform(staged);
    lp::stage_dls(staged);
    lp::stage_map(staged);
    lp::stage_profile(staged);
    lp::stage_train(staged);
    lp::stage_predict(staged);
    lp::stage_report(staged);
    const auto a = snapshot(dir / "whole"), b = snapshot(dir / "staged");
    EXPECT_EQ(a.size(), b.size());
    for (const auto& [rel, bytes] : a) {
        ASSERT_TRUE(b.count(rel)) << rel;
        EXPECT_EQ(bytes, b.at(rel)) << rel;
    }
    EXPECT_TRUE(a.count("maps/group.csv"));
    EXPECT_TRUE(a.count("maps/shape_round.csv"));
    EXPECT_TRUE(a.count("predictions/score.metrics.json"));

    auto report = nlohmann::json::parse(read_file(dir / "whole" / "report.json"));
    EXPECT_EQ(report["status"], "ok");
    EXPECT_TRUE(report.contains("clusters"));
    EXPECT_TRUE(report["metrics"].contains("group"));
    EXPECT_TRUE(report["runtime"]["timings_seconds"].contains("embed"));
}

TEST(Pipeline, FilteredMapMatchesFullRun) {
    const auto dir = write_fixture("filter");
    const auto cfg = lp::load_config(write_config(dir, base_config()));
    const auto ctx = lp::make_context(cfg, (dir / "out").string(), 1);
    lp::run_pipeline(ctx);
    const auto full = read_file(dir / "out" / "maps" / "shape_round.csv");
    fs::remove(dir / "out" / "maps" / "shape_round.csv");
    lp::stage_map(ctx, {std::string("round"), std::string("point-biserial")});
    EXPECT_EQ(read_file(dir / "out" / "maps" / "shape_round.csv"), full);
    EXPECT_THROW(lp::stage_map(ctx, {std::string("nothing"), std::nullopt}), ConfigError);
}

TEST(Pipeline, EmbeddingOnlyConfigProducesNoMaps) {
    const auto dir = write_fixture("embedonly");
    auto j = base_config();
    j.erase("split");
    j["targets"] = nlohmann::json::array();
    j["datasets"]["embed"]["exclude_features"] = {"group", "shape", "score"};
    const auto ctx = lp::make_context(lp::load_config(write_config(dir, j)), (dir / "out").string(), 1);
    lp::run_pipeline(ctx);
    EXPECT_TRUE(fs::exists(dir / "out" / "embed" / "embed.csv"));
    EXPECT_TRUE(fs::exists(dir / "out" / "dls" / "dls.json"));
    EXPECT_FALSE(fs::exists(dir / "out" / "maps"));
    EXPECT_FALSE(fs::exists(dir / "out" / "models"));
    const auto report = nlohmann::json::parse(read_file(dir / "out" / "report.json"));
    EXPECT_TRUE(report["clusters"].empty() || !report.contains("clusters"));
}

TEST(Pipeline, MissingArtifactsNameTheCommand) {
    const auto dir = write_fixture("missing");
    const auto ctx = lp::make_context(lp::load_config(write_config(dir, base_config())), (dir / "out").string(), 1);
    try {
        lp::stage_dls(ctx);
        FAIL();
    } catch (const StageError& e) {
        EXPECT_NE(std::string(e.what()).find("run ingest first"), std::string::npos);
    }
    lp::stage_ingest(ctx);
    lp::stage_embed(ctx);
    lp::stage_transform(ctx);
    try {
        lp::stage_predict(ctx);
        FAIL();
    } catch (const StageError& e) {
        EXPECT_NE(std::string(e.what()).find("run train first"), std::string::npos);
    }
}

TEST(Pipeline, PrecomputedCoordinatesSkipFitting) {
    const auto dir = write_fixture("precomputed");
    std::string csv = "id,dim0,dim1\n";
    Rng rng(1);
    for (int i = 0; i < 120; ++i) {
        csv += "s" + std::to_string(i) + "," + format_double((i >= 60 ? 10 : 0) + rng.uniform()) + "," + format_double(rng.uniform()) + "\n";
    }
    write_file_atomic(dir / "coords.csv", csv);
    auto j = base_config();
    j.erase("embedder");
    j["precomputed"] = {{"path", "coords.csv"}};
    const auto ctx = lp::make_context(lp::load_config(write_config(dir, j)), (dir / "out").string(), 1);
    lp::run_pipeline(ctx);
    EXPECT_FALSE(fs::exists(dir / "out" / "embed" / "model.json"));
    const auto e = load_precomputed(dir / "out" / "embed" / "statistics.csv");
    EXPECT_EQ(e.n_obs(), 30u);
}

TEST(Cli, ExitCodes) {
    const auto dir = write_fixture("cli");
    auto j = base_config();
    j["bogus"] = true;
    EXPECT_EQ(run_cli("run --config " + write_config(dir, j, "bad.json").string()), 2);
    EXPECT_EQ(run_cli("run --config " + (dir / "nope.json").string()), 2);
    EXPECT_EQ(run_cli("frobnicate"), 2);

    write_file_atomic(dir / "ragged.csv", "id,f0,group\na,1,0\nb,2\n");
    j = base_config();
    j["datasets"]["embed"]["path"] = "ragged.csv";
    EXPECT_EQ(run_cli("ingest --config " + write_config(dir, j, "ragged.json").string()), 3);

    const auto good = write_config(dir, base_config()).string();
    const auto out = (dir / "cli_out").string();
    EXPECT_EQ(run_cli("ingest --config " + good + " --out " + out), 0);
    EXPECT_EQ(run_cli("embed --config " + good + " --out " + out), 0);
    EXPECT_EQ(run_cli("transform --config " + good + " --out " + out), 0);
    EXPECT_EQ(run_cli("predict --config " + good + " --out " + out), 4);
}

TEST(Cli, FailedRunWritesPartialReport) {
    const auto dir = write_fixture("partial");
    auto j = base_config();
    j["predictor"]["k"] = 50;
    const auto cfg = write_config(dir, j);
    EXPECT_EQ(run_cli("run --config " + cfg.string() + " --out " + (dir / "out").string()), 3);
    const auto report = nlohmann::json::parse(read_file(dir / "out" / "report.json"));
    EXPECT_EQ(report["status"], "failed");
    EXPECT_EQ(report["failed_stage"], "train");
    EXPECT_TRUE(report["stages"].contains("profile"));
}

TEST(Render, ThreePointsTwoColours) {
    Embedding e{Matrix(3, 2, std::vector<double>{0, 0, 1, 1, 2, 0}), {"a", "b", "c"}};
    ScatterColors colors;
    colors.categories = {"0", "1", "0"};
    const auto svg = render_scatter_svg(e, colors, "t");
    std::size_t circles = 0;
    std::set<std::string> fills;
    for (std::size_t pos = svg.find("<circle"); pos != std::string::npos; pos = svg.find("<circle", pos + 1)) {
        ++circles;
        const auto f = svg.find("fill=\"", pos) + 6;
        fills.insert(svg.substr(f, svg.find('"', f) - f));
    }
    EXPECT_EQ(circles, 3u);
    EXPECT_EQ(fills.size(), 2u);
    EXPECT_EQ(svg, render_scatter_svg(e, colors, "t"));
}

TEST(Render, LegendListsSortedCategories) {
    Matrix m(10, 2);
    ScatterColors colors;
    for (std::size_t i = 0; i < 10; ++i) {
        m(i, 0) = static_cast<double>(i);
        m(i, 1) = static_cast<double>(i % 3);
        colors.categories.push_back(std::to_string(9 - i));
    }
    const auto svg = render_scatter_svg({m, test_support::ids(10)}, colors);
    std::size_t last = 0;
    for (int d = 0; d < 10; ++d) {
        const auto pos = svg.find(">" + std::to_string(d) + "</text>");
        ASSERT_NE(pos, std::string::npos);
        EXPECT_GT(pos, last);
        last = pos;
    }
}
