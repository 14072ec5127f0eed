#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "drivepred/io_util.hpp"
#include "drivepred/pipeline.hpp"
#include "json.hpp"

using namespace drivepred;
using namespace drivepred::pipeline;

namespace {

std::string temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

// Small settings so pipeline tests stay fast.
PipelineConfig tiny_config() {
    PipelineConfig cfg = default_config();
    auto j = config_json(cfg);
    j["corpus"]["n_vehicles"] = 3;
    j["corpus"]["mix"] = {0.34, 0.33, 0.33};
    j["synth"]["horizon_s"] = 30.0;
    j["train"]["epochs"] = 2;
    j["train"]["batch_size"] = 4;
    j["train"]["hidden_dim"] = 8;
    j["seed"] = 11;
    return config_from_json(j);
}

}  // namespace

TEST_CASE("config round-trip and validation") {
    SUBCASE("canonical JSON survives a round trip") {
        const auto cfg = default_config();
        const auto j = config_json(cfg);
        const auto j2 = config_json(config_from_json(j));
        CHECK(j == j2);
    }

    SUBCASE("file save and load") {
        const auto dir = temp_dir("dp_cfg");
        const auto path = join(dir, "config.json");
        auto cfg = default_config();
        cfg.seed = 99;
        cfg.ets.epsilon = 0.3;
        save_config(cfg, path);
        const auto back = load_config(path);
        CHECK(back.seed == 99);
        CHECK(back.ets.epsilon == 0.3);
        CHECK(config_json(back) == config_json(cfg));
    }

    SUBCASE("unknown keys are rejected at any level") {
        CHECK_THROWS_WITH_AS(config_from_json(nlohmann::json{{"bogus", 1}}),
                             doctest::Contains("bogus"), std::runtime_error);
        CHECK_THROWS_WITH_AS(
            config_from_json(nlohmann::json{{"ga", {{"population", 60}}}}),
            doctest::Contains("population"), std::runtime_error);
    }

    SUBCASE("the paper constants are the defaults") {
        const auto cfg = default_config();
        CHECK(cfg.ets.q == 7.0);
        CHECK(cfg.ets.epsilon == 0.45);
        CHECK(cfg.gamma1 == 0.55);
        CHECK(cfg.gamma2 == 1.45);
        CHECK(cfg.mobil.politeness == 0.35);
        CHECK(cfg.train.hidden_dim == 150);
        CHECK(cfg.train.train_fraction == 0.75);
        CHECK(cfg.horizon == 30);
        CHECK(cfg.dt == 0.1);
    }
}

TEST_CASE("synthesize command writes deterministic artifacts") {
    const auto cfg = tiny_config();
    const auto dir_a = temp_dir("dp_synth_a");
    const auto dir_b = temp_dir("dp_synth_b");
    cmd_synthesize(cfg, dir_a);
    cmd_synthesize(cfg, dir_b);

    for (const char* name :
         {"trajectory.csv", "ground_truth.csv", "corpus.jsonl", "corpus_stats.json"}) {
        REQUIRE(std::filesystem::exists(join(dir_a, name)));
        const auto a = io::read_file(join(dir_a, name));
        const auto b = io::read_file(join(dir_b, name));
        CHECK(a == b);
        CHECK_FALSE(a.empty());
    }

    const auto stats = nlohmann::json::parse(io::read_file(join(dir_a, "corpus_stats.json")));
    CHECK(stats.at("n_samples").get<int>() == 3);
    // 301 leader frames + 301 follower frames.
    CHECK(stats.at("trajectory_rows").get<int>() == 602);
}

TEST_CASE("estimate command consumes synthesized data") {
    auto cfg = tiny_config();
    const auto dir = temp_dir("dp_est");
    cmd_synthesize(cfg, dir);
    cmd_estimate(cfg, join(dir, "trajectory.csv"), join(dir, "ground_truth.csv"), dir);

    REQUIRE(std::filesystem::exists(join(dir, "estimation.csv")));
    const auto summary =
        nlohmann::json::parse(io::read_file(join(dir, "estimation_summary.json")));
    CHECK(summary.at("n_vehicles").get<int>() == 2);
    CHECK(summary.at("clustering").get<bool>());
    CHECK(summary.contains("buckets"));
    CHECK(summary.contains("param_mae"));
    CHECK(summary.at("truth_matched_windows").get<int>() > 0);
    // The follower's parameters are recoverable; its headway error stays
    // moderate even though the leader's windows are free-road.
    CHECK(summary.at("param_mae").at("T").get<double>() < 1.5);

    SUBCASE("empty trajectory file is a clean error, no partial outputs") {
        const auto fail_dir = temp_dir("dp_est_fail");
        const auto empty = join(fail_dir, "empty.csv");
        std::ofstream f(empty);
        f << "vehicle_id,frame,time_s,lane,pos_m,vel_mps\n";
        f.close();
        CHECK_THROWS_AS(cmd_estimate(cfg, empty, "", fail_dir), std::runtime_error);
        CHECK_FALSE(std::filesystem::exists(join(fail_dir, "estimation.csv")));
        CHECK_FALSE(std::filesystem::exists(join(fail_dir, "estimation.csv.tmp")));
    }
}

TEST_CASE("constant-parameter estimation lands in the lowest error bucket") {
    auto j = config_json(tiny_config());
    j["synth"]["level_b"] = j["synth"]["level_a"];  // no transitions
    const auto cfg = config_from_json(j);
    const auto dir = temp_dir("dp_est_const");
    cmd_synthesize(cfg, dir);
    cmd_estimate(cfg, join(dir, "trajectory.csv"), "", dir);
    const auto summary =
        nlohmann::json::parse(io::read_file(join(dir, "estimation_summary.json")));
    CHECK(summary.at("buckets").at("E<0.1").get<double>() >= 0.97);
}

TEST_CASE("NGSIM-format ingestion feeds the full chain") {
    auto cfg = tiny_config();
    const auto dir = temp_dir("dp_ngsim_chain");

    // Hand-built NGSIM-style fixture in feet: one vehicle changes lanes left
    // at frame 70, one keeps its lane; constant speeds keep gaps positive.
    std::string raw = "Vehicle_ID,Frame_ID,Total_Frames,Lane_ID,Local_Y,v_Vel\n";
    const double ft = 1.0 / 0.3048;
    for (int f = 0; f <= 95; ++f) {
        const int lane1 = f <= 70 ? 2 : 1;
        raw += "1," + std::to_string(f) + ",200," + std::to_string(lane1) + "," +
               std::to_string((0.0 + 8.0 * 0.1 * f) * ft) + "," +
               std::to_string(8.0 * ft) + "\n";
        raw += "2," + std::to_string(f) + ",200,2," +
               std::to_string((25.0 + 6.0 * 0.1 * f) * ft) + "," +
               std::to_string(6.0 * ft) + "\n";
        raw += "3," + std::to_string(f) + ",200,1," +
               std::to_string((60.0 + 12.0 * 0.1 * f) * ft) + "," +
               std::to_string(12.0 * ft) + "\n";
    }
    for (int f = 0; f <= 130; ++f) {
        raw += "4," + std::to_string(f) + ",200,3," +
               std::to_string((10.0 + 9.3 * 0.1 * f) * ft) + "," +
               std::to_string(9.3 * ft) + "\n";
    }
    const auto raw_path = join(dir, "raw.csv");
    io::atomic_write(raw_path, raw);

    cmd_ingest(cfg, raw_path, "ngsim_feet", dir);
    REQUIRE(std::filesystem::exists(join(dir, "trajectories.csv")));

    cmd_extract(cfg, join(dir, "trajectories.csv"), dir);
    const auto stats = nlohmann::json::parse(io::read_file(join(dir, "extract_stats.json")));
    CHECK(stats.at("labels").at("LCL").get<int>() == 1);
    CHECK(stats.at("labels").at("LK").get<int>() == 4);

    cmd_train(cfg, join(dir, "corpus.jsonl"), "both", dir);
    REQUIRE(std::filesystem::exists(join(dir, "model_pa.json")));
    REQUIRE(std::filesystem::exists(join(dir, "model_pb.json")));
    REQUIRE(std::filesystem::exists(join(dir, "train_log_pa.csv")));

    cmd_predict(cfg, join(dir, "model_pa.json"), join(dir, "corpus.jsonl"), dir);
    const auto preds = io::read_file(join(dir, "predictions.csv"));
    CHECK(preds.find("vehicle_id,anchor_frame,label,p_lcl,p_lcr,p_lk,predicted") == 0);

    cmd_evaluate(cfg, join(dir, "corpus.jsonl"), join(dir, "model_pa.json"),
                 join(dir, "model_pb.json"), "all", dir);
    const auto metrics = nlohmann::json::parse(io::read_file(join(dir, "metrics.json")));
    CHECK(metrics.contains("model_a"));
    CHECK(metrics.contains("model_b"));
    CHECK(metrics.contains("comparison"));
    CHECK(metrics.at("model_a").contains("confusion"));
    CHECK(metrics.at("model_a").at("per_class").contains("LCL"));
    REQUIRE(std::filesystem::exists(join(dir, "metrics.txt")));
}

TEST_CASE("predict rejects a corpus/model shape mismatch") {
    // A model trained on 24 rows cannot consume 21-row inputs; the error
    // surfaces through the forward shape check.
    auto cfg = tiny_config();
    const auto dir = temp_dir("dp_mismatch");
    cmd_synthesize(cfg, dir);
    cmd_train(cfg, join(dir, "corpus.jsonl"), "with_characteristics", dir);
    const auto model = predictor::load_model(join(dir, "model_pa.json"));
    auto corpus = dataset::load_corpus_jsonl(join(dir, "corpus.jsonl"));
    corpus.front().zhat.clear();
    CHECK_THROWS_AS(predictor::predict(model, corpus.front()), std::invalid_argument);
}
