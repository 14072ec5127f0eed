#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "drivepred/pipeline.hpp"

int main(int argc, char** argv) {
    CLI::App app{"driving characteristic estimation and lane-change prediction"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed_override = 0;
    bool seed_given = false;
    app.add_option("--config", config_path, "configuration file (JSON)");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed_override, "override the config seed")
        ->each([&](const std::string&) { seed_given = true; });

    auto* synthesize = app.add_subcommand(
        "synthesize", "generate the square-wave trajectory and a labeled corpus");

    std::string ingest_input, ingest_units = "ngsim_feet";
    auto* ingest = app.add_subcommand("ingest", "convert a trajectory file to the metric schema");
    ingest->add_option("--input", ingest_input, "input CSV")->required();
    ingest->add_option("--units", ingest_units, "metric or ngsim_feet");

    std::string est_traj, est_truth;
    bool est_no_clustering = false;
    auto* estimate = app.add_subcommand("estimate", "run moving-horizon parameter estimation");
    estimate->add_option("--input", est_traj, "metric trajectory CSV")->required();
    estimate->add_option("--truth", est_truth, "ground-truth parameter CSV");
    estimate->add_flag("--no-clustering", est_no_clustering,
                       "hard bounds and uniform initialization every step");

    std::string ext_traj;
    auto* extract = app.add_subcommand("extract", "extract labeled samples from trajectories");
    extract->add_option("--input", ext_traj, "metric trajectory CSV")->required();

    std::string train_corpus, train_mode = "both";
    auto* train = app.add_subcommand("train", "train the behavior predictor");
    train->add_option("--corpus", train_corpus, "corpus JSONL")->required();
    train->add_option("--mode", train_mode,
                      "both, with_characteristics or sensing_only");

    std::string pred_model, pred_corpus;
    auto* predict = app.add_subcommand("predict", "predict behaviors for a corpus");
    predict->add_option("--model", pred_model, "model JSON")->required();
    predict->add_option("--corpus", pred_corpus, "corpus JSONL")->required();

    std::string eval_corpus, eval_model_a, eval_model_b, eval_split = "test";
    auto* evaluate = app.add_subcommand("evaluate", "confusion matrix, per-class metrics, ROC/AUC");
    evaluate->add_option("--corpus", eval_corpus, "corpus JSONL")->required();
    evaluate->add_option("--model", eval_model_a, "model JSON")->required();
    evaluate->add_option("--model-b", eval_model_b,
                         "second model for a side-by-side comparison");
    evaluate->add_option("--split", eval_split, "test (held-out 25%) or all");

    auto* fig3 = app.add_subcommand(
        "repro-fig3", "square-wave recovery with and without clustering");
    auto* table1 = app.add_subcommand(
        "repro-table1", "fitting-error buckets over 200 synthetic windows");

    CLI11_PARSE(app, argc, argv);

    try {
        drivepred::pipeline::PipelineConfig cfg =
            config_path.empty() ? drivepred::pipeline::default_config()
                                : drivepred::pipeline::load_config(config_path);
        if (seed_given) {
            auto j = drivepred::pipeline::config_json(cfg);
            j["seed"] = seed_override;
            cfg = drivepred::pipeline::config_from_json(j);
        }
        if (est_no_clustering) cfg.clustering = false;

        if (synthesize->parsed()) {
            drivepred::pipeline::cmd_synthesize(cfg, out_dir);
        } else if (ingest->parsed()) {
            drivepred::pipeline::cmd_ingest(cfg, ingest_input, ingest_units, out_dir);
        } else if (estimate->parsed()) {
            drivepred::pipeline::cmd_estimate(cfg, est_traj, est_truth, out_dir);
        } else if (extract->parsed()) {
            drivepred::pipeline::cmd_extract(cfg, ext_traj, out_dir);
        } else if (train->parsed()) {
            drivepred::pipeline::cmd_train(cfg, train_corpus, train_mode, out_dir);
        } else if (predict->parsed()) {
            drivepred::pipeline::cmd_predict(cfg, pred_model, pred_corpus, out_dir);
        } else if (evaluate->parsed()) {
            drivepred::pipeline::cmd_evaluate(cfg, eval_corpus, eval_model_a,
                                              eval_model_b, eval_split, out_dir);
        } else if (fig3->parsed()) {
            drivepred::pipeline::cmd_repro_fig3(cfg, out_dir);
        } else if (table1->parsed()) {
            drivepred::pipeline::cmd_repro_table1(cfg, out_dir);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
