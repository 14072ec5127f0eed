#pragma once

#include <cstdint>
#include <string>

#include "drivepred/dataset.hpp"
#include "drivepred/predictor.hpp"
#include "json.hpp"

namespace drivepred::pipeline {

// One declarative configuration drives every command; each constant lives
// here with its default. Unknown keys in a config file are rejected.
struct PipelineConfig {
    traffic::IdmParams idm;
    traffic::MobilParams mobil;
    estimation::GaConfig ga;
    clustering::EtsConfig ets;
    predictor::TrainConfig train;
    dataset::LabelingConfig labeling;
    dataset::SquareWaveSpec synth;   // base is taken from `idm` at load time
    dataset::CorpusSpec corpus;
    double gamma1 = 0.55;
    double gamma2 = 1.45;
    int horizon = 30;
    double dt = 0.1;
    bool clustering = true;
    bool parallel = true;
    std::uint64_t seed = 1;
};

PipelineConfig default_config();
nlohmann::json config_json(const PipelineConfig& cfg);
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::string& path);
void save_config(const PipelineConfig& cfg, const std::string& path);

dataset::ExtractionConfig extraction_config(const PipelineConfig& cfg);

// Commands. All outputs are written atomically (temp file + rename); errors
// surface as exceptions which the CLI converts into a nonzero exit code.
void cmd_synthesize(const PipelineConfig& cfg, const std::string& out_dir);
void cmd_ingest(const PipelineConfig& cfg, const std::string& input,
                const std::string& unit_mode, const std::string& out_dir);
void cmd_estimate(const PipelineConfig& cfg, const std::string& traj_path,
                  const std::string& truth_path, const std::string& out_dir);
void cmd_extract(const PipelineConfig& cfg, const std::string& traj_path,
                 const std::string& out_dir);
void cmd_train(const PipelineConfig& cfg, const std::string& corpus_path,
               const std::string& mode, const std::string& out_dir);
void cmd_predict(const PipelineConfig& cfg, const std::string& model_path,
                 const std::string& corpus_path, const std::string& out_dir);
void cmd_evaluate(const PipelineConfig& cfg, const std::string& corpus_path,
                  const std::string& model_a_path, const std::string& model_b_path,
                  const std::string& split, const std::string& out_dir);
void cmd_repro_fig3(const PipelineConfig& cfg, const std::string& out_dir);
void cmd_repro_table1(const PipelineConfig& cfg, const std::string& out_dir);

// Shared helpers reused by the commands and the acceptance suite.
struct EstimationTraceRow {
    std::int64_t vehicle_id;
    std::int64_t step;
    std::int64_t frame;
    estimation::Vec3 theta;
    double fit_error;
    estimation::Vec3 bounds_lo, bounds_hi;
    estimation::Vec3 selected;
};

struct VehicleEstimation {
    std::vector<EstimationTraceRow> rows;
};

// Runs the moving-horizon estimator over every window of one vehicle's
// trajectory (leader resolved per frame, virtual when absent).
VehicleEstimation estimate_vehicle(std::span<const dataset::TrajectoryRecord> records,
                                   std::span<const dataset::TrajectoryRecord> vehicle,
                                   const PipelineConfig& cfg, bool clustering);

std::string estimation_trace_csv(std::span<const EstimationTraceRow> rows);

}  // namespace drivepred::pipeline
