#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "drivepred/estimation.hpp"
#include "drivepred/parallel.hpp"
#include "drivepred/traffic.hpp"

namespace drivepred::dataset {

inline constexpr double kFeetToMeters = 0.3048;
inline constexpr int kSensingRows = 21;         // 7 vehicles x (pos, vel, lane)
inline constexpr int kCharacteristicRows = 4;   // T, a, I_lcl, I_lcr

struct TrajectoryRecord {
    std::int64_t vehicle_id = 0;
    std::int64_t frame = 0;
    double time = 0.0;  // [s]
    int lane = 1;
    double pos = 0.0;  // [m]
    double vel = 0.0;  // [m/s]
};

enum class UnitMode { metric, ngsim_feet };

// CSV schema (metric): vehicle_id,frame,time_s,lane,pos_m,vel_mps
// The NGSIM adapter maps Vehicle_ID,Frame_ID,Lane_ID,Local_Y,v_Vel (feet).
// A missing velocity column is filled by central differences of position.
// Records come back sorted by (vehicle_id, frame); frames per vehicle must be
// consecutive.
std::vector<TrajectoryRecord> load_trajectories(const std::string& path,
                                                UnitMode mode);
void save_trajectories(const std::string& path,
                       std::span<const TrajectoryRecord> records);

enum class Behavior { LCL = 0, LCR = 1, LK = 2 };
const char* to_string(Behavior b);
Behavior behavior_from_string(const std::string& s);

struct LabeledEvent {
    Behavior label = Behavior::LK;
    std::size_t anchor_index = 0;   // position within the vehicle's records
    std::int64_t anchor_frame = 0;  // last frame before the transition
};

struct LabelingConfig {
    int window = 30;         // frames per sample
    int lk_stride = 50;      // frames between LK anchors in a stable stretch
    int lk_min_stretch = 90; // minimum unchanged-lane run to yield LK samples
};

// Lane 1 is leftmost: a decreasing lane index is a lane change to the left.
// Each change yields one event anchored at the last frame before it; stable
// stretches yield LK anchors at the configured stride. Requires >= window + 1
// frames.
std::vector<LabeledEvent> label_behaviors(std::span<const TrajectoryRecord> vehicle_records,
                                          const LabelingConfig& cfg);

// One extracted sample: the sensing window Z (21 x window, row-major over
// feature rows) and the characteristic window (4 x window), plus provenance.
struct LabeledSample {
    std::vector<double> z;
    std::vector<double> zhat;
    int window = 30;
    Behavior label = Behavior::LK;
    std::int64_t vehicle_id = 0;
    std::int64_t anchor_frame = 0;
    std::optional<estimation::Vec3> truth;  // planted (delta, T, a), synthetic only
};

struct ExtractionConfig {
    traffic::IdmParams base;
    traffic::MobilParams mobil;
    estimation::GaConfig ga;
    clustering::EtsConfig ets;
    LabelingConfig labeling;
    int horizon = 30;  // estimation window length
    double dt = 0.1;
    bool clustering = true;
    std::uint64_t seed = 1;
    ExecMode mode = ExecMode::parallel;
    // When set, only these vehicles are extracted (used by the corpus
    // generator to restrict scenes to their designated target).
    std::optional<std::vector<std::int64_t>> target_ids;
};

struct ExtractionResult {
    std::vector<LabeledSample> samples;  // ordered by (vehicle_id, anchor_frame)
    std::int64_t dropped = 0;            // insufficient history or invalid gaps
};

ExtractionResult extract_samples(std::span<const TrajectoryRecord> records,
                                 const ExtractionConfig& cfg);

// Square-wave parameter schedule driving one follower behind a constant-speed
// leader; the ground-truth (delta, T, a) trace is emitted per follower frame.
struct SquareWaveSpec {
    traffic::IdmParams base;
    estimation::Vec3 level_a{4.0, 1.0, 1.0};
    estimation::Vec3 level_b{4.0, 1.2, 1.1};
    double period_s = 45.0;   // full period; the level switches every half period
    double horizon_s = 90.0;
    double leader_speed = 15.0;
    double initial_gap = 30.0;
    double follower_speed = 15.0;
    double dt = 0.1;
    double noise_sigma_vel = 0.0;  // optional Gaussian noise on velocity
};

struct SyntheticTrajectory {
    std::vector<TrajectoryRecord> records;  // leader id 1, follower id 2
    std::vector<estimation::Vec3> truth;    // per follower frame
    std::int64_t follower_id = 2;
};

SyntheticTrajectory generate_synthetic_trajectory(const SquareWaveSpec& spec,
                                                  std::uint64_t seed);

// Multi-vehicle scenes in which the designated target executes a scripted
// lane change when its planted incentive exceeds a planted threshold.
struct CorpusSpec {
    int n_vehicles = 320;
    std::array<double, 3> mix{0.34, 0.33, 0.33};  // LCL, LCR, LK proportions
    double noise_sigma_vel = 0.0;
};

struct CorpusResult {
    std::vector<LabeledSample> samples;
    std::array<std::int64_t, 3> planted_counts{};
    std::int64_t retries = 0;
};

CorpusResult generate_synthetic_corpus(const CorpusSpec& spec,
                                       const ExtractionConfig& extraction,
                                       std::uint64_t seed);

// Class draw used by the corpus generator, exposed for statistical tests.
std::vector<Behavior> draw_classes(int n, const std::array<double, 3>& mix,
                                   std::uint64_t seed);

void save_corpus_jsonl(const std::string& path,
                       std::span<const LabeledSample> samples);
std::vector<LabeledSample> load_corpus_jsonl(const std::string& path);

}  // namespace drivepred::dataset
