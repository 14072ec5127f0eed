#include "drivepred/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "drivepred/evaluation.hpp"
#include "drivepred/io_util.hpp"
#include "drivepred/rng.hpp"

namespace drivepred::pipeline {

namespace {

[[noreturn]] void unknown_key(const std::string& section, const std::string& key) {
    throw std::runtime_error("config: unknown key '" + key + "' in section '" +
                             section + "'");
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out) {
    out = j.at(key).get<T>();
}

void check_keys(const nlohmann::json& j, const std::string& section,
                const std::set<std::string>& allowed) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.contains(key)) unknown_key(section, key);
    }
}

}  // namespace

PipelineConfig default_config() { return PipelineConfig{}; }

nlohmann::json config_json(const PipelineConfig& cfg) {
    nlohmann::json j;
    j["idm"] = {{"delta", cfg.idm.delta}, {"T", cfg.idm.T}, {"a", cfg.idm.a},
                {"b", cfg.idm.b},         {"v0", cfg.idm.v0}, {"s0", cfg.idm.s0}};
    j["mobil"] = {{"politeness", cfg.mobil.politeness},
                  {"b_safe", cfg.mobil.b_safe},
                  {"delta_a_th", cfg.mobil.delta_a_th}};
    j["ga"] = {{"population_size", cfg.ga.population_size},
               {"generations", cfg.ga.generations},
               {"crossover_rate", cfg.ga.crossover_rate},
               {"mutation_rate", cfg.ga.mutation_rate},
               {"elite_count", cfg.ga.elite_count},
               {"tournament_size", cfg.ga.tournament_size},
               {"mutation_sigma_frac", cfg.ga.mutation_sigma_frac},
               {"guided_fraction", cfg.ga.guided_fraction}};
    j["ets"] = {{"q", cfg.ets.q}, {"epsilon", cfg.ets.epsilon}};
    j["train"] = {{"epochs", cfg.train.epochs},
                  {"batch_size", cfg.train.batch_size},
                  {"learning_rate", cfg.train.learning_rate},
                  {"gradient_clip_norm", cfg.train.gradient_clip_norm},
                  {"train_fraction", cfg.train.train_fraction},
                  {"class_weighting", cfg.train.class_weighting},
                  {"hidden_dim", cfg.train.hidden_dim}};
    j["labeling"] = {{"window", cfg.labeling.window},
                     {"lk_stride", cfg.labeling.lk_stride},
                     {"lk_min_stretch", cfg.labeling.lk_min_stretch}};
    j["synth"] = {{"level_a", cfg.synth.level_a},
                  {"level_b", cfg.synth.level_b},
                  {"period_s", cfg.synth.period_s},
                  {"horizon_s", cfg.synth.horizon_s},
                  {"leader_speed", cfg.synth.leader_speed},
                  {"initial_gap", cfg.synth.initial_gap},
                  {"follower_speed", cfg.synth.follower_speed},
                  {"noise_sigma_vel", cfg.synth.noise_sigma_vel}};
    j["corpus"] = {{"n_vehicles", cfg.corpus.n_vehicles},
                   {"mix", cfg.corpus.mix},
                   {"noise_sigma_vel", cfg.corpus.noise_sigma_vel}};
    j["gamma1"] = cfg.gamma1;
    j["gamma2"] = cfg.gamma2;
    j["horizon"] = cfg.horizon;
    j["dt"] = cfg.dt;
    j["clustering"] = cfg.clustering;
    j["parallel"] = cfg.parallel;
    j["seed"] = cfg.seed;
    return j;
}

PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig cfg;
    check_keys(j, "<root>",
               {"idm", "mobil", "ga", "ets", "train", "labeling", "synth",
                "corpus", "gamma1", "gamma2", "horizon", "dt", "clustering",
                "parallel", "seed"});
    if (j.contains("idm")) {
        const auto& s = j["idm"];
        check_keys(s, "idm", {"delta", "T", "a", "b", "v0", "s0"});
        if (s.contains("delta")) read_field(s, "delta", cfg.idm.delta);
        if (s.contains("T")) read_field(s, "T", cfg.idm.T);
        if (s.contains("a")) read_field(s, "a", cfg.idm.a);
        if (s.contains("b")) read_field(s, "b", cfg.idm.b);
        if (s.contains("v0")) read_field(s, "v0", cfg.idm.v0);
        if (s.contains("s0")) read_field(s, "s0", cfg.idm.s0);
    }
    if (j.contains("mobil")) {
        const auto& s = j["mobil"];
        check_keys(s, "mobil", {"politeness", "b_safe", "delta_a_th"});
        if (s.contains("politeness")) read_field(s, "politeness", cfg.mobil.politeness);
        if (s.contains("b_safe")) read_field(s, "b_safe", cfg.mobil.b_safe);
        if (s.contains("delta_a_th")) read_field(s, "delta_a_th", cfg.mobil.delta_a_th);
    }
    if (j.contains("ga")) {
        const auto& s = j["ga"];
        check_keys(s, "ga",
                   {"population_size", "generations", "crossover_rate",
                    "mutation_rate", "elite_count", "tournament_size",
                    "mutation_sigma_frac", "guided_fraction"});
        if (s.contains("population_size")) read_field(s, "population_size", cfg.ga.population_size);
        if (s.contains("generations")) read_field(s, "generations", cfg.ga.generations);
        if (s.contains("crossover_rate")) read_field(s, "crossover_rate", cfg.ga.crossover_rate);
        if (s.contains("mutation_rate")) read_field(s, "mutation_rate", cfg.ga.mutation_rate);
        if (s.contains("elite_count")) read_field(s, "elite_count", cfg.ga.elite_count);
        if (s.contains("tournament_size")) read_field(s, "tournament_size", cfg.ga.tournament_size);
        if (s.contains("mutation_sigma_frac")) read_field(s, "mutation_sigma_frac", cfg.ga.mutation_sigma_frac);
        if (s.contains("guided_fraction")) read_field(s, "guided_fraction", cfg.ga.guided_fraction);
    }
    if (j.contains("ets")) {
        const auto& s = j["ets"];
        check_keys(s, "ets", {"q", "epsilon"});
        if (s.contains("q")) read_field(s, "q", cfg.ets.q);
        if (s.contains("epsilon")) read_field(s, "epsilon", cfg.ets.epsilon);
    }
    if (j.contains("train")) {
        const auto& s = j["train"];
        check_keys(s, "train",
                   {"epochs", "batch_size", "learning_rate", "gradient_clip_norm",
                    "train_fraction", "class_weighting", "hidden_dim"});
        if (s.contains("epochs")) read_field(s, "epochs", cfg.train.epochs);
        if (s.contains("batch_size")) read_field(s, "batch_size", cfg.train.batch_size);
        if (s.contains("learning_rate")) read_field(s, "learning_rate", cfg.train.learning_rate);
        if (s.contains("gradient_clip_norm")) read_field(s, "gradient_clip_norm", cfg.train.gradient_clip_norm);
        if (s.contains("train_fraction")) read_field(s, "train_fraction", cfg.train.train_fraction);
        if (s.contains("class_weighting")) read_field(s, "class_weighting", cfg.train.class_weighting);
        if (s.contains("hidden_dim")) read_field(s, "hidden_dim", cfg.train.hidden_dim);
    }
    if (j.contains("labeling")) {
        const auto& s = j["labeling"];
        check_keys(s, "labeling", {"window", "lk_stride", "lk_min_stretch"});
        if (s.contains("window")) read_field(s, "window", cfg.labeling.window);
        if (s.contains("lk_stride")) read_field(s, "lk_stride", cfg.labeling.lk_stride);
        if (s.contains("lk_min_stretch")) read_field(s, "lk_min_stretch", cfg.labeling.lk_min_stretch);
    }
    if (j.contains("synth")) {
        const auto& s = j["synth"];
        check_keys(s, "synth",
                   {"level_a", "level_b", "period_s", "horizon_s", "leader_speed",
                    "initial_gap", "follower_speed", "noise_sigma_vel"});
        if (s.contains("level_a")) read_field(s, "level_a", cfg.synth.level_a);
        if (s.contains("level_b")) read_field(s, "level_b", cfg.synth.level_b);
        if (s.contains("period_s")) read_field(s, "period_s", cfg.synth.period_s);
        if (s.contains("horizon_s")) read_field(s, "horizon_s", cfg.synth.horizon_s);
        if (s.contains("leader_speed")) read_field(s, "leader_speed", cfg.synth.leader_speed);
        if (s.contains("initial_gap")) read_field(s, "initial_gap", cfg.synth.initial_gap);
        if (s.contains("follower_speed")) read_field(s, "follower_speed", cfg.synth.follower_speed);
        if (s.contains("noise_sigma_vel")) read_field(s, "noise_sigma_vel", cfg.synth.noise_sigma_vel);
    }
    if (j.contains("corpus")) {
        const auto& s = j["corpus"];
        check_keys(s, "corpus", {"n_vehicles", "mix", "noise_sigma_vel"});
        if (s.contains("n_vehicles")) read_field(s, "n_vehicles", cfg.corpus.n_vehicles);
        if (s.contains("mix")) read_field(s, "mix", cfg.corpus.mix);
        if (s.contains("noise_sigma_vel")) read_field(s, "noise_sigma_vel", cfg.corpus.noise_sigma_vel);
    }
    if (j.contains("gamma1")) read_field(j, "gamma1", cfg.gamma1);
    if (j.contains("gamma2")) read_field(j, "gamma2", cfg.gamma2);
    if (j.contains("horizon")) read_field(j, "horizon", cfg.horizon);
    if (j.contains("dt")) read_field(j, "dt", cfg.dt);
    if (j.contains("clustering")) read_field(j, "clustering", cfg.clustering);
    if (j.contains("parallel")) read_field(j, "parallel", cfg.parallel);
    if (j.contains("seed")) read_field(j, "seed", cfg.seed);

    cfg.synth.base = cfg.idm;
    cfg.synth.dt = cfg.dt;
    cfg.ga.rng_seed = cfg.seed;
    cfg.ga.parallel = cfg.parallel;
    cfg.train.rng_seed = cfg.seed;
    cfg.train.exec = cfg.parallel ? ExecMode::parallel : ExecMode::serial;
    return cfg;
}

PipelineConfig load_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

void save_config(const PipelineConfig& cfg, const std::string& path) {
    io::atomic_write(path, config_json(cfg).dump(2) + "\n");
}

dataset::ExtractionConfig extraction_config(const PipelineConfig& cfg) {
    dataset::ExtractionConfig ex;
    ex.base = cfg.idm;
    ex.mobil = cfg.mobil;
    ex.ga = cfg.ga;
    ex.ets = cfg.ets;
    ex.labeling = cfg.labeling;
    ex.horizon = cfg.horizon;
    ex.dt = cfg.dt;
    ex.clustering = cfg.clustering;
    ex.seed = cfg.seed;
    ex.mode = cfg.parallel ? ExecMode::parallel : ExecMode::serial;
    return ex;
}

namespace {

void ensure_dir(const std::string& dir) {
    std::filesystem::create_directories(dir);
}

std::string join(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

struct LeaderTrace {
    std::vector<double> foll_vel, lead_vel, gap;
    bool valid = true;
};

LeaderTrace leader_trace(std::span<const dataset::TrajectoryRecord> records,
                         std::span<const dataset::TrajectoryRecord> vehicle) {
    std::unordered_map<std::int64_t, std::vector<traffic::FrameVehicle>> frames;
    int lane_count = 1;
    for (const auto& r : records) {
        frames[r.frame].push_back(
            traffic::FrameVehicle{r.vehicle_id,
                                  traffic::VehicleState{r.pos, r.vel, r.lane}});
        lane_count = std::max(lane_count, r.lane);
    }
    LeaderTrace tr;
    tr.foll_vel.resize(vehicle.size());
    tr.lead_vel.resize(vehicle.size());
    tr.gap.resize(vehicle.size());
    for (std::size_t i = 0; i < vehicle.size(); ++i) {
        const auto& rec = vehicle[i];
        const auto ns = traffic::identify_neighbors(frames.at(rec.frame),
                                                    rec.vehicle_id, lane_count);
        tr.foll_vel[i] = rec.vel;
        if (ns.p_old.has_value()) {
            tr.gap[i] = ns.p_old->pos - rec.pos;
            tr.lead_vel[i] = ns.p_old->vel;
        } else {
            tr.gap[i] = traffic::kVirtualLeadDistance;
            tr.lead_vel[i] = rec.vel;
        }
        if (tr.gap[i] <= 0.0) tr.valid = false;
    }
    return tr;
}

}  // namespace

VehicleEstimation estimate_vehicle(std::span<const dataset::TrajectoryRecord> records,
                                   std::span<const dataset::TrajectoryRecord> vehicle,
                                   const PipelineConfig& cfg, bool clustering) {
    const int h = cfg.horizon;
    VehicleEstimation out;
    if (vehicle.size() < static_cast<std::size_t>(h)) return out;

    const auto trace = leader_trace(records, vehicle);

    estimation::EstimatorOptions opt;
    opt.base = cfg.idm;
    opt.ga = cfg.ga;
    opt.ga.rng_seed = derive_seed(
        cfg.seed, static_cast<std::uint64_t>(vehicle.front().vehicle_id));
    opt.ets = cfg.ets;
    opt.gamma1 = cfg.gamma1;
    opt.gamma2 = cfg.gamma2;
    opt.clustering = clustering;
    estimation::MovingHorizonEstimator estimator(opt);

    for (std::size_t t = static_cast<std::size_t>(h) - 1; t < vehicle.size(); ++t) {
        const std::size_t lo = t + 1 - static_cast<std::size_t>(h);
        bool ok = true;
        for (std::size_t k = lo; k <= t; ++k) {
            if (trace.gap[k] <= 0.0) {
                ok = false;
                break;
            }
        }
        if (!ok) continue;
        estimation::EstimationWindow w;
        w.dt = cfg.dt;
        w.follower_vel.assign(trace.foll_vel.begin() + static_cast<std::ptrdiff_t>(lo),
                              trace.foll_vel.begin() + static_cast<std::ptrdiff_t>(t + 1));
        w.leader_vel.assign(trace.lead_vel.begin() + static_cast<std::ptrdiff_t>(lo),
                            trace.lead_vel.begin() + static_cast<std::ptrdiff_t>(t + 1));
        w.gap.assign(trace.gap.begin() + static_cast<std::ptrdiff_t>(lo),
                     trace.gap.begin() + static_cast<std::ptrdiff_t>(t + 1));
        const auto rec = estimator.step(w);
        out.rows.push_back(EstimationTraceRow{
            vehicle.front().vehicle_id, static_cast<std::int64_t>(t),
            vehicle[t].frame, rec.estimate.theta, rec.estimate.fit_error,
            rec.bounds_used.lo, rec.bounds_used.hi, rec.selected_center});
    }
    return out;
}

std::string estimation_trace_csv(std::span<const EstimationTraceRow> rows) {
    std::string out =
        "vehicle_id,step,frame,delta,T,a,fit_error,lo_delta,lo_T,lo_a,"
        "hi_delta,hi_T,hi_a,sel_delta,sel_T,sel_a\n";
    for (const auto& r : rows) {
        out += std::to_string(r.vehicle_id);
        out.push_back(',');
        out += std::to_string(r.step);
        out.push_back(',');
        out += std::to_string(r.frame);
        for (double v : {r.theta[0], r.theta[1], r.theta[2], r.fit_error,
                         r.bounds_lo[0], r.bounds_lo[1], r.bounds_lo[2],
                         r.bounds_hi[0], r.bounds_hi[1], r.bounds_hi[2],
                         r.selected[0], r.selected[1], r.selected[2]}) {
            out.push_back(',');
            out += io::format_double(v);
        }
        out.push_back('\n');
    }
    return out;
}

void cmd_synthesize(const PipelineConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    const auto traj = dataset::generate_synthetic_trajectory(cfg.synth, cfg.seed);
    dataset::save_trajectories(join(out_dir, "trajectory.csv"), traj.records);

    std::string truth = "vehicle_id,frame,delta,T,a\n";
    for (std::size_t i = 0; i < traj.truth.size(); ++i) {
        truth += std::to_string(traj.follower_id) + "," + std::to_string(i);
        for (double v : traj.truth[i]) {
            truth.push_back(',');
            truth += io::format_double(v);
        }
        truth.push_back('\n');
    }
    io::atomic_write(join(out_dir, "ground_truth.csv"), truth);

    const auto corpus = dataset::generate_synthetic_corpus(
        cfg.corpus, extraction_config(cfg), cfg.seed);
    dataset::save_corpus_jsonl(join(out_dir, "corpus.jsonl"), corpus.samples);

    nlohmann::json stats;
    stats["n_samples"] = corpus.samples.size();
    stats["planted"] = {{"LCL", corpus.planted_counts[0]},
                        {"LCR", corpus.planted_counts[1]},
                        {"LK", corpus.planted_counts[2]}};
    std::array<std::int64_t, 3> labeled{};
    for (const auto& s : corpus.samples) {
        labeled[static_cast<std::size_t>(s.label)] += 1;
    }
    stats["labels"] = {{"LCL", labeled[0]}, {"LCR", labeled[1]}, {"LK", labeled[2]}};
    stats["scene_retries"] = corpus.retries;
    stats["trajectory_rows"] = traj.records.size();
    io::atomic_write(join(out_dir, "corpus_stats.json"), stats.dump(2) + "\n");
    std::cout << "synthesize: " << traj.records.size() << " trajectory rows, "
              << corpus.samples.size() << " corpus samples -> " << out_dir << "\n";
}

void cmd_ingest(const PipelineConfig& cfg, const std::string& input,
                const std::string& unit_mode, const std::string& out_dir) {
    (void)cfg;
    ensure_dir(out_dir);
    const auto mode = unit_mode == "ngsim_feet" ? dataset::UnitMode::ngsim_feet
                                                : dataset::UnitMode::metric;
    if (unit_mode != "ngsim_feet" && unit_mode != "metric") {
        throw std::runtime_error("ingest: unit mode must be metric or ngsim_feet");
    }
    const auto records = dataset::load_trajectories(input, mode);
    dataset::save_trajectories(join(out_dir, "trajectories.csv"), records);
    std::cout << "ingest: " << records.size() << " records -> "
              << join(out_dir, "trajectories.csv") << "\n";
}

namespace {

std::map<std::int64_t, std::vector<dataset::TrajectoryRecord>> group_by_vehicle(
    std::span<const dataset::TrajectoryRecord> records) {
    std::map<std::int64_t, std::vector<dataset::TrajectoryRecord>> by_vehicle;
    for (const auto& r : records) by_vehicle[r.vehicle_id].push_back(r);
    return by_vehicle;
}

std::map<std::pair<std::int64_t, std::int64_t>, estimation::Vec3> load_truth(
    const std::string& path) {
    std::istringstream in(io::read_file(path));
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("empty truth file: " + path);
    }
    std::map<std::pair<std::int64_t, std::int64_t>, estimation::Vec3> truth;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = io::split_csv_line(line);
        if (f.size() != 5) {
            throw std::runtime_error("truth file line " + std::to_string(line_no) +
                                     ": expected 5 fields");
        }
        truth[{std::stoll(f[0]), std::stoll(f[1])}] =
            estimation::Vec3{std::stod(f[2]), std::stod(f[3]), std::stod(f[4])};
    }
    return truth;
}

}  // namespace

void cmd_estimate(const PipelineConfig& cfg, const std::string& traj_path,
                  const std::string& truth_path, const std::string& out_dir) {
    ensure_dir(out_dir);
    const auto records = dataset::load_trajectories(traj_path, dataset::UnitMode::metric);
    if (records.empty()) {
        throw std::runtime_error("estimate: no records in " + traj_path);
    }
    const auto by_vehicle = group_by_vehicle(records);

    std::vector<EstimationTraceRow> rows;
    for (const auto& [vid, vrecs] : by_vehicle) {
        const auto est = estimate_vehicle(records, vrecs, cfg, cfg.clustering);
        rows.insert(rows.end(), est.rows.begin(), est.rows.end());
    }
    io::atomic_write(join(out_dir, "estimation.csv"), estimation_trace_csv(rows));

    std::vector<double> errors;
    errors.reserve(rows.size());
    for (const auto& r : rows) errors.push_back(r.fit_error);
    const auto buckets = evaluation::fitting_error_buckets(errors);

    nlohmann::json summary;
    summary["n_vehicles"] = by_vehicle.size();
    summary["n_windows"] = rows.size();
    summary["clustering"] = cfg.clustering;
    summary["fit_mae"] =
        errors.empty()
            ? 0.0
            : std::accumulate(errors.begin(), errors.end(), 0.0) /
                  static_cast<double>(errors.size());
    summary["buckets"] = {{"E<0.1", buckets.fractions()[0]},
                          {"0.1<=E<0.3", buckets.fractions()[1]},
                          {"0.3<=E<0.5", buckets.fractions()[2]},
                          {"0.5<=E", buckets.fractions()[3]}};
    summary["bucket_counts"] = buckets.counts;

    if (!truth_path.empty()) {
        const auto truth = load_truth(truth_path);
        estimation::Vec3 mae{0.0, 0.0, 0.0};
        std::size_t n = 0;
        for (const auto& r : rows) {
            const auto it = truth.find({r.vehicle_id, r.frame});
            if (it == truth.end()) continue;
            for (int d = 0; d < 3; ++d) {
                mae[static_cast<std::size_t>(d)] +=
                    std::abs(r.theta[static_cast<std::size_t>(d)] -
                             it->second[static_cast<std::size_t>(d)]);
            }
            ++n;
        }
        if (n > 0) {
            for (auto& v : mae) v /= static_cast<double>(n);
        }
        summary["param_mae"] = {{"delta", mae[0]}, {"T", mae[1]}, {"a", mae[2]}};
        summary["truth_matched_windows"] = n;
    }
    io::atomic_write(join(out_dir, "estimation_summary.json"), summary.dump(2) + "\n");
    std::cout << "estimate: " << rows.size() << " windows -> " << out_dir << "\n";
}

void cmd_extract(const PipelineConfig& cfg, const std::string& traj_path,
                 const std::string& out_dir) {
    ensure_dir(out_dir);
    const auto records = dataset::load_trajectories(traj_path, dataset::UnitMode::metric);
    const auto result = dataset::extract_samples(records, extraction_config(cfg));
    dataset::save_corpus_jsonl(join(out_dir, "corpus.jsonl"), result.samples);

    std::array<std::int64_t, 3> labeled{};
    for (const auto& s : result.samples) {
        labeled[static_cast<std::size_t>(s.label)] += 1;
    }
    nlohmann::json stats;
    stats["n_samples"] = result.samples.size();
    stats["dropped"] = result.dropped;
    stats["labels"] = {{"LCL", labeled[0]}, {"LCR", labeled[1]}, {"LK", labeled[2]}};
    io::atomic_write(join(out_dir, "extract_stats.json"), stats.dump(2) + "\n");
    std::cout << "extract: " << result.samples.size() << " samples ("
              << result.dropped << " dropped) -> " << out_dir << "\n";
}

namespace {

void train_one(const PipelineConfig& cfg,
               const std::vector<dataset::LabeledSample>& corpus,
               predictor::InputMode mode, const std::string& out_dir,
               const std::string& tag) {
    predictor::TrainConfig tc = cfg.train;
    tc.mode = mode;
    const auto result = predictor::train(corpus, tc);
    predictor::save_model(result.model, join(out_dir, "model_" + tag + ".json"));
    io::atomic_write(join(out_dir, "train_log_" + tag + ".csv"),
                     predictor::training_log_csv(result.log));
    const auto& last = result.log.back();
    std::cout << "train[" << tag << "]: final val_acc "
              << io::format_double(last.val_acc) << ", val_loss "
              << io::format_double(last.val_loss) << "\n";
}

}  // namespace

void cmd_train(const PipelineConfig& cfg, const std::string& corpus_path,
               const std::string& mode, const std::string& out_dir) {
    ensure_dir(out_dir);
    const auto corpus = dataset::load_corpus_jsonl(corpus_path);
    if (mode == "both" || mode == "with_characteristics") {
        train_one(cfg, corpus, predictor::InputMode::with_characteristics,
                  out_dir, "pa");
    }
    if (mode == "both" || mode == "sensing_only") {
        train_one(cfg, corpus, predictor::InputMode::sensing_only, out_dir, "pb");
    }
    if (mode != "both" && mode != "with_characteristics" && mode != "sensing_only") {
        throw std::runtime_error(
            "train: mode must be both, with_characteristics or sensing_only");
    }
}

void cmd_predict(const PipelineConfig& cfg, const std::string& model_path,
                 const std::string& corpus_path, const std::string& out_dir) {
    (void)cfg;
    ensure_dir(out_dir);
    const auto model = predictor::load_model(model_path);
    const auto corpus = dataset::load_corpus_jsonl(corpus_path);
    std::string out = "vehicle_id,anchor_frame,label,p_lcl,p_lcr,p_lk,predicted\n";
    for (const auto& s : corpus) {
        const auto pred = predictor::predict(model, s);
        out += std::to_string(s.vehicle_id);
        out.push_back(',');
        out += std::to_string(s.anchor_frame);
        out.push_back(',');
        out += dataset::to_string(s.label);
        for (double p : pred.probs) {
            out.push_back(',');
            out += io::format_double(p);
        }
        out.push_back(',');
        out += evaluation::kClassNames[static_cast<std::size_t>(pred.label)];
        out.push_back('\n');
    }
    io::atomic_write(join(out_dir, "predictions.csv"), out);
    std::cout << "predict: " << corpus.size() << " rows -> "
              << join(out_dir, "predictions.csv") << "\n";
}

namespace {

struct EvalBlock {
    evaluation::ConfusionMatrix cm;
    std::array<evaluation::ClassMetrics, 3> metrics;
    std::array<double, 3> auc{-1.0, -1.0, -1.0};
    std::vector<evaluation::RocCurve> curves;  // per class when defined
    std::array<bool, 3> auc_defined{false, false, false};
};

EvalBlock evaluate_model(const predictor::Model& model,
                         const std::vector<dataset::LabeledSample>& corpus,
                         std::span<const std::size_t> indices) {
    std::vector<int> preds, labels;
    std::vector<std::array<double, 3>> scores;
    for (auto i : indices) {
        const auto pred = predictor::predict(model, corpus[i]);
        preds.push_back(pred.label);
        labels.push_back(static_cast<int>(corpus[i].label));
        scores.push_back(pred.probs);
    }
    EvalBlock block;
    block.cm = evaluation::confusion(preds, labels);
    block.metrics = evaluation::class_metrics(block.cm);
    block.curves.resize(3);
    for (int k = 0; k < 3; ++k) {
        try {
            block.curves[static_cast<std::size_t>(k)] =
                evaluation::roc_auc(scores, labels, k);
            block.auc[static_cast<std::size_t>(k)] =
                block.curves[static_cast<std::size_t>(k)].auc;
            block.auc_defined[static_cast<std::size_t>(k)] = true;
        } catch (const std::invalid_argument&) {
            // class absent from this split; AUC stays undefined
        }
    }
    return block;
}

std::string roc_csv(const evaluation::RocCurve& c) {
    std::string out = "threshold,fpr,tpr\n";
    for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
        out += io::format_double(c.thresholds[i]);
        out.push_back(',');
        out += io::format_double(c.fpr[i]);
        out.push_back(',');
        out += io::format_double(c.tpr[i]);
        out.push_back('\n');
    }
    return out;
}

nlohmann::json block_json(const EvalBlock& b) {
    auto j = evaluation::metrics_report(b.cm, b.metrics, b.auc);
    for (std::size_t k = 0; k < 3; ++k) {
        j["per_class"][evaluation::kClassNames[k]]["auc_defined"] = b.auc_defined[k];
    }
    return j;
}

}  // namespace

void cmd_evaluate(const PipelineConfig& cfg, const std::string& corpus_path,
                  const std::string& model_a_path, const std::string& model_b_path,
                  const std::string& split, const std::string& out_dir) {
    ensure_dir(out_dir);
    const auto corpus = dataset::load_corpus_jsonl(corpus_path);
    if (split != "test" && split != "all") {
        throw std::runtime_error("evaluate: split must be test or all");
    }
    std::vector<std::size_t> indices;
    if (split == "test") {
        const auto sp = predictor::stratified_split(corpus, cfg.train.train_fraction,
                                                    cfg.train.rng_seed);
        indices = sp.test;
    } else {
        indices.resize(corpus.size());
        for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    }

    const auto model_a = predictor::load_model(model_a_path);
    const auto block_a = evaluate_model(model_a, corpus, indices);

    nlohmann::json report;
    report["split"] = split;
    report["n_evaluated"] = indices.size();
    report["model_a"] = block_json(block_a);
    std::string table = "== model A (" +
                        std::string(predictor::to_string(model_a.mode)) + ") ==\n" +
                        evaluation::metrics_table(block_a.cm, block_a.metrics,
                                                  block_a.auc);
    for (std::size_t k = 0; k < 3; ++k) {
        if (block_a.auc_defined[k]) {
            io::atomic_write(join(out_dir, std::string("roc_a_") +
                                               evaluation::kClassNames[k] + ".csv"),
                             roc_csv(block_a.curves[k]));
        }
    }

    if (!model_b_path.empty()) {
        const auto model_b = predictor::load_model(model_b_path);
        const auto block_b = evaluate_model(model_b, corpus, indices);
        report["model_b"] = block_json(block_b);
        const double f1_a = evaluation::macro_f1(block_a.metrics);
        const double f1_b = evaluation::macro_f1(block_b.metrics);
        report["comparison"] = {{"macro_f1_a", f1_a},
                                {"macro_f1_b", f1_b},
                                {"a_not_worse", f1_a >= f1_b}};
        table += "\n== model B (" +
                 std::string(predictor::to_string(model_b.mode)) + ") ==\n" +
                 evaluation::metrics_table(block_b.cm, block_b.metrics, block_b.auc);
        table += "\nmacro F1: A " + io::format_double(f1_a) + " vs B " +
                 io::format_double(f1_b) + "\n";
        for (std::size_t k = 0; k < 3; ++k) {
            if (block_b.auc_defined[k]) {
                io::atomic_write(join(out_dir, std::string("roc_b_") +
                                                   evaluation::kClassNames[k] +
                                                   ".csv"),
                                 roc_csv(block_b.curves[k]));
            }
        }
    }
    io::atomic_write(join(out_dir, "metrics.json"), report.dump(2) + "\n");
    io::atomic_write(join(out_dir, "metrics.txt"), table);
    std::cout << table;
}

void cmd_repro_fig3(const PipelineConfig& cfg, const std::string& out_dir) {
    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    ensure_dir(out_dir);

    dataset::SquareWaveSpec spec = cfg.synth;
    spec.base = cfg.idm;
    spec.noise_sigma_vel = 0.0;
    const auto traj = dataset::generate_synthetic_trajectory(spec, cfg.seed);

    std::vector<dataset::TrajectoryRecord> follower;
    for (const auto& r : traj.records) {
        if (r.vehicle_id == traj.follower_id) follower.push_back(r);
    }
    const auto guided = estimate_vehicle(traj.records, follower, cfg, true);
    const auto unguided = estimate_vehicle(traj.records, follower, cfg, false);
    if (guided.rows.size() != unguided.rows.size() || guided.rows.empty()) {
        throw std::runtime_error("repro-fig3: estimation traces inconsistent");
    }

    std::string csv =
        "step,time_s,true_delta,true_T,true_a,guided_delta,guided_T,guided_a,"
        "guided_fit,unguided_delta,unguided_T,unguided_a,unguided_fit\n";
    double mae_guided = 0.0, mae_unguided = 0.0;
    for (std::size_t i = 0; i < guided.rows.size(); ++i) {
        const auto& g = guided.rows[i];
        const auto& u = unguided.rows[i];
        const auto& truth = traj.truth[static_cast<std::size_t>(g.step)];
        csv += std::to_string(g.step);
        for (double v :
             {static_cast<double>(g.step) * cfg.dt, truth[0], truth[1], truth[2],
              g.theta[0], g.theta[1], g.theta[2], g.fit_error, u.theta[0],
              u.theta[1], u.theta[2], u.fit_error}) {
            csv.push_back(',');
            csv += io::format_double(v);
        }
        csv.push_back('\n');
        mae_guided += g.fit_error;
        mae_unguided += u.fit_error;
    }
    mae_guided /= static_cast<double>(guided.rows.size());
    mae_unguided /= static_cast<double>(unguided.rows.size());
    io::atomic_write(join(out_dir, "fig3_trace.csv"), csv);

    // Plateau means of the estimated headway, excluding +-1 s around each
    // level transition.
    const double half = spec.period_s / 2.0;
    const auto near_transition = [&](double t) {
        for (double tr = half; tr < spec.horizon_s + half; tr += half) {
            if (std::abs(t - tr) <= 1.0) return true;
        }
        return false;
    };
    double sum_a = 0.0, sum_b = 0.0;
    std::size_t n_a = 0, n_b = 0;
    for (const auto& g : guided.rows) {
        const double t = static_cast<double>(g.step) * cfg.dt;
        if (near_transition(t)) continue;
        const auto& truth = traj.truth[static_cast<std::size_t>(g.step)];
        if (truth == spec.level_a) {
            sum_a += g.theta[1];
            ++n_a;
        } else {
            sum_b += g.theta[1];
            ++n_b;
        }
    }
    const double plateau_a = n_a > 0 ? sum_a / static_cast<double>(n_a) : 0.0;
    const double plateau_b = n_b > 0 ? sum_b / static_cast<double>(n_b) : 0.0;

    const double elapsed =
        std::chrono::duration<double>(clock::now() - t0).count();
    nlohmann::json summary;
    summary["mae_guided"] = mae_guided;
    summary["mae_unguided"] = mae_unguided;
    summary["guided_lower"] = mae_guided < mae_unguided;
    summary["n_steps"] = guided.rows.size();
    summary["headway_plateau"] = {
        {"level_a_true", spec.level_a[1]},
        {"level_a_mean", plateau_a},
        {"level_a_abs_err", std::abs(plateau_a - spec.level_a[1])},
        {"level_b_true", spec.level_b[1]},
        {"level_b_mean", plateau_b},
        {"level_b_abs_err", std::abs(plateau_b - spec.level_b[1])}};
    summary["elapsed_s"] = elapsed;
    io::atomic_write(join(out_dir, "fig3_summary.json"), summary.dump(2) + "\n");
    std::cout << "repro-fig3: MAE guided " << io::format_double(mae_guided)
              << " vs unguided " << io::format_double(mae_unguided) << " ("
              << io::format_double(elapsed) << " s)\n";
}

void cmd_repro_table1(const PipelineConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    constexpr int kWindows = 200;
    std::vector<double> errors(kWindows);
    std::vector<estimation::Vec3> thetas(kWindows);
    std::string csv = "window,delta,T,a,fit_error\n";

    const std::int64_t n = kWindows;
#pragma omp parallel for schedule(dynamic) if (cfg.parallel)
    for (std::int64_t wi = 0; wi < n; ++wi) {
        Rng rng(derive_seed(cfg.seed, 0x7ab1e + static_cast<std::uint64_t>(wi)));
        const estimation::Vec3 truth{
            rng.uniform(traffic::kDeltaMin, traffic::kDeltaMax),
            rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)};
        traffic::IdmParams p = cfg.idm;
        p.delta = truth[0];
        p.T = truth[1];
        p.a = truth[2];

        const double lead_speed = rng.uniform(8.0, 25.0);
        const double foll_speed = lead_speed * rng.uniform(0.7, 1.0);
        const double steady = p.s0 + lead_speed * p.T;
        const double gap0 = steady * rng.uniform(1.2, 2.5);

        const int steps = cfg.horizon * 2;
        std::vector<traffic::VehicleState> leader(static_cast<std::size_t>(steps));
        for (int i = 0; i < steps; ++i) {
            leader[static_cast<std::size_t>(i)] =
                traffic::VehicleState{gap0 + lead_speed * cfg.dt * i, lead_speed, 1};
        }
        const std::vector<traffic::ScheduleEntry> schedule{{0.0, p}};
        const auto follower = traffic::simulate_following(
            schedule, leader, traffic::VehicleState{0.0, foll_speed, 1}, cfg.dt);

        estimation::EstimationWindow w;
        w.dt = cfg.dt;
        const int off = steps - cfg.horizon;
        for (int i = off; i < steps; ++i) {
            const std::size_t is = static_cast<std::size_t>(i);
            w.follower_vel.push_back(follower[is].vel);
            w.leader_vel.push_back(leader[is].vel);
            w.gap.push_back(leader[is].pos - follower[is].pos);
        }
        estimation::GaConfig ga = cfg.ga;
        ga.rng_seed = derive_seed(cfg.seed, 0xf17 + static_cast<std::uint64_t>(wi));
        ga.parallel = false;  // the window loop is already parallel
        const auto cost = [&](const estimation::Vec3& th) {
            return estimation::fitting_cost(th, w, cfg.idm);
        };
        const auto est = estimation::ga_optimize(cost, estimation::ParamBounds::hard(), ga);
        errors[static_cast<std::size_t>(wi)] = est.fit_error;
        thetas[static_cast<std::size_t>(wi)] = truth;
    }

    for (int wi = 0; wi < kWindows; ++wi) {
        const std::size_t ws = static_cast<std::size_t>(wi);
        csv += std::to_string(wi);
        for (double v : {thetas[ws][0], thetas[ws][1], thetas[ws][2], errors[ws]}) {
            csv.push_back(',');
            csv += io::format_double(v);
        }
        csv.push_back('\n');
    }
    io::atomic_write(join(out_dir, "table1_errors.csv"), csv);

    const auto buckets = evaluation::fitting_error_buckets(errors);
    nlohmann::json summary;
    summary["n_windows"] = kWindows;
    summary["bucket_counts"] = buckets.counts;
    summary["buckets"] = {{"E<0.1", buckets.fractions()[0]},
                          {"0.1<=E<0.3", buckets.fractions()[1]},
                          {"0.3<=E<0.5", buckets.fractions()[2]},
                          {"0.5<=E", buckets.fractions()[3]}};
    io::atomic_write(join(out_dir, "table1_summary.json"), summary.dump(2) + "\n");
    std::cout << "repro-table1: fraction E<0.1 = "
              << io::format_double(buckets.fractions()[0]) << "\n";
}

}  // namespace drivepred::pipeline
