#include "drivepred/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "drivepred/io_util.hpp"
#include "drivepred/rng.hpp"
#include "json.hpp"

namespace drivepred::dataset {

namespace {

constexpr const char* kMetricHeader = "vehicle_id,frame,time_s,lane,pos_m,vel_mps";

[[noreturn]] void row_error(std::size_t line_no, const std::string& what) {
    throw std::runtime_error("trajectory file line " + std::to_string(line_no) +
                             ": " + what);
}

double parse_double(const std::string& s, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) row_error(line_no, "trailing characters in '" + s + "'");
        return v;
    } catch (const std::invalid_argument&) {
        row_error(line_no, "not a number: '" + s + "'");
    } catch (const std::out_of_range&) {
        row_error(line_no, "out of range: '" + s + "'");
    }
}

std::int64_t parse_int(const std::string& s, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const std::int64_t v = std::stoll(s, &used);
        if (used != s.size()) row_error(line_no, "trailing characters in '" + s + "'");
        return v;
    } catch (const std::exception&) {
        row_error(line_no, "not an integer: '" + s + "'");
    }
}

// Fills velocities by central differences of position where the file had no
// velocity column. Ends use one-sided differences; results floor at zero.
void derive_velocities(std::vector<TrajectoryRecord>& recs) {
    std::size_t i = 0;
    while (i < recs.size()) {
        std::size_t j = i;
        while (j + 1 < recs.size() &&
               recs[j + 1].vehicle_id == recs[i].vehicle_id) {
            ++j;
        }
        const std::size_t n = j - i + 1;
        double dt = 0.1;
        if (n >= 2) dt = recs[i + 1].time - recs[i].time;
        if (!(dt > 0.0)) dt = 0.1;
        for (std::size_t k = i; k <= j; ++k) {
            double v = 0.0;
            if (n == 1) {
                v = 0.0;
            } else if (k == i) {
                v = (recs[k + 1].pos - recs[k].pos) / dt;
            } else if (k == j) {
                v = (recs[k].pos - recs[k - 1].pos) / dt;
            } else {
                v = (recs[k + 1].pos - recs[k - 1].pos) / (2.0 * dt);
            }
            recs[k].vel = std::max(0.0, v);
        }
        i = j + 1;
    }
}

void validate_frames(const std::vector<TrajectoryRecord>& recs) {
    for (std::size_t k = 1; k < recs.size(); ++k) {
        if (recs[k].vehicle_id != recs[k - 1].vehicle_id) continue;
        if (recs[k].frame != recs[k - 1].frame + 1) {
            throw std::runtime_error(
                "vehicle " + std::to_string(recs[k].vehicle_id) +
                ": frames not consecutive at frame " +
                std::to_string(recs[k].frame));
        }
    }
}

}  // namespace

std::vector<TrajectoryRecord> load_trajectories(const std::string& path,
                                                UnitMode mode) {
    std::istringstream in(io::read_file(path));
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error("empty trajectory file: " + path);
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = io::split_csv_line(line);

    // Column indices; -1 = absent.
    int c_id = -1, c_frame = -1, c_time = -1, c_lane = -1, c_pos = -1, c_vel = -1;
    if (mode == UnitMode::metric) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            const std::string& h = header[i];
            if (h == "vehicle_id") c_id = static_cast<int>(i);
            else if (h == "frame") c_frame = static_cast<int>(i);
            else if (h == "time_s") c_time = static_cast<int>(i);
            else if (h == "lane") c_lane = static_cast<int>(i);
            else if (h == "pos_m") c_pos = static_cast<int>(i);
            else if (h == "vel_mps") c_vel = static_cast<int>(i);
            else throw std::runtime_error("unknown column '" + h + "' in " + path);
        }
        if (c_id < 0 || c_frame < 0 || c_time < 0 || c_lane < 0 || c_pos < 0) {
            throw std::runtime_error("header must contain " +
                                     std::string(kMetricHeader) +
                                     " (vel_mps optional): " + path);
        }
    } else {
        for (std::size_t i = 0; i < header.size(); ++i) {
            const std::string& h = header[i];
            if (h == "Vehicle_ID") c_id = static_cast<int>(i);
            else if (h == "Frame_ID") c_frame = static_cast<int>(i);
            else if (h == "Lane_ID") c_lane = static_cast<int>(i);
            else if (h == "Local_Y") c_pos = static_cast<int>(i);
            else if (h == "v_Vel") c_vel = static_cast<int>(i);
            // other NGSIM columns are ignored
        }
        if (c_id < 0 || c_frame < 0 || c_lane < 0 || c_pos < 0) {
            throw std::runtime_error(
                "NGSIM header must contain Vehicle_ID,Frame_ID,Lane_ID,Local_Y: " +
                path);
        }
    }

    std::vector<TrajectoryRecord> recs;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        const auto f = io::split_csv_line(line);
        if (f.size() < header.size()) row_error(line_no, "expected " +
                                                std::to_string(header.size()) +
                                                " fields, got " +
                                                std::to_string(f.size()));
        TrajectoryRecord r;
        r.vehicle_id = parse_int(f[static_cast<std::size_t>(c_id)], line_no);
        r.frame = parse_int(f[static_cast<std::size_t>(c_frame)], line_no);
        r.lane = static_cast<int>(parse_int(f[static_cast<std::size_t>(c_lane)], line_no));
        r.pos = parse_double(f[static_cast<std::size_t>(c_pos)], line_no);
        if (mode == UnitMode::ngsim_feet) {
            r.pos *= kFeetToMeters;
            r.time = static_cast<double>(r.frame) * 0.1;
        } else {
            r.time = parse_double(f[static_cast<std::size_t>(c_time)], line_no);
        }
        if (c_vel >= 0) {
            r.vel = parse_double(f[static_cast<std::size_t>(c_vel)], line_no);
            if (mode == UnitMode::ngsim_feet) r.vel *= kFeetToMeters;
            if (r.vel < 0.0) row_error(line_no, "negative velocity");
        }
        if (r.lane < 1) row_error(line_no, "lane index must be >= 1");
        recs.push_back(r);
    }

    std::stable_sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) {
        return std::tie(a.vehicle_id, a.frame) < std::tie(b.vehicle_id, b.frame);
    });
    for (std::size_t k = 1; k < recs.size(); ++k) {
        if (recs[k].vehicle_id == recs[k - 1].vehicle_id &&
            recs[k].frame <= recs[k - 1].frame) {
            throw std::runtime_error("vehicle " +
                                     std::to_string(recs[k].vehicle_id) +
                                     ": non-monotone frames");
        }
    }
    validate_frames(recs);
    if (c_vel < 0) derive_velocities(recs);
    return recs;
}

void save_trajectories(const std::string& path,
                       std::span<const TrajectoryRecord> records) {
    std::string out = kMetricHeader;
    out.push_back('\n');
    for (const auto& r : records) {
        out += std::to_string(r.vehicle_id);
        out.push_back(',');
        out += std::to_string(r.frame);
        out.push_back(',');
        out += io::format_double(r.time);
        out.push_back(',');
        out += std::to_string(r.lane);
        out.push_back(',');
        out += io::format_double(r.pos);
        out.push_back(',');
        out += io::format_double(r.vel);
        out.push_back('\n');
    }
    io::atomic_write(path, out);
}

const char* to_string(Behavior b) {
    switch (b) {
        case Behavior::LCL: return "LCL";
        case Behavior::LCR: return "LCR";
        case Behavior::LK: return "LK";
    }
    return "LK";
}

Behavior behavior_from_string(const std::string& s) {
    if (s == "LCL") return Behavior::LCL;
    if (s == "LCR") return Behavior::LCR;
    if (s == "LK") return Behavior::LK;
    throw std::invalid_argument("unknown behavior label: " + s);
}

std::vector<LabeledEvent> label_behaviors(std::span<const TrajectoryRecord> vehicle_records,
                                          const LabelingConfig& cfg) {
    const std::size_t n = vehicle_records.size();
    if (n < static_cast<std::size_t>(cfg.window) + 1) {
        throw std::invalid_argument("label_behaviors: needs at least " +
                                    std::to_string(cfg.window + 1) + " frames");
    }
    std::vector<LabeledEvent> events;

    for (std::size_t i = 0; i + 1 < n; ++i) {
        const int from = vehicle_records[i].lane;
        const int to = vehicle_records[i + 1].lane;
        if (to == from) continue;
        LabeledEvent e;
        e.label = to < from ? Behavior::LCL : Behavior::LCR;
        e.anchor_index = i;
        e.anchor_frame = vehicle_records[i].frame;
        events.push_back(e);
    }

    // LK anchors inside maximal unchanged-lane stretches. A stretch that ends
    // right before a lane change keeps its anchors at least one window clear
    // of the transition.
    std::size_t s = 0;
    while (s < n) {
        std::size_t e = s;
        while (e + 1 < n && vehicle_records[e + 1].lane == vehicle_records[s].lane) {
            ++e;
        }
        if (e - s + 1 >= static_cast<std::size_t>(cfg.lk_min_stretch)) {
            const bool followed_by_change = e + 1 < n;
            const std::size_t last_anchor =
                followed_by_change ? e - static_cast<std::size_t>(cfg.window) : e;
            for (std::size_t a = s + static_cast<std::size_t>(cfg.window) - 1;
                 a <= last_anchor; a += static_cast<std::size_t>(cfg.lk_stride)) {
                LabeledEvent ev;
                ev.label = Behavior::LK;
                ev.anchor_index = a;
                ev.anchor_frame = vehicle_records[a].frame;
                events.push_back(ev);
            }
        }
        s = e + 1;
    }

    std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) {
        return a.anchor_index < b.anchor_index;
    });
    return events;
}

namespace {

// Per-vehicle slice into the sorted record array.
struct VehicleSlice {
    std::int64_t id;
    std::size_t begin, count;
};

std::vector<VehicleSlice> slice_by_vehicle(std::span<const TrajectoryRecord> recs) {
    std::vector<VehicleSlice> out;
    std::size_t i = 0;
    while (i < recs.size()) {
        std::size_t j = i;
        while (j + 1 < recs.size() && recs[j + 1].vehicle_id == recs[i].vehicle_id) {
            ++j;
        }
        out.push_back(VehicleSlice{recs[i].vehicle_id, i, j - i + 1});
        i = j + 1;
    }
    return out;
}

traffic::VehicleState to_state(const TrajectoryRecord& r) {
    return traffic::VehicleState{r.pos, r.vel, r.lane};
}

// Fields of one vehicle slot in the flattened sensing row block. Missing
// vehicles are encoded as a virtual vehicle kVirtualLeadDistance ahead
// (preceding slots) or behind (following slots) at the target's speed.
void write_slot(std::vector<double>& z, int window, int slot, int col,
                const std::optional<traffic::VehicleState>& v,
                const traffic::VehicleState& target, bool preceding, int slot_lane) {
    double pos, vel, lane;
    if (v.has_value()) {
        pos = v->pos;
        vel = v->vel;
        lane = static_cast<double>(v->lane);
    } else {
        pos = target.pos + (preceding ? traffic::kVirtualLeadDistance
                                      : -traffic::kVirtualLeadDistance);
        vel = target.vel;
        lane = static_cast<double>(slot_lane);
    }
    const std::size_t base = static_cast<std::size_t>(slot * 3) *
                             static_cast<std::size_t>(window);
    const std::size_t c = static_cast<std::size_t>(col);
    const std::size_t w = static_cast<std::size_t>(window);
    z[base + c] = pos;
    z[base + w + c] = vel;
    z[base + 2 * w + c] = lane;
}

struct AnchorTask {
    std::int64_t vehicle_id;
    std::size_t vehicle_begin;
    std::size_t vehicle_count;
    LabeledEvent event;
};

}  // namespace

ExtractionResult extract_samples(std::span<const TrajectoryRecord> raw_records,
                                 const ExtractionConfig& cfg) {
    // Callers may hand over frame-interleaved records; the per-vehicle
    // slicing below needs (vehicle_id, frame) order.
    std::vector<TrajectoryRecord> sorted(raw_records.begin(), raw_records.end());
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return std::tie(a.vehicle_id, a.frame) < std::tie(b.vehicle_id, b.frame);
    });
    const std::span<const TrajectoryRecord> records(sorted);

    const int window = cfg.labeling.window;
    const int horizon = cfg.horizon;
    // Each window step needs a full estimation horizon of history behind it.
    const std::size_t min_anchor =
        static_cast<std::size_t>(window - 1 + horizon - 1);

    // Frame map: frame number -> all vehicles at that frame.
    std::unordered_map<std::int64_t, std::vector<traffic::FrameVehicle>> frames;
    int lane_count = 1;
    for (const auto& r : records) {
        frames[r.frame].push_back(traffic::FrameVehicle{r.vehicle_id, to_state(r)});
        lane_count = std::max(lane_count, r.lane);
    }

    const auto slices = slice_by_vehicle(records);
    std::vector<AnchorTask> tasks;
    for (const auto& s : slices) {
        if (cfg.target_ids.has_value()) {
            const auto& ids = *cfg.target_ids;
            if (std::find(ids.begin(), ids.end(), s.id) == ids.end()) continue;
        }
        if (s.count < static_cast<std::size_t>(window) + 1) continue;
        const auto events = label_behaviors(
            records.subspan(s.begin, s.count), cfg.labeling);
        for (const auto& e : events) {
            tasks.push_back(AnchorTask{s.id, s.begin, s.count, e});
        }
    }

    std::vector<std::optional<LabeledSample>> slots(tasks.size());
    std::vector<char> dropped(tasks.size(), 0);

    const auto run_task = [&](std::size_t ti) {
        const AnchorTask& task = tasks[ti];
        const std::size_t ai = task.event.anchor_index;
        if (ai < min_anchor) {
            dropped[ti] = 1;
            return;
        }
        const auto vrecs = records.subspan(task.vehicle_begin, task.vehicle_count);

        // Cache per-position leader traces and (for window positions)
        // neighbor sets. Position u covers indices [ai - depth + 1, ai].
        const std::size_t depth = static_cast<std::size_t>(window + horizon - 1);
        std::vector<double> lead_vel(depth), gap(depth), foll_vel(depth);
        std::vector<traffic::FrameContext> contexts(static_cast<std::size_t>(window));
        for (std::size_t k = 0; k < depth; ++k) {
            const std::size_t u = ai - depth + 1 + k;
            const auto& rec = vrecs[u];
            const auto& frame = frames.at(rec.frame);
            const auto ns = traffic::identify_neighbors(frame, task.vehicle_id,
                                                        lane_count);
            const auto target = to_state(rec);
            foll_vel[k] = target.vel;
            if (ns.p_old.has_value()) {
                gap[k] = ns.p_old->pos - target.pos;
                lead_vel[k] = ns.p_old->vel;
            } else {
                gap[k] = traffic::kVirtualLeadDistance;
                lead_vel[k] = target.vel;
            }
            if (gap[k] <= 0.0) {
                dropped[ti] = 1;
                return;
            }
            if (k + static_cast<std::size_t>(window) >= depth) {
                contexts[k - (depth - static_cast<std::size_t>(window))] =
                    traffic::FrameContext{target, ns};
            }
        }

        estimation::EstimatorOptions opt;
        opt.base = cfg.base;
        opt.ga = cfg.ga;
        opt.ga.rng_seed = derive_seed(
            derive_seed(cfg.seed, static_cast<std::uint64_t>(task.vehicle_id)),
            static_cast<std::uint64_t>(task.event.anchor_frame));
        opt.ets = cfg.ets;
        opt.clustering = cfg.clustering;
        estimation::MovingHorizonEstimator estimator(opt);

        LabeledSample sample;
        sample.window = window;
        sample.label = task.event.label;
        sample.vehicle_id = task.vehicle_id;
        sample.anchor_frame = task.event.anchor_frame;
        sample.z.assign(static_cast<std::size_t>(kSensingRows) *
                            static_cast<std::size_t>(window), 0.0);
        sample.zhat.assign(static_cast<std::size_t>(kCharacteristicRows) *
                               static_cast<std::size_t>(window), 0.0);

        try {
            for (int j = 0; j < window; ++j) {
                estimation::EstimationWindow ew;
                ew.dt = cfg.dt;
                const std::size_t off = static_cast<std::size_t>(j);
                ew.follower_vel.assign(foll_vel.begin() + off,
                                       foll_vel.begin() + off + horizon);
                ew.leader_vel.assign(lead_vel.begin() + off,
                                     lead_vel.begin() + off + horizon);
                ew.gap.assign(gap.begin() + off, gap.begin() + off + horizon);
                const auto rec = estimator.step(ew);

                const auto& ctx = contexts[static_cast<std::size_t>(j)];
                const auto ch = traffic::compute_characteristic(
                    ctx, rec.estimate.theta[1], rec.estimate.theta[2], cfg.base,
                    cfg.mobil);

                const std::size_t w = static_cast<std::size_t>(window);
                sample.zhat[0 * w + off] = ch.T;
                sample.zhat[1 * w + off] = ch.a;
                sample.zhat[2 * w + off] = ch.i_lcl;
                sample.zhat[3 * w + off] = ch.i_lcr;

                const auto& ns = ctx.neighbors;
                const int lane = ctx.target.lane;
                write_slot(sample.z, window, 0, j, ctx.target, ctx.target, true, lane);
                write_slot(sample.z, window, 1, j, ns.f_old, ctx.target, false, lane);
                write_slot(sample.z, window, 2, j, ns.f_new_l, ctx.target, false, lane - 1);
                write_slot(sample.z, window, 3, j, ns.f_new_r, ctx.target, false, lane + 1);
                write_slot(sample.z, window, 4, j, ns.p_old, ctx.target, true, lane);
                write_slot(sample.z, window, 5, j, ns.p_new_l, ctx.target, true, lane - 1);
                write_slot(sample.z, window, 6, j, ns.p_new_r, ctx.target, true, lane + 1);
            }
        } catch (const std::domain_error&) {
            dropped[ti] = 1;  // collision-degenerate geometry somewhere in the window
            return;
        }
        slots[ti] = std::move(sample);
    };

    const std::int64_t n_tasks = static_cast<std::int64_t>(tasks.size());
    if (cfg.mode == ExecMode::parallel) {
#pragma omp parallel for schedule(dynamic)
        for (std::int64_t i = 0; i < n_tasks; ++i) {
            run_task(static_cast<std::size_t>(i));
        }
    } else {
        for (std::int64_t i = 0; i < n_tasks; ++i) {
            run_task(static_cast<std::size_t>(i));
        }
    }

    ExtractionResult out;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (slots[i].has_value()) {
            out.samples.push_back(std::move(*slots[i]));
        } else {
            out.dropped += 1;
        }
    }
    std::stable_sort(out.samples.begin(), out.samples.end(),
                     [](const auto& a, const auto& b) {
                         return std::tie(a.vehicle_id, a.anchor_frame) <
                                std::tie(b.vehicle_id, b.anchor_frame);
                     });
    return out;
}

SyntheticTrajectory generate_synthetic_trajectory(const SquareWaveSpec& spec,
                                                  std::uint64_t seed) {
    if (spec.horizon_s < 30.0) {
        throw std::invalid_argument("generate_synthetic_trajectory: horizon < 30 s");
    }
    const std::size_t n =
        static_cast<std::size_t>(std::llround(spec.horizon_s / spec.dt)) + 1;

    std::vector<traffic::VehicleState> leader(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) * spec.dt;
        leader[i] = traffic::VehicleState{spec.initial_gap + spec.leader_speed * t,
                                          spec.leader_speed, 1};
    }

    const auto level_params = [&](const estimation::Vec3& lv) {
        traffic::IdmParams p = spec.base;
        p.delta = lv[0];
        p.T = lv[1];
        p.a = lv[2];
        return p;
    };
    std::vector<traffic::ScheduleEntry> schedule;
    const double half = spec.period_s / 2.0;
    double t = 0.0;
    bool level_is_a = true;
    while (t < spec.horizon_s + half) {
        schedule.push_back(traffic::ScheduleEntry{
            t, level_params(level_is_a ? spec.level_a : spec.level_b)});
        level_is_a = !level_is_a;
        t += half;
    }

    const auto follower = traffic::simulate_following(
        schedule, leader, traffic::VehicleState{0.0, spec.follower_speed, 1},
        spec.dt);

    SyntheticTrajectory out;
    out.truth.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double ti = static_cast<double>(i) * spec.dt;
        const bool in_a =
            (static_cast<std::int64_t>(std::floor(ti / half + 1e-9)) % 2) == 0;
        out.truth[i] = in_a ? spec.level_a : spec.level_b;
    }

    auto emit = [&](std::int64_t id, const std::vector<traffic::VehicleState>& traj) {
        std::vector<double> vel(traj.size()), pos(traj.size());
        for (std::size_t i = 0; i < traj.size(); ++i) {
            vel[i] = traj[i].vel;
            pos[i] = traj[i].pos;
        }
        if (spec.noise_sigma_vel > 0.0) {
            Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id)));
            for (auto& v : vel) v = std::max(0.0, v + rng.normal(0.0, spec.noise_sigma_vel));
            for (std::size_t i = 1; i < pos.size(); ++i) {
                pos[i] = pos[i - 1] + vel[i - 1] * spec.dt;
            }
        }
        for (std::size_t i = 0; i < traj.size(); ++i) {
            out.records.push_back(TrajectoryRecord{
                id, static_cast<std::int64_t>(i),
                static_cast<double>(i) * spec.dt, traj[i].lane, pos[i], vel[i]});
        }
    };
    emit(1, leader);
    emit(2, follower);
    return out;
}

std::vector<Behavior> draw_classes(int n, const std::array<double, 3>& mix,
                                   std::uint64_t seed) {
    const double sum = mix[0] + mix[1] + mix[2];
    if (std::abs(sum - 1.0) > 1e-9) {
        throw std::invalid_argument("behavior mix must sum to 1");
    }
    Rng rng(derive_seed(seed, 0x6d6978));
    std::vector<Behavior> out(static_cast<std::size_t>(n));
    for (auto& b : out) {
        const double u = rng.uniform01();
        if (u < mix[0]) {
            b = Behavior::LCL;
        } else if (u < mix[0] + mix[1]) {
            b = Behavior::LCR;
        } else {
            b = Behavior::LK;
        }
    }
    return out;
}

namespace {

// One scene vehicle. Non-targets hold their speed except for an optional
// scripted slowdown (decelerate at `decel_rate` from frame `decel_start`
// until `v_min`); the target follows its lane leader with the planted
// parameters.
struct SceneVehicle {
    std::int64_t id;
    traffic::VehicleState st;
    std::int64_t decel_start = -1;
    double decel_rate = 0.0;  // [m/s^2]
    double v_min = 0.0;
};

struct SceneSetup {
    std::vector<SceneVehicle> others;
    traffic::VehicleState target;
    std::int64_t target_id;
    traffic::IdmParams planted;
    double threshold;
    Behavior script;
    int slowdown_index = -1;  // index into others: the decelerating own-lane leader
    int follower_index = -1;  // old follower coupled to the slowdown, if any
};

struct SceneRun {
    std::vector<TrajectoryRecord> records;
    std::int64_t trigger = -1;  // frame at which the lane change executed
};

constexpr int kLkFrames = 120;
constexpr int kMaxPreFrames = 95;
constexpr int kPostFrames = 20;
constexpr int kTriggerLo = 60;
constexpr int kTriggerHi = 89;

SceneRun run_scene(const SceneSetup& setup, const traffic::MobilParams& mobil,
                   double dt) {
    SceneRun run;
    auto others = setup.others;
    auto target = setup.target;
    bool changed = false;
    std::int64_t change_frame = -1;

    const auto frame_view = [&]() {
        std::vector<traffic::FrameVehicle> f;
        f.reserve(others.size() + 1);
        f.push_back(traffic::FrameVehicle{setup.target_id, target});
        for (const auto& v : others) f.push_back(traffic::FrameVehicle{v.id, v.st});
        return f;
    };
    const auto record_frame = [&](std::int64_t t) {
        run.records.push_back(TrajectoryRecord{setup.target_id, t,
                                               static_cast<double>(t) * dt,
                                               target.lane, target.pos, target.vel});
        for (const auto& v : others) {
            run.records.push_back(TrajectoryRecord{v.id, t,
                                                   static_cast<double>(t) * dt,
                                                   v.st.lane, v.st.pos, v.st.vel});
        }
    };

    for (std::int64_t t = 0;; ++t) {
        record_frame(t);
        if (setup.script == Behavior::LK) {
            if (t + 1 >= kLkFrames) break;
        } else if (changed) {
            if (t >= change_frame + kPostFrames) break;
        } else if (t > kMaxPreFrames) {
            break;  // overdue, the caller treats the missing trigger as a miss
        }

        if (!changed && setup.script != Behavior::LK) {
            const auto frame = frame_view();
            const auto ns = traffic::identify_neighbors(frame, setup.target_id, 3);
            const bool left = setup.script == Behavior::LCL;
            bool safe = true;
            double incentive = -1e9;
            try {
                const auto ch = traffic::compute_characteristic(
                    traffic::FrameContext{target, ns}, setup.planted.T,
                    setup.planted.a, setup.planted, mobil);
                incentive = left ? ch.i_lcl : ch.i_lcr;
                const auto& f_new = left ? ns.f_new_l : ns.f_new_r;
                if (f_new.has_value()) {
                    const double g = target.pos - f_new->pos;
                    safe = g > 0.0 &&
                           traffic::mobil_safety(
                               traffic::idm_acceleration(setup.planted, f_new->vel,
                                                         g, f_new->vel - target.vel),
                               mobil.b_safe);
                }
            } catch (const std::domain_error&) {
                safe = false;  // degenerate geometry this frame
            }
            if (incentive > setup.threshold && safe) {
                changed = true;
                change_frame = t;
                run.trigger = t;
                target.lane += left ? -1 : 1;
            }
        }

        // Step: nearest same-lane leader for the target; movers follow their
        // speed script.
        const traffic::VehicleState* leader = nullptr;
        for (const auto& v : others) {
            if (v.st.lane != target.lane || v.st.pos < target.pos) continue;
            if (leader == nullptr || v.st.pos < leader->pos) leader = &v.st;
        }
        if (leader != nullptr) {
            target = traffic::idm_step(setup.planted, target, *leader, dt);
        } else {
            const traffic::VehicleState virt{
                target.pos + traffic::kVirtualLeadDistance, target.vel, target.lane};
            target = traffic::idm_step(setup.planted, target, virt, dt);
        }
        for (auto& v : others) {
            v.st.pos += v.st.vel * dt;
            if (v.decel_start >= 0 && t >= v.decel_start) {
                v.st.vel = std::max(v.v_min, v.st.vel - v.decel_rate * dt);
            }
        }
    }
    return run;
}

// Pressure builds when the own-lane leader slows down while the adjacent
// lanes keep flowing; the incentive then crosses the planted threshold
// shortly after the slowdown starts, and the slowdown frame is what the
// trigger search adjusts. Both adjacent lanes carry similar traffic so the
// sensing window alone does not give the class away; the planted driving
// style (headway, desired acceleration, threshold) decides what happens.
SceneSetup build_scene(Behavior script, std::int64_t base_id, Rng& rng,
                       const traffic::IdmParams& base) {
    SceneSetup s;
    s.script = script;
    s.target_id = base_id;
    s.planted = base;
    const bool aggressive = script != Behavior::LK;
    s.planted.delta = rng.uniform(3.85, 4.15);
    // Headway ranges overlap between driver styles; the styles differ
    // cleanly in desired acceleration and threshold.
    s.planted.T = aggressive ? rng.uniform(0.8, 1.8) : rng.uniform(1.4, 2.4);
    s.planted.a = aggressive ? rng.uniform(1.5, 2.5) : rng.uniform(0.8, 1.2);
    s.threshold = aggressive ? rng.uniform(0.2, 0.5) : 1e9;

    const double v_med = rng.uniform(11.0, 16.0);
    const double v_slow = v_med - rng.uniform(5.0, 8.0);
    const double decel = rng.uniform(1.2, 2.0);
    const double steady_gap =
        (s.planted.s0 + v_med * s.planted.T) /
        std::sqrt(1.0 - std::pow(v_med / s.planted.v0, s.planted.delta));

    s.target = traffic::VehicleState{0.0, v_med, 2};

    const bool pressured = script != Behavior::LK || rng.uniform01() < 0.5;
    // For lane changes the scripted side is slightly more open than the
    // other; lane-keep scenes draw both sides from the union so neither side
    // pattern identifies the class.
    const int scripted_lane = script == Behavior::LCR ? 3 : 1;
    const auto side_gap = [&](bool scripted_side) {
        if (script == Behavior::LK) return rng.uniform(0.45, 0.85);
        return scripted_side ? rng.uniform(0.60, 0.85) : rng.uniform(0.45, 0.70);
    };

    std::int64_t next_id = base_id + 1;
    // Own-lane leader; slows down mid-scene in pressured setups.
    SceneVehicle own_leader{next_id++,
                            {steady_gap + rng.uniform(0.0, 4.0), v_med, 2}};
    if (pressured) {
        own_leader.decel_start =
            30 + static_cast<std::int64_t>(rng.uniform_int(46));  // LK variety;
        own_leader.decel_rate = decel;  // lane changes re-search this start
        own_leader.v_min = v_slow;
    }
    s.slowdown_index = static_cast<int>(s.others.size());
    s.others.push_back(own_leader);

    // Adjacent-lane leaders move with the flow on both sides, close enough
    // that neither lane is attractive until the target itself slows down.
    for (int lane : {1, 3}) {
        s.others.push_back(SceneVehicle{
            next_id++,
            {steady_gap * side_gap(lane == scripted_lane),
             v_med + rng.uniform(-0.2, 0.2), lane}});
        if (rng.uniform01() < 0.6) {
            s.others.push_back(SceneVehicle{
                next_id++,
                {-steady_gap * rng.uniform(2.2, 3.5), v_med - rng.uniform(0.0, 1.0),
                 lane}});
        }
    }
    // Optional old follower; inherits the slowdown so it never runs through
    // the braking target.
    if (rng.uniform01() < 0.5) {
        SceneVehicle follower{next_id++,
                              {-steady_gap * rng.uniform(1.3, 2.0),
                               v_med - rng.uniform(0.0, 0.5), 2}};
        if (pressured) {
            follower.decel_start = own_leader.decel_start + 10;
            follower.decel_rate = decel;
            follower.v_min = v_slow;
        }
        s.follower_index = static_cast<int>(s.others.size());
        s.others.push_back(follower);
    }
    return s;
}

}  // namespace

CorpusResult generate_synthetic_corpus(const CorpusSpec& spec,
                                       const ExtractionConfig& extraction,
                                       std::uint64_t seed) {
    const auto classes = draw_classes(spec.n_vehicles, spec.mix, seed);
    CorpusResult result;
    for (const auto c : classes) {
        result.planted_counts[static_cast<std::size_t>(c)] += 1;
    }

    std::vector<std::optional<LabeledSample>> slots(classes.size());
    std::vector<std::int64_t> retries(classes.size(), 0);
    const std::int64_t n = static_cast<std::int64_t>(classes.size());

    const auto make_one = [&](std::size_t i) {
        const Behavior script = classes[i];
        const std::int64_t base_id = static_cast<std::int64_t>(i + 1) * 100;
        for (int attempt = 0; attempt < 32; ++attempt) {
            Rng rng(derive_seed(derive_seed(seed, i), static_cast<std::uint64_t>(attempt)));
            SceneSetup s = build_scene(script, base_id, rng, extraction.base);

            SceneRun run;
            if (script == Behavior::LK) {
                run = run_scene(s, extraction.mobil, extraction.dt);
                if (run.trigger != -1) {
                    ++retries[i];
                    continue;
                }
            } else {
                // The trigger follows the slowdown by a short geometry-fixed
                // delay, so bisect the slowdown frame.
                std::int64_t lo = 10, hi = kTriggerHi;
                bool found = false;
                auto& leader = s.others[static_cast<std::size_t>(s.slowdown_index)];
                for (int it = 0; it < 16 && !found; ++it) {
                    leader.decel_start = (lo + hi) / 2;
                    if (s.follower_index >= 0) {
                        s.others[static_cast<std::size_t>(s.follower_index)]
                            .decel_start = leader.decel_start + 10;
                    }
                    run = run_scene(s, extraction.mobil, extraction.dt);
                    if (run.trigger == -1 || run.trigger > kTriggerHi) {
                        hi = leader.decel_start - 1;  // slow down earlier
                    } else if (run.trigger < kTriggerLo) {
                        lo = leader.decel_start + 1;
                    } else {
                        found = true;
                    }
                    if (lo > hi) break;
                }
                if (!found) {
                    ++retries[i];
                    continue;
                }
            }

            ExtractionConfig ex = extraction;
            ex.mode = ExecMode::serial;  // scenes already run in parallel
            ex.seed = derive_seed(seed, 0xc0c0 + i);
            ex.target_ids = std::vector<std::int64_t>{s.target_id};
            const auto extracted = extract_samples(run.records, ex);
            if (extracted.samples.size() == 1 &&
                extracted.samples.front().label == script) {
                LabeledSample sample = extracted.samples.front();
                sample.truth = estimation::Vec3{s.planted.delta, s.planted.T,
                                                s.planted.a};
                slots[i] = std::move(sample);
                return;
            }
            ++retries[i];
        }
        throw std::runtime_error(
            "generate_synthetic_corpus: no valid scene for vehicle " +
            std::to_string(base_id));
    };

    if (extraction.mode == ExecMode::parallel) {
#pragma omp parallel for schedule(dynamic)
        for (std::int64_t i = 0; i < n; ++i) {
            make_one(static_cast<std::size_t>(i));
        }
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            make_one(static_cast<std::size_t>(i));
        }
    }

    for (std::size_t i = 0; i < slots.size(); ++i) {
        result.samples.push_back(std::move(*slots[i]));
        result.retries += retries[i];
    }
    return result;
}

void save_corpus_jsonl(const std::string& path,
                       std::span<const LabeledSample> samples) {
    std::string out;
    for (const auto& s : samples) {
        nlohmann::json j;
        j["anchor_frame"] = s.anchor_frame;
        j["label"] = to_string(s.label);
        j["vehicle_id"] = s.vehicle_id;
        j["window"] = s.window;
        j["z"] = s.z;
        j["zhat"] = s.zhat;
        if (s.truth.has_value()) j["truth"] = *s.truth;
        out += j.dump();
        out.push_back('\n');
    }
    io::atomic_write(path, out);
}

std::vector<LabeledSample> load_corpus_jsonl(const std::string& path) {
    std::istringstream in(io::read_file(path));
    std::vector<LabeledSample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        LabeledSample s;
        s.anchor_frame = j.at("anchor_frame").get<std::int64_t>();
        s.label = behavior_from_string(j.at("label").get<std::string>());
        s.vehicle_id = j.at("vehicle_id").get<std::int64_t>();
        s.window = j.at("window").get<int>();
        s.z = j.at("z").get<std::vector<double>>();
        s.zhat = j.at("zhat").get<std::vector<double>>();
        if (j.contains("truth")) s.truth = j.at("truth").get<estimation::Vec3>();
        const std::size_t w = static_cast<std::size_t>(s.window);
        if (s.z.size() != static_cast<std::size_t>(kSensingRows) * w ||
            s.zhat.size() != static_cast<std::size_t>(kCharacteristicRows) * w) {
            throw std::runtime_error("corpus line " + std::to_string(line_no) +
                                     ": wrong matrix size");
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace drivepred::dataset
