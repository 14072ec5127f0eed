#include "drivepred/traffic.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace drivepred::traffic {

void validate(const IdmParams& p) {
    if (!(p.T > 0.0 && p.a > 0.0 && p.b > 0.0 && p.v0 > 0.0 && p.s0 >= 0.0 &&
          p.delta > 0.0)) {
        throw std::invalid_argument("IdmParams out of range");
    }
}

void validate(const MobilParams& p) {
    if (!(p.politeness >= 0.0 && p.politeness <= 1.0 && p.b_safe > 0.0)) {
        throw std::invalid_argument("MobilParams out of range");
    }
}

double idm_desired_gap(const IdmParams& p, double v, double dv) {
    return p.s0 + v * p.T + v * dv / (2.0 * std::sqrt(p.a * p.b));
}

double idm_acceleration(const IdmParams& p, double v, double gap, double dv) {
    if (gap <= 0.0) {
        throw std::domain_error("idm_acceleration: non-positive gap " +
                                std::to_string(gap));
    }
    const double free_term = std::pow(v / p.v0, p.delta);
    const double s_star = idm_desired_gap(p, v, dv);
    const double interaction = s_star / gap;
    return p.a * (1.0 - free_term - interaction * interaction);
}

VehicleState idm_step(const IdmParams& p, const VehicleState& follower,
                      const VehicleState& preceding, double dt) {
    const double gap = preceding.pos - follower.pos;
    const double dv = follower.vel - preceding.vel;
    const double accel = idm_acceleration(p, follower.vel, gap, dv);
    VehicleState next = follower;
    next.pos = follower.pos + follower.vel * dt;
    next.vel = std::max(0.0, follower.vel + accel * dt);
    return next;
}

CollisionError::CollisionError(std::size_t step_index)
    : std::runtime_error("collision at step " + std::to_string(step_index)),
      step(step_index) {}

std::vector<VehicleState> simulate_following(std::span<const ScheduleEntry> schedule,
                                             std::span<const VehicleState> leader,
                                             const VehicleState& follower_init,
                                             double dt) {
    if (schedule.empty()) {
        throw std::invalid_argument("simulate_following: empty schedule");
    }
    if (leader.empty()) {
        throw std::invalid_argument("simulate_following: empty leader trajectory");
    }
    if (!(dt > 0.0)) {
        throw std::invalid_argument("simulate_following: dt must be positive");
    }
    if (!(leader.front().pos > follower_init.pos)) {
        throw std::invalid_argument("simulate_following: leader not ahead at t=0");
    }
    if (schedule.front().start_time > 0.0) {
        throw std::invalid_argument(
            "simulate_following: schedule does not cover t=0");
    }

    std::vector<VehicleState> out;
    out.reserve(leader.size());
    out.push_back(follower_init);
    std::size_t active = 0;
    for (std::size_t i = 0; i + 1 < leader.size(); ++i) {
        const double t = static_cast<double>(i) * dt;
        while (active + 1 < schedule.size() &&
               schedule[active + 1].start_time <= t) {
            ++active;
        }
        if (leader[i].pos - out[i].pos <= 0.0) {
            throw CollisionError(i);
        }
        out.push_back(idm_step(schedule[active].params, out[i], leader[i], dt));
    }
    if (leader.back().pos - out.back().pos <= 0.0) {
        throw CollisionError(leader.size() - 1);
    }
    return out;
}

namespace {

// Nearest vehicle ahead of (pos >= target) and behind (pos < target) the
// target in the given lane. Ties ahead resolve to the smaller id for
// determinism.
void scan_lane(std::span<const FrameVehicle> frame, std::int64_t target_id,
               double target_pos, int lane, std::optional<VehicleState>& ahead,
               std::optional<VehicleState>& behind) {
    double best_ahead = std::numeric_limits<double>::infinity();
    double best_behind = std::numeric_limits<double>::infinity();
    std::int64_t ahead_id = std::numeric_limits<std::int64_t>::max();
    std::int64_t behind_id = std::numeric_limits<std::int64_t>::max();
    for (const auto& v : frame) {
        if (v.id == target_id || v.state.lane != lane) continue;
        const double d = v.state.pos - target_pos;
        if (d >= 0.0) {
            if (d < best_ahead || (d == best_ahead && v.id < ahead_id)) {
                best_ahead = d;
                ahead_id = v.id;
                ahead = v.state;
            }
        } else {
            if (-d < best_behind || (-d == best_behind && v.id < behind_id)) {
                best_behind = -d;
                behind_id = v.id;
                behind = v.state;
            }
        }
    }
}

}  // namespace

NeighborSet identify_neighbors(std::span<const FrameVehicle> frame,
                               std::int64_t target_id, int lane_count) {
    const FrameVehicle* target = nullptr;
    for (const auto& v : frame) {
        if (v.id == target_id) {
            target = &v;
            break;
        }
    }
    if (target == nullptr) {
        throw std::invalid_argument("identify_neighbors: target not in frame");
    }
    NeighborSet out;
    const int lane = target->state.lane;
    out.left_lane_exists = lane - 1 >= 1;
    out.right_lane_exists = lane + 1 <= lane_count;
    scan_lane(frame, target_id, target->state.pos, lane, out.p_old, out.f_old);
    if (out.left_lane_exists) {
        scan_lane(frame, target_id, target->state.pos, lane - 1, out.p_new_l,
                  out.f_new_l);
    }
    if (out.right_lane_exists) {
        scan_lane(frame, target_id, target->state.pos, lane + 1, out.p_new_r,
                  out.f_new_r);
    }
    return out;
}

double mobil_incentive(const MobilAccels& acc, double politeness) {
    return (acc.target_change - acc.target_keep) +
           politeness * (acc.new_follower_change - acc.new_follower_keep +
                         acc.old_follower_change - acc.old_follower_keep);
}

bool mobil_safety(double new_follower_change_accel, double b_safe) {
    return new_follower_change_accel >= -b_safe;
}

namespace {

// Acceleration of `self` following `leader`; a missing leader is replaced by
// the virtual vehicle kVirtualLeadDistance ahead at self's speed.
double accel_following(const IdmParams& p, const VehicleState& self,
                       const std::optional<VehicleState>& leader) {
    if (leader.has_value()) {
        return idm_acceleration(p, self.vel, leader->pos - self.pos,
                                self.vel - leader->vel);
    }
    return idm_acceleration(p, self.vel, kVirtualLeadDistance, 0.0);
}

double incentive_for_direction(const FrameContext& ctx, const IdmParams& p,
                               const MobilParams& mobil, bool lane_exists,
                               const std::optional<VehicleState>& p_new,
                               const std::optional<VehicleState>& f_new) {
    if (!lane_exists) return kMissingLaneIncentive;

    MobilAccels acc;
    acc.target_keep = accel_following(p, ctx.target, ctx.neighbors.p_old);
    acc.target_change = accel_following(p, ctx.target, p_new);
    if (f_new.has_value()) {
        acc.new_follower_keep = accel_following(p, *f_new, p_new);
        acc.new_follower_change = accel_following(p, *f_new, ctx.target);
    }
    if (ctx.neighbors.f_old.has_value()) {
        acc.old_follower_keep =
            accel_following(p, *ctx.neighbors.f_old, ctx.target);
        acc.old_follower_change =
            accel_following(p, *ctx.neighbors.f_old, ctx.neighbors.p_old);
    }
    return mobil_incentive(acc, mobil.politeness);
}

}  // namespace

Characteristic compute_characteristic(const FrameContext& ctx, double est_T,
                                      double est_a, const IdmParams& base,
                                      const MobilParams& mobil) {
    Characteristic out;
    out.T = std::clamp(est_T, kHeadwayMin, kHeadwayMax);
    out.a = std::clamp(est_a, kAccelMin, kAccelMax);

    IdmParams p = base;
    p.T = out.T;
    p.a = out.a;

    out.i_lcl = incentive_for_direction(ctx, p, mobil,
                                        ctx.neighbors.left_lane_exists,
                                        ctx.neighbors.p_new_l,
                                        ctx.neighbors.f_new_l);
    out.i_lcr = incentive_for_direction(ctx, p, mobil,
                                        ctx.neighbors.right_lane_exists,
                                        ctx.neighbors.p_new_r,
                                        ctx.neighbors.f_new_r);
    return out;
}

}  // namespace drivepred::traffic
