#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace drivepred::traffic {

// Externally sensable state of one vehicle at one timestep.
struct VehicleState {
    double pos = 0.0;  // longitudinal position [m]
    double vel = 0.0;  // [m/s], never negative
    int lane = 1;      // lane index, 1 = leftmost
};

// Car-following parameters. `delta`, `T` and `a` are the estimated triple;
// `b`, `v0` and `s0` stay fixed at the configured base values.
struct IdmParams {
    double delta = 4.0;  // acceleration exponent
    double T = 1.5;      // desired safety time headway [s]
    double a = 1.0;      // desired acceleration [m/s^2]
    double b = 1.5;      // desired deceleration [m/s^2]
    double v0 = 33.3;    // desired velocity [m/s]
    double s0 = 2.0;     // desired minimum gap [m]
};

void validate(const IdmParams& p);  // throws std::invalid_argument

struct MobilParams {
    double politeness = 0.35;  // weight on the neighbors' acceleration changes
    double b_safe = 4.0;       // safe braking limit [m/s^2]
    double delta_a_th = 0.1;   // lane-change incentive threshold [m/s^2]
};

void validate(const MobilParams& p);

// Hard admissible ranges for the estimated triple (delta, T, a).
inline constexpr double kDeltaMin = 3.8, kDeltaMax = 4.2;
inline constexpr double kHeadwayMin = 0.1, kHeadwayMax = 5.0;  // [s]
inline constexpr double kAccelMin = 0.1, kAccelMax = 9.0;      // [m/s^2]

// Distance at which a virtual leader is placed when no preceding vehicle is
// present; it travels at the follower's speed, so the interaction term nearly
// vanishes and the model behaves as on a free road.
inline constexpr double kVirtualLeadDistance = 1000.0;  // [m]

// Incentive value reported for a lane that does not exist. Far below any
// physical value; keeps the characteristic vector at fixed dimension.
inline constexpr double kMissingLaneIncentive = -100.0;  // [m/s^2]

// Nearest surrounding vehicles in the own and both adjacent lanes.
// p_* precede the target (pos >= target pos), f_* follow it.
struct NeighborSet {
    std::optional<VehicleState> p_old, f_old;      // target's current lane
    std::optional<VehicleState> p_new_l, f_new_l;  // lane to the left
    std::optional<VehicleState> p_new_r, f_new_r;  // lane to the right
    bool left_lane_exists = false;
    bool right_lane_exists = false;
};

// Estimated driving characteristic vector [T, a, I_lcl, I_lcr].
struct Characteristic {
    double T = 0.0;      // [s]
    double a = 0.0;      // [m/s^2]
    double i_lcl = 0.0;  // left lane-change incentive [m/s^2]
    double i_lcr = 0.0;  // right lane-change incentive [m/s^2]
};

// Desired gap s*(v, dv) = s0 + v*T + v*dv / (2*sqrt(a*b)).
// No clamping: may drop below s0 when the follower is slower than the leader.
double idm_desired_gap(const IdmParams& p, double v, double dv);

// Follower acceleration a * (1 - (v/v0)^delta - (s*/gap)^2).
// Throws std::domain_error for gap <= 0 (collision state).
double idm_acceleration(const IdmParams& p, double v, double gap, double dv);

// One explicit-Euler step at dt: pos += vel*dt, vel += accel*dt floored at 0.
// Gap is the plain position difference (point vehicles).
VehicleState idm_step(const IdmParams& p, const VehicleState& follower,
                      const VehicleState& preceding, double dt);

struct CollisionError : std::runtime_error {
    std::size_t step;
    explicit CollisionError(std::size_t step_index);
};

// Parameter set active from `start_time` onward.
struct ScheduleEntry {
    double start_time = 0.0;
    IdmParams params;
};

// Drives a follower behind the given leader trajectory, switching parameter
// sets per the schedule. Returns a trajectory of the same length as the
// leader's. Throws CollisionError with the step index if the gap closes.
std::vector<VehicleState> simulate_following(std::span<const ScheduleEntry> schedule,
                                             std::span<const VehicleState> leader,
                                             const VehicleState& follower_init,
                                             double dt);

struct FrameVehicle {
    std::int64_t id = 0;
    VehicleState state;
};

// Nearest vehicle ahead and behind in the target's own lane and in both
// adjacent lanes. `lane_count` bounds the road: lane target.lane + 1 exists
// only when it is <= lane_count.
NeighborSet identify_neighbors(std::span<const FrameVehicle> frame,
                               std::int64_t target_id, int lane_count);

// The six expected accelerations entering the incentive. `*_keep` are without
// the lane change, `*_change` with it. Absent followers leave their pair at
// zero so the corresponding term vanishes.
struct MobilAccels {
    double target_keep = 0.0;
    double target_change = 0.0;
    double new_follower_keep = 0.0;
    double new_follower_change = 0.0;
    double old_follower_keep = 0.0;
    double old_follower_change = 0.0;
};

// I = (a~_T - a_T) + p * (a~_N - a_N + a~_O - a_O)
double mobil_incentive(const MobilAccels& acc, double politeness);

// Safety criterion: the prospective new follower must not brake harder than
// b_safe, i.e. a~_N >= -b_safe (boundary inclusive).
bool mobil_safety(double new_follower_change_accel, double b_safe);

struct FrameContext {
    VehicleState target;
    NeighborSet neighbors;
};

// Assembles [T, a, I_lcl, I_lcr] for one frame. The estimated T and a are
// substituted into `base` for every IDM evaluation, incentives included.
// A missing adjacent lane yields kMissingLaneIncentive.
Characteristic compute_characteristic(const FrameContext& ctx, double est_T,
                                      double est_a, const IdmParams& base,
                                      const MobilParams& mobil);

}  // namespace drivepred::traffic
