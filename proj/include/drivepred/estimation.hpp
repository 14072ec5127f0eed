#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "drivepred/clustering.hpp"
#include "drivepred/parallel.hpp"
#include "drivepred/traffic.hpp"

namespace drivepred::estimation {

using Vec3 = clustering::Vec3;  // (delta, T, a)

// Search box for the estimated triple, always contained in the hard bounds.
struct ParamBounds {
    Vec3 lo{traffic::kDeltaMin, traffic::kHeadwayMin, traffic::kAccelMin};
    Vec3 hi{traffic::kDeltaMax, traffic::kHeadwayMax, traffic::kAccelMax};

    static ParamBounds hard() { return ParamBounds{}; }
    bool contains(const Vec3& v) const;
    Vec3 clamp(Vec3 v) const;
    Vec3 center() const;
    Vec3 width() const;
};

void validate(const ParamBounds& b);  // throws std::invalid_argument

// Moving horizon of measured traces: follower speed, leader speed and gap,
// sampled at dt. All vectors share the same length.
struct EstimationWindow {
    std::vector<double> follower_vel;  // [m/s]
    std::vector<double> leader_vel;    // [m/s]
    std::vector<double> gap;           // [m], > 0
    double dt = 0.1;
};

void validate(const EstimationWindow& w);

struct GaConfig {
    int population_size = 40;
    int generations = 30;
    double crossover_rate = 0.9;
    double mutation_rate = 0.2;         // per-gene probability
    int elite_count = 2;
    int tournament_size = 3;
    double mutation_sigma_frac = 0.1;   // sigma as a fraction of bound width
    double guided_fraction = 0.5;       // initial-population share near the seed center
    std::uint64_t rng_seed = 1;
    bool parallel = true;
};

void validate(const GaConfig& c);

struct ThetaEstimate {
    Vec3 theta{0.0, 0.0, 0.0};
    double fit_error = 0.0;
};

// Mean absolute difference between the measured follower acceleration
// (forward difference of follower_vel; the final step has none and is
// excluded) and the modeled acceleration at each step's measured state with
// theta substituted into `base`.
double fitting_cost(const Vec3& theta, const EstimationWindow& window,
                    const traffic::IdmParams& base);

using CostFn = std::function<double(const Vec3&)>;

// Evaluates the cost of every individual into `out` (same indexing). The
// parallel flavor distributes individuals across threads; each slot is
// independent, so both flavors produce identical results.
void evaluate_population(const CostFn& cost, std::span<const Vec3> population,
                         std::span<double> out, ExecMode mode);

// Bounded GA: tournament selection, arithmetic crossover, Gaussian mutation,
// elitism. Every individual is clamped to `bounds`. When `seed_center` is
// given, a configured fraction of the initial population is sampled around it.
// Deterministic for a fixed rng_seed regardless of thread count.
ThetaEstimate ga_optimize(const CostFn& cost, const ParamBounds& bounds,
                          const GaConfig& cfg,
                          const std::optional<Vec3>& seed_center = std::nullopt);

// Next-step search box [center*gamma1, center*gamma2] componentwise,
// intersected with the hard bounds; an empty intersection falls back to the
// full hard bound for that component.
ParamBounds update_bounds(const Vec3& center, double gamma1 = 0.55,
                          double gamma2 = 1.45);

struct StepRecord {
    ThetaEstimate estimate;
    Vec3 selected_center{0.0, 0.0, 0.0};
    ParamBounds bounds_used;
    clustering::EtsBranch branch = clustering::EtsBranch::created;
};

struct EstimatorOptions {
    traffic::IdmParams base;
    GaConfig ga;
    clustering::EtsConfig ets;
    double gamma1 = 0.55;
    double gamma2 = 1.45;
    bool clustering = true;  // off: hard bounds and uniform init every step
};

// Per-vehicle moving-horizon estimator. Each step fits the window under the
// current bounds, feeds the estimate to the online clustering, and re-centers
// the bounds on the selected cluster center for the next step.
class MovingHorizonEstimator {
public:
    explicit MovingHorizonEstimator(EstimatorOptions opt);

    StepRecord step(const EstimationWindow& window);

    const clustering::ClusterStore& store() const { return store_; }
    const ParamBounds& bounds() const { return bounds_; }
    std::uint64_t steps_taken() const { return step_index_; }

private:
    EstimatorOptions opt_;
    clustering::ClusterStore store_;
    ParamBounds bounds_ = ParamBounds::hard();
    std::optional<Vec3> seed_center_;
    std::uint64_t step_index_ = 0;
};

}  // namespace drivepred::estimation
