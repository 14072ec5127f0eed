#include "drivepred/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "drivepred/rng.hpp"

namespace drivepred::estimation {

bool ParamBounds::contains(const Vec3& v) const {
    for (int i = 0; i < 3; ++i) {
        if (v[i] < lo[i] || v[i] > hi[i]) return false;
    }
    return true;
}

Vec3 ParamBounds::clamp(Vec3 v) const {
    for (int i = 0; i < 3; ++i) v[i] = std::clamp(v[i], lo[i], hi[i]);
    return v;
}

Vec3 ParamBounds::center() const {
    return Vec3{(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0,
                (lo[2] + hi[2]) / 2.0};
}

Vec3 ParamBounds::width() const {
    return Vec3{hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]};
}

void validate(const ParamBounds& b) {
    const ParamBounds hard = ParamBounds::hard();
    for (int i = 0; i < 3; ++i) {
        if (!(b.lo[i] < b.hi[i])) {
            throw std::invalid_argument("ParamBounds: lo must be < hi");
        }
        if (b.lo[i] < hard.lo[i] || b.hi[i] > hard.hi[i]) {
            throw std::invalid_argument("ParamBounds: outside hard bounds");
        }
    }
}

void validate(const EstimationWindow& w) {
    const std::size_t n = w.follower_vel.size();
    if (n < 2 || w.leader_vel.size() != n || w.gap.size() != n) {
        throw std::invalid_argument("EstimationWindow: inconsistent lengths");
    }
    if (!(w.dt > 0.0)) {
        throw std::invalid_argument("EstimationWindow: dt must be positive");
    }
    for (double g : w.gap) {
        if (!(g > 0.0)) {
            throw std::domain_error("EstimationWindow: non-positive gap");
        }
    }
}

void validate(const GaConfig& c) {
    if (c.population_size < 2 * c.elite_count || c.elite_count < 0) {
        throw std::invalid_argument("GaConfig: population too small for elites");
    }
    if (c.crossover_rate < 0.0 || c.crossover_rate > 1.0 ||
        c.mutation_rate < 0.0 || c.mutation_rate > 1.0 ||
        c.guided_fraction < 0.0 || c.guided_fraction > 1.0) {
        throw std::invalid_argument("GaConfig: rates must lie in [0, 1]");
    }
    if (c.generations < 1 || c.tournament_size < 1) {
        throw std::invalid_argument("GaConfig: counts must be positive");
    }
}

double fitting_cost(const Vec3& theta, const EstimationWindow& window,
                    const traffic::IdmParams& base) {
    validate(window);
    traffic::IdmParams p = base;
    p.delta = theta[0];
    p.T = theta[1];
    p.a = theta[2];

    const std::size_t n = window.follower_vel.size();
    double sum = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double measured =
            (window.follower_vel[i + 1] - window.follower_vel[i]) / window.dt;
        const double dv = window.follower_vel[i] - window.leader_vel[i];
        const double modeled =
            traffic::idm_acceleration(p, window.follower_vel[i], window.gap[i], dv);
        sum += std::abs(modeled - measured);
    }
    return sum / static_cast<double>(n - 1);
}

void evaluate_population(const CostFn& cost, std::span<const Vec3> population,
                         std::span<double> out, ExecMode mode) {
    if (out.size() != population.size()) {
        throw std::invalid_argument("evaluate_population: size mismatch");
    }
    const std::int64_t n = static_cast<std::int64_t>(population.size());
    if (mode == ExecMode::parallel) {
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i) {
            out[i] = cost(population[i]);
        }
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            out[i] = cost(population[i]);
        }
    }
}

namespace {

std::size_t tournament_pick(Rng& rng, const std::vector<double>& costs,
                            int tournament_size) {
    std::size_t best = static_cast<std::size_t>(rng.uniform_int(costs.size()));
    for (int k = 1; k < tournament_size; ++k) {
        const std::size_t cand =
            static_cast<std::size_t>(rng.uniform_int(costs.size()));
        if (costs[cand] < costs[best]) best = cand;
    }
    return best;
}

}  // namespace

ThetaEstimate ga_optimize(const CostFn& cost, const ParamBounds& bounds,
                          const GaConfig& cfg,
                          const std::optional<Vec3>& seed_center) {
    validate(bounds);
    validate(cfg);
    Rng rng(cfg.rng_seed);
    const Vec3 width = bounds.width();
    const ExecMode mode = cfg.parallel ? ExecMode::parallel : ExecMode::serial;

    const std::size_t pop_size = static_cast<std::size_t>(cfg.population_size);
    std::vector<Vec3> pop(pop_size);
    const std::size_t n_guided =
        seed_center.has_value()
            ? static_cast<std::size_t>(
                  std::lround(cfg.guided_fraction * cfg.population_size))
            : 0;
    for (std::size_t i = 0; i < pop_size; ++i) {
        Vec3 v;
        if (i < n_guided) {
            for (int d = 0; d < 3; ++d) {
                v[d] = (*seed_center)[d] +
                       rng.normal() * cfg.mutation_sigma_frac * width[d];
            }
        } else {
            for (int d = 0; d < 3; ++d) {
                v[d] = rng.uniform(bounds.lo[d], bounds.hi[d]);
            }
        }
        pop[i] = bounds.clamp(v);
    }

    std::vector<double> costs(pop_size);
    evaluate_population(cost, pop, costs, mode);

    Vec3 best = pop[0];
    double best_cost = costs[0];
    auto track_best = [&](const std::vector<Vec3>& p, const std::vector<double>& c) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (c[i] < best_cost) {
                best_cost = c[i];
                best = p[i];
            }
        }
    };
    track_best(pop, costs);

    std::vector<std::size_t> order(pop_size);
    std::vector<Vec3> next(pop_size);
    std::vector<double> next_costs(pop_size);
    for (int g = 0; g < cfg.generations; ++g) {
        for (std::size_t i = 0; i < pop_size; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return costs[a] < costs[b];
        });

        std::size_t filled = 0;
        for (int e = 0; e < cfg.elite_count; ++e) {
            next[filled++] = pop[order[static_cast<std::size_t>(e)]];
        }
        while (filled < pop_size) {
            const Vec3& p1 = pop[tournament_pick(rng, costs, cfg.tournament_size)];
            const Vec3& p2 = pop[tournament_pick(rng, costs, cfg.tournament_size)];
            Vec3 child = p1;
            if (rng.uniform01() < cfg.crossover_rate) {
                const double w = rng.uniform01();
                for (int d = 0; d < 3; ++d) {
                    child[d] = w * p1[d] + (1.0 - w) * p2[d];
                }
            }
            for (int d = 0; d < 3; ++d) {
                if (rng.uniform01() < cfg.mutation_rate) {
                    child[d] += rng.normal() * cfg.mutation_sigma_frac * width[d];
                }
            }
            next[filled++] = bounds.clamp(child);
        }
        pop.swap(next);
        evaluate_population(cost, pop, costs, mode);
        track_best(pop, costs);
    }
    return ThetaEstimate{best, best_cost};
}

ParamBounds update_bounds(const Vec3& center, double gamma1, double gamma2) {
    const ParamBounds hard = ParamBounds::hard();
    ParamBounds out;
    for (int i = 0; i < 3; ++i) {
        const double lo = std::max(center[i] * gamma1, hard.lo[i]);
        const double hi = std::min(center[i] * gamma2, hard.hi[i]);
        if (lo < hi) {
            out.lo[i] = lo;
            out.hi[i] = hi;
        } else {
            out.lo[i] = hard.lo[i];
            out.hi[i] = hard.hi[i];
        }
    }
    return out;
}

MovingHorizonEstimator::MovingHorizonEstimator(EstimatorOptions opt)
    : opt_(std::move(opt)) {
    traffic::validate(opt_.base);
    validate(opt_.ga);
}

StepRecord MovingHorizonEstimator::step(const EstimationWindow& window) {
    GaConfig ga = opt_.ga;
    ga.rng_seed = derive_seed(opt_.ga.rng_seed, step_index_);

    StepRecord rec;
    rec.bounds_used = bounds_;
    const auto cost = [&](const Vec3& theta) {
        return fitting_cost(theta, window, opt_.base);
    };
    rec.estimate = ga_optimize(cost, bounds_, ga,
                               opt_.clustering ? seed_center_ : std::nullopt);

    if (opt_.clustering) {
        const auto ets =
            clustering::ets_cluster(rec.estimate.theta, store_, opt_.ets);
        rec.selected_center = ets.selected;
        rec.branch = ets.branch;
        bounds_ = update_bounds(ets.selected, opt_.gamma1, opt_.gamma2);
        seed_center_ = ets.selected;
    } else {
        rec.selected_center = rec.estimate.theta;
        rec.branch = clustering::EtsBranch::selected_existing;
    }
    ++step_index_;
    return rec;
}

}  // namespace drivepred::estimation
