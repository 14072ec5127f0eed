#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "json.hpp"

namespace drivepred::clustering {

using Vec3 = std::array<double, 3>;  // (delta, T, a)

struct EtsConfig {
    double q = 7.0;        // distance weight in the recursive potential update
    double epsilon = 0.45; // replace-vs-insert distance threshold
};

struct Cluster {
    Vec3 center{0.0, 0.0, 0.0};
    double potential = 1.0;
    double variance = 1.0;  // running mean of squared distances of assigned samples
    std::int64_t member_count = 1;
};

// Online clustering state for one estimated vehicle. The accumulators carry
// exactly the sums the recursive potential needs; raw history is never kept.
struct ClusterStore {
    std::vector<Cluster> clusters;
    std::int64_t t = 0;                  // samples ingested so far
    double sq_norm_sum = 0.0;            // sum of z_k . z_k over ingested samples
    Vec3 coord_sum{0.0, 0.0, 0.0};       // per-dimension sums over ingested samples
    Vec3 last_sample{0.0, 0.0, 0.0};     // most recently ingested sample
};

double squared_distance(const Vec3& a, const Vec3& b);

// Potential of a candidate next sample z given the samples ingested so far:
//   P_t(z) = (t-1) / ((t-1)(a_t + 1) - 2 c_t + b_t),  t = store.t + 1.
// Requires store.t >= 1. A degenerate (non-finite or non-positive) denominator
// is treated as the coincident-point limit and returns 1.
double potential_of_sample(const ClusterStore& store, const Vec3& z);

// Recursive update of an existing cluster's potential when sample t arrives:
//   P_t = (t-1) P_{t-1} / (t-2 + P_{t-1} (1 + q ||c - z_{t-1}||^2)).
// Stores the new value on the cluster and returns it. Requires t >= 2.
double update_cluster_potential(Cluster& cluster, const Vec3& z_prev,
                                std::int64_t t, double q);

// lambda_i = gamma_i / sum_j gamma_j, gamma_i = exp(-||z - c_i||^2 / var_i).
// Computed with a max-shift so the normalization never underflows to 0/0.
std::vector<double> similarity(const Vec3& z, const std::vector<Cluster>& clusters);

enum class EtsBranch { created, replaced, selected_existing };

struct EtsResult {
    Vec3 selected{0.0, 0.0, 0.0};
    EtsBranch branch = EtsBranch::created;
};

// One pass of the online clustering procedure: ingest theta_star, refresh all
// potentials, then create / replace / select exactly one way. The returned
// center seeds the next estimation step's bounds.
EtsResult ets_cluster(const Vec3& theta_star, ClusterStore& store,
                      const EtsConfig& cfg);

nlohmann::json store_snapshot(const ClusterStore& store);
ClusterStore store_from_snapshot(const nlohmann::json& j);

}  // namespace drivepred::clustering
