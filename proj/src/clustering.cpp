#include "drivepred/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace drivepred::clustering {

double squared_distance(const Vec3& a, const Vec3& b) {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

namespace {

double dot(const Vec3& a, const Vec3& b) {
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

void ingest(ClusterStore& store, const Vec3& z) {
    store.t += 1;
    store.sq_norm_sum += dot(z, z);
    for (int i = 0; i < 3; ++i) store.coord_sum[i] += z[i];
    store.last_sample = z;
}

std::size_t nearest_cluster(const std::vector<Cluster>& clusters, const Vec3& z) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < clusters.size(); ++i) {
        const double d = squared_distance(clusters[i].center, z);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

}  // namespace

double potential_of_sample(const ClusterStore& store, const Vec3& z) {
    if (store.t < 1) {
        throw std::logic_error("potential_of_sample: store has no history");
    }
    const double t = static_cast<double>(store.t + 1);
    const double a_t = dot(z, z);
    const double b_t = store.sq_norm_sum;
    const double c_t = dot(z, store.coord_sum);
    const double denom = (t - 1.0) * (a_t + 1.0) - 2.0 * c_t + b_t;
    const double p = (t - 1.0) / denom;
    if (!std::isfinite(p) || denom <= 0.0) {
        return 1.0;  // coincident-point limit
    }
    return p;
}

double update_cluster_potential(Cluster& cluster, const Vec3& z_prev,
                                std::int64_t t, double q) {
    if (t < 2) {
        throw std::logic_error("update_cluster_potential: t must be >= 2");
    }
    const double td = static_cast<double>(t);
    const double prev = cluster.potential;
    const double d2 = squared_distance(cluster.center, z_prev);
    cluster.potential =
        (td - 1.0) * prev / (td - 2.0 + prev * (1.0 + q * d2));
    return cluster.potential;
}

std::vector<double> similarity(const Vec3& z, const std::vector<Cluster>& clusters) {
    if (clusters.empty()) {
        throw std::invalid_argument("similarity: no clusters");
    }
    std::vector<double> expo(clusters.size());
    double max_e = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < clusters.size(); ++i) {
        expo[i] = -squared_distance(z, clusters[i].center) / clusters[i].variance;
        max_e = std::max(max_e, expo[i]);
    }
    double sum = 0.0;
    std::vector<double> out(clusters.size());
    for (std::size_t i = 0; i < clusters.size(); ++i) {
        out[i] = std::exp(expo[i] - max_e);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

EtsResult ets_cluster(const Vec3& theta_star, ClusterStore& store,
                      const EtsConfig& cfg) {
    if (store.t == 0) {
        ingest(store, theta_star);
        store.clusters.push_back(Cluster{theta_star, 1.0, 1.0, 1});
        return EtsResult{theta_star, EtsBranch::created};
    }

    const std::int64_t t = store.t + 1;
    const double p_new = potential_of_sample(store, theta_star);
    double p_max = -std::numeric_limits<double>::infinity();
    for (auto& c : store.clusters) {
        p_max = std::max(p_max,
                         update_cluster_potential(c, store.last_sample, t, cfg.q));
    }

    EtsResult result;
    if (p_new > p_max) {
        const std::size_t s = nearest_cluster(store.clusters, theta_star);
        const double dist =
            std::sqrt(squared_distance(store.clusters[s].center, theta_star));
        if (dist < cfg.epsilon) {
            store.clusters[s].center = theta_star;
            store.clusters[s].potential = p_new;
            result = EtsResult{theta_star, EtsBranch::replaced};
        } else {
            store.clusters.push_back(Cluster{theta_star, p_new, 1.0, 1});
            result = EtsResult{theta_star, EtsBranch::created};
        }
    } else {
        const auto lambda = similarity(theta_star, store.clusters);
        std::size_t l = 0;
        for (std::size_t i = 1; i < lambda.size(); ++i) {
            if (lambda[i] > lambda[l]) l = i;
        }
        result = EtsResult{store.clusters[l].center, EtsBranch::selected_existing};

        // Variance upkeep: the sample joins its nearest cluster's running
        // mean of squared distances.
        const std::size_t n = nearest_cluster(store.clusters, theta_star);
        Cluster& c = store.clusters[n];
        const double d2 = squared_distance(c.center, theta_star);
        c.member_count += 1;
        c.variance += (d2 - c.variance) / static_cast<double>(c.member_count);
    }
    ingest(store, theta_star);
    return result;
}

nlohmann::json store_snapshot(const ClusterStore& store) {
    nlohmann::json j;
    j["t"] = store.t;
    j["sq_norm_sum"] = store.sq_norm_sum;
    j["coord_sum"] = store.coord_sum;
    j["last_sample"] = store.last_sample;
    auto arr = nlohmann::json::array();
    for (const auto& c : store.clusters) {
        arr.push_back({{"center", c.center},
                       {"potential", c.potential},
                       {"variance", c.variance},
                       {"member_count", c.member_count}});
    }
    j["clusters"] = arr;
    return j;
}

ClusterStore store_from_snapshot(const nlohmann::json& j) {
    ClusterStore store;
    store.t = j.at("t").get<std::int64_t>();
    store.sq_norm_sum = j.at("sq_norm_sum").get<double>();
    store.coord_sum = j.at("coord_sum").get<Vec3>();
    store.last_sample = j.at("last_sample").get<Vec3>();
    for (const auto& c : j.at("clusters")) {
        Cluster cl;
        cl.center = c.at("center").get<Vec3>();
        cl.potential = c.at("potential").get<double>();
        cl.variance = c.at("variance").get<double>();
        cl.member_count = c.at("member_count").get<std::int64_t>();
        store.clusters.push_back(cl);
    }
    return store;
}

}  // namespace drivepred::clustering
