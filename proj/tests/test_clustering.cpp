#include <cmath>
#include <vector>

#include "doctest.h"
#include "drivepred/clustering.hpp"
#include "drivepred/rng.hpp"

using namespace drivepred;
using namespace drivepred::clustering;

namespace {

// Raw-history reference: potential from the definition sums, kept entirely
// independent of the accumulator implementation.
double brute_potential(const std::vector<Vec3>& history, const Vec3& z) {
    double sum = 0.0;
    for (const auto& zk : history) {
        double d2 = 0.0;
        for (int i = 0; i < 3; ++i) d2 += (z[i] - zk[i]) * (z[i] - zk[i]);
        sum += d2;
    }
    return 1.0 / (1.0 + sum / static_cast<double>(history.size()));
}

// Literal transcription of the online clustering procedure used as the
// replay oracle: raw history, explicit branch bookkeeping.
struct OracleState {
    std::vector<Vec3> history;
    std::vector<Cluster> clusters;
};

struct OracleOutcome {
    Vec3 selected;
    EtsBranch branch;
};

OracleOutcome oracle_step(OracleState& st, const Vec3& theta, double q, double eps) {
    const auto d2 = [](const Vec3& a, const Vec3& b) {
        double s = 0.0;
        for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return s;
    };
    if (st.history.empty()) {
        st.history.push_back(theta);
        st.clusters.push_back(Cluster{theta, 1.0, 1.0, 1});
        return {theta, EtsBranch::created};
    }
    const double t = static_cast<double>(st.history.size() + 1);
    const double p_new = brute_potential(st.history, theta);
    double p_max = -1.0;
    for (auto& c : st.clusters) {
        c.potential = (t - 1.0) * c.potential /
                      (t - 2.0 + c.potential * (1.0 + q * d2(c.center, st.history.back())));
        p_max = std::max(p_max, c.potential);
    }
    OracleOutcome out{};
    if (p_new > p_max) {
        std::size_t s = 0;
        for (std::size_t i = 1; i < st.clusters.size(); ++i) {
            if (d2(st.clusters[i].center, theta) < d2(st.clusters[s].center, theta)) {
                s = i;
            }
        }
        if (std::sqrt(d2(st.clusters[s].center, theta)) < eps) {
            st.clusters[s].center = theta;
            st.clusters[s].potential = p_new;
            out = {theta, EtsBranch::replaced};
        } else {
            st.clusters.push_back(Cluster{theta, p_new, 1.0, 1});
            out = {theta, EtsBranch::created};
        }
    } else {
        std::size_t best = 0;
        double best_gamma = -1.0;
        for (std::size_t i = 0; i < st.clusters.size(); ++i) {
            const double g =
                std::exp(-d2(theta, st.clusters[i].center) / st.clusters[i].variance);
            if (g > best_gamma) {
                best_gamma = g;
                best = i;
            }
        }
        out = {st.clusters[best].center, EtsBranch::selected_existing};
        std::size_t n = 0;
        for (std::size_t i = 1; i < st.clusters.size(); ++i) {
            if (d2(st.clusters[i].center, theta) < d2(st.clusters[n].center, theta)) {
                n = i;
            }
        }
        st.clusters[n].member_count += 1;
        st.clusters[n].variance += (d2(st.clusters[n].center, theta) -
                                    st.clusters[n].variance) /
                                   static_cast<double>(st.clusters[n].member_count);
    }
    st.history.push_back(theta);
    return out;
}

Vec3 random_theta(Rng& rng) {
    return Vec3{rng.uniform(3.8, 4.2), rng.uniform(0.1, 5.0), rng.uniform(0.1, 9.0)};
}

}  // namespace

TEST_CASE("potential_of_sample hand examples") {
    SUBCASE("coincident points have maximal potential") {
        ClusterStore st;
        ets_cluster(Vec3{0, 0, 0}, st, EtsConfig{});
        CHECK(potential_of_sample(st, Vec3{0, 0, 0}) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("unit offset at t=2") {
        ClusterStore st;
        ets_cluster(Vec3{1, 0, 0}, st, EtsConfig{});
        CHECK(potential_of_sample(st, Vec3{0, 0, 0}) == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("three orthogonal unit vectors at t=3") {
        ClusterStore st;
        EtsConfig cfg;
        ets_cluster(Vec3{1, 0, 0}, st, cfg);
        ets_cluster(Vec3{0, 1, 0}, st, cfg);
        const double got = potential_of_sample(st, Vec3{0, 0, 1});
        const double want = brute_potential({{1, 0, 0}, {0, 1, 0}}, Vec3{0, 0, 1});
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
        CHECK(want == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("requires history") {
        ClusterStore st;
        CHECK_THROWS_AS(potential_of_sample(st, Vec3{0, 0, 0}), std::logic_error);
    }
}

TEST_CASE("update_cluster_potential") {
    SUBCASE("coincident sample preserves maximal potential") {
        Cluster c{Vec3{1, 2, 3}, 1.0, 1.0, 1};
        CHECK(update_cluster_potential(c, Vec3{1, 2, 3}, 2, 7.0) ==
              doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("worked arithmetic") {
        Cluster c{Vec3{0, 0, 0}, 1.0, 1.0, 1};
        const double got = update_cluster_potential(c, Vec3{1, 0, 0}, 3, 7.0);
        CHECK(got == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
        CHECK(c.potential == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
    }
    SUBCASE("far samples collapse the potential and never raise it") {
        // Sequence oracle: the first far update divides the potential by
        // 1 + q*d^2; afterwards the recursion sits at or below that level.
        Cluster c{Vec3{0, 0, 0}, 1.0, 1.0, 1};
        const double d2 = 27.0;
        update_cluster_potential(c, Vec3{3, 3, 3}, 2, 7.0);
        CHECK(c.potential == doctest::Approx(1.0 / (1.0 + 7.0 * d2)).epsilon(1e-12));
        double prev = c.potential;
        for (std::int64_t t = 3; t < 12; ++t) {
            update_cluster_potential(c, Vec3{3, 3, 3}, t, 7.0);
            CHECK(c.potential <= prev + 1e-15);
            prev = c.potential;
        }
        CHECK(c.potential < 0.01);
    }
}

TEST_CASE("similarity") {
    SUBCASE("single cluster normalizes to one") {
        const std::vector<Cluster> cs{{Vec3{1, 1, 1}, 1.0, 1.0, 1}};
        const auto s = similarity(Vec3{4, 5, 6}, cs);
        REQUIRE(s.size() == 1);
        CHECK(s[0] == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("equidistant clusters share evenly") {
        const std::vector<Cluster> cs{{Vec3{1, 0, 0}, 1.0, 1.0, 1},
                                      {Vec3{-1, 0, 0}, 1.0, 1.0, 1}};
        const auto s = similarity(Vec3{0, 0, 0}, cs);
        CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("hand-evaluated weights") {
        const std::vector<Cluster> cs{{Vec3{1, 0, 0}, 1.0, 1.0, 1},
                                      {Vec3{2, 0, 0}, 1.0, 1.0, 1}};
        const auto s = similarity(Vec3{0, 0, 0}, cs);
        CHECK(s[0] == doctest::Approx(0.9525741268224333).epsilon(1e-12));
        CHECK(s[1] == doctest::Approx(0.047425873177566774).epsilon(1e-12));
    }
    SUBCASE("valid distribution under fuzz, including remote clusters") {
        Rng rng(3);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<Cluster> cs;
            const int n = 1 + static_cast<int>(rng.uniform_int(6));
            for (int i = 0; i < n; ++i) {
                cs.push_back(Cluster{Vec3{rng.uniform(-50, 50), rng.uniform(-50, 50),
                                          rng.uniform(-50, 50)},
                                     1.0, rng.uniform(0.01, 2.0), 1});
            }
            const auto s = similarity(
                Vec3{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)},
                cs);
            double sum = 0.0;
            for (double v : s) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("ets_cluster scripted streams") {
    const EtsConfig cfg;

    SUBCASE("empty store creates the first cluster") {
        ClusterStore st;
        const auto r = ets_cluster(Vec3{4.0, 1.5, 2.0}, st, cfg);
        CHECK(r.branch == EtsBranch::created);
        CHECK(r.selected == Vec3{4.0, 1.5, 2.0});
        REQUIRE(st.clusters.size() == 1);
        CHECK(st.clusters[0].potential == 1.0);
        CHECK(st.t == 1);
    }

    SUBCASE("repeated sample keeps one cluster at the sample") {
        ClusterStore st;
        const Vec3 theta{4.0, 1.5, 2.0};
        std::vector<EtsBranch> branches;
        for (int i = 0; i < 10; ++i) {
            branches.push_back(ets_cluster(theta, st, cfg).branch);
        }
        CHECK(st.clusters.size() == 1);
        CHECK(st.clusters[0].center == theta);
        // Hand trace: creation, then the potential of every later coincident
        // sample ties the cluster's (both 1), so the similarity branch runs.
        CHECK(branches[0] == EtsBranch::created);
        for (std::size_t i = 1; i < branches.size(); ++i) {
            CHECK(branches[i] == EtsBranch::selected_existing);
        }
        CHECK(st.clusters[0].potential == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("two block regimes stabilize at two clusters") {
        ClusterStore st;
        const Vec3 a{4.0, 1.0, 1.0};
        const Vec3 b{4.0, 2.0, 2.0};  // distance sqrt(2) > epsilon
        for (int rep = 0; rep < 2; ++rep) {
            for (int i = 0; i < 10; ++i) ets_cluster(a, st, cfg);
            for (int i = 0; i < 10; ++i) ets_cluster(b, st, cfg);
        }
        CHECK(st.clusters.size() == 2);
        // Hand trace of the first block switch: the third b-sample is the
        // first whose potential beats the refreshed cluster potential, and
        // its distance exceeds epsilon, so it is inserted (step t = 13).
        ClusterStore st2;
        for (int i = 0; i < 10; ++i) ets_cluster(a, st2, cfg);
        CHECK(ets_cluster(b, st2, cfg).branch == EtsBranch::selected_existing);
        CHECK(ets_cluster(b, st2, cfg).branch == EtsBranch::selected_existing);
        const auto r13 = ets_cluster(b, st2, cfg);
        CHECK(r13.branch == EtsBranch::created);
        CHECK(st2.clusters.size() == 2);
        CHECK(st2.clusters[1].center == b);
    }

    SUBCASE("drifting samples within epsilon replace the center") {
        ClusterStore st;
        bool saw_replace = false;
        for (int i = 0; i < 20; ++i) {
            const Vec3 z{4.0, 1.0 + 0.02 * i, 1.0};
            const auto r = ets_cluster(z, st, cfg);
            if (r.branch == EtsBranch::replaced) {
                saw_replace = true;
                CHECK(r.selected == z);
            }
        }
        CHECK(saw_replace);
        CHECK(st.clusters.size() == 1);  // drift stays within epsilon of the center
    }
}

TEST_CASE("accumulator potentials match the raw-history definition") {
    Rng rng(99);
    for (int stream = 0; stream < 20; ++stream) {
        ClusterStore st;
        std::vector<Vec3> history;
        const EtsConfig cfg;
        for (int i = 0; i < 100; ++i) {
            const Vec3 z = random_theta(rng);
            if (!history.empty()) {
                const double got = potential_of_sample(st, z);
                const double want = brute_potential(history, z);
                CHECK(std::abs(got - want) <= 1e-9 * std::max(1.0, std::abs(want)));
            }
            ets_cluster(z, st, cfg);
            history.push_back(z);
        }
    }
}

TEST_CASE("ets_cluster replays the literal procedure") {
    Rng rng(123);
    const EtsConfig cfg;
    for (int stream = 0; stream < 12; ++stream) {
        ClusterStore st;
        OracleState oracle;
        // Noisy repeats and jumps so all three branches occur. Every sample
        // carries continuous noise; exact repeats would park the potential
        // comparison on a knife edge where the two evaluation routes may
        // round to different sides.
        Vec3 anchor = random_theta(rng);
        for (int i = 0; i < 120; ++i) {
            if (rng.uniform01() > 0.8) anchor = random_theta(rng);
            Vec3 z = anchor;
            for (auto& v : z) v += rng.normal() * 0.03;
            const auto got = ets_cluster(z, st, cfg);
            const auto want = oracle_step(oracle, z, cfg.q, cfg.epsilon);
            REQUIRE(got.branch == want.branch);
            for (int d = 0; d < 3; ++d) {
                REQUIRE(got.selected[d] == doctest::Approx(want.selected[d]).epsilon(1e-9));
            }
            REQUIRE(st.clusters.size() == oracle.clusters.size());
            for (std::size_t k = 0; k < st.clusters.size(); ++k) {
                REQUIRE(st.clusters[k].potential ==
                        doctest::Approx(oracle.clusters[k].potential).epsilon(1e-9));
                REQUIRE(st.clusters[k].member_count == oracle.clusters[k].member_count);
            }
        }
    }
}

TEST_CASE("ets invariants under fuzz") {
    Rng rng(321);
    const EtsConfig cfg;
    ClusterStore st;
    std::size_t prev_count = 0;
    for (int i = 0; i < 1000; ++i) {
        const Vec3 z = random_theta(rng);
        std::vector<Vec3> centers_before;
        for (const auto& c : st.clusters) centers_before.push_back(c.center);
        const auto r = ets_cluster(z, st, cfg);

        // Count never decreases; only an insert grows it.
        CHECK(st.clusters.size() >= prev_count);
        CHECK(st.clusters.size() - prev_count <= 1);
        prev_count = st.clusters.size();

        // Selected center is the sample itself or a pre-existing center.
        if (r.branch == EtsBranch::selected_existing) {
            bool found = false;
            for (const auto& c : centers_before) {
                if (c == r.selected) found = true;
            }
            CHECK(found);
        } else {
            CHECK(r.selected == z);
        }

        for (const auto& c : st.clusters) {
            CHECK(c.potential > 0.0);
            CHECK(c.potential <= 1.0 + 1e-12);
            CHECK(c.variance > 0.0);
            CHECK(c.member_count >= 1);
        }
    }
}

TEST_CASE("store snapshot round-trips") {
    Rng rng(555);
    ClusterStore st;
    const EtsConfig cfg;
    for (int i = 0; i < 50; ++i) ets_cluster(random_theta(rng), st, cfg);

    const auto j = store_snapshot(st);
    const auto back = store_from_snapshot(j);
    CHECK(back.t == st.t);
    CHECK(back.sq_norm_sum == st.sq_norm_sum);
    CHECK(back.coord_sum == st.coord_sum);
    CHECK(back.last_sample == st.last_sample);
    REQUIRE(back.clusters.size() == st.clusters.size());
    for (std::size_t i = 0; i < st.clusters.size(); ++i) {
        CHECK(back.clusters[i].center == st.clusters[i].center);
        CHECK(back.clusters[i].potential == st.clusters[i].potential);
        CHECK(back.clusters[i].variance == st.clusters[i].variance);
        CHECK(back.clusters[i].member_count == st.clusters[i].member_count);
    }
}
