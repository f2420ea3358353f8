#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "constraints.hpp"
#include "generators.hpp"
#include "oracles.hpp"
#include "sagin/env.hpp"

using namespace sagin;
using namespace sagin::env;

namespace {

ScenarioConfig small() {
    ScenarioConfig c;
    c.horizon = 30;
    return c;
}

std::vector<int> zeros_discrete(const Env& e) { return std::vector<int>(e.layout().discrete_size(), 0); }
std::vector<double> zeros_continuous(const Env& e) { return std::vector<double>(e.layout().continuous_size(), 0.0); }

}  // namespace

// Reward ------------------------------------------------------------------------------

TEST(Reward, EqualTasksAtStartAreScaledMean) {
    const std::vector<double> g{0.8, 0.8};
    EXPECT_NEAR(reward(g, 0, RewardParams{}), 0.4, 1e-12);
}

TEST(Reward, PureFairnessWithEqualTasksIsTheAccuracy) {
    RewardParams p;
    p.decay = 0.0;  // alpha = 0 from t = 1
    for (double v : {0.1, 0.5, 0.93}) {
        const std::vector<double> g{v, v, v};
        EXPECT_NEAR(reward(g, 1, p), v, 1e-12);
    }
}

TEST(Reward, TaskNearerTheMeanContributesMore) {
    RewardParams p;
    p.decay = 0.0;
    const std::vector<double> g{0.9, 0.3};
    const double mean = 0.6;
    const double c_high = (0.9 / p.eps_c2) / (p.eps_f + std::abs(mean / 0.9 - 1.0));
    const double c_low = (0.3 / p.eps_c2) / (p.eps_f + std::abs(mean / 0.3 - 1.0));
    EXPECT_GT(c_high, c_low);
    EXPECT_NEAR(reward(g, 5, p), (c_high + c_low) / 2, 1e-12);
}

TEST(Reward, AlphaTelescopes) {
    RewardParams p;
    double iterated = 1.0;
    for (int t = 0; t <= 1000; ++t) {
        EXPECT_NEAR(reward_alpha(t, p), iterated, 1e-12 * std::max(1.0, iterated)) << t;
        iterated *= p.decay;
    }
    p.fixed = true;
    EXPECT_EQ(reward_alpha(500, p), 1.0);
}

TEST(Reward, MatchesOracle) {
    gen::for_all(2000, [](gen::Gen& g, int) {
        const int F = g.integer(1, 6);
        const auto gamma = g.reals(F, 0.01, 1.0);  // above the floor
        const int t = g.integer(0, 1000);
        RewardParams p;
        p.fixed = g.coin(0.2);
        const auto want = oracle::reward(gamma, t, p.decay, p.eps_c1, p.eps_c2, p.eps_f, p.fixed);
        EXPECT_LE(oracle::relative_error(reward(gamma, t, p), want), 1e-9);
    });
}

TEST(Reward, FloorsBadAccuracies) {
    RewardParams p;
    const std::vector<double> g{std::nan(""), -1.0};
    const std::vector<double> floor{p.gamma_floor, p.gamma_floor};
    EXPECT_DOUBLE_EQ(reward(g, 3, p), reward(floor, 3, p));
    EXPECT_THROW(reward(std::vector<double>{}, 0, p), std::invalid_argument);
}

TEST(Reward, FairnessPrefersBalancedTasksAtEqualMean) {
    RewardParams p;
    p.decay = 0.0;
    for (double mean = 0.2; mean <= 0.8; mean += 0.1) {
        double last = reward(std::vector<double>{mean, mean}, 1, p);
        for (double d = 0.02; d < 0.5 * std::min(mean, 1 - mean); d += 0.01) {
            const double r = reward(std::vector<double>{mean - d, mean + d}, 1, p);
            EXPECT_LT(r, last) << mean << " " << d;
            last = r;
        }
    }
}

// Reset and observation ---------------------------------------------------------------

TEST(EnvReset, ObservationShapeAndDeterminism) {
    Env a(small()), b(small());
    const Vector oa = a.reset(7), ob = b.reset(7);
    const auto& c = a.config();
    EXPECT_EQ(oa.size(), c.users * c.uavs + 3 * c.uavs + c.uavs * c.satellites + (c.uavs + c.satellites) * c.tasks);
    EXPECT_EQ(oa.size(), a.observation_size());
    EXPECT_TRUE(oa.allFinite());
    EXPECT_EQ(oa, ob);
    EXPECT_NE(oa, a.reset(8));
    EXPECT_EQ(a.slot(), 0);
    EXPECT_FALSE(a.done());
}

TEST(EnvReset, UavsStartInsideAltitudeRange) {
    Env e(small());
    e.reset(3);
    for (const auto& u : e.uavs()) {
        EXPECT_GE(u.position.z(), e.config().uav_min_altitude);
        EXPECT_LE(u.position.z(), e.config().uav_max_altitude);
    }
}

TEST(EnvReset, DecodeBeforeResetThrows) {
    Env e(small());
    EXPECT_THROW(e.decode_action(std::vector<int>(e.layout().discrete_size()),
                                 std::vector<double>(e.layout().continuous_size())),
                 std::logic_error);
}

// Decode --------------------------------------------------------------------------------

TEST(Decode, WrongSizesAreRejected) {
    Env e(small());
    e.reset(1);
    EXPECT_THROW(e.decode_action(std::vector<int>(1), zeros_continuous(e)), std::invalid_argument);
    EXPECT_THROW(e.decode_action(zeros_discrete(e), std::vector<double>(2)), std::invalid_argument);
}

TEST(Decode, ZeroLogitsGiveUniformGroups) {
    Env e(small());
    e.reset(2);
    const auto a = e.decode_action(zeros_discrete(e), zeros_continuous(e));
    for (int f = 0; f < e.config().tasks; ++f) {
        int members = 0;
        for (int k = 0; k < e.config().users; ++k) members += e.tasks().datasets[k][f].size() > 0;
        for (int k = 0; k < e.config().users; ++k) {
            if (e.tasks().datasets[k][f].size() > 0) {
                EXPECT_NEAR(a.edge_weights(f, k), 1.0 / members, 1e-12);
            }
        }
    }
}

TEST(Decode, TwoMemberGroupIsLogistic) {
    Env e(small());
    e.reset(4);
    const int K = e.config().users;
    int f = -1, u0 = -1, u1 = -1;
    for (int t = 0; t < e.config().tasks && f < 0; ++t) {
        std::vector<int> on;
        for (int k = 0; k < K; ++k) {
            if (e.tasks().datasets[k][t].size() > 0) on.push_back(k);
        }
        if (on.size() >= 2) f = t, u0 = on[0], u1 = on[1];
    }
    ASSERT_GE(f, 0);
    auto d = zeros_discrete(e);
    auto c = zeros_continuous(e);
    for (int k = 0; k < K; ++k) d[k] = (k == u0 || k == u1) ? 0 : 1;
    c[e.layout().edge_offset() + f * K + u0] = 1.0;
    const auto a = e.decode_action(d, c);
    EXPECT_NEAR(a.edge_weights(f, u0), 0.7310585786300049, 1e-12);
    EXPECT_NEAR(a.edge_weights(f, u1), 0.2689414213699951, 1e-12);
}

TEST(Decode, SingleMemberGetsFullWeight) {
    Env e(small());
    e.reset(5);
    const int K = e.config().users;
    for (int f = 0; f < e.config().tasks; ++f) {
        for (int k = 0; k < K; ++k) {
            if (e.tasks().datasets[k][f].size() == 0) continue;
            auto d = zeros_discrete(e);
            for (int j = 0; j < K; ++j) d[j] = j == k ? 0 : 1;
            auto c = zeros_continuous(e);
            c[e.layout().edge_offset() + f * K + k] = -7.0;
            EXPECT_DOUBLE_EQ(e.decode_action(d, c).edge_weights(f, k), 1.0);
        }
    }
}

TEST(Decode, VelocityIsSquashedOntoTheBall) {
    Env e(small());
    e.reset(6);
    auto c = zeros_continuous(e);
    c[0] = c[1] = c[2] = 1e6;
    c[3] = 0.5;
    const auto a = e.decode_action(zeros_discrete(e), c);
    EXPECT_NEAR(a.uav_velocity[0].norm(), e.config().uav_max_speed, 1e-9);
    EXPECT_NEAR(a.uav_velocity[1].x(), e.config().uav_max_speed * std::tanh(0.5), 1e-12);
}

TEST(DecodeProperty, EveryRawActionIsFeasible) {
    Env e(small());
    gen::for_all(5000, [&](gen::Gen& g, int i) {
        if (i % 500 == 0) e.reset(static_cast<std::uint64_t>(i));
        std::vector<int> d(e.layout().discrete_size());
        for (auto& x : d) x = g.integer(-1000000, 1000000);
        std::vector<double> c(e.layout().continuous_size());
        for (auto& x : c) {
            const double pick = g.real(0, 1);
            x = pick < 0.05 ? std::nan("") : pick < 0.1 ? (g.coin(0.5) ? 1e300 : -1e300) : g.normal() * 30;
        }
        const auto bad = constraints::violations(e, e.decode_action(d, c));
        EXPECT_TRUE(bad.empty()) << bad.front();
    });
}

TEST(DecodeProperty, WeightRatiosFollowLogits) {
    Env e(small());
    e.reset(9);
    const int K = e.config().users;
    gen::for_all(300, [&](gen::Gen& g, int) {
        auto d = zeros_discrete(e);
        for (int k = 0; k < K; ++k) d[k] = g.integer(0, e.config().uavs - 1);
        std::vector<double> c(e.layout().continuous_size());
        for (auto& x : c) x = g.real(-5, 5);
        const auto a = e.decode_action(d, c);
        for (int f = 0; f < e.config().tasks; ++f) {
            for (int i = 0; i < K; ++i) {
                for (int j = 0; j < K; ++j) {
                    if (a.user_cluster[i] != a.user_cluster[j] || a.edge_weights(f, i) == 0 || a.edge_weights(f, j) == 0) continue;
                    EXPECT_NEAR(std::log(a.edge_weights(f, i) / a.edge_weights(f, j)),
                                a.edge_logits(f, i) - a.edge_logits(f, j), 1e-9);
                }
            }
        }
    });
}

// Episodes --------------------------------------------------------------------------------

namespace {

struct Trace {
    std::vector<Vector> observations;
    std::vector<double> rewards;
};

Trace roll(const ScenarioConfig& cfg, std::uint64_t seed, int steps) {
    Env e(cfg);
    Trace tr;
    tr.observations.push_back(e.reset(seed));
    gen::Gen g(seed);
    for (int s = 0; s < steps && !e.done(); ++s) {
        std::vector<int> d(e.layout().discrete_size());
        for (auto& x : d) x = g.integer(0, 50);
        std::vector<double> c(e.layout().continuous_size());
        for (auto& x : c) x = g.normal();
        const auto r = e.step(e.decode_action(d, c));
        tr.observations.push_back(r.observation);
        tr.rewards.push_back(r.reward);
    }
    return tr;
}

}  // namespace

TEST(EnvEpisode, SameSeedSameTrajectory) {
    const auto a = roll(small(), 11, 30), b = roll(small(), 11, 30);
    ASSERT_EQ(a.rewards.size(), b.rewards.size());
    for (std::size_t i = 0; i < a.observations.size(); ++i) EXPECT_EQ(a.observations[i], b.observations[i]);
    EXPECT_EQ(a.rewards, b.rewards);
}

TEST(EnvEpisode, EndsByTheHorizon) {
    ScenarioConfig cfg;
    Env e(cfg);
    e.reset(12);
    int steps = 0;
    while (!e.done()) {
        const auto r = e.step(e.decode_action(zeros_discrete(e), zeros_continuous(e)));
        ++steps;
        EXPECT_EQ(r.done, e.done());
        EXPECT_TRUE(std::isfinite(r.reward));
        EXPECT_TRUE(r.observation.allFinite());
        for (double acc : r.info.accuracy) {
            EXPECT_GE(acc, 0.0);
            EXPECT_LE(acc, 1.0);
        }
    }
    EXPECT_LE(steps, cfg.horizon);
    EXPECT_EQ(steps, e.slot());
}

TEST(EnvEpisode, ZeroVelocityHovers) {
    Env e(small());
    e.reset(13);
    const auto start = e.uavs();
    for (int s = 0; s < 10; ++s) e.step(e.decode_action(zeros_discrete(e), zeros_continuous(e)));
    for (std::size_t m = 0; m < start.size(); ++m) EXPECT_EQ(e.uavs()[m].position, start[m].position);
}

TEST(EnvEpisode, AlphaFollowsTheSlot) {
    Env e(small());
    e.reset(14);
    const RewardParams p = RewardParams::from(e.config());
    for (int s = 0; s < 5; ++s) {
        const int t = e.slot();
        const auto r = e.step(e.decode_action(zeros_discrete(e), zeros_continuous(e)));
        EXPECT_NEAR(r.info.alpha, reward_alpha(t, p), 1e-15);
    }
}

TEST(EnvEpisode, FedAvgAggregationsUseDataProportionalWeights) {
    ScenarioConfig cfg;
    cfg.fedavg_weights = true;
    Env e(cfg);
    e.reset(15);
    gen::Gen g(15);
    int records = 0;
    while (!e.done()) {
        std::vector<double> c(e.layout().continuous_size());
        for (auto& x : c) x = g.normal() * 3;
        const auto r = e.step(e.decode_action(zeros_discrete(e), c));
        for (const auto& rec : r.info.aggregations) {
            ++records;
            const double total = std::accumulate(rec.masses.begin(), rec.masses.end(), 0.0);
            ASSERT_EQ(rec.weights.size(), rec.masses.size());
            for (std::size_t i = 0; i < rec.weights.size(); ++i) EXPECT_NEAR(rec.weights[i], rec.masses[i] / total, 1e-14);
        }
    }
    EXPECT_GT(records, 0);
}

TEST(EnvEpisode, AggregationWeightsAreSimplices) {
    Env e(ScenarioConfig{});
    e.reset(16);
    gen::Gen g(16);
    while (!e.done()) {
        std::vector<int> d(e.layout().discrete_size());
        for (auto& x : d) x = g.integer(0, 20);
        std::vector<double> c(e.layout().continuous_size());
        for (auto& x : c) x = g.normal() * 3;
        for (const auto& rec : e.step(e.decode_action(d, c)).info.aggregations) {
            double sum = 0;
            for (double w : rec.weights) {
                EXPECT_GE(w, 0.0);
                sum += w;
            }
            EXPECT_NEAR(sum, 1.0, 1e-9);
        }
    }
}
