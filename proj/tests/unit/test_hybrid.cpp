#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "generators.hpp"
#include "sagin/hybrid.hpp"

using namespace sagin;
using namespace sagin::hybrid;

// Factored categoricals ---------------------------------------------------------------

TEST(Factored, LogProbMatchesJointEnumeration) {
    gen::for_all(100, [](gen::Gen& g, int) {
        std::vector<int> options;
        const int slots = g.integer(1, 3);
        int total = 0;
        for (int i = 0; i < slots; ++i) total += options.emplace_back(g.integer(1, 4));
        Matrix logits = Matrix::NullaryExpr(total, 1, [&] { return 3 * g.normal(); });
        const Matrix p = slot_softmax(logits, options);

        // joint softmax over every combination of the summed logits
        std::vector<int> a(slots, 0);
        std::vector<std::pair<std::vector<int>, double>> joint;
        double z = 0;
        while (true) {
            double score = 0;
            int off = 0;
            for (int i = 0; i < slots; ++i) score += logits(off + a[i], 0), off += options[i];
            joint.emplace_back(a, std::exp(score));
            z += std::exp(score);
            int i = 0;
            while (i < slots && ++a[i] == options[i]) a[i++] = 0;
            if (i == slots) break;
        }
        double entropy = 0;
        for (const auto& [act, w] : joint) {
            EXPECT_NEAR(factored_log_prob(p, 0, options, act), std::log(w / z), 1e-10);
            entropy -= w / z * std::log(w / z);
        }
        EXPECT_NEAR(factored_entropy(p, 0, options), entropy, 1e-10);
    });
}

TEST(Factored, SoftmaxRowsPerSlot) {
    const std::vector<int> options{2, 3};
    Matrix logits(5, 1);
    logits << 1, 0, 0, 0, 0;
    const Matrix p = slot_softmax(logits, options);
    EXPECT_NEAR(p(0, 0), 0.7310585786300049, 1e-15);
    EXPECT_NEAR(p(2, 0), 1.0 / 3, 1e-15);
    EXPECT_THROW(slot_softmax(Matrix::Zero(4, 1), options), std::invalid_argument);
}

TEST(Factored, OneHot) {
    const std::vector<int> options{2, 3};
    const Vector v = one_hot(options, std::vector<int>{1, 2});
    EXPECT_EQ(v, (Vector(5) << 0, 1, 0, 0, 1).finished());
    EXPECT_THROW(one_hot(options, std::vector<int>{2, 0}), std::out_of_range);
    EXPECT_THROW(one_hot(options, std::vector<int>{0}), std::invalid_argument);
}

TEST(Kl, GaussianExample) {
    const Vector zero = Vector::Zero(1), one = Vector::Ones(1);
    EXPECT_NEAR(gaussian_kl(zero, zero, one, zero), 0.5, 1e-15);
    EXPECT_EQ(gaussian_kl(one, zero, one, zero), 0.0);
}

TEST(KlProperty, NonNegativeAndZeroOnlyAtEquality) {
    gen::for_all(500, [](gen::Gen& g, int) {
        const std::vector<int> options{g.integer(1, 4), g.integer(1, 4)};
        const int total = options[0] + options[1];
        const Matrix p = slot_softmax(Matrix::NullaryExpr(total, 1, [&] { return g.normal(); }), options);
        const Matrix q = slot_softmax(Matrix::NullaryExpr(total, 1, [&] { return g.normal(); }), options);
        EXPECT_GE(categorical_kl(p, q, 0, options), -1e-15);
        EXPECT_NEAR(categorical_kl(p, p, 0, options), 0.0, 1e-15);
        const int d = g.integer(1, 4);
        const Vector m1 = Vector::NullaryExpr(d, [&] { return g.normal(); });
        const Vector s1 = Vector::NullaryExpr(d, [&] { return g.real(-2, 1); });
        const Vector m2 = Vector::NullaryExpr(d, [&] { return g.normal(); });
        const Vector s2 = Vector::NullaryExpr(d, [&] { return g.real(-2, 1); });
        EXPECT_GE(gaussian_kl(m1, s1, m2, s2), -1e-15);
        EXPECT_NEAR(gaussian_kl(m1, s1, m1, s1), 0.0, 1e-15);
    });
}

// Discrete agent -------------------------------------------------------------------------

namespace {

DiscreteConfig discrete_small(std::vector<int> options) {
    DiscreteConfig c;
    c.obs_dim = 2;
    c.options = std::move(options);
    c.hidden = {8};
    c.seed = 3;
    return c;
}

double discrete_objective(const DiscreteAgent& agent, const Matrix& s, const std::vector<std::vector<int>>& others) {
    const Matrix p = agent.probabilities(s);
    const Matrix q = agent.slot_values(s, others);
    const double nu = agent.temperature();
    double total = 0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        for (Eigen::Index r = 0; r < p.rows(); ++r) total += p(r, j) * (nu * std::log(p(r, j)) - q(r, j));
    }
    return total / static_cast<double>(s.cols());
}

}  // namespace

TEST(DiscreteAgent, SlotValuesMatchDirectEvaluation) {
    DiscreteAgent agent(discrete_small({2, 3}));
    gen::Gen g(1);
    const Matrix s = Matrix::NullaryExpr(2, 4, [&] { return g.normal(); });
    std::vector<std::vector<int>> acts{{0, 1}, {1, 2}, {0, 0}, {1, 1}};
    const Matrix q = agent.slot_values(s, acts);
    const int offsets[] = {0, 2};
    for (int j = 0; j < 4; ++j) {
        for (int i = 0; i < 2; ++i) {
            for (int k = 0; k < (i == 0 ? 2 : 3); ++k) {
                auto a = acts;
                a[j][i] = k;
                const double direct = agent.critic().evaluate(agent.critic_input(s, a))[j].q_mean;
                EXPECT_NEAR(q(offsets[i] + k, j), direct, 1e-12);
            }
        }
    }
}

TEST(DiscreteAgent, ActorGradientMatchesFiniteDifferences) {
    DiscreteAgent agent(discrete_small({2, 3}));
    gen::Gen g(2);
    const Matrix s = Matrix::NullaryExpr(2, 3, [&] { return g.normal(); });
    const std::vector<std::vector<int>> others{{0, 1}, {1, 2}, {1, 0}};
    const Vector grad = agent.actor_gradient(s, others).params;
    const double h = 1e-6;
    int agree = 0;
    for (Eigen::Index i = 0; i < grad.size(); ++i) {
        DiscreteAgent plus = agent, minus = agent;
        plus.actor().mutable_params()(i) += h;
        minus.actor().mutable_params()(i) -= h;
        const double fd = (discrete_objective(plus, s, others) - discrete_objective(minus, s, others)) / (2 * h);
        agree += std::abs(fd - grad(i)) <= 1e-6 * std::max(1.0, std::abs(fd));
    }
    EXPECT_GE(agree, grad.size() - 1);
}

TEST(DiscreteAgent, UniformIsStationaryWhenQIgnoresTheAction) {
    DiscreteAgent agent(discrete_small({3, 2}));
    // equal first-layer columns per slot make Q blind to the choice
    auto& cp = agent.critic().net.mutable_params();
    const int hidden = agent.critic().net.widths()[1];
    const int obs = 2;
    for (int col : {obs + 1, obs + 2}) cp.segment(col * hidden, hidden) = cp.segment(obs * hidden, hidden);
    cp.segment((obs + 4) * hidden, hidden) = cp.segment((obs + 3) * hidden, hidden);
    // zero last layer gives zero logits
    auto& ap = agent.actor().mutable_params();
    const auto last = agent.actor().widths()[1] * 5 + 5;
    ap.tail(last).setZero();
    gen::Gen g(3);
    const Matrix s = Matrix::NullaryExpr(2, 5, [&] { return g.normal(); });
    const std::vector<std::vector<int>> others(5, {1, 0});
    const Matrix p = agent.probabilities(s);
    EXPECT_NEAR(p(0, 0), 1.0 / 3, 1e-15);
    EXPECT_LE(agent.actor_gradient(s, others).params.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DiscreteAgent, SmallTemperatureConcentratesOnTheBetterOption) {
    Schedule s;
    s.episodes = 1500;
    s.warmup_steps = 200;
    s.hidden = {16};
    s.discount = 0.0;
    s.learn_temperature = false;
    s.discrete_initial_temperature = 0.01;
    s.discrete_actor_lr = 3e-3;
    s.discrete_critic_lr = 3e-3;
    s.seed = 4;
    Bandit bandit({1.0, 0.0}, {0.0, 0.0});
    HDsacAgent agent(1, {2}, 1, s);
    train_h_dsac(bandit, agent, s);
    EXPECT_GE(agent.discrete().probabilities(Vector::Ones(1))(0, 0), 0.99);
}

// Recoupling -------------------------------------------------------------------------------

TEST(Recouple, AcceptedStepsRespectTheBudgets) {
    Schedule s;
    s.hidden = {16};
    s.seed = 5;
    s.coupled_lr = 0.05;  // large enough to trigger backtracking
    HDsacAgent agent(2, {3, 2}, 2, s);
    gen::Gen g(5);
    int accepted = 0;
    for (int i = 0; i < 60; ++i) {
        const Matrix states = Matrix::NullaryExpr(2, 16, [&] { return g.normal(); });
        const RecoupleStats st = agent.recouple(states);
        if (st.accepted) {
            ++accepted;
            EXPECT_LE(st.kl_discrete, s.kl_discrete);
            EXPECT_LE(st.kl_continuous, s.kl_continuous);
            EXPECT_LE(st.kl_discrete + st.kl_continuous, s.kl_total);
            EXPECT_GT(st.scale, 0.0);
        } else {
            EXPECT_EQ(st.scale, 0.0);
            EXPECT_EQ(st.kl_discrete, 0.0);
        }
        EXPECT_GE(agent.lambda_discrete(), 0.0);
        EXPECT_GE(agent.lambda_continuous(), 0.0);
    }
    EXPECT_GT(accepted, 0);
}

TEST(Recouple, CoupledPolicyApproachesTheProduct) {
    Schedule s;
    s.hidden = {16};
    s.seed = 6;
    HDsacAgent agent(2, {3}, 1, s);
    const Matrix states = Matrix::Random(2, 32);
    const double before = agent.product_gap(states);
    for (int i = 0; i < 400; ++i) agent.recouple(states);
    EXPECT_LT(agent.product_gap(states), before);
}

// Degeneracy -------------------------------------------------------------------------------

TEST(Degeneracy, SingleOptionHybridIsPlainDsac) {
    Schedule s;
    s.episodes = 300;
    s.warmup_steps = 50;
    s.batch_size = 16;
    s.hidden = {16};
    s.seed = 7;
    Bandit b1({0.0}, {0.4}), b2({0.0}, {0.4});
    std::vector<double> r1, r2;
    dsac::Agent plain(continuous_config(1, 1, s));
    train_dsac(b1, plain, s, [&](const EpisodeLog& e) { r1.push_back(e.episode_return); });
    HDsacAgent hybrid(1, {1}, 1, s);
    train_h_dsac(b2, hybrid, s, [&](const EpisodeLog& e) { r2.push_back(e.episode_return); });
    EXPECT_EQ(r1, r2);
    EXPECT_EQ(plain.actor().params(), hybrid.continuous().actor().params());
}

// Schedule and checkpoints -------------------------------------------------------------------

TEST(Schedule, ParseErrorsNameTheKey) {
    auto message = [](const std::string& text) {
        try {
            parse_schedule(text);
        } catch (const std::invalid_argument& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    EXPECT_NE(message(R"({"episodez": 3})").find("episodez"), std::string::npos);
    EXPECT_NE(message(R"({"batch_size": 0})").find("batch_size"), std::string::npos);
    EXPECT_NE(message(R"({"discount": 1.0})").find("discount"), std::string::npos);
    EXPECT_NE(message(R"({"episodes": "many"})").find("episodes"), std::string::npos);
    EXPECT_NE(message(R"({"hidden": []})").find("hidden"), std::string::npos);
    EXPECT_NE(message("[1, 2]"), "no error");
    EXPECT_NE(message("{"), "no error");
}

TEST(Schedule, JsonRoundTrip) {
    Schedule s;
    s.episodes = 17;
    s.hidden = {5, 7};
    s.kl_discrete = 0.02;
    s.learn_temperature = false;
    s.seed = 99;
    const Schedule back = parse_schedule(schedule_to_json(s));
    EXPECT_EQ(back.episodes, 17);
    EXPECT_EQ(back.hidden, (std::vector<int>{5, 7}));
    EXPECT_EQ(back.kl_discrete, 0.02);
    EXPECT_FALSE(back.learn_temperature);
    EXPECT_EQ(back.seed, 99u);
    EXPECT_EQ(schedule_to_json(back), schedule_to_json(s));
}

TEST(Schedule, FullWidthSeed) {
    Schedule s;
    s.seed = 0xfedcba9876543210ULL;
    EXPECT_EQ(parse_schedule(schedule_to_json(s)).seed, s.seed);
    EXPECT_THROW(parse_schedule(R"({"seed": -1})"), std::invalid_argument);
}

TEST(Checkpoint, RoundTripKeepsBehaviour) {
    Schedule s;
    s.episodes = 100;
    s.warmup_steps = 20;
    s.batch_size = 8;
    s.hidden = {8};
    s.seed = 8;
    Bandit bandit({0.0, 0.2}, {0.3, -0.3});
    HDsacAgent agent(1, {2}, 1, s);
    train_h_dsac(bandit, agent, s);
    const auto path = std::filesystem::temp_directory_path() / "sagin_hybrid_checkpoint.bin";
    agent.save(path);
    const HDsacAgent back = HDsacAgent::load(path);
    std::filesystem::remove(path);
    for (auto which : {EvalPolicy::Coupled, EvalPolicy::Product}) {
        std::vector<int> d1, d2;
        Vector c1, c2;
        agent.greedy(Vector::Ones(1), which, d1, c1);
        back.greedy(Vector::Ones(1), which, d2, c2);
        EXPECT_EQ(d1, d2);
        EXPECT_EQ(c1, c2);
    }
    EXPECT_EQ(back.updates(), agent.updates());
    EXPECT_EQ(schedule_to_json(back.schedule()), schedule_to_json(agent.schedule()));
}

TEST(Checkpoint, RejectsForeignAndTruncatedBytes) {
    Schedule s;
    s.hidden = {4};
    HDsacAgent agent(1, {2}, 1, s);
    std::stringstream buf;
    agent.save(buf);
    const std::string bytes = buf.str();
    std::string wrong_magic = bytes;
    wrong_magic[0] = 'X';
    std::stringstream a(wrong_magic);
    EXPECT_ANY_THROW(HDsacAgent::load(a));
    std::string wrong_version = bytes;
    wrong_version[4] = static_cast<char>(wrong_version[4] + 1);
    std::stringstream b(wrong_version);
    EXPECT_ANY_THROW(HDsacAgent::load(b));
    std::stringstream c(bytes.substr(0, bytes.size() / 2));
    EXPECT_ANY_THROW(HDsacAgent::load(c));
}

TEST(Bandit, OptimumAndShape) {
    Bandit b({0.0, 0.3}, {0.5, -0.3});
    EXPECT_EQ(b.optimum(), (std::pair<int, double>{1, -0.3}));
    EXPECT_DOUBLE_EQ(b.reward(0, 0.5), 0.0);
    EXPECT_DOUBLE_EQ(b.reward(1, 0.7), 0.3 - 1.0);
    EXPECT_THROW(Bandit({1.0}, {}), std::invalid_argument);
}
