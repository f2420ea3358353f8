#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <cmath>
#include <limits>
#include <sstream>

#include "generators.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"
#include "sagin/hfl.hpp"

using namespace sagin;
using namespace sagin::hfl;

namespace {

SyntheticConfig small_config() {
    SyntheticConfig c;
    c.task_count = 2;
    c.user_count = 4;
    c.input_dim = 5;
    c.class_count = 3;
    c.test_per_class = 40;
    return c;
}

TaskModel random_model(gen::Gen& g, int task, int dim) {
    TaskModel m;
    m.task_id = task;
    m.params = Vector(dim);
    for (int i = 0; i < dim; ++i) m.params[i] = g.normal();
    return m;
}

// Mean cross-entropy of a multinomial logistic model plus (l2/2)|p|^2, coded
// from scratch: params hold W (classes x inputs, column-major) then b.
long double logistic_objective(const Vector& p, const LocalDataset& d, int inputs, int classes, double l2) {
    long double total = 0;
    for (int i = 0; i < d.size(); ++i) {
        std::vector<long double> z(classes);
        for (int c = 0; c < classes; ++c) {
            long double s = p[classes * inputs + c];
            for (int j = 0; j < inputs; ++j) s += p[j * classes + c] * d.features(j, i);
            z[c] = s;
        }
        long double peak = *std::max_element(z.begin(), z.end()), norm = 0;
        for (auto v : z) norm += std::exp(v - peak);
        total -= z[d.labels[i]] - peak - std::log(norm);
    }
    long double reg = 0;
    for (Eigen::Index i = 0; i < p.size(); ++i) reg += static_cast<long double>(p[i]) * p[i];
    return total / d.size() + l2 / 2 * reg;
}

}  // namespace

TEST(Synthetic, DeterministicPerSeed) {
    const auto a = gen_synthetic_tasks(small_config(), 5), b = gen_synthetic_tasks(small_config(), 5);
    for (int k = 0; k < 4; ++k) {
        for (int f = 0; f < 2; ++f) {
            EXPECT_EQ(a.datasets[k][f].features, b.datasets[k][f].features);
            EXPECT_EQ(a.datasets[k][f].labels, b.datasets[k][f].labels);
        }
    }
    const auto c = gen_synthetic_tasks(small_config(), 6);
    EXPECT_NE(a.tasks[0].test_features, c.tasks[0].test_features);
}

TEST(Synthetic, IidLimitEqualizesClassMass) {
    auto cfg = small_config();
    cfg.concentration = std::numeric_limits<double>::infinity();
    const auto t = gen_synthetic_tasks(cfg, 1);
    for (const auto& user : t.datasets) {
        for (const auto& d : user) {
            for (double p : d.class_proportions) EXPECT_NEAR(p, 1.0 / 3.0, 1e-12);
        }
    }
}

TEST(Synthetic, ModelSizeBitsAndZeroUsers) {
    auto cfg = small_config();
    cfg.user_count = 10;
    cfg.task_count = 10;
    cfg.zero_probability = 0.3;
    const auto t = gen_synthetic_tasks(cfg, 2);
    int zero = 0;
    for (const auto& spec : t.tasks) {
        EXPECT_EQ(spec.model_dim, cfg.input_dim * cfg.class_count + cfg.class_count);
        EXPECT_DOUBLE_EQ(spec.model_size_bits, spec.model_dim * 64.0);
    }
    for (const auto& user : t.datasets) {
        for (const auto& d : user) zero += d.size() == 0;
    }
    EXPECT_GT(zero, 0);
    EXPECT_THROW(gen_synthetic_tasks([] { auto c = small_config(); c.concentration = 0; return c; }(), 1),
                 std::invalid_argument);
}

TEST(LocalTraining, ZeroLearningRateIsIdentity) {
    const auto t = gen_synthetic_tasks(small_config(), 3);
    const auto& d = t.datasets[0][0].size() ? t.datasets[0][0] : t.datasets[1][0];
    gen::Gen g(1);
    const auto m = random_model(g, 0, t.tasks[0].model_dim);
    const auto n = local_train_step(m, d, t.tasks[0], 0.0, 0.0);
    EXPECT_EQ(n.params, m.params);
    EXPECT_EQ(n.local_iterations_done, m.local_iterations_done + 1);
}

TEST(LocalTraining, RejectsEmptyData) {
    const auto t = gen_synthetic_tasks(small_config(), 3);
    LocalDataset empty;
    empty.features = Matrix(5, 0);
    EXPECT_THROW(local_train_step(zero_model(t.tasks[0]), empty, t.tasks[0], 0.1, 0.0), std::invalid_argument);
}

TEST(LocalTraining, LossMatchesIndependentObjectiveAndFiniteDifferences) {
    const auto t = gen_synthetic_tasks(small_config(), 4);
    const auto& spec = t.tasks[1];
    const LocalDataset* d = nullptr;
    for (const auto& u : t.datasets) if (u[1].size() > 0) d = &u[1];
    ASSERT_NE(d, nullptr);
    gen::Gen g(2);
    const auto m = random_model(g, 1, spec.model_dim);
    const double l2 = 1e-3;
    const auto lv = task_loss(m, spec, d->features, d->labels, l2);
    EXPECT_LT(oracle::relative_error(lv.loss, logistic_objective(m.params, *d, 5, 3, l2)), 1e-12);
    for (int i = 0; i < spec.model_dim; ++i) {
        Vector p = m.params, q = m.params;
        p[i] += 1e-5;
        q[i] -= 1e-5;
        const double fd = static_cast<double>(
            (logistic_objective(p, *d, 5, 3, l2) - logistic_objective(q, *d, 5, 3, l2)) / 2e-5L);
        EXPECT_NEAR(lv.grad[i], fd, 1e-7 * std::max(1.0, std::abs(fd)));
    }
}

TEST(LocalTraining, SmallStepDecreasesLossAndConverges) {
    const auto t = gen_synthetic_tasks(small_config(), 4);
    const auto& spec = t.tasks[0];
    const LocalDataset* d = nullptr;
    for (const auto& u : t.datasets) if (u[0].size() > 0) d = &u[0];
    const double l2 = 1e-2;
    TaskModel m = zero_model(spec);
    double prev = task_loss(m, spec, d->features, d->labels, l2).loss;
    for (int i = 0; i < 20; ++i) {
        m = local_train_step(m, *d, spec, 0.05, l2);
        const double cur = task_loss(m, spec, d->features, d->labels, l2).loss;
        EXPECT_LT(cur, prev);
        prev = cur;
    }
    for (int i = 0; i < 20000; ++i) m = local_train_step(m, *d, spec, 0.5, l2);
    // optimality certificate from the independent objective: central-difference gradient vanishes
    double worst = 0;
    for (int i = 0; i < spec.model_dim; ++i) {
        Vector p = m.params, q = m.params;
        p[i] += 1e-5;
        q[i] -= 1e-5;
        worst = std::max(worst, std::abs(static_cast<double>(
            (logistic_objective(p, *d, 5, 3, l2) - logistic_objective(q, *d, 5, 3, l2)) / 2e-5L)));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Aggregation, Examples) {
    gen::Gen g(3);
    const auto a = random_model(g, 0, 6), b = random_model(g, 0, 6), c = random_model(g, 0, 6);
    const std::vector<TaskModel> one{a};
    const std::vector<double> w1{1.0};
    EXPECT_EQ(edge_aggregate(one, w1).params, a.params);
    const std::vector<TaskModel> same{a, a};
    const std::vector<double> w2{0.3, 0.7};
    EXPECT_TRUE(edge_aggregate(same, w2).params.isApprox(a.params, 1e-15));
    const std::vector<TaskModel> direct{a, b}, relayed{c};
    const std::vector<double> w3{1.0 / 3, 1.0 / 3, 1.0 / 3};
    EXPECT_TRUE(final_aggregate(direct, relayed, w3).params.isApprox((a.params + b.params + c.params) / 3, 1e-14));
    EXPECT_EQ(final_aggregate(direct, {}, w2).params, cloud_aggregate(direct, w2).params);
    const auto lit = edge_aggregate(direct, w2, Normalization::Literal);
    EXPECT_TRUE(lit.params.isApprox((0.3 * a.params + 0.7 * b.params) / 2, 1e-14));
}

TEST(Aggregation, Errors) {
    gen::Gen g(4);
    const auto a = random_model(g, 0, 6), b = random_model(g, 1, 6), c = random_model(g, 0, 5);
    const std::vector<double> w{0.5, 0.5};
    EXPECT_THROW(edge_aggregate(std::vector<TaskModel>{a, b}, w), std::invalid_argument);
    EXPECT_THROW(edge_aggregate(std::vector<TaskModel>{a, c}, w), std::invalid_argument);
    const std::vector<double> bad{0.5, 0.6};
    EXPECT_THROW(edge_aggregate(std::vector<TaskModel>{a, a}, bad), std::invalid_argument);
}

TEST(Aggregation, DataProportionalWeightsAreFedAvg) {
    gen::for_all(100, [](gen::Gen& g, int) {
        const int n = g.integer(1, 8), dim = g.integer(1, 10);
        std::vector<TaskModel> models;
        std::vector<std::vector<double>> raw;
        std::vector<double> sizes, w;
        for (int i = 0; i < n; ++i) {
            models.push_back(random_model(g, 0, dim));
            raw.emplace_back(models.back().params.data(), models.back().params.data() + dim);
            sizes.push_back(g.integer(1, 200));
        }
        double total = 0;
        for (double s : sizes) total += s;
        for (double s : sizes) w.push_back(s / total);
        const auto got = edge_aggregate(models, w);
        const auto want = oracle::fedavg(raw, sizes);
        for (int j = 0; j < dim; ++j) EXPECT_NEAR(got.params[j], static_cast<double>(want[j]), 1e-12);
    });
}

TEST(AggregationProperty, PermutationInvariantAndConvex) {
    gen::for_all(300, [](gen::Gen& g, int) {
        const int n = g.integer(1, 7), dim = g.integer(1, 6);
        std::vector<TaskModel> models;
        for (int i = 0; i < n; ++i) models.push_back(random_model(g, 2, dim));
        auto w = g.simplex(n);
        const auto base = edge_aggregate(models, w);
        std::vector<int> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), g.rng);
        std::vector<TaskModel> pm;
        std::vector<double> pw;
        for (int i : perm) {
            pm.push_back(models[i]);
            pw.push_back(w[i]);
        }
        EXPECT_TRUE(edge_aggregate(pm, pw).params.isApprox(base.params, 1e-12));
        for (int j = 0; j < dim; ++j) {
            double lo = 1e300, hi = -1e300;
            for (const auto& m : models) {
                lo = std::min(lo, m.params[j]);
                hi = std::max(hi, m.params[j]);
            }
            EXPECT_GE(base.params[j], lo - 1e-12);
            EXPECT_LE(base.params[j], hi + 1e-12);
        }
    });
}

TEST(AggregationProperty, NoNonFiniteOverManyRounds) {
    gen::Gen g(11);
    const auto t = gen_synthetic_tasks(small_config(), 11);
    std::vector<TaskModel> users(4, zero_model(t.tasks[0]));
    for (int round = 0; round < 10000; ++round) {
        for (int k = 0; k < 4; ++k) {
            if (t.datasets[k][0].size() > 0 && round % 50 == 0) {
                users[k] = local_train_step(users[k], t.datasets[k][0], t.tasks[0], 0.5, 1e-3);
            }
        }
        const auto global = edge_aggregate(users, g.simplex(4));
        ASSERT_TRUE(global.params.allFinite());
        for (auto& u : users) u.params = global.params + 0.01 * Vector::Random(global.params.size());
    }
}

TEST(Evaluation, RandomModelOnBinaryTaskIsChance) {
    auto cfg = small_config();
    cfg.class_count = 2;
    cfg.test_per_class = 500;
    double acc = 0;
    const int seeds = 40;
    for (int s = 0; s < seeds; ++s) {
        const auto t = gen_synthetic_tasks(cfg, 100 + s);
        gen::Gen g(s);
        acc += evaluate_task(random_model(g, 0, t.tasks[0].model_dim), t.tasks[0]).accuracy;
    }
    EXPECT_NEAR(acc / seeds, 0.5, 0.05);
}

TEST(Evaluation, TrainedModelApproachesReference) {
    auto cfg = small_config();
    cfg.user_count = 1;
    cfg.min_samples = cfg.max_samples = 2000;
    cfg.zero_probability = 0.0;
    cfg.concentration = std::numeric_limits<double>::infinity();  // the one user sees every class
    const auto t = gen_synthetic_tasks(cfg, 9);
    TaskModel m = zero_model(t.tasks[0]);
    for (int i = 0; i < 500; ++i) m = local_train_step(m, t.datasets[0][0], t.tasks[0], 0.5, 1e-4);
    const auto e = evaluate_task(m, t.tasks[0]);
    EXPECT_GT(e.accuracy, t.tasks[0].reference_accuracy - 0.05);
    EXPECT_GE(e.loss, 0.0);
    EXPECT_EQ(evaluate_task(m, t.tasks[0]).accuracy, e.accuracy);
}

TEST(Transfers, SlotArithmetic) {
    std::vector<TransferJob> jobs(3);
    jobs[0].bits_remaining = 1e6;
    jobs[1].bits_remaining = 5.0;
    jobs[2].bits_remaining = 3.459e7 * 1.5;
    const double snr10 = 10e6 * std::log2(11.0);
    std::vector<double> rates{1e6, 0.0, snr10};
    auto done = advance_transfers(jobs, rates, 1.0);
    ASSERT_EQ(done.size(), 1u);
    EXPECT_EQ(jobs.size(), 2u);
    EXPECT_EQ(jobs[0].bits_remaining, 5.0);
    rates = {0.0, snr10};
    done = advance_transfers(jobs, rates, 1.0);
    ASSERT_EQ(done.size(), 1u);
    EXPECT_EQ(jobs.size(), 1u);
    EXPECT_THROW(advance_transfers(jobs, std::vector<double>{1.0}, 0.0), std::invalid_argument);
}

TEST(Transfers, BitsNeverIncrease) {
    gen::for_all(100, [](gen::Gen& g, int) {
        std::vector<TransferJob> jobs(g.integer(1, 6));
        for (auto& j : jobs) j.bits_remaining = g.log_real(1.0, 1e8);
        for (int t = 0; t < 20 && !jobs.empty(); ++t) {
            const auto before = jobs;
            const auto rates = g.reals(jobs.size(), 0.0, 1e7);
            const auto done = advance_transfers(jobs, rates, 1.0);
            EXPECT_EQ(done.size() + jobs.size(), before.size());
            for (const auto& d : done) EXPECT_EQ(d.bits_remaining, 0.0);
        }
    });
}

TEST(Checkpoint, RoundTripAndLayout) {
    gen::Gen g(5);
    auto m = random_model(g, 7, 9);
    std::stringstream ss;
    write_checkpoint(ss, m);
    const std::string bytes = ss.str();
    ASSERT_EQ(bytes.size(), 4u + 4u + 8u + 9u * 8u);
    EXPECT_EQ(bytes.substr(0, 4), "SGTM");
    double first;
    std::memcpy(&first, bytes.data() + 16, 8);
    EXPECT_EQ(first, m.params[0]);
    const auto back = read_checkpoint(ss);
    EXPECT_EQ(back.task_id, 7);
    EXPECT_EQ(back.params, m.params);
    std::stringstream bad("XXXX");
    EXPECT_THROW(read_checkpoint(bad), std::runtime_error);
}


TEST(AggregationProperty, ThreeLevelPipelineEqualsFlatFedAvg) {
    gen::for_all(500, [](gen::Gen& g, int) {
        EXPECT_LE(pipeline::random_instance(g).max_abs_error, 1e-12);
    });
}
