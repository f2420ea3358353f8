#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "sagin/harness.hpp"

using namespace sagin;
using namespace sagin::harness;

namespace fs = std::filesystem;

namespace {

MetricRow row(const std::string& policy, std::uint64_t seed, int slot, std::vector<double> acc) {
    MetricRow r;
    r.experiment = "exp";
    r.policy = policy;
    r.sweep = "none";
    r.seed = seed;
    r.phase = "eval";
    r.slot = slot;
    r.task_loss.assign(acc.size(), 0.5);
    r.task_accuracy = std::move(acc);
    return r;
}

ExperimentSpec tiny(const fs::path& out) {
    ExperimentSpec s;
    s.name = "tiny";
    s.scenario.horizon = 8;
    s.scenario.data.transfer_params = 3e5;
    s.schedule = hybrid::load_schedule(fs::path(SAGIN_CONFIG_DIR) / "smoke_schedule.json");
    s.schedule.warmup_steps = 4;
    s.schedule.batch_size = 4;
    s.seeds = {1, 2};
    s.output_dir = out;
    return s;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream b;
    b << in.rdbuf();
    return b.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Names, PoliciesAndSweepsRoundTrip) {
    for (auto p : {Policy::HDsac, Policy::FedAvgWeights, Policy::HoveringUav, Policy::Random, Policy::FixedReward}) {
        EXPECT_EQ(parse_policy(to_string(p)), p);
    }
    for (auto a : {SweepAxis::None, SweepAxis::Time, SweepAxis::UserPower, SweepAxis::TaskCountIid,
                   SweepAxis::TaskCountNonIid, SweepAxis::Elevation}) {
        EXPECT_EQ(parse_sweep(to_string(a)), a);
    }
    EXPECT_THROW(parse_policy("pdqn"), std::invalid_argument);
    EXPECT_THROW(parse_sweep("weather"), std::invalid_argument);
}

TEST(Sweeps, ApplyAndBounds) {
    const ScenarioConfig base;
    EXPECT_EQ(apply_sweep(base, SweepAxis::UserPower, 0.2).user_power_w, 0.2);
    EXPECT_EQ(apply_sweep(base, SweepAxis::Elevation, 30).min_elevation_deg, 30.0);
    EXPECT_EQ(apply_sweep(base, SweepAxis::Time, 50).horizon, 50);
    EXPECT_EQ(apply_sweep(base, SweepAxis::TaskCountNonIid, 4).tasks, 4);
    EXPECT_TRUE(std::isinf(apply_sweep(base, SweepAxis::TaskCountIid, 2).data.concentration));
    EXPECT_THROW(apply_sweep(base, SweepAxis::UserPower, -1), std::invalid_argument);
    EXPECT_THROW(apply_sweep(base, SweepAxis::Elevation, 90), std::invalid_argument);
    EXPECT_THROW(apply_sweep(base, SweepAxis::Time, 2.5), std::invalid_argument);
    EXPECT_THROW(apply_sweep(base, SweepAxis::TaskCountIid, 0), std::invalid_argument);
    EXPECT_TRUE(sweep_reshapes(SweepAxis::TaskCountIid));
    EXPECT_FALSE(sweep_reshapes(SweepAxis::UserPower));
    EXPECT_EQ(default_sweep_values(SweepAxis::UserPower, base), (std::vector<double>{0.05, 0.1, 0.2}));
    EXPECT_EQ(default_sweep_values(SweepAxis::Elevation, base), (std::vector<double>{30, 40, 50}));
}

TEST(Baselines, PolicyShapesTheScenario) {
    const ScenarioConfig base;
    EXPECT_TRUE(scenario_for(base, Policy::FedAvgWeights).fedavg_weights);
    EXPECT_TRUE(scenario_for(base, Policy::FixedReward).fixed_reward);
    EXPECT_FALSE(scenario_for(base, Policy::HDsac).fedavg_weights);
}

TEST(Baselines, HoveringEnvKeepsUavsInPlace) {
    SaginEnv env(ScenarioConfig{}, Policy::HoveringUav);
    env.reset(3);
    const auto start = env.env().uavs();
    std::vector<int> d(env.discrete_options().size(), 0);
    std::vector<double> c(env.continuous_size(), 0.9);
    for (int i = 0; i < 5; ++i) env.step(d, c);
    for (std::size_t m = 0; m < start.size(); ++m) EXPECT_EQ(env.env().uavs()[m].position, start[m].position);
}

TEST(Csv, HeaderIsVersionedWithFixedColumns) {
    std::stringstream out;
    write_csv_header(out);
    std::string first, second;
    std::getline(out, first);
    std::getline(out, second);
    EXPECT_EQ(first, "# sagin-metrics v1");
    EXPECT_EQ(second,
              "experiment,policy,sweep,sweep_value,seed,phase,episode,slot,task_count,mean_accuracy,"
              "accuracy_spread,reward,episode_return,task_accuracy,task_loss");
}

TEST(Csv, RoundTrip) {
    MetricRow r = row("hdsac", 3, 7, {0.8, 0.9, 0.75});
    r.reward = -0.125;
    r.episode_return = 1.5;
    r.sweep = "user_power";
    r.sweep_value = 0.05;
    std::stringstream buf;
    write_csv_header(buf);
    write_csv_row(buf, r);
    const auto back = read_csv(buf);
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0].task_accuracy, r.task_accuracy);
    EXPECT_EQ(back[0].sweep_value, 0.05);
    EXPECT_EQ(back[0].reward, -0.125);
    EXPECT_EQ(back[0].seed, 3u);
    EXPECT_EQ(back[0].slot, 7);
    EXPECT_EQ(back[0].phase, "eval");
}

TEST(Csv, RejectsBadInput) {
    std::stringstream no_header("experiment,policy\n");
    EXPECT_ANY_THROW(read_csv(no_header));
    MetricRow bad = row("hdsac", 1, 0, {1.5});
    EXPECT_THROW(validate_row(bad), std::invalid_argument);
    bad = row("hdsac", 1, 0, {0.5});
    bad.phase = "test";
    EXPECT_THROW(validate_row(bad), std::invalid_argument);
    bad = row("hd,sac", 1, 0, {0.5});
    EXPECT_THROW(validate_row(bad), std::invalid_argument);
}

TEST(Summary, MeanAndPopulationStd) {
    const std::vector<MetricRow> rows{row("hdsac", 1, 0, {0.1}), row("hdsac", 1, 99, {0.8}),
                                      row("hdsac", 2, 99, {0.9}), row("random", 1, 99, {0.5, 0.7})};
    const auto s = summarize(rows);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0].policy, "hdsac");
    EXPECT_EQ(s[0].seeds, 2);
    EXPECT_NEAR(s[0].mean_accuracy, 0.85, 1e-15);
    EXPECT_NEAR(s[0].std_accuracy, 0.05, 1e-15);
    EXPECT_NEAR(s[1].mean_accuracy, 0.6, 1e-15);
    EXPECT_NEAR(s[1].mean_spread, 0.2, 1e-15);
}

TEST(Summary, IgnoresTrainingRows) {
    MetricRow train = row("hdsac", 1, 99, {0.1});
    train.phase = "train";
    EXPECT_TRUE(summarize({train}).empty());
    EXPECT_THROW(emit_summary({}), std::invalid_argument);
}

TEST(Experiment, RejectsBadSpecs) {
    ExperimentSpec s;
    s.seeds.clear();
    EXPECT_THROW(validate(s), std::invalid_argument);
    s = ExperimentSpec{};
    s.name = "a/b";
    EXPECT_THROW(validate(s), std::invalid_argument);
    s = ExperimentSpec{};
    s.sweep = SweepAxis::UserPower;
    s.sweep_values = {-0.1};
    EXPECT_THROW(validate(s), std::invalid_argument);
    EXPECT_THROW(run_baseline("hdsac", ExperimentSpec{}), std::invalid_argument);
    EXPECT_THROW(run_baseline("pdqn", ExperimentSpec{}), std::invalid_argument);
}

TEST(Experiment, SameSeedsSameBytes) {
    TempDir a("sagin_run_a"), b("sagin_run_b");
    const auto ra = run_experiment(tiny(a.path));
    const auto rb = run_experiment(tiny(b.path));
    ASSERT_TRUE(fs::exists(ra.csv));
    EXPECT_EQ(slurp(ra.csv), slurp(rb.csv));
    EXPECT_TRUE(fs::exists(a.path / "agents" / "tiny_hdsac_seed1.bin"));
    const auto rows = read_csv(ra.csv);
    int evals = 0, probes = 0;
    for (const auto& r : rows) {
        evals += r.phase == "eval";
        probes += r.phase == "probe";
        EXPECT_NO_THROW(validate_row(r));
    }
    EXPECT_EQ(evals, 2 * 9);  // slot 0 plus one row per step
    EXPECT_EQ(probes, 2 * 2);
    EXPECT_EQ(emit_summary({ra.csv}).front().seeds, 2);
}

TEST(Experiment, ReusedAgentsSkipTraining) {
    TempDir a("sagin_run_reuse");
    ExperimentSpec s = tiny(a.path);
    s.seeds = {4};
    const auto first = run_experiment(s);
    s.reuse_agents = true;
    s.sweep = SweepAxis::UserPower;
    const auto second = run_experiment(s);
    for (const auto& r : second.rows) EXPECT_EQ(r.phase, "eval");
    EXPECT_EQ(second.rows.size(), 3u * 9u);
}

TEST(Experiment, RandomPolicyNeedsNoAgent) {
    TempDir a("sagin_run_random");
    ExperimentSpec s = tiny(a.path);
    s.seeds = {1};
    const auto r = run_baseline("random", s);
    EXPECT_EQ(r.rows.size(), 9u);
    EXPECT_THROW(evaluate_episode(s.scenario, Policy::HDsac, nullptr, 1, "x", SweepAxis::None, 0), std::invalid_argument);
}
