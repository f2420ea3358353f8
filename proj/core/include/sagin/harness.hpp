#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sagin/env.hpp"
#include "sagin/hybrid.hpp"
#include "sagin/scenario.hpp"

namespace sagin::harness {

using nn::Vector;

enum class Policy { HDsac, FedAvgWeights, HoveringUav, Random, FixedReward };
enum class SweepAxis { None, Time, UserPower, TaskCountIid, TaskCountNonIid, Elevation };

std::string to_string(Policy p);
std::string to_string(SweepAxis a);
Policy parse_policy(const std::string& name);
SweepAxis parse_sweep(const std::string& name);

/// Scenario as the policy sees it: FedAvg weights or a frozen alpha are
/// environment settings.
ScenarioConfig scenario_for(const ScenarioConfig& base, Policy p);

/// Applies one sweep value. Throws when the value is outside physical bounds.
ScenarioConfig apply_sweep(const ScenarioConfig& base, SweepAxis axis, double value);

/// True when the axis changes the observation or action shape.
bool sweep_reshapes(SweepAxis axis);

/// The SAGIN environment behind the agent interface. Continuous actions in
/// [-1, 1] are mapped with Env::raw_from_unit; the hovering policy zeroes
/// every velocity.
class SaginEnv final : public hybrid::HybridEnv {
public:
    SaginEnv(ScenarioConfig cfg, Policy policy);

    /// Pins layout and data to one scenario seed; episode seeds then only
    /// drive the channel fading.
    void pin_scenario(std::optional<std::uint64_t> seed) { pinned_ = seed; }

    int observation_size() const override { return env_.observation_size(); }
    std::vector<int> discrete_options() const override { return env_.layout().discrete_options(); }
    int continuous_size() const override { return env_.layout().continuous_size(); }
    Vector reset(std::uint64_t seed) override;
    hybrid::EnvStep step(std::span<const int> discrete, std::span<const double> continuous) override;

    env::Env& env() { return env_; }
    const env::Env& env() const { return env_; }
    const env::StepInfo& last_info() const { return last_; }
    const env::HybridAction& last_action() const { return last_action_; }

private:
    env::Env env_;
    Policy policy_;
    std::optional<std::uint64_t> pinned_;
    env::StepInfo last_;
    env::HybridAction last_action_;
};

// Metrics -----------------------------------------------------------------------

inline constexpr const char* kCsvSchemaLine = "# sagin-metrics v1";

/// Column order of the metrics CSV. task_accuracy and task_loss hold one
/// value per task joined with ';'.
inline constexpr const char* kCsvColumns[] = {
    "experiment", "policy",        "sweep",          "sweep_value",   "seed",
    "phase",      "episode",       "slot",           "task_count",    "mean_accuracy",
    "accuracy_spread", "reward",   "episode_return", "task_accuracy", "task_loss"};

struct MetricRow {
    std::string experiment;
    std::string policy;
    std::string sweep;
    double sweep_value = 0.0;
    std::uint64_t seed = 0;
    std::string phase;  // "train", "probe" (greedy episode during training) or "eval"
    int episode = 0;
    int slot = 0;
    std::vector<double> task_accuracy;
    std::vector<double> task_loss;
    double reward = 0.0;
    double episode_return = 0.0;

    double mean_accuracy() const;
    double accuracy_spread() const;
};

/// Throws std::invalid_argument describing the first violated invariant.
void validate_row(const MetricRow& row);

void write_csv_header(std::ostream& out);
void write_csv_row(std::ostream& out, const MetricRow& row);
std::vector<MetricRow> read_csv(std::istream& in);
std::vector<MetricRow> read_csv(const std::filesystem::path& path);

struct SummaryRow {
    std::string experiment;
    std::string policy;
    std::string sweep;
    double sweep_value = 0.0;
    int seeds = 0;
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;  // population convention
    double mean_spread = 0.0;
    double std_spread = 0.0;
};

/// Final-slot eval rows of every (experiment, policy, sweep, value, seed),
/// reduced to mean and population std over seeds. Sorted by key.
std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows);
std::vector<SummaryRow> emit_summary(const std::vector<std::filesystem::path>& csv_paths);
void write_summary(std::ostream& out, const std::vector<SummaryRow>& rows);

// Experiments ---------------------------------------------------------------------

struct ExperimentSpec {
    std::string name = "run";
    ScenarioConfig scenario;
    hybrid::Schedule schedule;
    Policy policy = Policy::HDsac;
    SweepAxis sweep = SweepAxis::None;
    std::vector<double> sweep_values;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    /// Train on each seed's own layout and data; otherwise episodes draw
    /// fresh scenarios.
    bool pin_training_scenario = true;
    /// Reuse agents saved by an earlier run with the same name and policy.
    /// Reused agents contribute no train rows.
    bool reuse_agents = false;
    std::filesystem::path output_dir = "out";
};

void validate(const ExperimentSpec& spec);

struct ExperimentResult {
    std::filesystem::path csv;
    std::vector<MetricRow> rows;
};

/// Greedy evaluation episode of a trained agent (or the random policy when
/// agent is null) on `seed`. One row per slot.
std::vector<MetricRow> evaluate_episode(const ScenarioConfig& scenario, Policy policy,
                                        const hybrid::HDsacAgent* agent, std::uint64_t seed,
                                        const std::string& experiment, SweepAxis sweep,
                                        double sweep_value);

/// Trains one agent for `seed` and returns it with per-episode train rows.
hybrid::HDsacAgent train_agent(const ScenarioConfig& scenario, Policy policy, const hybrid::Schedule& schedule,
                               std::uint64_t seed, bool pin_scenario, const std::string& experiment,
                               std::vector<MetricRow>* train_rows = nullptr);

ExperimentResult run_experiment(const ExperimentSpec& spec);

/// run_experiment under a baseline policy: hdsac_fedavg, hdsac_hovering,
/// random or fixed_reward. Throws on any other name.
ExperimentResult run_baseline(const std::string& name, ExperimentSpec spec);

/// Sweep values used when none are given.
std::vector<double> default_sweep_values(SweepAxis axis, const ScenarioConfig& base);

}  // namespace sagin::harness
