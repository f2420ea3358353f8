#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "sagin/dsac.hpp"

namespace sagin::hybrid {

using nn::Matrix;
using nn::Vector;

struct EnvStep {
    Vector observation;
    double reward = 0.0;
    bool terminal = false;   // no bootstrapping past this step
    bool truncated = false;  // episode ends but the state is not terminal
};

/// Environment seen by the agents. Discrete actions are one index per slot,
/// continuous actions live in [-1, 1].
class HybridEnv {
public:
    virtual ~HybridEnv() = default;
    virtual int observation_size() const = 0;
    virtual std::vector<int> discrete_options() const = 0;
    virtual int continuous_size() const = 0;
    virtual Vector reset(std::uint64_t seed) = 0;
    virtual EnvStep step(std::span<const int> discrete, std::span<const double> continuous) = 0;
};

/// Learner and loop settings. Loaded from a flat JSON schedule file.
struct Schedule {
    int episodes = 60;
    int max_episode_steps = 0;  // 0: until the env ends the episode
    int eval_every = 0;         // greedy probe episode every n training episodes, 0: off
    int warmup_steps = 500;     // uniform random actions before the first update
    int batch_size = 64;
    int update_every = 1;
    int updates_per_step = 1;
    std::size_t buffer_capacity = 100'000;
    std::vector<int> hidden{64, 64};

    double discount = 0.99;
    double tau = 0.005;
    double rho_min = 1.0;
    double target_clip = 10.0;
    double grad_clip = 10.0;

    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double temperature_lr = 3e-4;
    double initial_temperature = 0.1;
    bool learn_temperature = true;
    double continuous_entropy_per_dim = -1.0;

    double discrete_actor_lr = 3e-4;
    double discrete_critic_lr = 3e-4;
    double discrete_initial_temperature = 0.1;
    double discrete_entropy_fraction = 0.3;  // target entropy as a share of the uniform entropy

    double coupled_lr = 1e-3;
    double value_lr = 3e-4;
    double kappa = 0.0;  // weight of E[Q-bar] in the recoupling objective
    double kl_total = 0.1;
    double kl_continuous = 0.001;
    double kl_discrete = 0.01;
    double dual_lr = 0.01;
    int recouple_every = 1;
    int recouple_iterations = 2;
    int backtrack_steps = 8;

    std::uint64_t seed = 0;
};

void validate(const Schedule& s);
Schedule load_schedule(const std::filesystem::path& path);
Schedule parse_schedule(const std::string& json_text);
std::string schedule_to_json(const Schedule& s);

/// Per-slot softmax of stacked logits. Rows follow slot order.
Matrix slot_softmax(const Matrix& logits, std::span<const int> options);

/// Sum over slots of log p(a_i).
double factored_log_prob(const Matrix& probs, int column, std::span<const int> options,
                         std::span<const int> action);

/// Sum over slots of the categorical entropy.
double factored_entropy(const Matrix& probs, int column, std::span<const int> options);

/// Rows of the one-hot encoding of a discrete action.
Vector one_hot(std::span<const int> options, std::span<const int> action);

/// KL(p || q) for factored categoricals, summed over slots.
double categorical_kl(const Matrix& p, const Matrix& q, int column, std::span<const int> options);

/// KL between diagonal Gaussians given means and log stds, summed over dims.
double gaussian_kl(const Vector& mu_p, const Vector& log_std_p, const Vector& mu_q, const Vector& log_std_q);

struct DiscreteConfig {
    int obs_dim = 0;
    std::vector<int> options;
    std::vector<int> hidden{64, 64};
    double discount = 0.99;
    double tau = 0.005;
    double rho_min = 1.0;
    double target_clip = 10.0;
    double actor_lr = 3e-4;
    double critic_lr = 3e-4;
    double temperature_lr = 3e-4;
    double initial_temperature = 0.1;
    bool learn_temperature = true;
    double entropy_fraction = 0.3;
    double grad_clip = 10.0;
    std::uint64_t seed = 0;

    int one_hot_size() const;
    double entropy_target() const;
};

/// Factored categorical actor with a distributional critic on [s; one-hot(a)].
class DiscreteAgent {
public:
    DiscreteAgent() = default;
    explicit DiscreteAgent(const DiscreteConfig& cfg);

    const DiscreteConfig& config() const { return cfg_; }

    std::vector<int> act(const Vector& s, bool explore);
    Matrix probabilities(const Matrix& s, bool use_target = false) const;
    std::vector<int> sample(const Matrix& probs, int column, Rng& rng) const;

    /// Q(s, a) with slot i replaced by every option in turn, for every
    /// column of s; row offset_i + k of the result holds option k of slot i.
    Matrix slot_values(const Matrix& s, const std::vector<std::vector<int>>& actions) const;

    Vector soft_return_targets(const dsac::Batch& batch);
    Vector critic_gradient(const dsac::Batch& batch, const Vector& targets) const;

    struct ActorGradient {
        Vector params;
        double mean_entropy = 0.0;
    };
    /// Gradient of E_s[sum_i E_{a_i ~ pi_i}[nu log pi_i(a_i) - Q(s, a_-i, a_i)]]
    /// with a_-i given per column.
    ActorGradient actor_gradient(const Matrix& s, const std::vector<std::vector<int>>& others) const;

    void update(const dsac::Batch& batch);

    double temperature() const { return std::exp(log_nu_); }
    double log_temperature() const { return log_nu_; }
    dsac::DistributionalCritic& critic() { return critic_; }
    const dsac::DistributionalCritic& critic() const { return critic_; }
    nn::DenseNet& actor() { return actor_; }
    const nn::DenseNet& actor() const { return actor_; }
    Matrix critic_input(const Matrix& s, const std::vector<std::vector<int>>& actions) const;

    void save(std::ostream& out) const;
    static DiscreteAgent load(std::istream& in);

private:
    DiscreteConfig cfg_;
    std::vector<int> offsets_;
    dsac::DistributionalCritic critic_;
    nn::DenseNet actor_;
    nn::DenseNet actor_target_;
    nn::AdamState actor_adam_;
    double log_nu_ = 0.0;
    nn::AdamState nu_adam_;
    Rng rng_;
};

struct RecoupleStats {
    double kl_discrete = 0.0;    // KL(old || new), mean over states
    double kl_continuous = 0.0;  // per-dimension mean
    double kl_to_product = 0.0;  // KL(product || coupled) after the step
    double scale = 0.0;          // accepted fraction of the step, 0 when rejected
    bool accepted = false;
};

enum class EvalPolicy { Coupled, Product };

/// Decoupled discrete and continuous learners plus the coupled policy they
/// are distilled into.
class HDsacAgent {
public:
    HDsacAgent() = default;
    HDsacAgent(int obs_dim, std::vector<int> options, int continuous_dim, const Schedule& schedule);

    /// Training actions come from the product of the decoupled policies.
    void act(const Vector& s, bool explore, std::vector<int>& discrete, Vector& continuous);
    /// Deterministic action of the chosen policy.
    void greedy(const Vector& s, EvalPolicy which, std::vector<int>& discrete, Vector& continuous) const;

    void update(const dsac::Batch& batch);

    struct CoupledOutput {
        Matrix probs;    // sum(options) x B
        Matrix mean;     // continuous_dim x B, pre-squash
        Matrix log_std;
        Matrix raw;      // network output
    };
    CoupledOutput coupled(const Matrix& s) const;

    /// One recoupling step on the states of `batch`.
    RecoupleStats recouple(const Matrix& s);
    /// Mean KL(product || coupled) on s.
    double product_gap(const Matrix& s) const;

    void update_value(const dsac::Batch& batch);

    const std::vector<int>& options() const { return options_; }
    int observation_size() const { return obs_dim_; }
    int continuous_size() const { return cont_dim_; }
    DiscreteAgent& discrete() { return discrete_; }
    const DiscreteAgent& discrete() const { return discrete_; }
    dsac::Agent& continuous() { return continuous_; }
    const dsac::Agent& continuous() const { return continuous_; }
    const Schedule& schedule() const { return schedule_; }
    std::int64_t updates() const { return updates_; }
    std::int64_t rejected_recouples() const { return rejected_; }
    double lambda_discrete() const { return lambda_d_; }
    double lambda_continuous() const { return lambda_c_; }

    void save(std::ostream& out) const;
    static HDsacAgent load(std::istream& in);
    void save(const std::filesystem::path& path) const;
    static HDsacAgent load(const std::filesystem::path& path);

private:
    Vector coupled_output_gradient(const Matrix& s, const CoupledOutput& cur, const CoupledOutput& old,
                                   const Matrix& prod_probs, const Matrix& prod_mean,
                                   const Matrix& prod_log_std, const nn::GradientTape& tape) const;

    int obs_dim_ = 0;
    int cont_dim_ = 0;
    std::vector<int> options_;
    Schedule schedule_;
    DiscreteAgent discrete_;
    dsac::Agent continuous_;
    nn::DenseNet coupled_;
    nn::AdamState coupled_adam_;
    nn::DenseNet value_;  // Q-bar on [s; one-hot; a_c]
    nn::DenseNet value_target_;
    nn::AdamState value_adam_;
    double lambda_d_ = 0.0;
    double lambda_c_ = 0.0;
    std::int64_t updates_ = 0;
    std::int64_t rejected_ = 0;
    Rng rng_;
};

struct EpisodeLog {
    int episode = 0;
    int steps = 0;
    double episode_return = 0.0;
};

struct TrainingLog {
    std::vector<EpisodeLog> episodes;
    std::int64_t env_steps = 0;
    std::int64_t updates = 0;
};

using EpisodeCallback = std::function<void(const EpisodeLog&)>;

/// Seed of episode `episode` under a schedule seed.
std::uint64_t episode_seed(std::uint64_t seed, int episode);

TrainingLog train_h_dsac(HybridEnv& env, HDsacAgent& agent, const Schedule& schedule,
                         const EpisodeCallback& on_episode = {});

/// Plain DSAC on the continuous part; discrete slots are held at option 0.
TrainingLog train_dsac(HybridEnv& env, dsac::Agent& agent, const Schedule& schedule,
                       const EpisodeCallback& on_episode = {});

dsac::AgentConfig continuous_config(int obs_dim, int act_dim, const Schedule& s);
DiscreteConfig discrete_config(int obs_dim, std::vector<int> options, const Schedule& s);

/// Greedy episode return.
double evaluate(HybridEnv& env, const HDsacAgent& agent, EvalPolicy which, std::uint64_t seed,
                int max_steps = 0);

/// One-step bandit with a constant observation: arm k pays
/// bonus[k] - (a - center[k])^2 for continuous action a.
class Bandit final : public HybridEnv {
public:
    Bandit(std::vector<double> bonus, std::vector<double> center);

    int observation_size() const override { return 1; }
    std::vector<int> discrete_options() const override { return {static_cast<int>(bonus_.size())}; }
    int continuous_size() const override { return 1; }
    Vector reset(std::uint64_t seed) override;
    EnvStep step(std::span<const int> discrete, std::span<const double> continuous) override;

    double reward(int arm, double a) const;
    /// Best arm and its best action in [-1, 1].
    std::pair<int, double> optimum() const;

private:
    std::vector<double> bonus_;
    std::vector<double> center_;
};

}  // namespace sagin::hybrid
