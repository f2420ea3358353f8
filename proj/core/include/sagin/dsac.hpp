#pragma once

#include <cstdint>
#include <iosfwd>
#include <mutex>
#include <span>
#include <vector>

#include "sagin/nn.hpp"
#include "sagin/random.hpp"

namespace sagin::dsac {

using nn::Matrix;
using nn::Vector;

struct GaussianReturn {
    double q_mean = 0.0;
    double q_std = 1.0;
};

struct Transition {
    Vector s;
    Vector a;                  // continuous part, squashed to [-1, 1]
    std::vector<int> discrete; // categorical part, may be empty
    double r = 0.0;
    Vector s_next;
    bool done = false;  // terminal; time-limit truncation is not terminal
};

/// Column-per-sample view of a minibatch.
struct Batch {
    Matrix s;
    Matrix a;
    std::vector<std::vector<int>> discrete;
    Vector r;
    Matrix s_next;
    Vector done;  // 1 for terminal transitions

    int size() const { return static_cast<int>(r.size()); }
};

/// Uniform replay with a fixed capacity; oldest entries are overwritten.
/// append and sample lock, so one collector and one learner may interleave.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity);

    void append(Transition t);
    Batch sample(int batch_size, Rng& rng) const;
    std::size_t size() const;
    std::size_t capacity() const { return capacity_; }
    Transition at(std::size_t i) const;

private:
    std::size_t capacity_;
    std::size_t next_ = 0;
    std::vector<Transition> data_;
    mutable std::mutex mutex_;
};

Batch make_batch(std::span<const Transition> transitions);

/// max(rho_raw, rho_min).
double clamp_std(double rho_raw, double rho_min);

/// Clips target into [q - clip, q + clip].
double clip_target(double target, double q, double clip);

/// Log density of `target` under N(q, rho^2).
double gaussian_log_likelihood(double target, double q, double rho);

/// Ascent gradients of the log-likelihood. The mean gradient uses the raw
/// target, the std gradient the clipped one.
struct NllGradient {
    double d_q = 0.0;
    double d_rho = 0.0;
};
NllGradient gaussian_nll_gradient(double target, double clipped_target, double q, double rho);

/// Critic with a Gaussian return head: output row 0 is Q, row 1 feeds
/// rho = max(softplus(z), rho_min).
class DistributionalCritic {
public:
    DistributionalCritic() = default;
    DistributionalCritic(int input_dim, const std::vector<int>& hidden, double rho_min, Rng& rng);

    std::vector<GaussianReturn> evaluate(const Matrix& inputs, bool target = false) const;

    /// Mean negative log-likelihood gradient over the batch for the online net.
    /// Returns the parameter gradient and, optionally, d/d input of the mean Q.
    Vector loss_gradient(const Matrix& inputs, const Vector& targets, double clip) const;
    /// d Q / d inputs for every column (rows = input_dim).
    Matrix q_input_gradient(const Matrix& inputs) const;

    void apply(const Vector& grad, const nn::AdamConfig& adam, double grad_clip);
    void soft_update(double tau);

    nn::DenseNet net;
    nn::DenseNet target;
    nn::AdamState adam;
    double rho_min = 1.0;
};

struct AgentConfig {
    int obs_dim = 0;
    int act_dim = 0;
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
    double target_entropy = 0.0;  // used when target_entropy_set
    bool target_entropy_set = false;
    double grad_clip = 10.0;
    double log_std_min = -5.0;
    double log_std_max = 1.0;
    bool sampled_target = true;  // false: use the target mean instead of a draw
    std::uint64_t seed = 0;

    double entropy_target() const {
        return target_entropy_set ? target_entropy : -static_cast<double>(act_dim);
    }
};

struct PolicySample {
    Matrix action;     // squashed, act_dim x B
    Vector log_prob;   // per column
    Matrix mean;       // pre-squash mean
    Matrix log_std;    // clamped
    Matrix noise;      // standard normal draws used
};

struct ActorGradient {
    Vector params;
    double mean_log_prob = 0.0;
    double mean_q = 0.0;
};

class Agent {
public:
    Agent() = default;
    explicit Agent(const AgentConfig& cfg);

    const AgentConfig& config() const { return cfg_; }

    /// explore: tanh(mu + sigma eps); otherwise tanh(mu).
    Vector act(const Vector& s, bool explore);

    /// Samples the policy given explicit standard normal noise.
    PolicySample policy(const Matrix& s, const Matrix& noise, bool use_target = false) const;

    GaussianReturn value(const Vector& s, const Vector& a) const;

    /// Sampled soft distributional Bellman targets for every transition.
    Vector soft_return_targets(const Batch& batch);

    Vector critic_gradient(const Batch& batch, const Vector& targets) const;
    ActorGradient actor_gradient(const Batch& batch, const Matrix& noise) const;
    /// d/d log(nu) of E[-nu (log pi + target entropy)].
    double temperature_gradient(double mean_log_prob) const;

    /// One learner step: temperature, critic, actor, targets.
    void update(const Batch& batch);
    void soft_update_targets(double tau);

    double temperature() const;
    double log_temperature() const { return log_nu_; }
    void set_log_temperature(double v) { log_nu_ = v; }
    std::int64_t steps() const { return steps_; }

    DistributionalCritic& critic() { return critic_; }
    const DistributionalCritic& critic() const { return critic_; }
    nn::DenseNet& actor() { return actor_; }
    const nn::DenseNet& actor() const { return actor_; }
    const nn::DenseNet& target_actor() const { return actor_target_; }
    Rng& rng() { return rng_; }

    void save(std::ostream& out) const;
    static Agent load(std::istream& in);

private:
    AgentConfig cfg_;
    DistributionalCritic critic_;
    nn::DenseNet actor_;
    nn::DenseNet actor_target_;
    nn::AdamState actor_adam_;
    double log_nu_ = 0.0;
    nn::AdamState nu_adam_;
    std::int64_t steps_ = 0;
    Rng rng_;
};

/// Copies tau * online + (1 - tau) * target into target.
void soft_update(nn::DenseNet& target, const nn::DenseNet& online, double tau);

/// Engine state as length-prefixed text.
void write_rng(std::ostream& out, const Rng& rng);
Rng read_rng(std::istream& in);

/// log(1 - tanh(u)^2), stable for large |u|.
double log1m_tanh_sq(double u);

}  // namespace sagin::dsac
