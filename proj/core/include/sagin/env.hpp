#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sagin/channel.hpp"
#include "sagin/geometry.hpp"
#include "sagin/hfl.hpp"
#include "sagin/scenario.hpp"

namespace sagin::env {

using nn::Matrix;
using nn::Vector;

struct RewardParams {
    double decay = 0.995;
    double eps_c1 = 200.0;
    double eps_c2 = 100.0;
    double eps_f = 0.01;
    double gamma_floor = 0.01;
    bool fixed = false;

    static RewardParams from(const ScenarioConfig& cfg);
};

/// Weight of the raw-performance term at slot t: decay^t, or 1 when fixed.
double reward_alpha(int t, const RewardParams& p);

/// Time-decaying mix of mean task performance and a per-task penalty on the
/// relative distance to the cross-task mean. gamma is floored first.
double reward(std::span<const double> gamma, int t, const RewardParams& p);

/// Discrete slot order: user_cluster[K], uav_sat_up[M], final_sat,
/// sat_uav_down[M], then user_task[K] when the agent schedules tasks.
/// Continuous order: uav_velocity[M][3], edge logits[F][K], cloud logits[F][M],
/// final logits[F][M+N].
struct ActionLayout {
    int users = 0;
    int uavs = 0;
    int satellites = 0;
    int tasks = 0;
    bool task_slots = false;

    std::vector<int> discrete_options() const;
    int discrete_size() const;
    int continuous_size() const;
    int edge_offset() const { return 3 * uavs; }
    int cloud_offset() const { return edge_offset() + tasks * users; }
    int final_offset() const { return cloud_offset() + tasks * uavs; }
};

struct HybridAction {
    std::vector<int> user_cluster;  // K entries in [0, M)
    std::vector<int> uav_sat_up;    // M entries in [0, N), -1 when idle
    int final_sat = -1;             // -1 when no satellite is visible
    std::vector<int> sat_uav_down;  // M entries in [0, N), -1 when idle
    std::vector<int> user_task;     // empty unless the agent schedules tasks
    std::vector<bool> uav_idle;     // no visible satellite this slot
    std::vector<geometry::Vec3> uav_velocity;

    Matrix edge_logits;   // F x K
    Matrix cloud_logits;  // F x M
    Matrix final_logits;  // F x (M + N), UAV entries first

    // Weights the logits imply for the groups visible at decode time. Each
    // group (users of one cluster, UAVs paired to one satellite, members of
    // the final aggregation) is a simplex over its active members; inactive
    // entries are zero.
    Matrix edge_weights;
    Matrix cloud_weights;
    Matrix final_weights;
};

struct AggregationRecord {
    enum class Level { Edge, Cloud, Final } level = Level::Edge;
    int task = 0;
    int node = 0;  // UAV for edge, satellite otherwise
    std::vector<int> members;  // users, UAVs, or final members (UAV m, satellite M + n)
    std::vector<double> weights;
    std::vector<double> masses;
};

struct StepInfo {
    std::vector<double> accuracy;  // latest global accuracy per task
    std::vector<double> loss;
    std::vector<int> rounds;       // finished global rounds per task
    int idle_uavs = 0;
    int dropped_transfers = 0;
    double alpha = 1.0;
    std::vector<AggregationRecord> aggregations;
};

struct StepResult {
    Vector observation;
    double reward = 0.0;
    bool done = false;
    StepInfo info;
};

class Env {
public:
    explicit Env(ScenarioConfig cfg);

    const ScenarioConfig& config() const { return cfg_; }
    const ActionLayout& layout() const { return layout_; }
    int observation_size() const;

    Vector reset(std::uint64_t seed);
    /// Layout, constellation and data follow `seed`; channel fading follows
    /// `fading_seed`. reset(s) is reset(s, s).
    Vector reset(std::uint64_t seed, std::uint64_t fading_seed);

    /// raw_discrete entries are reduced modulo their option count; a masked
    /// satellite choice moves to the next visible satellite. raw_continuous
    /// velocities are squashed with v_max tanh(x) per axis and then scaled
    /// back onto the v_max ball when faster; logits are clamped to [-50, 50].
    HybridAction decode_action(std::span<const int> raw_discrete,
                               std::span<const double> raw_continuous) const;

    /// Maps agent actions in [-1, 1] to raw continuous values: atanh for
    /// velocities, weight_logit_scale times the value for logits.
    Vector raw_from_unit(std::span<const double> unit) const;

    StepResult step(const HybridAction& action);
    Vector observe() const;

    int slot() const { return t_; }
    bool done() const;
    const std::vector<double>& accuracy() const { return gamma_; }
    const std::vector<double>& loss() const { return loss_; }
    const std::vector<geometry::NodeState>& uavs() const { return uavs_; }
    const std::vector<geometry::NodeState>& users() const { return users_; }
    const std::vector<geometry::NodeState>& satellites() const { return sats_; }
    const std::vector<geometry::CoverageWindow>& windows() const { return windows_; }
    const hfl::SyntheticTasks& tasks() const { return data_; }
    double window_span() const { return window_span_; }
    /// |h|^2 of the ground-air link (user k, UAV m) for the current slot.
    double ground_gain(int user, int uav) const { return ground_gain_(user, uav); }
    bool satellite_visible(int sat, int uav) const;
    /// Transfers in flight and the rate each would get this slot.
    const std::vector<hfl::TransferJob>& transfers() const { return jobs_; }
    std::vector<double> transfer_rates() const { return job_rates(); }

private:
    struct Member {
        hfl::TaskModel model;
        double mass = 0.0;
        int node = 0;
    };

    struct TaskState {
        int version = 0;  // finished global rounds
        hfl::TaskModel global;
        std::vector<bool> participating;
        std::vector<int> user_version;
        std::vector<hfl::TaskModel> local;
        std::vector<int> iterations;
        std::vector<bool> delivered;
        std::vector<std::vector<Member>> uav_inbox;
        std::vector<bool> edge_pending;  // edge model waiting for an uplink
        std::vector<Member> edge_models;
        int edge_total = 0;
        int edge_landed = 0;
        std::vector<std::vector<Member>> sat_inbox;
        int final_sat = -1;      // collecting satellite of the round in flight
        int global_holder = -1;  // satellite that produced the latest global
        bool relaying = false;
        int relays_expected = 0;
        std::vector<Member> relayed;
        std::vector<int> uav_version;
        std::vector<int> sat_version;
        std::vector<hfl::TaskModel> sat_global;  // latest global held by satellites
        bool uploading_phase = false;  // edge models on their way to space
    };

    void draw_channels();
    void apply_clusters(const HybridAction& action, StepInfo& info);
    void local_training(const HybridAction& action);
    void start_jobs(const HybridAction& action);
    std::vector<double> job_rates() const;
    void deliver(const hfl::TransferJob& job, const HybridAction& action, StepInfo& info);
    void try_edge_aggregation(int f, const HybridAction& action, StepInfo& info);
    void try_cloud_stage(int f, const HybridAction& action, StepInfo& info);
    void finalize(int f, const HybridAction& action, StepInfo& info);
    std::vector<double> group_weights(const Matrix& logits, int f, std::span<const int> columns,
                                      std::span<const double> masses) const;
    bool has_job(hfl::Direction dir, int task, int src, int dst) const;
    double normalized_gain(double mag_sq) const;

    ScenarioConfig cfg_;
    ActionLayout layout_;
    RewardParams reward_params_;
    geometry::UavLimits limits_;
    double window_span_ = 0.0;
    double gain_log_lo_ = 0.0;
    double gain_log_hi_ = 1.0;

    std::uint64_t seed_ = 0;
    Rng fading_rng_;
    int t_ = 0;
    bool initialized_ = false;

    std::vector<geometry::NodeState> users_;
    std::vector<geometry::NodeState> uavs_;
    std::vector<geometry::NodeState> sats_;
    std::vector<geometry::CoverageWindow> windows_;  // satellite-major
    std::vector<int> cluster_;
    std::vector<int> next_task_;

    Matrix ground_gain_;   // K x M
    Matrix sat_up_gain_;   // N x M
    Matrix sat_down_gain_; // N x M

    hfl::SyntheticTasks data_;
    std::vector<TaskState> task_state_;
    std::vector<hfl::TransferJob> jobs_;
    std::vector<double> gamma_;
    std::vector<double> loss_;
    Matrix node_accuracy_;  // (M + N) x F
};

}  // namespace sagin::env
