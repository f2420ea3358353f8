#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "sagin/nn.hpp"

namespace sagin::hfl {

using nn::Matrix;
using nn::Vector;

struct TaskSpec {
    int task_id = 0;
    int input_dim = 0;
    int class_count = 0;
    int hidden_units = 0;         // 0: multinomial logistic regression
    int model_dim = 0;            // trained parameter count
    double model_size_bits = 0.0; // DM_f, bits moved per model transfer
    Matrix test_features;         // input_dim x n
    std::vector<int> test_labels;
    double reference_accuracy = 0.0;  // true generative rule on the test set
};

struct TaskModel {
    int task_id = 0;
    Vector params;
    int local_iterations_done = 0;
    int staleness = 0;  // rounds since the model was last synced to a global model
};

struct LocalDataset {
    int task_id = 0;
    Matrix features;  // input_dim x size
    std::vector<int> labels;
    std::vector<double> class_proportions;
    int size() const { return static_cast<int>(labels.size()); }
};

struct SyntheticConfig {
    int task_count = 3;
    int user_count = 10;
    /// Dirichlet concentration of per-user class mass; +inf gives i.i.d. users.
    double concentration = 0.5;
    int input_dim = 16;
    int class_count = 4;
    int hidden_units = 0;
    int min_samples = 20;
    int max_samples = 120;
    double zero_probability = 0.2;  // chance a user holds no data for a task
    int test_per_class = 150;
    double min_separation = 1.2;    // class-mean spread in noise std units
    double max_separation = 2.4;
    // Log-range of per-feature scales; larger values slow gradient descent.
    double min_scale_spread = 0.0;
    double max_scale_spread = 1.0;
    double bits_per_parameter = 64.0;
    /// When positive, transfers move this many parameters instead of model_dim.
    double transfer_params = 0.0;
};

struct SyntheticTasks {
    std::vector<TaskSpec> tasks;
    std::vector<std::vector<LocalDataset>> datasets;  // [user][task]
};

SyntheticTasks gen_synthetic_tasks(const SyntheticConfig& cfg, std::uint64_t seed);

nn::DenseNet task_network(const TaskSpec& spec);
TaskModel zero_model(const TaskSpec& spec);

struct LossValue {
    double loss = 0.0;
    Vector grad;
};

/// Mean softmax cross-entropy plus (l2/2)|params|^2, with its gradient.
LossValue task_loss(const TaskModel& model, const TaskSpec& spec, const Matrix& features,
                    std::span<const int> labels, double l2);

/// One full-batch gradient step; counts one local iteration.
TaskModel local_train_step(const TaskModel& model, const LocalDataset& data,
                           const TaskSpec& spec, double lr, double l2);

enum class Normalization {
    WeightedMean,  // sum_i w_i mu_i
    Literal,       // (1/count) sum_i w_i mu_i
};

TaskModel edge_aggregate(std::span<const TaskModel> models, std::span<const double> weights,
                         Normalization mode = Normalization::WeightedMean);

TaskModel cloud_aggregate(std::span<const TaskModel> edge_models, std::span<const double> weights,
                          Normalization mode = Normalization::WeightedMean);

/// Weights cover the direct models first, then the relayed ones.
TaskModel final_aggregate(std::span<const TaskModel> direct_edge_models,
                          std::span<const TaskModel> relayed_cloud_models,
                          std::span<const double> weights,
                          Normalization mode = Normalization::WeightedMean);

struct Evaluation {
    double accuracy = 0.0;
    double loss = 0.0;
};

Evaluation evaluate_task(const TaskModel& model, const TaskSpec& spec);

enum class Direction : std::uint8_t { EdgeUp, CloudUp, Isl, CloudDown, EdgeDown };

struct TransferJob {
    TaskModel payload;
    double bits_remaining = 0.0;
    int src = 0;
    int dst = 0;
    Direction direction = Direction::EdgeUp;
    int round = 0;  // global round of the task this payload belongs to
    double data_mass = 0.0;  // training samples the payload summarizes
};

/// Drains rate*dt bits from every job. Finished jobs are removed from `jobs`
/// and returned in their original order; they count as delivered at the end
/// of the slot even if they finished part way through it.
std::vector<TransferJob> advance_transfers(std::vector<TransferJob>& jobs,
                                           std::span<const double> rates, double dt);

void write_checkpoint(std::ostream& out, const TaskModel& model);
TaskModel read_checkpoint(std::istream& in);

}  // namespace sagin::hfl
