#include "sagin/hfl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "sagin/binary_io.hpp"
#include "sagin/random.hpp"

namespace sagin::hfl {

namespace {

std::vector<double> class_mass(double concentration, int classes, Rng& rng) {
    std::vector<double> p(classes, 1.0 / classes);
    if (std::isinf(concentration)) {
        return p;
    }
    std::gamma_distribution<double> gamma(concentration, 1.0);
    double total = 0.0;
    for (auto& v : p) {
        v = gamma(rng);
        total += v;
    }
    if (total <= 0.0) {
        // Every gamma draw underflowed; put all mass on one random class.
        std::fill(p.begin(), p.end(), 0.0);
        p[std::uniform_int_distribution<int>(0, classes - 1)(rng)] = 1.0;
        return p;
    }
    for (auto& v : p) {
        v /= total;
    }
    return p;
}

// Largest-remainder apportionment of `size` samples to classes.
std::vector<int> class_counts(const std::vector<double>& p, int size) {
    std::vector<int> counts(p.size());
    std::vector<std::pair<double, int>> remainders;
    int assigned = 0;
    for (std::size_t c = 0; c < p.size(); ++c) {
        const double exact = p[c] * size;
        counts[c] = static_cast<int>(std::floor(exact));
        assigned += counts[c];
        remainders.emplace_back(exact - counts[c], static_cast<int>(c));
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (int i = 0; assigned < size; ++i, ++assigned) {
        ++counts[remainders[i % remainders.size()].second];
    }
    return counts;
}

struct Generator {
    std::vector<Vector> means;  // unscaled class means
    Vector scales;

    Vector sample(int label, Rng& rng) const {
        Vector x(means[label].size());
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            x[j] = scales[j] * (means[label][j] + standard_normal(rng));
        }
        return x;
    }

    int bayes_label(const Vector& x) const {
        int best = 0;
        double best_d = INFINITY;
        for (std::size_t c = 0; c < means.size(); ++c) {
            const double d = (x.cwiseQuotient(scales) - means[c]).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(c);
            }
        }
        return best;
    }
};

Matrix softmax_columns(const Matrix& logits) {
    Matrix p = logits;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
        const double mx = p.col(j).maxCoeff();
        p.col(j) = (p.col(j).array() - mx).exp();
        p.col(j) /= p.col(j).sum();
    }
    return p;
}

void check_model(const TaskModel& model, const TaskSpec& spec) {
    if (model.params.size() != spec.model_dim) {
        throw std::invalid_argument("task model has " + std::to_string(model.params.size()) +
                                    " parameters, task " + std::to_string(spec.task_id) +
                                    " expects " + std::to_string(spec.model_dim));
    }
}

TaskModel weighted_combination(std::span<const TaskModel> models, std::span<const double> weights,
                               Normalization mode) {
    if (models.empty()) {
        throw std::invalid_argument("aggregate: no models");
    }
    if (models.size() != weights.size()) {
        throw std::invalid_argument("aggregate: model and weight counts differ");
    }
    double total = 0.0;
    for (double w : weights) {
        if (!std::isfinite(w) || w < 0.0) {
            throw std::invalid_argument("aggregate: weights must be finite and non-negative");
        }
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw std::invalid_argument("aggregate: weights must sum to one");
    }
    const int task = models.front().task_id;
    const Eigen::Index dim = models.front().params.size();
    TaskModel out;
    out.task_id = task;
    out.params = Vector::Zero(dim);
    out.staleness = models.front().staleness;
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (models[i].task_id != task) {
            throw std::invalid_argument("aggregate: models from different tasks");
        }
        if (models[i].params.size() != dim) {
            throw std::invalid_argument("aggregate: parameter dimensions differ");
        }
        out.params += weights[i] * models[i].params;
        out.staleness = std::min(out.staleness, models[i].staleness);
    }
    if (mode == Normalization::Literal) {
        out.params /= static_cast<double>(models.size());
    }
    return out;
}

}  // namespace

nn::DenseNet task_network(const TaskSpec& spec) {
    if (spec.hidden_units > 0) {
        return nn::DenseNet({spec.input_dim, spec.hidden_units, spec.class_count},
                            nn::Activation::Tanh);
    }
    return nn::DenseNet({spec.input_dim, spec.class_count}, nn::Activation::Identity);
}

TaskModel zero_model(const TaskSpec& spec) {
    TaskModel m;
    m.task_id = spec.task_id;
    m.params = Vector::Zero(spec.model_dim);
    return m;
}

SyntheticTasks gen_synthetic_tasks(const SyntheticConfig& cfg, std::uint64_t seed) {
    if (cfg.task_count < 1 || cfg.user_count < 1) {
        throw std::invalid_argument("gen_synthetic_tasks: need at least one task and one user");
    }
    if (std::isnan(cfg.concentration) || !(cfg.concentration > 0.0)) {
        throw std::invalid_argument("gen_synthetic_tasks: concentration must be positive");
    }
    if (cfg.input_dim < 1 || cfg.class_count < 2 || cfg.min_samples < 1 ||
        cfg.max_samples < cfg.min_samples || cfg.test_per_class < 1) {
        throw std::invalid_argument("gen_synthetic_tasks: invalid task dimensions");
    }
    if (cfg.zero_probability < 0.0 || cfg.zero_probability >= 1.0) {
        throw std::invalid_argument("gen_synthetic_tasks: zero_probability must lie in [0, 1)");
    }

    SyntheticTasks out;
    out.datasets.assign(cfg.user_count, std::vector<LocalDataset>(cfg.task_count));
    for (int f = 0; f < cfg.task_count; ++f) {
        Rng rng = make_stream(seed, 100 + f);
        const double t = cfg.task_count == 1 ? 1.0 : static_cast<double>(f) / (cfg.task_count - 1);
        const double separation = cfg.min_separation + t * (cfg.max_separation - cfg.min_separation);
        const double spread =
            cfg.max_scale_spread + t * (cfg.min_scale_spread - cfg.max_scale_spread);

        Generator gen;
        gen.scales = Vector(cfg.input_dim);
        for (int j = 0; j < cfg.input_dim; ++j) {
            gen.scales[j] = std::exp(uniform(rng, -spread, spread));
        }
        for (int c = 0; c < cfg.class_count; ++c) {
            Vector dir(cfg.input_dim);
            for (int j = 0; j < cfg.input_dim; ++j) {
                dir[j] = standard_normal(rng);
            }
            // Random directions are nearly orthogonal, so pairwise mean
            // distance is about `separation` noise standard deviations.
            gen.means.push_back(dir.normalized() * (separation / std::sqrt(2.0)));
        }

        TaskSpec spec;
        spec.task_id = f;
        spec.input_dim = cfg.input_dim;
        spec.class_count = cfg.class_count;
        spec.hidden_units = cfg.hidden_units;
        spec.model_dim = static_cast<int>(task_network(spec).param_count());
        const double moved = cfg.transfer_params > 0.0 ? cfg.transfer_params : spec.model_dim;
        spec.model_size_bits = moved * cfg.bits_per_parameter;

        const int test_n = cfg.test_per_class * cfg.class_count;
        spec.test_features = Matrix(cfg.input_dim, test_n);
        int correct = 0;
        for (int i = 0; i < test_n; ++i) {
            const int label = i % cfg.class_count;
            spec.test_features.col(i) = gen.sample(label, rng);
            spec.test_labels.push_back(label);
            correct += gen.bayes_label(spec.test_features.col(i)) == label;
        }
        spec.reference_accuracy = static_cast<double>(correct) / test_n;

        std::vector<int> sizes(cfg.user_count, 0);
        bool any = false;
        for (int k = 0; k < cfg.user_count; ++k) {
            if (uniform(rng, 0.0, 1.0) >= cfg.zero_probability) {
                sizes[k] = std::uniform_int_distribution<int>(cfg.min_samples, cfg.max_samples)(rng);
                any = true;
            }
        }
        if (!any) {
            sizes[f % cfg.user_count] = cfg.max_samples;
        }
        for (int k = 0; k < cfg.user_count; ++k) {
            LocalDataset& ds = out.datasets[k][f];
            ds.task_id = f;
            ds.class_proportions = class_mass(cfg.concentration, cfg.class_count, rng);
            const auto counts = class_counts(ds.class_proportions, sizes[k]);
            std::vector<int> labels;
            for (int c = 0; c < cfg.class_count; ++c) {
                labels.insert(labels.end(), counts[c], c);
            }
            std::shuffle(labels.begin(), labels.end(), rng);
            ds.features = Matrix(cfg.input_dim, sizes[k]);
            for (int i = 0; i < sizes[k]; ++i) {
                ds.features.col(i) = gen.sample(labels[i], rng);
            }
            ds.labels = std::move(labels);
        }
        out.tasks.push_back(std::move(spec));
    }
    return out;
}

LossValue task_loss(const TaskModel& model, const TaskSpec& spec, const Matrix& features,
                    std::span<const int> labels, double l2) {
    check_model(model, spec);
    if (features.cols() != static_cast<Eigen::Index>(labels.size()) || labels.empty()) {
        throw std::invalid_argument("task_loss: feature/label count mismatch or empty");
    }
    nn::DenseNet net = task_network(spec);
    net.set_params(model.params);
    nn::GradientTape tape;
    const Matrix p = softmax_columns(net.forward(features, tape));
    const double n = static_cast<double>(labels.size());
    Matrix grad_out = p;
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        loss -= std::log(std::max(p(labels[i], col), 1e-300));
        grad_out(labels[i], col) -= 1.0;
    }
    grad_out /= n;
    LossValue out;
    out.loss = loss / n + 0.5 * l2 * model.params.squaredNorm();
    out.grad = net.backward(tape, grad_out).params + l2 * model.params;
    return out;
}

TaskModel local_train_step(const TaskModel& model, const LocalDataset& data, const TaskSpec& spec,
                           double lr, double l2) {
    if (data.size() == 0) {
        throw std::invalid_argument("local_train_step: empty dataset");
    }
    if (data.task_id != model.task_id || spec.task_id != model.task_id) {
        throw std::invalid_argument("local_train_step: task mismatch");
    }
    TaskModel next = model;
    if (lr != 0.0) {
        const LossValue lv = task_loss(model, spec, data.features, data.labels, l2);
        next.params -= lr * lv.grad;
    }
    ++next.local_iterations_done;
    if (!next.params.allFinite()) {
        throw std::runtime_error("local_train_step: parameters diverged");
    }
    return next;
}

TaskModel edge_aggregate(std::span<const TaskModel> models, std::span<const double> weights,
                         Normalization mode) {
    return weighted_combination(models, weights, mode);
}

TaskModel cloud_aggregate(std::span<const TaskModel> edge_models, std::span<const double> weights,
                          Normalization mode) {
    return weighted_combination(edge_models, weights, mode);
}

TaskModel final_aggregate(std::span<const TaskModel> direct_edge_models,
                          std::span<const TaskModel> relayed_cloud_models,
                          std::span<const double> weights, Normalization mode) {
    std::vector<TaskModel> all(direct_edge_models.begin(), direct_edge_models.end());
    all.insert(all.end(), relayed_cloud_models.begin(), relayed_cloud_models.end());
    return weighted_combination(all, weights, mode);
}

Evaluation evaluate_task(const TaskModel& model, const TaskSpec& spec) {
    check_model(model, spec);
    nn::DenseNet net = task_network(spec);
    net.set_params(model.params);
    const Matrix p = softmax_columns(net.forward(spec.test_features));
    Evaluation e;
    int correct = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < spec.test_labels.size(); ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        Eigen::Index arg = 0;
        p.col(col).maxCoeff(&arg);
        correct += static_cast<int>(arg) == spec.test_labels[i];
        loss -= std::log(std::max(p(spec.test_labels[i], col), 1e-300));
    }
    const double n = static_cast<double>(spec.test_labels.size());
    e.accuracy = correct / n;
    e.loss = loss / n;
    return e;
}

std::vector<TransferJob> advance_transfers(std::vector<TransferJob>& jobs,
                                           std::span<const double> rates, double dt) {
    if (!(dt > 0.0)) {
        throw std::invalid_argument("advance_transfers: dt must be positive");
    }
    if (rates.size() != jobs.size()) {
        throw std::invalid_argument("advance_transfers: one rate per job required");
    }
    std::vector<TransferJob> done;
    std::vector<TransferJob> pending;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        TransferJob& job = jobs[i];
        const double moved = std::max(0.0, rates[i]) * dt;
        job.bits_remaining = std::max(0.0, job.bits_remaining - moved);
        if (job.bits_remaining <= 0.0) {
            done.push_back(std::move(job));
        } else {
            pending.push_back(std::move(job));
        }
    }
    jobs = std::move(pending);
    return done;
}

void write_checkpoint(std::ostream& out, const TaskModel& model) {
    io::write_magic(out, "SGTM");
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(model.task_id));
    io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(model.params.size()));
    for (Eigen::Index i = 0; i < model.params.size(); ++i) {
        io::write_le<double>(out, model.params[i]);
    }
}

TaskModel read_checkpoint(std::istream& in) {
    io::expect_magic(in, "SGTM");
    TaskModel m;
    m.task_id = static_cast<int>(io::read_le<std::uint32_t>(in));
    const auto dim = io::read_le<std::uint64_t>(in);
    if (dim > (1ULL << 32)) {
        throw std::runtime_error("read_checkpoint: implausible dimension");
    }
    m.params = Vector(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < m.params.size(); ++i) {
        m.params[i] = io::read_le<double>(in);
    }
    return m;
}

}  // namespace sagin::hfl
