#include "sagin/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace sagin::env {

using hfl::Direction;
using hfl::TransferJob;

RewardParams RewardParams::from(const ScenarioConfig& cfg) {
    RewardParams p;
    p.decay = cfg.reward_decay;
    p.eps_c1 = cfg.eps_c1;
    p.eps_c2 = cfg.eps_c2;
    p.eps_f = cfg.eps_f;
    p.gamma_floor = cfg.gamma_floor;
    p.fixed = cfg.fixed_reward;
    return p;
}

double reward_alpha(int t, const RewardParams& p) {
    if (p.fixed) {
        return 1.0;
    }
    return std::pow(p.decay, static_cast<double>(std::max(t, 0)));
}

double reward(std::span<const double> gamma, int t, const RewardParams& p) {
    if (gamma.empty()) {
        throw std::invalid_argument("reward: no tasks");
    }
    // Accumulated in extended precision so equal accuracies round back exactly.
    using Wide = long double;
    const Wide n = static_cast<Wide>(gamma.size());
    std::vector<Wide> g(gamma.begin(), gamma.end());
    Wide mean = 0.0;
    for (auto& v : g) {
        v = std::isnan(v) ? p.gamma_floor : std::max<Wide>(v, p.gamma_floor);
        mean += v;
    }
    mean /= n;
    const Wide alpha = reward_alpha(t, p);
    Wide performance = 0.0;
    Wide fairness = 0.0;
    for (Wide v : g) {
        performance += (v / p.eps_c1) / p.eps_f;
        fairness += (v / p.eps_c2) / (p.eps_f + std::abs(mean / v - 1));
    }
    return static_cast<double>(alpha / n * performance + (1 - alpha) / n * fairness);
}

std::vector<int> ActionLayout::discrete_options() const {
    std::vector<int> options;
    options.insert(options.end(), users, uavs);
    options.insert(options.end(), uavs, satellites);
    options.push_back(satellites);
    options.insert(options.end(), uavs, satellites);
    if (task_slots) {
        options.insert(options.end(), users, tasks);
    }
    return options;
}

int ActionLayout::discrete_size() const {
    return users + 2 * uavs + 1 + (task_slots ? users : 0);
}

int ActionLayout::continuous_size() const {
    return 3 * uavs + tasks * users + tasks * uavs + tasks * (uavs + satellites);
}

namespace {

int wrap(long long x, int n) {
    const long long r = x % n;
    return static_cast<int>(r < 0 ? r + n : r);
}

double finite_or_zero(double x) { return std::isnan(x) ? 0.0 : x; }

double mean_ground_gain(double d, double omega, double tau_los, double tau_nlos) {
    return omega / (omega + 1.0) * std::pow(d, -tau_los) +
           1.0 / (omega + 1.0) * std::pow(d, -tau_nlos);
}

}  // namespace

Env::Env(ScenarioConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    cfg_.data.task_count = cfg_.tasks;
    cfg_.data.user_count = cfg_.users;
    layout_ = {cfg_.users, cfg_.uavs, cfg_.satellites, cfg_.tasks,
               cfg_.task_scheduling == TaskScheduling::Agent};
    reward_params_ = RewardParams::from(cfg_);
    limits_ = {cfg_.uav_max_speed, cfg_.uav_min_altitude, cfg_.uav_max_altitude};
}

int Env::observation_size() const {
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites, F = cfg_.tasks;
    return K * M + 3 * M + M * N + (M + N) * F;
}

bool Env::satellite_visible(int sat, int uav) const {
    return windows_[static_cast<std::size_t>(sat) * cfg_.uavs + uav].remaining_time > 0.0;
}

bool Env::done() const {
    if (t_ >= cfg_.horizon) {
        return true;
    }
    return std::all_of(windows_.begin(), windows_.end(),
                       [](const auto& w) { return w.remaining_time <= 0.0; });
}

Vector Env::reset(std::uint64_t seed) { return reset(seed, seed); }

Vector Env::reset(std::uint64_t seed, std::uint64_t fading_seed) {
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites, F = cfg_.tasks;
    Rng layout_rng = make_stream(seed, 1);
    fading_rng_ = make_stream(fading_seed, 2);

    users_.assign(K, {});
    for (auto& u : users_) {
        u.kind = geometry::NodeKind::GroundUser;
        u.position = {uniform(layout_rng, 0.0, cfg_.arena_size),
                      uniform(layout_rng, 0.0, cfg_.arena_size), 0.0};
        u.tx_power = cfg_.user_power_w;
    }
    uavs_.assign(M, {});
    for (auto& u : uavs_) {
        u.kind = geometry::NodeKind::Uav;
        u.position = {uniform(layout_rng, 0.0, cfg_.arena_size),
                      uniform(layout_rng, 0.0, cfg_.arena_size), cfg_.uav_initial_altitude};
        u.tx_power = cfg_.uav_power_w;
        u.antenna_gain = channel::db_to_linear(cfg_.uav_antenna_gain_db);
    }
    cluster_.assign(K, 0);
    for (auto& c : cluster_) {
        c = std::uniform_int_distribution<int>(0, M - 1)(layout_rng);
    }
    next_task_.assign(K, 0);

    geometry::ConstellationParams cp;
    cp.satellite_count = N;
    cp.altitude = cfg_.leo_altitude;
    cp.speed = cfg_.leo_speed;
    cp.elevation_min = cfg_.min_elevation_deg * std::numbers::pi / 180.0;
    cp.min_spacing = cfg_.sat_min_spacing;
    cp.max_spacing = cfg_.sat_max_spacing;
    cp.tx_power = cfg_.leo_power_w;
    cp.antenna_gain = channel::db_to_linear(cfg_.leo_antenna_gain_db);
    auto constellation = geometry::make_constellation(cp, uavs_, layout_rng);
    sats_ = std::move(constellation.satellites);
    windows_ = std::move(constellation.windows);
    window_span_ = geometry::coverage_time(
        geometry::coverage_arc(cp.earth_radius, cp.altitude, cp.elevation_min), cp.speed);

    const double omega = channel::db_to_linear(cfg_.rician_factor_db);
    const double d_near = cfg_.uav_min_altitude;
    const double d_far = std::hypot(cfg_.arena_size * std::numbers::sqrt2, cfg_.uav_max_altitude);
    gain_log_lo_ = std::log10(mean_ground_gain(d_far, omega, cfg_.path_loss_los, cfg_.path_loss_nlos)) - 2.0;
    gain_log_hi_ = std::log10(mean_ground_gain(d_near, omega, cfg_.path_loss_los, cfg_.path_loss_nlos)) + 1.0;

    if (!initialized_ || seed != seed_) {
        data_ = hfl::gen_synthetic_tasks(cfg_.data, seed);
    }
    seed_ = seed;
    task_state_.assign(F, {});
    gamma_.assign(F, 0.0);
    loss_.assign(F, 0.0);
    node_accuracy_ = Matrix::Zero(M + N, F);
    for (int f = 0; f < F; ++f) {
        TaskState& ts = task_state_[f];
        const hfl::TaskSpec& spec = data_.tasks[f];
        ts.global = hfl::zero_model(spec);
        ts.participating.assign(K, false);
        for (int k = 0; k < K; ++k) {
            ts.participating[k] = data_.datasets[k][f].size() > 0;
        }
        ts.user_version.assign(K, 0);
        ts.local.assign(K, ts.global);
        ts.iterations.assign(K, 0);
        ts.delivered.assign(K, false);
        ts.uav_inbox.assign(M, {});
        ts.edge_pending.assign(M, false);
        ts.edge_models.assign(M, {});
        ts.sat_inbox.assign(N, {});
        ts.uav_version.assign(M, 0);
        ts.sat_version.assign(N, 0);
        ts.sat_global.assign(N, ts.global);
        const auto eval = hfl::evaluate_task(ts.global, spec);
        gamma_[f] = eval.accuracy;
        loss_[f] = eval.loss;
        node_accuracy_.col(f).setConstant(eval.accuracy);
    }
    jobs_.clear();
    t_ = 0;
    initialized_ = true;
    draw_channels();
    return observe();
}

void Env::draw_channels() {
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites;
    const double omega = channel::db_to_linear(cfg_.rician_factor_db);
    const double lambda_uav = channel::kSpeedOfLight / cfg_.uav_carrier_hz;
    const double lambda_leo = channel::kSpeedOfLight / cfg_.leo_carrier_hz;
    const double link_gain = channel::db_to_linear(cfg_.uav_antenna_gain_db) *
                             channel::db_to_linear(cfg_.leo_antenna_gain_db);
    const double doppler_up = cfg_.doppler_hz >= 0.0
                                  ? cfg_.doppler_hz
                                  : channel::max_doppler(cfg_.leo_speed, cfg_.uav_carrier_hz);
    const double doppler_down = cfg_.doppler_hz >= 0.0
                                    ? cfg_.doppler_hz
                                    : channel::max_doppler(cfg_.leo_speed, cfg_.leo_carrier_hz);

    ground_gain_.resize(K, M);
    for (int k = 0; k < K; ++k) {
        for (int m = 0; m < M; ++m) {
            const double d = std::max(geometry::distance(users_[k], uavs_[m]), 1e-3);
            const auto draw = channel::draw_fading(omega, d, lambda_uav, fading_rng_);
            ground_gain_(k, m) =
                std::norm(channel::ground_air_coeff(d, draw, cfg_.path_loss_los, cfg_.path_loss_nlos));
        }
    }
    sat_up_gain_.resize(N, M);
    sat_down_gain_.resize(N, M);
    for (int n = 0; n < N; ++n) {
        for (int m = 0; m < M; ++m) {
            const double d = geometry::distance(sats_[n], uavs_[m]);
            const double delay = cfg_.csi_delay_s >= 0.0 ? cfg_.csi_delay_s : d / channel::kSpeedOfLight;
            const auto up = channel::sat_uav_coeff(
                d, link_gain, lambda_uav, std::fmod(-2.0 * std::numbers::pi * d / lambda_uav, 2.0 * std::numbers::pi));
            const auto down = channel::sat_uav_coeff(
                d, link_gain, lambda_leo, std::fmod(-2.0 * std::numbers::pi * d / lambda_leo, 2.0 * std::numbers::pi));
            sat_up_gain_(n, m) = std::norm(channel::outdated_csi(up, doppler_up, delay, fading_rng_));
            sat_down_gain_(n, m) = std::norm(channel::outdated_csi(down, doppler_down, delay, fading_rng_));
        }
    }
}

std::vector<double> Env::group_weights(const Matrix& logits, int f, std::span<const int> columns,
                                       std::span<const double> masses) const {
    std::vector<double> w(columns.size(), 0.0);
    if (columns.empty()) {
        return w;
    }
    if (cfg_.fedavg_weights) {
        double total = 0.0;
        for (double m : masses) {
            total += m;
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = total > 0.0 ? masses[i] / total : 1.0 / static_cast<double>(w.size());
        }
        return w;
    }
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = logits(f, columns[i]);
        if (cfg_.weight_prior == WeightPrior::LogDataSize) {
            w[i] += std::log(std::max(masses[i], 1e-12));
        }
        peak = std::max(peak, w[i]);
    }
    double total = 0.0;
    for (auto& v : w) {
        v = std::exp(v - peak);
        total += v;
    }
    for (auto& v : w) {
        v /= total;
    }
    return w;
}

HybridAction Env::decode_action(std::span<const int> raw_discrete,
                                std::span<const double> raw_continuous) const {
    if (!initialized_) {
        throw std::logic_error("decode_action before reset");
    }
    if (static_cast<int>(raw_discrete.size()) != layout_.discrete_size() ||
        static_cast<int>(raw_continuous.size()) != layout_.continuous_size()) {
        throw std::invalid_argument("decode_action: expected " +
                                    std::to_string(layout_.discrete_size()) + " discrete and " +
                                    std::to_string(layout_.continuous_size()) +
                                    " continuous entries");
    }
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites, F = cfg_.tasks;
    HybridAction a;
    std::size_t i = 0;
    a.user_cluster.resize(K);
    for (int k = 0; k < K; ++k) {
        a.user_cluster[k] = wrap(raw_discrete[i++], M);
    }
    auto visible_from = [&](int start, auto&& visible) {
        for (int j = 0; j < N; ++j) {
            const int n = (start + j) % N;
            if (visible(n)) {
                return n;
            }
        }
        return -1;
    };
    a.uav_sat_up.resize(M);
    a.uav_idle.assign(M, false);
    for (int m = 0; m < M; ++m) {
        a.uav_sat_up[m] = visible_from(wrap(raw_discrete[i++], N),
                                       [&](int n) { return satellite_visible(n, m); });
        a.uav_idle[m] = a.uav_sat_up[m] < 0;
    }
    a.final_sat = visible_from(wrap(raw_discrete[i++], N), [&](int n) {
        for (int m = 0; m < M; ++m) {
            if (satellite_visible(n, m)) {
                return true;
            }
        }
        return false;
    });
    a.sat_uav_down.resize(M);
    for (int m = 0; m < M; ++m) {
        a.sat_uav_down[m] = visible_from(wrap(raw_discrete[i++], N),
                                         [&](int n) { return satellite_visible(n, m); });
    }
    if (layout_.task_slots) {
        a.user_task.resize(K);
        for (int k = 0; k < K; ++k) {
            a.user_task[k] = wrap(raw_discrete[i++], F);
        }
    }

    std::size_t c = 0;
    a.uav_velocity.resize(M);
    for (int m = 0; m < M; ++m) {
        for (int axis = 0; axis < 3; ++axis) {
            a.uav_velocity[m][axis] = cfg_.uav_max_speed * std::tanh(finite_or_zero(raw_continuous[c++]));
        }
        const double speed = a.uav_velocity[m].norm();
        if (speed > cfg_.uav_max_speed) a.uav_velocity[m] *= cfg_.uav_max_speed / speed;
    }
    auto take_logits = [&](Matrix& out, int cols) {
        out.resize(F, cols);
        for (int f = 0; f < F; ++f) {
            for (int col = 0; col < cols; ++col) {
                out(f, col) = std::clamp(finite_or_zero(raw_continuous[c++]), -50.0, 50.0);
            }
        }
    };
    take_logits(a.edge_logits, K);
    take_logits(a.cloud_logits, M);
    take_logits(a.final_logits, M + N);

    a.edge_weights = Matrix::Zero(F, K);
    a.cloud_weights = Matrix::Zero(F, M);
    a.final_weights = Matrix::Zero(F, M + N);
    for (int f = 0; f < F; ++f) {
        std::vector<double> uav_mass(M, 0.0);
        for (int m = 0; m < M; ++m) {
            std::vector<int> cols;
            std::vector<double> masses;
            for (int k = 0; k < K; ++k) {
                if (a.user_cluster[k] == m && task_state_[f].participating[k]) {
                    cols.push_back(k);
                    masses.push_back(data_.datasets[k][f].size());
                    uav_mass[m] += masses.back();
                }
            }
            const auto w = group_weights(a.edge_logits, f, cols, masses);
            for (std::size_t j = 0; j < cols.size(); ++j) {
                a.edge_weights(f, cols[j]) = w[j];
            }
        }
        std::vector<double> sat_mass(N, 0.0);
        for (int n = 0; n < N; ++n) {
            std::vector<int> cols;
            std::vector<double> masses;
            for (int m = 0; m < M; ++m) {
                if (!a.uav_idle[m] && a.uav_sat_up[m] == n && uav_mass[m] > 0.0) {
                    cols.push_back(m);
                    masses.push_back(uav_mass[m]);
                    sat_mass[n] += uav_mass[m];
                }
            }
            const auto w = group_weights(a.cloud_logits, f, cols, masses);
            for (std::size_t j = 0; j < cols.size(); ++j) {
                a.cloud_weights(f, cols[j]) = w[j];
            }
        }
        if (a.final_sat >= 0) {
            std::vector<int> cols;
            std::vector<double> masses;
            for (int m = 0; m < M; ++m) {
                if (!a.uav_idle[m] && a.uav_sat_up[m] == a.final_sat && uav_mass[m] > 0.0) {
                    cols.push_back(m);
                    masses.push_back(uav_mass[m]);
                }
            }
            for (int n = 0; n < N; ++n) {
                if (n != a.final_sat && sat_mass[n] > 0.0) {
                    cols.push_back(M + n);
                    masses.push_back(sat_mass[n]);
                }
            }
            const auto w = group_weights(a.final_logits, f, cols, masses);
            for (std::size_t j = 0; j < cols.size(); ++j) {
                a.final_weights(f, cols[j]) = w[j];
            }
        }
    }
    return a;
}

Vector Env::raw_from_unit(std::span<const double> unit) const {
    if (static_cast<int>(unit.size()) != layout_.continuous_size()) {
        throw std::invalid_argument("raw_from_unit: wrong action length");
    }
    Vector raw(unit.size());
    constexpr double edge = 1.0 - 1e-9;
    for (int i = 0; i < raw.size(); ++i) {
        const double u = std::clamp(finite_or_zero(unit[i]), -edge, edge);
        raw[i] = i < layout_.edge_offset() ? std::atanh(u) : cfg_.weight_logit_scale * u;
    }
    return raw;
}

bool Env::has_job(Direction dir, int task, int src, int dst) const {
    for (const auto& j : jobs_) {
        if (j.direction == dir && j.payload.task_id == task && (src < 0 || j.src == src) &&
            (dst < 0 || j.dst == dst)) {
            return true;
        }
    }
    return false;
}

void Env::apply_clusters(const HybridAction& action, StepInfo& info) {
    for (int k = 0; k < cfg_.users; ++k) {
        if (action.user_cluster[k] == cluster_[k]) {
            continue;
        }
        // A user that switches clusters loses whatever it was exchanging with
        // its old UAV; the transfer restarts from scratch with the new one.
        const auto before = jobs_.size();
        std::erase_if(jobs_, [&](const TransferJob& j) {
            return (j.direction == Direction::EdgeUp && j.src == k) ||
                   (j.direction == Direction::EdgeDown && j.dst == k);
        });
        info.dropped_transfers += static_cast<int>(before - jobs_.size());
        cluster_[k] = action.user_cluster[k];
    }
}

void Env::local_training(const HybridAction& action) {
    const int F = cfg_.tasks;
    for (int k = 0; k < cfg_.users; ++k) {
        const int start = layout_.task_slots ? action.user_task[k] : next_task_[k];
        for (int j = 0; j < F; ++j) {
            const int f = (start + j) % F;
            TaskState& ts = task_state_[f];
            if (!ts.participating[k] || ts.user_version[k] != ts.version ||
                ts.iterations[k] >= cfg_.local_iterations) {
                continue;
            }
            ts.local[k] = hfl::local_train_step(ts.local[k], data_.datasets[k][f], data_.tasks[f],
                                                cfg_.local_lr, cfg_.local_l2);
            ++ts.iterations[k];
            next_task_[k] = (f + 1) % F;
            break;
        }
    }
}

void Env::start_jobs(const HybridAction& action) {
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites;
    for (int f = 0; f < cfg_.tasks; ++f) {
        TaskState& ts = task_state_[f];
        const double bits = data_.tasks[f].model_size_bits;
        for (int k = 0; k < K; ++k) {
            if (ts.participating[k] && ts.user_version[k] == ts.version &&
                ts.iterations[k] >= cfg_.local_iterations && !ts.delivered[k] &&
                !has_job(Direction::EdgeUp, f, k, -1)) {
                TransferJob job;
                job.payload = ts.local[k];
                job.bits_remaining = bits;
                job.src = k;
                job.dst = cluster_[k];
                job.direction = Direction::EdgeUp;
                job.round = ts.version + 1;
                job.data_mass = data_.datasets[k][f].size();
                jobs_.push_back(std::move(job));
            }
        }
        for (int m = 0; m < M; ++m) {
            if (ts.edge_pending[m] && !action.uav_idle[m] && !has_job(Direction::CloudUp, f, m, -1)) {
                TransferJob job;
                job.payload = ts.edge_models[m].model;
                job.bits_remaining = bits;
                job.src = m;
                job.dst = action.uav_sat_up[m];
                job.direction = Direction::CloudUp;
                job.round = ts.version + 1;
                job.data_mass = ts.edge_models[m].mass;
                jobs_.push_back(std::move(job));
            }
        }
        if (ts.version == 0) {
            continue;  // everyone starts from the shared initial model
        }
        for (int m = 0; m < M; ++m) {
            if (ts.uav_version[m] == ts.version || action.uav_idle[m]) {
                continue;
            }
            const int n = action.sat_uav_down[m];
            if (ts.sat_version[n] == ts.version) {
                if (!has_job(Direction::CloudDown, f, -1, m)) {
                    TransferJob job;
                    job.payload = ts.global;
                    job.bits_remaining = bits;
                    job.src = n;
                    job.dst = m;
                    job.direction = Direction::CloudDown;
                    job.round = ts.version;
                    jobs_.push_back(std::move(job));
                }
            } else {
                bool relaying = false;
                for (const auto& j : jobs_) {
                    relaying |= j.direction == Direction::Isl && j.payload.task_id == f &&
                                j.dst == n && j.round == ts.version;
                }
                if (!relaying) {
                    TransferJob job;
                    job.payload = ts.global;
                    job.bits_remaining = bits;
                    job.src = ts.global_holder;
                    job.dst = n;
                    job.direction = Direction::Isl;
                    job.round = ts.version;
                    jobs_.push_back(std::move(job));
                }
            }
        }
        for (int k = 0; k < K; ++k) {
            const int m = cluster_[k];
            if (ts.participating[k] && ts.user_version[k] < ts.version &&
                ts.uav_version[m] == ts.version && !has_job(Direction::EdgeDown, f, -1, k)) {
                TransferJob job;
                job.payload = ts.global;
                job.bits_remaining = bits;
                job.src = m;
                job.dst = k;
                job.direction = Direction::EdgeDown;
                job.round = ts.version;
                jobs_.push_back(std::move(job));
            }
        }
        (void)N;
    }
}

std::vector<double> Env::job_rates() const {
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites;
    const double noise = channel::thermal_noise(cfg_.ground_bandwidth_hz, cfg_.noise_temperature_k);
    const double B = cfg_.ground_bandwidth_hz;
    const bool same_rx = cfg_.interference == InterferenceMode::SameReceiver;

    // Which transmitters are active, and how many jobs each one serves.
    std::vector<int> user_tx(K, -1), uav_tx(M, -1);
    std::vector<int> user_jobs(K, 0), uav_up_jobs(M, 0), sat_isl_jobs(N, 0), sat_down_jobs(N, 0),
        uav_down_jobs(M, 0);
    for (const auto& j : jobs_) {
        switch (j.direction) {
            case Direction::EdgeUp:
                user_tx[j.src] = j.dst;
                ++user_jobs[j.src];
                break;
            case Direction::CloudUp:
                uav_tx[j.src] = j.dst;
                ++uav_up_jobs[j.src];
                break;
            case Direction::Isl:
                ++sat_isl_jobs[j.src];
                break;
            case Direction::CloudDown:
                ++sat_down_jobs[j.src];
                break;
            case Direction::EdgeDown:
                ++uav_down_jobs[j.src];
                break;
        }
    }

    std::vector<double> rates;
    rates.reserve(jobs_.size());
    std::vector<channel::Emitter> interferers;
    for (const auto& j : jobs_) {
        double rate = 0.0;
        switch (j.direction) {
            case Direction::EdgeUp: {
                interferers.clear();
                for (int other = 0; other < K; ++other) {
                    if (other != j.src && user_tx[other] >= 0 && (!same_rx || user_tx[other] == j.dst)) {
                        interferers.push_back({cfg_.user_power_w, ground_gain_(other, j.dst)});
                    }
                }
                const channel::LinkRequest req{B, {cfg_.user_power_w, ground_gain_(j.src, j.dst)}};
                rate = channel::uplink_rate_user_uav(req, interferers, noise).rate / user_jobs[j.src];
                break;
            }
            case Direction::CloudUp: {
                interferers.clear();
                for (int other = 0; other < M; ++other) {
                    if (other != j.src && uav_tx[other] >= 0 && (!same_rx || uav_tx[other] == j.dst)) {
                        interferers.push_back({cfg_.uav_power_w, sat_up_gain_(j.dst, other)});
                    }
                }
                const channel::LinkRequest req{B, {cfg_.uav_power_w, sat_up_gain_(j.dst, j.src)}};
                rate = channel::uplink_rate_uav_sat(req, interferers, noise).rate / uav_up_jobs[j.src];
                break;
            }
            case Direction::Isl: {
                const double d = geometry::distance(sats_[j.src], sats_[j.dst]);
                rate = channel::isl_rate(d, cfg_.isl_bandwidth_hz, cfg_.leo_power_w,
                                         std::sqrt(channel::db_to_linear(cfg_.isl_peak_gain_db)),
                                         cfg_.isl_carrier_hz, cfg_.noise_temperature_k) /
                       sat_isl_jobs[j.src];
                break;
            }
            case Direction::CloudDown: {
                const channel::LinkRequest req{B, {cfg_.leo_power_w, sat_down_gain_(j.src, j.dst)}};
                rate = channel::downlink_rate_sat_uav(req, noise).rate / sat_down_jobs[j.src];
                break;
            }
            case Direction::EdgeDown: {
                const channel::LinkRequest req{B, {cfg_.uav_power_w, ground_gain_(j.dst, j.src)}};
                rate = channel::downlink_rate_uav_user(req, noise).rate / uav_down_jobs[j.src];
                break;
            }
        }
        rates.push_back(std::isfinite(rate) ? rate : 0.0);
    }
    return rates;
}

void Env::try_edge_aggregation(int f, const HybridAction& action, StepInfo& info) {
    TaskState& ts = task_state_[f];
    if (ts.uploading_phase || ts.relaying) {
        return;
    }
    for (int k = 0; k < cfg_.users; ++k) {
        if (ts.participating[k] && !ts.delivered[k]) {
            return;
        }
    }
    ts.edge_total = 0;
    ts.edge_landed = 0;
    for (int m = 0; m < cfg_.uavs; ++m) {
        auto& inbox = ts.uav_inbox[m];
        if (inbox.empty()) {
            continue;
        }
        std::vector<int> cols;
        std::vector<double> masses;
        std::vector<hfl::TaskModel> models;
        double mass = 0.0;
        for (const auto& member : inbox) {
            cols.push_back(member.node);
            masses.push_back(member.mass);
            models.push_back(member.model);
            mass += member.mass;
        }
        const auto w = group_weights(action.edge_logits, f, cols, masses);
        auto model = hfl::edge_aggregate(models, w, cfg_.normalization);
        node_accuracy_(m, f) = hfl::evaluate_task(model, data_.tasks[f]).accuracy;
        ts.edge_models[m] = {std::move(model), mass, m};
        ts.edge_pending[m] = true;
        ++ts.edge_total;
        info.aggregations.push_back({AggregationRecord::Level::Edge, f, m, cols, w, masses});
        inbox.clear();
    }
    ts.uploading_phase = true;
}

void Env::try_cloud_stage(int f, const HybridAction& action, StepInfo& info) {
    TaskState& ts = task_state_[f];
    if (!ts.uploading_phase || ts.edge_landed < ts.edge_total || action.final_sat < 0) {
        return;
    }
    ts.uploading_phase = false;
    ts.relaying = true;
    ts.final_sat = action.final_sat;
    ts.relays_expected = 0;
    ts.relayed.clear();
    for (int n = 0; n < cfg_.satellites; ++n) {
        auto& inbox = ts.sat_inbox[n];
        if (n == ts.final_sat || inbox.empty()) {
            continue;
        }
        std::vector<int> cols;
        std::vector<double> masses;
        std::vector<hfl::TaskModel> models;
        double mass = 0.0;
        for (const auto& member : inbox) {
            cols.push_back(member.node);
            masses.push_back(member.mass);
            models.push_back(member.model);
            mass += member.mass;
        }
        const auto w = group_weights(action.cloud_logits, f, cols, masses);
        auto model = hfl::cloud_aggregate(models, w, cfg_.normalization);
        node_accuracy_(cfg_.uavs + n, f) = hfl::evaluate_task(model, data_.tasks[f]).accuracy;
        info.aggregations.push_back({AggregationRecord::Level::Cloud, f, n, cols, w, masses});
        TransferJob job;
        job.payload = std::move(model);
        job.bits_remaining = data_.tasks[f].model_size_bits;
        job.src = n;
        job.dst = ts.final_sat;
        job.direction = Direction::Isl;
        job.round = ts.version + 1;
        job.data_mass = mass;
        jobs_.push_back(std::move(job));
        ++ts.relays_expected;
        inbox.clear();
    }
    if (ts.relays_expected == 0) {
        finalize(f, action, info);
    }
}

void Env::finalize(int f, const HybridAction& action, StepInfo& info) {
    TaskState& ts = task_state_[f];
    const int M = cfg_.uavs;
    const int S = ts.final_sat;
    std::vector<hfl::TaskModel> direct, relayed;
    std::vector<int> cols;
    std::vector<double> masses;
    for (const auto& member : ts.sat_inbox[S]) {
        direct.push_back(member.model);
        cols.push_back(member.node);
        masses.push_back(member.mass);
    }
    for (const auto& member : ts.relayed) {
        relayed.push_back(member.model);
        cols.push_back(M + member.node);
        masses.push_back(member.mass);
    }
    const auto w = group_weights(action.final_logits, f, cols, masses);
    ts.global = hfl::final_aggregate(direct, relayed, w, cfg_.normalization);
    ++ts.version;
    ts.global.staleness = 0;
    info.aggregations.push_back({AggregationRecord::Level::Final, f, S, cols, w, masses});

    const auto eval = hfl::evaluate_task(ts.global, data_.tasks[f]);
    gamma_[f] = eval.accuracy;
    loss_[f] = eval.loss;
    node_accuracy_(M + S, f) = eval.accuracy;

    ts.sat_version[S] = ts.version;
    ts.sat_global[S] = ts.global;
    ts.sat_inbox[S].clear();
    ts.relayed.clear();
    ts.relays_expected = 0;
    std::fill(ts.delivered.begin(), ts.delivered.end(), false);
    std::fill(ts.edge_pending.begin(), ts.edge_pending.end(), false);
    ts.edge_total = 0;
    ts.edge_landed = 0;
    ts.relaying = false;
    ts.final_sat = -1;
    ts.global_holder = S;
}

void Env::deliver(const TransferJob& job, const HybridAction& action, StepInfo& info) {
    const int f = job.payload.task_id;
    TaskState& ts = task_state_[f];
    switch (job.direction) {
        case Direction::EdgeUp:
            if (job.round == ts.version + 1) {
                ts.uav_inbox[job.dst].push_back({job.payload, job.data_mass, job.src});
                ts.delivered[job.src] = true;
                try_edge_aggregation(f, action, info);
            }
            break;
        case Direction::CloudUp:
            if (job.round == ts.version + 1) {
                ts.sat_inbox[job.dst].push_back({job.payload, job.data_mass, job.src});
                ts.edge_pending[job.src] = false;
                ++ts.edge_landed;
                try_cloud_stage(f, action, info);
            }
            break;
        case Direction::Isl:
            if (job.round == ts.version + 1) {
                ts.relayed.push_back({job.payload, job.data_mass, job.src});
                if (static_cast<int>(ts.relayed.size()) == ts.relays_expected) {
                    finalize(f, action, info);
                }
            } else if (job.round == ts.version) {
                ts.sat_version[job.dst] = job.round;
                ts.sat_global[job.dst] = job.payload;
            }
            break;
        case Direction::CloudDown:
            if (job.round == ts.version) {
                ts.uav_version[job.dst] = job.round;
            }
            break;
        case Direction::EdgeDown:
            if (job.round == ts.version) {
                ts.local[job.dst] = job.payload;
                ts.user_version[job.dst] = job.round;
                ts.iterations[job.dst] = 0;
            }
            break;
    }
}

StepResult Env::step(const HybridAction& action) {
    if (!initialized_) {
        throw std::logic_error("step before reset");
    }
    if (done()) {
        throw std::logic_error("step after the episode finished");
    }
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites, F = cfg_.tasks;
    if (static_cast<int>(action.user_cluster.size()) != K ||
        static_cast<int>(action.uav_sat_up.size()) != M ||
        static_cast<int>(action.sat_uav_down.size()) != M ||
        static_cast<int>(action.uav_idle.size()) != M ||
        static_cast<int>(action.uav_velocity.size()) != M || action.edge_logits.rows() != F ||
        action.edge_logits.cols() != K || action.cloud_logits.cols() != M ||
        action.final_logits.cols() != M + N ||
        (layout_.task_slots && static_cast<int>(action.user_task.size()) != K)) {
        throw std::invalid_argument("step: action does not match the scenario layout");
    }

    StepInfo info;
    apply_clusters(action, info);
    local_training(action);

    // Links whose coverage window closed lose their transfer.
    const auto before = jobs_.size();
    std::erase_if(jobs_, [&](const TransferJob& j) {
        return (j.direction == Direction::CloudUp && !satellite_visible(j.dst, j.src)) ||
               (j.direction == Direction::CloudDown && !satellite_visible(j.src, j.dst));
    });
    info.dropped_transfers += static_cast<int>(before - jobs_.size());

    start_jobs(action);
    const auto rates = job_rates();
    const auto finished = hfl::advance_transfers(jobs_, rates, cfg_.slot_seconds);
    for (const auto& job : finished) {
        deliver(job, action, info);
    }
    for (int f = 0; f < F; ++f) {
        try_edge_aggregation(f, action, info);
        try_cloud_stage(f, action, info);
    }

    for (int m = 0; m < M; ++m) {
        uavs_[m] = geometry::move_uav(uavs_[m], action.uav_velocity[m], cfg_.slot_seconds, limits_);
        uavs_[m].position.x() = std::clamp(uavs_[m].position.x(), 0.0, cfg_.arena_size);
        uavs_[m].position.y() = std::clamp(uavs_[m].position.y(), 0.0, cfg_.arena_size);
        info.idle_uavs += action.uav_idle[m] ? 1 : 0;
    }
    geometry::advance_orbits(sats_, windows_, cfg_.slot_seconds, cfg_.leo_speed);

    StepResult out;
    out.reward = reward(gamma_, t_, reward_params_);
    info.alpha = reward_alpha(t_, reward_params_);
    ++t_;
    draw_channels();

    info.accuracy = gamma_;
    info.loss = loss_;
    info.rounds.resize(F);
    for (int f = 0; f < F; ++f) {
        info.rounds[f] = task_state_[f].version;
    }
    out.observation = observe();
    out.done = done();
    out.info = std::move(info);
    return out;
}

double Env::normalized_gain(double mag_sq) const {
    const double lg = std::log10(std::max(mag_sq, 1e-300));
    return std::clamp((lg - gain_log_lo_) / (gain_log_hi_ - gain_log_lo_), 0.0, 1.0);
}

Vector Env::observe() const {
    if (!initialized_) {
        throw std::logic_error("observe before reset");
    }
    const int K = cfg_.users, M = cfg_.uavs, N = cfg_.satellites, F = cfg_.tasks;
    Vector obs(observation_size());
    int i = 0;
    for (int k = 0; k < K; ++k) {
        for (int m = 0; m < M; ++m) {
            obs[i++] = normalized_gain(ground_gain_(k, m));
        }
    }
    for (int m = 0; m < M; ++m) {
        obs[i++] = uavs_[m].position.x() / cfg_.arena_size;
        obs[i++] = uavs_[m].position.y() / cfg_.arena_size;
        obs[i++] = uavs_[m].position.z() / cfg_.uav_max_altitude;
    }
    for (int m = 0; m < M; ++m) {
        for (int n = 0; n < N; ++n) {
            const double rem = windows_[static_cast<std::size_t>(n) * M + m].remaining_time;
            obs[i++] = window_span_ > 0.0 ? std::min(rem / window_span_, 1.0) : 0.0;
        }
    }
    for (int node = 0; node < M + N; ++node) {
        for (int f = 0; f < F; ++f) {
            obs[i++] = node_accuracy_(node, f);
        }
    }
    return obs;
}

}  // namespace sagin::env
