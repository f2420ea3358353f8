#include "sagin/dsac.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "sagin/binary_io.hpp"

namespace sagin::dsac {

namespace {

constexpr std::uint32_t kAgentVersion = 1;
constexpr double kHalfLog2Pi = 0.91893853320467274178;

double softplus(double z) { return z > 30.0 ? z : std::log1p(std::exp(z)); }
double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Matrix stack(const Matrix& top, const Matrix& bottom) {
    Matrix out(top.rows() + bottom.rows(), top.cols());
    out.topRows(top.rows()) = top;
    out.bottomRows(bottom.rows()) = bottom;
    return out;
}

std::vector<int> widths(int in, const std::vector<int>& hidden, int out) {
    std::vector<int> w{in};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out);
    return w;
}

}  // namespace

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
    data_.reserve(std::min<std::size_t>(capacity, 1 << 16));
}

void ReplayBuffer::append(Transition t) {
    std::lock_guard lock(mutex_);
    if (data_.size() < capacity_) {
        data_.push_back(std::move(t));
    } else {
        data_[next_] = std::move(t);
    }
    next_ = (next_ + 1) % capacity_;
}

std::size_t ReplayBuffer::size() const {
    std::lock_guard lock(mutex_);
    return data_.size();
}

Transition ReplayBuffer::at(std::size_t i) const {
    std::lock_guard lock(mutex_);
    return data_.at(i);
}

Batch ReplayBuffer::sample(int batch_size, Rng& rng) const {
    std::lock_guard lock(mutex_);
    if (data_.empty()) throw std::logic_error("ReplayBuffer: sample from empty buffer");
    if (batch_size <= 0) throw std::invalid_argument("ReplayBuffer: batch size must be positive");
    std::uniform_int_distribution<std::size_t> pick(0, data_.size() - 1);
    std::vector<Transition> chosen;
    chosen.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) chosen.push_back(data_[pick(rng)]);
    return make_batch(chosen);
}

Batch make_batch(std::span<const Transition> ts) {
    if (ts.empty()) throw std::invalid_argument("make_batch: empty");
    const auto n = static_cast<Eigen::Index>(ts.size());
    const auto s_dim = ts[0].s.size();
    const auto a_dim = ts[0].a.size();
    Batch b;
    b.s.resize(s_dim, n);
    b.a.resize(a_dim, n);
    b.s_next.resize(s_dim, n);
    b.r.resize(n);
    b.done.resize(n);
    b.discrete.reserve(ts.size());
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& t = ts[static_cast<std::size_t>(i)];
        if (t.s.size() != s_dim || t.s_next.size() != s_dim || t.a.size() != a_dim) {
            throw std::invalid_argument("make_batch: inconsistent transition shapes");
        }
        b.s.col(i) = t.s;
        b.a.col(i) = t.a;
        b.s_next.col(i) = t.s_next;
        b.r[i] = t.r;
        b.done[i] = t.done ? 1.0 : 0.0;
        b.discrete.push_back(t.discrete);
    }
    return b;
}

double clamp_std(double rho_raw, double rho_min) { return std::max(rho_raw, rho_min); }

double clip_target(double target, double q, double clip) {
    return std::clamp(target, q - clip, q + clip);
}

double gaussian_log_likelihood(double target, double q, double rho) {
    const double z = (target - q) / rho;
    return -0.5 * z * z - std::log(rho) - kHalfLog2Pi;
}

NllGradient gaussian_nll_gradient(double target, double clipped_target, double q, double rho) {
    const double e = clipped_target - q;
    return {(target - q) / (rho * rho), e * e / (rho * rho * rho) - 1.0 / rho};
}

double log1m_tanh_sq(double u) {
    // 1 - tanh^2 u = 4 / (e^u + e^-u)^2
    const double a = std::abs(u);
    return 2.0 * (std::numbers::ln2 - a - std::log1p(std::exp(-2.0 * a)));
}

void soft_update(nn::DenseNet& target, const nn::DenseNet& online, double tau) {
    if (target.param_count() != online.param_count()) {
        throw std::invalid_argument("soft_update: parameter count mismatch");
    }
    Vector& p = target.mutable_params();
    p = tau * online.params() + (1.0 - tau) * p;
}

// ---------------------------------------------------------------------------

DistributionalCritic::DistributionalCritic(int input_dim, const std::vector<int>& hidden,
                                           double rho_min_, Rng& rng)
    : net(widths(input_dim, hidden, 2), nn::Activation::Relu), rho_min(rho_min_) {
    net.init(rng);
    target = net;
    adam = nn::make_adam_state(net.param_count());
}

std::vector<GaussianReturn> DistributionalCritic::evaluate(const Matrix& inputs, bool use_target) const {
    const Matrix out = (use_target ? target : net).forward(inputs);
    std::vector<GaussianReturn> r(static_cast<std::size_t>(out.cols()));
    for (Eigen::Index i = 0; i < out.cols(); ++i) {
        r[static_cast<std::size_t>(i)] = {out(0, i), clamp_std(softplus(out(1, i)), rho_min)};
    }
    return r;
}

Vector DistributionalCritic::loss_gradient(const Matrix& inputs, const Vector& targets, double clip) const {
    nn::GradientTape tape;
    const Matrix out = net.forward(inputs, tape);
    const double inv_b = 1.0 / static_cast<double>(inputs.cols());
    Matrix g(2, out.cols());
    for (Eigen::Index i = 0; i < out.cols(); ++i) {
        const double q = out(0, i);
        const double sp = softplus(out(1, i));
        const double rho = clamp_std(sp, rho_min);
        const double y = targets[i];
        const auto grad = gaussian_nll_gradient(y, clip_target(y, q, clip), q, rho);
        // descend the negative log-likelihood
        g(0, i) = -grad.d_q * inv_b;
        g(1, i) = sp > rho_min ? -grad.d_rho * sigmoid(out(1, i)) * inv_b : 0.0;
    }
    return net.backward(tape, g).params;
}

Matrix DistributionalCritic::q_input_gradient(const Matrix& inputs) const {
    nn::GradientTape tape;
    const Matrix out = net.forward(inputs, tape);
    Matrix g = Matrix::Zero(2, out.cols());
    g.row(0).setOnes();
    return net.backward(tape, g).input;
}

void DistributionalCritic::apply(const Vector& grad, const nn::AdamConfig& cfg, double grad_clip) {
    Vector g = grad;
    if (grad_clip > 0.0) nn::clip_global_norm(g, grad_clip);
    nn::adam_update(net.mutable_params(), g, adam, cfg);
}

void DistributionalCritic::soft_update(double tau) { dsac::soft_update(target, net, tau); }

// ---------------------------------------------------------------------------

Agent::Agent(const AgentConfig& cfg) : cfg_(cfg), rng_(make_stream(cfg.seed, 0xd5ac)) {
    if (cfg.obs_dim <= 0 || cfg.act_dim <= 0) {
        throw std::invalid_argument("dsac::Agent: dimensions must be positive");
    }
    if (!(cfg.rho_min > 0.0) || !(cfg.target_clip > 0.0) || !(cfg.tau > 0.0 && cfg.tau <= 1.0)) {
        throw std::invalid_argument("dsac::Agent: rho_min, target_clip and tau must be positive");
    }
    critic_ = DistributionalCritic(cfg.obs_dim + cfg.act_dim, cfg.hidden, cfg.rho_min, rng_);
    actor_ = nn::DenseNet(widths(cfg.obs_dim, cfg.hidden, 2 * cfg.act_dim), nn::Activation::Relu);
    actor_.init(rng_, 0.1);
    actor_target_ = actor_;
    actor_adam_ = nn::make_adam_state(actor_.param_count());
    log_nu_ = std::log(cfg.initial_temperature);
    nu_adam_ = nn::make_adam_state(1);
}

double Agent::temperature() const { return std::exp(log_nu_); }

PolicySample Agent::policy(const Matrix& s, const Matrix& noise, bool use_target) const {
    const int d = cfg_.act_dim;
    const Matrix out = (use_target ? actor_target_ : actor_).forward(s);
    PolicySample p;
    p.mean = out.topRows(d);
    p.log_std = out.bottomRows(d).cwiseMax(cfg_.log_std_min).cwiseMin(cfg_.log_std_max);
    p.noise = noise;
    p.action.resize(d, s.cols());
    p.log_prob.resize(s.cols());
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        double lp = 0.0;
        for (int i = 0; i < d; ++i) {
            const double eps = noise(i, j);
            const double u = p.mean(i, j) + std::exp(p.log_std(i, j)) * eps;
            p.action(i, j) = std::tanh(u);
            lp += -0.5 * eps * eps - kHalfLog2Pi - p.log_std(i, j) - log1m_tanh_sq(u);
        }
        p.log_prob[j] = lp;
    }
    return p;
}

Vector Agent::act(const Vector& s, bool explore) {
    if (s.size() != cfg_.obs_dim) throw std::invalid_argument("dsac::Agent::act: observation size");
    Matrix noise = Matrix::Zero(cfg_.act_dim, 1);
    if (explore) {
        for (int i = 0; i < cfg_.act_dim; ++i) noise(i, 0) = standard_normal(rng_);
    }
    return policy(s, noise).action.col(0);
}

GaussianReturn Agent::value(const Vector& s, const Vector& a) const {
    Matrix in(cfg_.obs_dim + cfg_.act_dim, 1);
    in.col(0) << s, a;
    return critic_.evaluate(in).front();
}

Vector Agent::soft_return_targets(const Batch& b) {
    const auto n = b.s.cols();
    Matrix noise(cfg_.act_dim, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        for (int i = 0; i < cfg_.act_dim; ++i) noise(i, j) = standard_normal(rng_);
    }
    const PolicySample next = policy(b.s_next, noise, true);
    const auto ret = critic_.evaluate(stack(b.s_next, next.action), true);
    const double nu = temperature();
    Vector y(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& g = ret[static_cast<std::size_t>(j)];
        const double z = cfg_.sampled_target ? g.q_mean + g.q_std * standard_normal(rng_) : g.q_mean;
        y[j] = b.r[j] + (1.0 - b.done[j]) * cfg_.discount * (z - nu * next.log_prob[j]);
    }
    return y;
}

Vector Agent::critic_gradient(const Batch& b, const Vector& targets) const {
    return critic_.loss_gradient(stack(b.s, b.a), targets, cfg_.target_clip);
}

ActorGradient Agent::actor_gradient(const Batch& b, const Matrix& noise) const {
    const int d = cfg_.act_dim;
    const auto n = b.s.cols();
    nn::GradientTape tape;
    const Matrix out = actor_.forward(b.s, tape);
    Matrix a(d, n);
    Matrix sigma(d, n);
    ActorGradient res;
    for (Eigen::Index j = 0; j < n; ++j) {
        for (int i = 0; i < d; ++i) {
            const double ls = std::clamp(out(d + i, j), cfg_.log_std_min, cfg_.log_std_max);
            sigma(i, j) = std::exp(ls);
            const double u = out(i, j) + sigma(i, j) * noise(i, j);
            a(i, j) = std::tanh(u);
            res.mean_log_prob += -0.5 * noise(i, j) * noise(i, j) - kHalfLog2Pi - ls - log1m_tanh_sq(u);
        }
    }
    const Matrix critic_in = stack(b.s, a);
    const Matrix q_in = critic_.q_input_gradient(critic_in);
    const Matrix q_out = critic_.net.forward(critic_in);
    const double nu = temperature();
    const double inv_b = 1.0 / static_cast<double>(n);
    Matrix g(2 * d, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        for (int i = 0; i < d; ++i) {
            const double ai = a(i, j);
            const double dq_du = q_in(cfg_.obs_dim + i, j) * (1.0 - ai * ai);
            const double se = sigma(i, j) * noise(i, j);
            g(i, j) = (nu * 2.0 * ai - dq_du) * inv_b;
            const double raw = out(d + i, j);
            const bool free = raw > cfg_.log_std_min && raw < cfg_.log_std_max;
            g(d + i, j) = free ? (nu * (-1.0 + 2.0 * ai * se) - dq_du * se) * inv_b : 0.0;
        }
    }
    res.params = actor_.backward(tape, g).params;
    res.mean_log_prob *= inv_b;
    res.mean_q = q_out.row(0).mean();
    return res;
}

double Agent::temperature_gradient(double mean_log_prob) const {
    return -temperature() * (mean_log_prob + cfg_.entropy_target());
}

void Agent::update(const Batch& b) {
    if (b.s.rows() != cfg_.obs_dim || b.a.rows() != cfg_.act_dim) {
        throw std::invalid_argument("dsac::Agent::update: batch shape");
    }
    const Vector targets = soft_return_targets(b);
    critic_.apply(critic_gradient(b, targets), {.lr = cfg_.critic_lr}, cfg_.grad_clip);

    Matrix noise(cfg_.act_dim, b.s.cols());
    for (Eigen::Index j = 0; j < noise.cols(); ++j) {
        for (int i = 0; i < cfg_.act_dim; ++i) noise(i, j) = standard_normal(rng_);
    }
    ActorGradient ag = actor_gradient(b, noise);
    if (cfg_.grad_clip > 0.0) nn::clip_global_norm(ag.params, cfg_.grad_clip);
    nn::adam_update(actor_.mutable_params(), ag.params, actor_adam_, {.lr = cfg_.actor_lr});

    if (cfg_.learn_temperature) {
        Vector p(1);
        p[0] = log_nu_;
        Vector g(1);
        g[0] = temperature_gradient(ag.mean_log_prob);
        nn::adam_update(p, g, nu_adam_, {.lr = cfg_.temperature_lr});
        log_nu_ = std::clamp(p[0], -20.0, 5.0);
    }
    soft_update_targets(cfg_.tau);
    ++steps_;
}

void Agent::soft_update_targets(double tau) {
    critic_.soft_update(tau);
    soft_update(actor_target_, actor_, tau);
}

// ---------------------------------------------------------------------------

void write_rng(std::ostream& out, const Rng& rng) {
    std::ostringstream text;
    text << rng;
    const std::string st = text.str();
    io::write_le<std::uint64_t>(out, st.size());
    out.write(st.data(), static_cast<std::streamsize>(st.size()));
}

Rng read_rng(std::istream& in) {
    const auto len = io::read_le<std::uint64_t>(in);
    if (len > (1 << 20)) throw std::runtime_error("read_rng: implausible state size");
    std::string st(len, '\0');
    if (!in.read(st.data(), static_cast<std::streamsize>(len))) {
        throw std::runtime_error("read_rng: truncated state");
    }
    std::istringstream text(st);
    Rng rng;
    text >> rng;
    if (!text) throw std::runtime_error("read_rng: malformed state");
    return rng;
}

void Agent::save(std::ostream& out) const {
    io::write_magic(out, "SGAG");
    io::write_le<std::uint32_t>(out, kAgentVersion);
    io::write_le<std::int32_t>(out, cfg_.obs_dim);
    io::write_le<std::int32_t>(out, cfg_.act_dim);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg_.hidden.size()));
    for (int h : cfg_.hidden) io::write_le<std::int32_t>(out, h);
    for (double v : {cfg_.discount, cfg_.tau, cfg_.rho_min, cfg_.target_clip, cfg_.actor_lr,
                     cfg_.critic_lr, cfg_.temperature_lr, cfg_.initial_temperature,
                     cfg_.target_entropy, cfg_.grad_clip, cfg_.log_std_min, cfg_.log_std_max}) {
        io::write_le<double>(out, v);
    }
    io::write_le<std::uint8_t>(out, cfg_.learn_temperature);
    io::write_le<std::uint8_t>(out, cfg_.target_entropy_set);
    io::write_le<std::uint8_t>(out, cfg_.sampled_target);
    io::write_le<std::uint64_t>(out, cfg_.seed);
    nn::write_net(out, critic_.net);
    nn::write_net(out, critic_.target);
    nn::write_net(out, actor_);
    nn::write_net(out, actor_target_);
    nn::write_adam(out, critic_.adam);
    nn::write_adam(out, actor_adam_);
    nn::write_adam(out, nu_adam_);
    io::write_le<double>(out, log_nu_);
    io::write_le<std::int64_t>(out, steps_);
    write_rng(out, rng_);
    if (!out) throw std::runtime_error("agent checkpoint: write failed");
}

Agent Agent::load(std::istream& in) {
    io::expect_magic(in, "SGAG");
    const auto version = io::read_le<std::uint32_t>(in);
    if (version != kAgentVersion) {
        throw std::runtime_error("agent checkpoint: unsupported version " + std::to_string(version));
    }
    AgentConfig cfg;
    cfg.obs_dim = io::read_le<std::int32_t>(in);
    cfg.act_dim = io::read_le<std::int32_t>(in);
    const auto layers = io::read_le<std::uint32_t>(in);
    if (layers > 64) throw std::runtime_error("agent checkpoint: bad layer count");
    cfg.hidden.assign(layers, 0);
    for (auto& h : cfg.hidden) h = io::read_le<std::int32_t>(in);
    for (double* v : {&cfg.discount, &cfg.tau, &cfg.rho_min, &cfg.target_clip, &cfg.actor_lr,
                      &cfg.critic_lr, &cfg.temperature_lr, &cfg.initial_temperature,
                      &cfg.target_entropy, &cfg.grad_clip, &cfg.log_std_min, &cfg.log_std_max}) {
        *v = io::read_le<double>(in);
    }
    cfg.learn_temperature = io::read_le<std::uint8_t>(in) != 0;
    cfg.target_entropy_set = io::read_le<std::uint8_t>(in) != 0;
    cfg.sampled_target = io::read_le<std::uint8_t>(in) != 0;
    cfg.seed = io::read_le<std::uint64_t>(in);

    Agent a(cfg);
    a.critic_.net = nn::read_net(in);
    a.critic_.target = nn::read_net(in);
    a.actor_ = nn::read_net(in);
    a.actor_target_ = nn::read_net(in);
    if (a.critic_.net.input_width() != cfg.obs_dim + cfg.act_dim ||
        a.actor_.output_width() != 2 * cfg.act_dim) {
        throw std::runtime_error("agent checkpoint: network shape does not match header");
    }
    a.critic_.adam = nn::read_adam(in);
    a.actor_adam_ = nn::read_adam(in);
    a.nu_adam_ = nn::read_adam(in);
    a.log_nu_ = io::read_le<double>(in);
    a.steps_ = io::read_le<std::int64_t>(in);
    a.rng_ = read_rng(in);
    return a;
}

}  // namespace sagin::dsac
