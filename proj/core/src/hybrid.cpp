#include "sagin/hybrid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "sagin/binary_io.hpp"

namespace sagin::hybrid {

using nlohmann::json;

namespace {

constexpr std::uint32_t kDiscreteVersion = 1;
constexpr std::uint32_t kHybridVersion = 1;

std::vector<int> widths(int in, const std::vector<int>& hidden, int out) {
    std::vector<int> w{in};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out);
    return w;
}

std::vector<int> offsets_of(std::span<const int> options) {
    std::vector<int> off(options.size(), 0);
    for (std::size_t i = 1; i < options.size(); ++i) off[i] = off[i - 1] + options[i - 1];
    return off;
}

int total_options(std::span<const int> options) {
    return std::accumulate(options.begin(), options.end(), 0);
}

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = standard_normal(rng);
    }
    return m;
}

int argmax_slot(const Matrix& probs, int column, int offset, int n) {
    int best = 0;
    for (int k = 1; k < n; ++k) {
        if (probs(offset + k, column) > probs(offset + best, column)) best = k;
    }
    return best;
}

void apply_adam(nn::DenseNet& net, Vector grad, nn::AdamState& state, double lr, double clip) {
    if (clip > 0.0) nn::clip_global_norm(grad, clip);
    nn::adam_update(net.mutable_params(), grad, state, {.lr = lr});
}

// Schedule fields ------------------------------------------------------------

template <typename S, typename F>
void visit_schedule(S& s, F&& f) {
    f("episodes", s.episodes);
    f("max_episode_steps", s.max_episode_steps);
    f("eval_every", s.eval_every);
    f("warmup_steps", s.warmup_steps);
    f("batch_size", s.batch_size);
    f("update_every", s.update_every);
    f("updates_per_step", s.updates_per_step);
    f("buffer_capacity", s.buffer_capacity);
    f("hidden", s.hidden);
    f("discount", s.discount);
    f("tau", s.tau);
    f("rho_min", s.rho_min);
    f("target_clip", s.target_clip);
    f("grad_clip", s.grad_clip);
    f("actor_lr", s.actor_lr);
    f("critic_lr", s.critic_lr);
    f("temperature_lr", s.temperature_lr);
    f("initial_temperature", s.initial_temperature);
    f("learn_temperature", s.learn_temperature);
    f("continuous_entropy_per_dim", s.continuous_entropy_per_dim);
    f("discrete_actor_lr", s.discrete_actor_lr);
    f("discrete_critic_lr", s.discrete_critic_lr);
    f("discrete_initial_temperature", s.discrete_initial_temperature);
    f("discrete_entropy_fraction", s.discrete_entropy_fraction);
    f("coupled_lr", s.coupled_lr);
    f("value_lr", s.value_lr);
    f("kappa", s.kappa);
    f("kl_total", s.kl_total);
    f("kl_continuous", s.kl_continuous);
    f("kl_discrete", s.kl_discrete);
    f("dual_lr", s.dual_lr);
    f("recouple_every", s.recouple_every);
    f("recouple_iterations", s.recouple_iterations);
    f("backtrack_steps", s.backtrack_steps);
    f("seed", s.seed);
}

template <typename T>
void read_field(const json& j, const std::string& key, T& out) {
    try {
        if constexpr (std::is_same_v<T, bool>) {
            if (!j.is_boolean()) throw std::invalid_argument("expected true or false");
        } else if constexpr (std::is_integral_v<T>) {
            if (!j.is_number_integer()) throw std::invalid_argument("expected an integer");
            if (std::is_unsigned_v<T> && !j.is_number_unsigned() && j.get<long long>() < 0) {
                throw std::invalid_argument("expected a non-negative integer");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) throw std::invalid_argument("expected a number");
        } else {
            if (!j.is_array()) throw std::invalid_argument("expected an array of integers");
        }
        out = j.get<T>();
    } catch (const json::exception& e) {
        throw std::invalid_argument("schedule." + key + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("schedule." + key + ": " + e.what());
    }
}

}  // namespace

// Schedule ---------------------------------------------------------------------

void validate(const Schedule& s) {
    auto require = [](bool ok, const char* key, const char* what) {
        if (!ok) throw std::invalid_argument(std::string("schedule.") + key + ": " + what);
    };
    require(s.episodes >= 0, "episodes", "must be non-negative");
    require(s.max_episode_steps >= 0, "max_episode_steps", "must be non-negative");
    require(s.eval_every >= 0, "eval_every", "must be non-negative");
    require(s.warmup_steps >= 0, "warmup_steps", "must be non-negative");
    require(s.batch_size > 0, "batch_size", "must be positive");
    require(s.update_every > 0, "update_every", "must be positive");
    require(s.updates_per_step >= 0, "updates_per_step", "must be non-negative");
    require(s.buffer_capacity > 0, "buffer_capacity", "must be positive");
    require(!s.hidden.empty() && std::all_of(s.hidden.begin(), s.hidden.end(), [](int h) { return h > 0; }),
            "hidden", "needs at least one positive width");
    require(s.discount >= 0.0 && s.discount < 1.0, "discount", "must lie in [0, 1)");
    require(s.tau > 0.0 && s.tau <= 1.0, "tau", "must lie in (0, 1]");
    require(s.rho_min > 0.0, "rho_min", "must be positive");
    require(s.target_clip > 0.0, "target_clip", "must be positive");
    require(s.initial_temperature > 0.0, "initial_temperature", "must be positive");
    require(s.discrete_initial_temperature > 0.0, "discrete_initial_temperature", "must be positive");
    require(s.discrete_entropy_fraction >= 0.0 && s.discrete_entropy_fraction <= 1.0,
            "discrete_entropy_fraction", "must lie in [0, 1]");
    require(s.kappa >= 0.0, "kappa", "must be non-negative");
    require(s.kl_total > 0.0, "kl_total", "must be positive");
    require(s.kl_continuous > 0.0, "kl_continuous", "must be positive");
    require(s.kl_discrete > 0.0, "kl_discrete", "must be positive");
    require(s.recouple_every > 0, "recouple_every", "must be positive");
    require(s.recouple_iterations > 0, "recouple_iterations", "must be positive");
    require(s.backtrack_steps >= 0, "backtrack_steps", "must be non-negative");
    for (double lr : {s.actor_lr, s.critic_lr, s.temperature_lr, s.discrete_actor_lr,
                      s.discrete_critic_lr, s.coupled_lr, s.value_lr, s.dual_lr}) {
        require(lr >= 0.0 && std::isfinite(lr), "lr", "learning rates must be finite and non-negative");
    }
}

Schedule parse_schedule(const std::string& text) {
    json j;
    try {
        j = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("schedule: ") + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("schedule: expected a JSON object");
    Schedule s;
    std::size_t used = 0;
    visit_schedule(s, [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) {
            read_field(*it, key, field);
            ++used;
        }
    });
    if (used != j.size()) {
        for (const auto& [key, _] : j.items()) {
            bool known = false;
            visit_schedule(s, [&](const char* k, auto&) { known = known || key == k; });
            if (!known) throw std::invalid_argument("schedule." + key + ": unknown key");
        }
    }
    validate(s);
    return s;
}

Schedule load_schedule(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("schedule: cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_schedule(buf.str());
}

std::string schedule_to_json(const Schedule& s) {
    json j = json::object();
    visit_schedule(s, [&](const char* key, const auto& field) { j[key] = field; });
    return j.dump(2);
}

// Factored categoricals ------------------------------------------------------------

Matrix slot_softmax(const Matrix& logits, std::span<const int> options) {
    if (logits.rows() != total_options(options)) {
        throw std::invalid_argument("slot_softmax: logits rows do not match the options");
    }
    Matrix p(logits.rows(), logits.cols());
    int off = 0;
    for (int n : options) {
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
            const double m = logits.col(j).segment(off, n).maxCoeff();
            double z = 0.0;
            for (int k = 0; k < n; ++k) {
                p(off + k, j) = std::exp(logits(off + k, j) - m);
                z += p(off + k, j);
            }
            p.col(j).segment(off, n) /= z;
        }
        off += n;
    }
    return p;
}

double factored_log_prob(const Matrix& probs, int column, std::span<const int> options,
                         std::span<const int> action) {
    if (action.size() != options.size()) throw std::invalid_argument("factored_log_prob: action size");
    double lp = 0.0;
    int off = 0;
    for (std::size_t i = 0; i < options.size(); ++i) {
        if (action[i] < 0 || action[i] >= options[i]) {
            throw std::out_of_range("factored_log_prob: option out of range");
        }
        lp += std::log(std::max(probs(off + action[i], column), 1e-300));
        off += options[i];
    }
    return lp;
}

double factored_entropy(const Matrix& probs, int column, std::span<const int> options) {
    double h = 0.0;
    int off = 0;
    for (int n : options) {
        for (int k = 0; k < n; ++k) {
            const double p = probs(off + k, column);
            if (p > 0.0) h -= p * std::log(p);
        }
        off += n;
    }
    return h;
}

Vector one_hot(std::span<const int> options, std::span<const int> action) {
    if (action.size() != options.size()) throw std::invalid_argument("one_hot: action size");
    Vector v = Vector::Zero(total_options(options));
    int off = 0;
    for (std::size_t i = 0; i < options.size(); ++i) {
        if (action[i] < 0 || action[i] >= options[i]) throw std::out_of_range("one_hot: option out of range");
        v[off + action[i]] = 1.0;
        off += options[i];
    }
    return v;
}

double categorical_kl(const Matrix& p, const Matrix& q, int column, std::span<const int> options) {
    double kl = 0.0;
    const int total = total_options(options);
    for (int r = 0; r < total; ++r) {
        const double pr = p(r, column);
        if (pr > 0.0) kl += pr * (std::log(pr) - std::log(std::max(q(r, column), 1e-300)));
    }
    return kl;
}

double gaussian_kl(const Vector& mu_p, const Vector& ls_p, const Vector& mu_q, const Vector& ls_q) {
    double kl = 0.0;
    for (Eigen::Index i = 0; i < mu_p.size(); ++i) {
        const double vp = std::exp(2.0 * ls_p[i]);
        const double vq = std::exp(2.0 * ls_q[i]);
        const double d = mu_p[i] - mu_q[i];
        kl += ls_q[i] - ls_p[i] + (vp + d * d) / (2.0 * vq) - 0.5;
    }
    return kl;
}

// DiscreteAgent --------------------------------------------------------------------

int DiscreteConfig::one_hot_size() const { return total_options(options); }

double DiscreteConfig::entropy_target() const {
    double h = 0.0;
    for (int n : options) h += std::log(static_cast<double>(n));
    return entropy_fraction * h;
}

DiscreteAgent::DiscreteAgent(const DiscreteConfig& cfg)
    : cfg_(cfg), offsets_(offsets_of(cfg.options)), rng_(make_stream(cfg.seed, 0xd15c)) {
    if (cfg.obs_dim <= 0 || cfg.options.empty() ||
        std::any_of(cfg.options.begin(), cfg.options.end(), [](int n) { return n <= 0; })) {
        throw std::invalid_argument("DiscreteAgent: needs a positive observation size and option counts");
    }
    critic_ = dsac::DistributionalCritic(cfg.obs_dim + cfg.one_hot_size(), cfg.hidden, cfg.rho_min, rng_);
    actor_ = nn::DenseNet(widths(cfg.obs_dim, cfg.hidden, cfg.one_hot_size()), nn::Activation::Relu);
    actor_.init(rng_, 0.1);
    actor_target_ = actor_;
    actor_adam_ = nn::make_adam_state(actor_.param_count());
    log_nu_ = std::log(cfg.initial_temperature);
    nu_adam_ = nn::make_adam_state(1);
}

Matrix DiscreteAgent::probabilities(const Matrix& s, bool use_target) const {
    return slot_softmax((use_target ? actor_target_ : actor_).forward(s), cfg_.options);
}

std::vector<int> DiscreteAgent::sample(const Matrix& probs, int column, Rng& rng) const {
    std::vector<int> a(cfg_.options.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const int n = cfg_.options[i];
        double u = uniform(rng, 0.0, 1.0);
        int k = 0;
        for (; k + 1 < n; ++k) {
            u -= probs(offsets_[i] + k, column);
            if (u < 0.0) break;
        }
        a[i] = k;
    }
    return a;
}

std::vector<int> DiscreteAgent::act(const Vector& s, bool explore) {
    const Matrix p = probabilities(s);
    if (explore) return sample(p, 0, rng_);
    std::vector<int> a(cfg_.options.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = argmax_slot(p, 0, offsets_[i], cfg_.options[i]);
    return a;
}

Matrix DiscreteAgent::critic_input(const Matrix& s, const std::vector<std::vector<int>>& actions) const {
    Matrix in(cfg_.obs_dim + cfg_.one_hot_size(), s.cols());
    in.topRows(cfg_.obs_dim) = s;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        in.col(j).tail(cfg_.one_hot_size()) = one_hot(cfg_.options, actions[static_cast<std::size_t>(j)]);
    }
    return in;
}

Matrix DiscreteAgent::slot_values(const Matrix& s, const std::vector<std::vector<int>>& actions) const {
    const int total = cfg_.one_hot_size();
    const auto b = s.cols();
    const auto& net = critic_.net;
    const auto w0 = net.weight(0);
    Matrix base = w0 * critic_input(s, actions);
    base.colwise() += net.bias(0);
    Matrix z(base.rows(), b * total);
    for (Eigen::Index j = 0; j < b; ++j) {
        const auto& a = actions[static_cast<std::size_t>(j)];
        for (std::size_t i = 0; i < cfg_.options.size(); ++i) {
            const int cur = cfg_.obs_dim + offsets_[i] + a[i];
            for (int k = 0; k < cfg_.options[i]; ++k) {
                const int col = cfg_.obs_dim + offsets_[i] + k;
                z.col(j * total + offsets_[i] + k) = base.col(j) + w0.col(col) - w0.col(cur);
            }
        }
    }
    const Matrix out = net.forward_from_preactivation(z);
    Matrix q(total, b);
    for (Eigen::Index j = 0; j < b; ++j) q.col(j) = out.row(0).segment(j * total, total).transpose();
    return q;
}

Vector DiscreteAgent::soft_return_targets(const dsac::Batch& batch) {
    const auto n = batch.s.cols();
    const Matrix p = probabilities(batch.s_next, true);
    std::vector<std::vector<int>> next(static_cast<std::size_t>(n));
    Vector lp(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        next[static_cast<std::size_t>(j)] = sample(p, static_cast<int>(j), rng_);
        lp[j] = factored_log_prob(p, static_cast<int>(j), cfg_.options, next[static_cast<std::size_t>(j)]);
    }
    const auto ret = critic_.evaluate(critic_input(batch.s_next, next), true);
    Vector y(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto& g = ret[static_cast<std::size_t>(j)];
        const double z = g.q_mean + g.q_std * standard_normal(rng_);
        y[j] = batch.r[j] + (1.0 - batch.done[j]) * cfg_.discount * (z - temperature() * lp[j]);
    }
    return y;
}

Vector DiscreteAgent::critic_gradient(const dsac::Batch& batch, const Vector& targets) const {
    return critic_.loss_gradient(critic_input(batch.s, batch.discrete), targets, cfg_.target_clip);
}

DiscreteAgent::ActorGradient DiscreteAgent::actor_gradient(const Matrix& s,
                                                           const std::vector<std::vector<int>>& others) const {
    nn::GradientTape tape;
    const Matrix logits = actor_.forward(s, tape);
    const Matrix p = slot_softmax(logits, cfg_.options);
    const Matrix q = slot_values(s, others);
    const double nu = temperature();
    const double inv_b = 1.0 / static_cast<double>(s.cols());
    Matrix g(logits.rows(), logits.cols());
    ActorGradient res;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        for (std::size_t i = 0; i < cfg_.options.size(); ++i) {
            const int off = offsets_[i];
            const int n = cfg_.options[i];
            double slot_loss = 0.0;
            for (int k = 0; k < n; ++k) {
                const double pk = p(off + k, j);
                const double lp = std::log(std::max(pk, 1e-300));
                slot_loss += pk * (nu * lp - q(off + k, j));
                res.mean_entropy -= pk > 0.0 ? pk * lp : 0.0;
            }
            for (int k = 0; k < n; ++k) {
                const double pk = p(off + k, j);
                const double lp = std::log(std::max(pk, 1e-300));
                g(off + k, j) = pk * ((nu * lp - q(off + k, j)) - slot_loss) * inv_b;
            }
        }
    }
    res.mean_entropy *= inv_b;
    res.params = actor_.backward(tape, g).params;
    return res;
}

void DiscreteAgent::update(const dsac::Batch& batch) {
    if (batch.s.rows() != cfg_.obs_dim) throw std::invalid_argument("DiscreteAgent::update: batch shape");
    const Vector y = soft_return_targets(batch);
    critic_.apply(critic_gradient(batch, y), {.lr = cfg_.critic_lr}, cfg_.grad_clip);

    const Matrix p = probabilities(batch.s);
    std::vector<std::vector<int>> others(static_cast<std::size_t>(batch.s.cols()));
    for (Eigen::Index j = 0; j < batch.s.cols(); ++j) {
        others[static_cast<std::size_t>(j)] = sample(p, static_cast<int>(j), rng_);
    }
    ActorGradient ag = actor_gradient(batch.s, others);
    apply_adam(actor_, ag.params, actor_adam_, cfg_.actor_lr, cfg_.grad_clip);

    if (cfg_.learn_temperature) {
        Vector lv(1);
        lv[0] = log_nu_;
        Vector g(1);
        g[0] = temperature() * (ag.mean_entropy - cfg_.entropy_target());
        nn::adam_update(lv, g, nu_adam_, {.lr = cfg_.temperature_lr});
        log_nu_ = std::clamp(lv[0], -20.0, 5.0);
    }
    critic_.soft_update(cfg_.tau);
    dsac::soft_update(actor_target_, actor_, cfg_.tau);
}

void DiscreteAgent::save(std::ostream& out) const {
    io::write_magic(out, "SGDA");
    io::write_le<std::uint32_t>(out, kDiscreteVersion);
    io::write_le<std::int32_t>(out, cfg_.obs_dim);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg_.options.size()));
    for (int n : cfg_.options) io::write_le<std::int32_t>(out, n);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg_.hidden.size()));
    for (int h : cfg_.hidden) io::write_le<std::int32_t>(out, h);
    for (double v : {cfg_.discount, cfg_.tau, cfg_.rho_min, cfg_.target_clip, cfg_.actor_lr, cfg_.critic_lr,
                     cfg_.temperature_lr, cfg_.initial_temperature, cfg_.entropy_fraction, cfg_.grad_clip}) {
        io::write_le<double>(out, v);
    }
    io::write_le<std::uint8_t>(out, cfg_.learn_temperature);
    io::write_le<std::uint64_t>(out, cfg_.seed);
    nn::write_net(out, critic_.net);
    nn::write_net(out, critic_.target);
    nn::write_net(out, actor_);
    nn::write_net(out, actor_target_);
    nn::write_adam(out, critic_.adam);
    nn::write_adam(out, actor_adam_);
    nn::write_adam(out, nu_adam_);
    io::write_le<double>(out, log_nu_);
    dsac::write_rng(out, rng_);
}

DiscreteAgent DiscreteAgent::load(std::istream& in) {
    io::expect_magic(in, "SGDA");
    const auto version = io::read_le<std::uint32_t>(in);
    if (version != kDiscreteVersion) {
        throw std::runtime_error("discrete agent checkpoint: unsupported version " + std::to_string(version));
    }
    DiscreteConfig cfg;
    cfg.obs_dim = io::read_le<std::int32_t>(in);
    const auto slots = io::read_le<std::uint32_t>(in);
    if (slots > 1'000'000) throw std::runtime_error("discrete agent checkpoint: bad slot count");
    cfg.options.assign(slots, 0);
    for (auto& n : cfg.options) n = io::read_le<std::int32_t>(in);
    const auto layers = io::read_le<std::uint32_t>(in);
    if (layers > 64) throw std::runtime_error("discrete agent checkpoint: bad layer count");
    cfg.hidden.assign(layers, 0);
    for (auto& h : cfg.hidden) h = io::read_le<std::int32_t>(in);
    for (double* v : {&cfg.discount, &cfg.tau, &cfg.rho_min, &cfg.target_clip, &cfg.actor_lr, &cfg.critic_lr,
                      &cfg.temperature_lr, &cfg.initial_temperature, &cfg.entropy_fraction, &cfg.grad_clip}) {
        *v = io::read_le<double>(in);
    }
    cfg.learn_temperature = io::read_le<std::uint8_t>(in) != 0;
    cfg.seed = io::read_le<std::uint64_t>(in);
    DiscreteAgent a(cfg);
    a.critic_.net = nn::read_net(in);
    a.critic_.target = nn::read_net(in);
    a.actor_ = nn::read_net(in);
    a.actor_target_ = nn::read_net(in);
    if (a.actor_.output_width() != cfg.one_hot_size() ||
        a.critic_.net.input_width() != cfg.obs_dim + cfg.one_hot_size()) {
        throw std::runtime_error("discrete agent checkpoint: network shape does not match header");
    }
    a.critic_.adam = nn::read_adam(in);
    a.actor_adam_ = nn::read_adam(in);
    a.nu_adam_ = nn::read_adam(in);
    a.log_nu_ = io::read_le<double>(in);
    a.rng_ = dsac::read_rng(in);
    return a;
}

// HDsacAgent ------------------------------------------------------------------------

dsac::AgentConfig continuous_config(int obs_dim, int act_dim, const Schedule& s) {
    dsac::AgentConfig c;
    c.obs_dim = obs_dim;
    c.act_dim = act_dim;
    c.hidden = s.hidden;
    c.discount = s.discount;
    c.tau = s.tau;
    c.rho_min = s.rho_min;
    c.target_clip = s.target_clip;
    c.actor_lr = s.actor_lr;
    c.critic_lr = s.critic_lr;
    c.temperature_lr = s.temperature_lr;
    c.initial_temperature = s.initial_temperature;
    c.learn_temperature = s.learn_temperature;
    c.target_entropy = s.continuous_entropy_per_dim * act_dim;
    c.target_entropy_set = true;
    c.grad_clip = s.grad_clip;
    c.seed = s.seed;
    return c;
}

DiscreteConfig discrete_config(int obs_dim, std::vector<int> options, const Schedule& s) {
    DiscreteConfig c;
    c.obs_dim = obs_dim;
    c.options = std::move(options);
    c.hidden = s.hidden;
    c.discount = s.discount;
    c.tau = s.tau;
    c.rho_min = s.rho_min;
    c.target_clip = s.target_clip;
    c.actor_lr = s.discrete_actor_lr;
    c.critic_lr = s.discrete_critic_lr;
    c.temperature_lr = s.temperature_lr;
    c.initial_temperature = s.discrete_initial_temperature;
    c.learn_temperature = s.learn_temperature;
    c.entropy_fraction = s.discrete_entropy_fraction;
    c.grad_clip = s.grad_clip;
    c.seed = s.seed;
    return c;
}

HDsacAgent::HDsacAgent(int obs_dim, std::vector<int> options, int continuous_dim, const Schedule& schedule)
    : obs_dim_(obs_dim),
      cont_dim_(continuous_dim),
      options_(std::move(options)),
      schedule_(schedule),
      rng_(make_stream(schedule.seed, 0xc0c0)) {
    validate(schedule);
    if (cont_dim_ <= 0) throw std::invalid_argument("HDsacAgent: continuous part must be non-empty");
    discrete_ = DiscreteAgent(discrete_config(obs_dim, options_, schedule));
    continuous_ = dsac::Agent(continuous_config(obs_dim, cont_dim_, schedule));
    const int total = total_options(options_);
    coupled_ = nn::DenseNet(widths(obs_dim, schedule.hidden, total + 2 * cont_dim_), nn::Activation::Relu);
    coupled_.init(rng_, 0.1);
    coupled_adam_ = nn::make_adam_state(coupled_.param_count());
    value_ = nn::DenseNet(widths(obs_dim + total + cont_dim_, schedule.hidden, 1), nn::Activation::Relu);
    value_.init(rng_);
    value_target_ = value_;
    value_adam_ = nn::make_adam_state(value_.param_count());
}

void HDsacAgent::act(const Vector& s, bool explore, std::vector<int>& discrete, Vector& continuous) {
    discrete = discrete_.act(s, explore);
    continuous = continuous_.act(s, explore);
}

HDsacAgent::CoupledOutput HDsacAgent::coupled(const Matrix& s) const {
    const int total = total_options(options_);
    CoupledOutput o;
    o.raw = coupled_.forward(s);
    o.probs = slot_softmax(o.raw.topRows(total), options_);
    o.mean = o.raw.middleRows(total, cont_dim_);
    const auto& c = continuous_.config();
    o.log_std = o.raw.bottomRows(cont_dim_).cwiseMax(c.log_std_min).cwiseMin(c.log_std_max);
    return o;
}

void HDsacAgent::greedy(const Vector& s, EvalPolicy which, std::vector<int>& discrete, Vector& continuous) const {
    const auto off = offsets_of(options_);
    discrete.assign(options_.size(), 0);
    if (which == EvalPolicy::Coupled) {
        const auto o = coupled(s);
        for (std::size_t i = 0; i < options_.size(); ++i) discrete[i] = argmax_slot(o.probs, 0, off[i], options_[i]);
        continuous = o.mean.col(0).array().tanh();
        return;
    }
    const Matrix p = discrete_.probabilities(s);
    for (std::size_t i = 0; i < options_.size(); ++i) discrete[i] = argmax_slot(p, 0, off[i], options_[i]);
    continuous = continuous_.policy(s, Matrix::Zero(cont_dim_, 1)).action.col(0);
}

void HDsacAgent::update_value(const dsac::Batch& b) {
    const auto n = b.s.cols();
    const auto next = coupled(b.s_next);
    const auto off = offsets_of(options_);
    const int total = total_options(options_);
    Matrix in_next(obs_dim_ + total + cont_dim_, n);
    Matrix in(obs_dim_ + total + cont_dim_, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        std::vector<int> a(options_.size());
        for (std::size_t i = 0; i < options_.size(); ++i) {
            double u = uniform(rng_, 0.0, 1.0);
            int k = 0;
            for (; k + 1 < options_[i]; ++k) {
                u -= next.probs(off[i] + k, j);
                if (u < 0.0) break;
            }
            a[i] = k;
        }
        Vector ac(cont_dim_);
        for (int d = 0; d < cont_dim_; ++d) {
            ac[d] = std::tanh(next.mean(d, j) + std::exp(next.log_std(d, j)) * standard_normal(rng_));
        }
        in_next.col(j) << b.s_next.col(j), one_hot(options_, a), ac;
        in.col(j) << b.s.col(j), one_hot(options_, b.discrete[static_cast<std::size_t>(j)]), b.a.col(j);
    }
    const Matrix q_next = value_target_.forward(in_next);
    nn::GradientTape tape;
    const Matrix q = value_.forward(in, tape);
    Matrix g(1, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const double y = b.r[j] + (1.0 - b.done[j]) * schedule_.discount * q_next(0, j);
        g(0, j) = (q(0, j) - y) / static_cast<double>(n);
    }
    apply_adam(value_, value_.backward(tape, g).params, value_adam_, schedule_.value_lr, schedule_.grad_clip);
    dsac::soft_update(value_target_, value_, schedule_.tau);
}

double HDsacAgent::product_gap(const Matrix& s) const {
    const auto cur = coupled(s);
    const Matrix p = discrete_.probabilities(s);
    const auto prod = continuous_.policy(s, Matrix::Zero(cont_dim_, s.cols()));
    double total = 0.0;
    for (Eigen::Index j = 0; j < s.cols(); ++j) {
        total += categorical_kl(p, cur.probs, static_cast<int>(j), options_);
        total += gaussian_kl(prod.mean.col(j), prod.log_std.col(j), cur.mean.col(j), cur.log_std.col(j));
    }
    return total / static_cast<double>(s.cols());
}

Vector HDsacAgent::coupled_output_gradient(const Matrix& s, const CoupledOutput& cur, const CoupledOutput& old,
                                           const Matrix& prod_probs, const Matrix& prod_mean,
                                           const Matrix& prod_log_std, const nn::GradientTape& tape) const {
    const int total = total_options(options_);
    const auto n = s.cols();
    const double inv_b = 1.0 / static_cast<double>(n);
    const double lc = lambda_c_ / static_cast<double>(cont_dim_);
    const auto& c = continuous_.config();
    Matrix g = Matrix::Zero(total + 2 * cont_dim_, n);

    // d KL(p || softmax(z)) / dz = q - p, slot by slot
    g.topRows(total) = ((cur.probs - prod_probs) + lambda_d_ * (cur.probs - old.probs)) * inv_b;
    for (Eigen::Index j = 0; j < n; ++j) {
        for (int d = 0; d < cont_dim_; ++d) {
            const double mu = cur.mean(d, j);
            const double var = std::exp(2.0 * cur.log_std(d, j));
            const double dp = prod_mean(d, j) - mu;
            const double dold = old.mean(d, j) - mu;
            g(total + d, j) = (-dp / var - lc * dold / var) * inv_b;
            const double raw = cur.raw(total + cont_dim_ + d, j);
            if (raw > c.log_std_min && raw < c.log_std_max) {
                const double vp = std::exp(2.0 * prod_log_std(d, j));
                const double vo = std::exp(2.0 * old.log_std(d, j));
                g(total + cont_dim_ + d, j) =
                    ((1.0 - (vp + dp * dp) / var) + lc * (1.0 - (vo + dold * dold) / var)) * inv_b;
            }
        }
    }

    if (schedule_.kappa > 0.0) {
        // -kappa E[Q-bar]: reparameterized for the continuous part, exact
        // per-slot expectation for the discrete part.
        const auto off = offsets_of(options_);
        Rng noise_rng = rng_;
        const Matrix eps = normal_matrix(cont_dim_, n, noise_rng);
        std::vector<std::vector<int>> base(static_cast<std::size_t>(n));
        Matrix ac(cont_dim_, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            auto& a = base[static_cast<std::size_t>(j)];
            a.resize(options_.size());
            for (std::size_t i = 0; i < options_.size(); ++i) a[i] = argmax_slot(cur.probs, static_cast<int>(j), off[i], options_[i]);
            for (int d = 0; d < cont_dim_; ++d) {
                ac(d, j) = std::tanh(cur.mean(d, j) + std::exp(cur.log_std(d, j)) * eps(d, j));
            }
        }
        Matrix in(obs_dim_ + total + cont_dim_, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            in.col(j) << s.col(j), one_hot(options_, base[static_cast<std::size_t>(j)]), ac.col(j);
        }
        nn::GradientTape vt;
        value_.forward(in, vt);
        const Matrix dq = value_.backward(vt, Matrix::Ones(1, n)).input;
        const auto w0 = value_.weight(0);
        Matrix z0 = w0 * in;
        z0.colwise() += value_.bias(0);
        Matrix z(z0.rows(), n * total);
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& a = base[static_cast<std::size_t>(j)];
            for (std::size_t i = 0; i < options_.size(); ++i) {
                const int cur_col = obs_dim_ + off[i] + a[i];
                for (int k = 0; k < options_[i]; ++k) {
                    z.col(j * total + off[i] + k) = z0.col(j) + w0.col(obs_dim_ + off[i] + k) - w0.col(cur_col);
                }
            }
        }
        const Matrix qs = value_.forward_from_preactivation(z);
        const double kb = schedule_.kappa * inv_b;
        for (Eigen::Index j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < options_.size(); ++i) {
                double mean_q = 0.0;
                for (int k = 0; k < options_[i]; ++k) {
                    mean_q += cur.probs(off[i] + k, j) * qs(0, j * total + off[i] + k);
                }
                for (int k = 0; k < options_[i]; ++k) {
                    const double pk = cur.probs(off[i] + k, j);
                    g(off[i] + k, j) -= kb * pk * (qs(0, j * total + off[i] + k) - mean_q);
                }
            }
            for (int d = 0; d < cont_dim_; ++d) {
                const double du = dq(obs_dim_ + total + d, j) * (1.0 - ac(d, j) * ac(d, j));
                g(total + d, j) -= kb * du;
                const double raw = cur.raw(total + cont_dim_ + d, j);
                if (raw > c.log_std_min && raw < c.log_std_max) {
                    g(total + cont_dim_ + d, j) -= kb * du * std::exp(cur.log_std(d, j)) * eps(d, j);
                }
            }
        }
    }
    return coupled_.backward(tape, g).params;
}

RecoupleStats HDsacAgent::recouple(const Matrix& s) {
    const auto n = s.cols();
    const Vector start = coupled_.params();
    const auto old = coupled(s);
    const Matrix prod_probs = discrete_.probabilities(s);
    const auto prod = continuous_.policy(s, Matrix::Zero(cont_dim_, n));

    for (int it = 0; it < schedule_.recouple_iterations; ++it) {
        nn::GradientTape tape;
        coupled_.forward(s, tape);
        const auto cur = coupled(s);
        Vector grad = coupled_output_gradient(s, cur, old, prod_probs, prod.mean, prod.log_std, tape);
        apply_adam(coupled_, std::move(grad), coupled_adam_, schedule_.coupled_lr, schedule_.grad_clip);
    }

    auto measure = [&](RecoupleStats& st) {
        const auto cur = coupled(s);
        st.kl_discrete = 0.0;
        st.kl_continuous = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            st.kl_discrete += categorical_kl(old.probs, cur.probs, static_cast<int>(j), options_);
            st.kl_continuous += gaussian_kl(old.mean.col(j), old.log_std.col(j), cur.mean.col(j), cur.log_std.col(j));
        }
        st.kl_discrete /= static_cast<double>(n);
        st.kl_continuous /= static_cast<double>(n) * cont_dim_;
        return st.kl_discrete <= schedule_.kl_discrete && st.kl_continuous <= schedule_.kl_continuous &&
               st.kl_discrete + st.kl_continuous <= schedule_.kl_total;
    };

    RecoupleStats st;
    const Vector step = coupled_.params() - start;
    double scale = 1.0;
    bool ok = measure(st);
    const RecoupleStats first = st;
    for (int k = 0; !ok && k < schedule_.backtrack_steps; ++k) {
        scale *= 0.5;
        coupled_.set_params(start + scale * step);
        ok = measure(st);
    }
    if (!ok) {
        coupled_.set_params(start);
        measure(st);
        scale = 0.0;
        ++rejected_;
    }
    st.accepted = ok;
    st.scale = scale;
    // dual ascent on the unscaled step so repeated overshoot raises the penalty
    lambda_d_ = std::max(0.0, lambda_d_ + schedule_.dual_lr * (first.kl_discrete / schedule_.kl_discrete - 1.0));
    lambda_c_ = std::max(0.0, lambda_c_ + schedule_.dual_lr * (first.kl_continuous / schedule_.kl_continuous - 1.0));
    st.kl_to_product = product_gap(s);
    return st;
}

void HDsacAgent::update(const dsac::Batch& batch) {
    continuous_.update(batch);
    discrete_.update(batch);
    if (schedule_.kappa > 0.0) update_value(batch);
    if (updates_ % schedule_.recouple_every == 0) recouple(batch.s);
    ++updates_;
}

void HDsacAgent::save(std::ostream& out) const {
    io::write_magic(out, "SGHD");
    io::write_le<std::uint32_t>(out, kHybridVersion);
    io::write_le<std::int32_t>(out, obs_dim_);
    io::write_le<std::int32_t>(out, cont_dim_);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(options_.size()));
    for (int n : options_) io::write_le<std::int32_t>(out, n);
    const std::string sched = schedule_to_json(schedule_);
    io::write_le<std::uint64_t>(out, sched.size());
    out.write(sched.data(), static_cast<std::streamsize>(sched.size()));
    discrete_.save(out);
    continuous_.save(out);
    nn::write_net(out, coupled_);
    nn::write_adam(out, coupled_adam_);
    nn::write_net(out, value_);
    nn::write_net(out, value_target_);
    nn::write_adam(out, value_adam_);
    io::write_le<double>(out, lambda_d_);
    io::write_le<double>(out, lambda_c_);
    io::write_le<std::int64_t>(out, updates_);
    io::write_le<std::int64_t>(out, rejected_);
    dsac::write_rng(out, rng_);
    if (!out) throw std::runtime_error("hybrid agent checkpoint: write failed");
}

HDsacAgent HDsacAgent::load(std::istream& in) {
    io::expect_magic(in, "SGHD");
    const auto version = io::read_le<std::uint32_t>(in);
    if (version != kHybridVersion) {
        throw std::runtime_error("hybrid agent checkpoint: unsupported version " + std::to_string(version));
    }
    const int obs = io::read_le<std::int32_t>(in);
    const int cont = io::read_le<std::int32_t>(in);
    const auto slots = io::read_le<std::uint32_t>(in);
    if (slots > 1'000'000) throw std::runtime_error("hybrid agent checkpoint: bad slot count");
    std::vector<int> options(slots);
    for (auto& n : options) n = io::read_le<std::int32_t>(in);
    const auto len = io::read_le<std::uint64_t>(in);
    if (len > (1 << 20)) throw std::runtime_error("hybrid agent checkpoint: bad schedule size");
    std::string sched(len, '\0');
    if (!in.read(sched.data(), static_cast<std::streamsize>(len))) {
        throw std::runtime_error("hybrid agent checkpoint: truncated schedule");
    }
    HDsacAgent a(obs, options, cont, parse_schedule(sched));
    a.discrete_ = DiscreteAgent::load(in);
    a.continuous_ = dsac::Agent::load(in);
    a.coupled_ = nn::read_net(in);
    a.coupled_adam_ = nn::read_adam(in);
    a.value_ = nn::read_net(in);
    a.value_target_ = nn::read_net(in);
    a.value_adam_ = nn::read_adam(in);
    if (a.coupled_.input_width() != obs || a.coupled_.output_width() != total_options(options) + 2 * cont ||
        a.discrete_.config().options != options || a.continuous_.config().act_dim != cont) {
        throw std::runtime_error("hybrid agent checkpoint: component shapes do not match header");
    }
    a.lambda_d_ = io::read_le<double>(in);
    a.lambda_c_ = io::read_le<double>(in);
    a.updates_ = io::read_le<std::int64_t>(in);
    a.rejected_ = io::read_le<std::int64_t>(in);
    a.rng_ = dsac::read_rng(in);
    return a;
}

void HDsacAgent::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    save(out);
}

HDsacAgent HDsacAgent::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return load(in);
}

// Training loops --------------------------------------------------------------------

std::uint64_t episode_seed(std::uint64_t seed, int episode) {
    return mix_seed(mix_seed(seed) ^ static_cast<std::uint64_t>(episode + 1));
}

namespace {

struct LoopState {
    Rng explore_continuous;
    Rng explore_discrete;
    Rng sampler;
    dsac::ReplayBuffer buffer;

    explicit LoopState(const Schedule& s)
        : explore_continuous(make_stream(s.seed, 0x7a11)),
          explore_discrete(make_stream(s.seed, 0x7a12)),
          sampler(make_stream(s.seed, 0xba7c)),
          buffer(s.buffer_capacity) {}
};

void check_env(const HybridEnv& env, int obs, int cont) {
    if (env.observation_size() != obs || env.continuous_size() != cont) {
        throw std::invalid_argument("training: agent and environment dimensions differ");
    }
}

// Shared loop; `choose` fills the action for the current state, `learn`
// consumes one minibatch.
template <typename Choose, typename Learn>
TrainingLog run_loop(HybridEnv& env, const Schedule& sch, LoopState& st, Choose&& choose, Learn&& learn,
                     const EpisodeCallback& on_episode) {
    TrainingLog log;
    const auto options = env.discrete_options();
    const int cont = env.continuous_size();
    std::int64_t total = 0;
    for (int ep = 0; ep < sch.episodes; ++ep) {
        Vector s = env.reset(episode_seed(sch.seed, ep));
        EpisodeLog el{ep, 0, 0.0};
        while (true) {
            std::vector<int> d(options.size(), 0);
            Vector c(cont);
            if (total < sch.warmup_steps) {
                for (std::size_t i = 0; i < options.size(); ++i) {
                    d[i] = std::uniform_int_distribution<int>(0, options[i] - 1)(st.explore_discrete);
                }
                for (int i = 0; i < cont; ++i) c[i] = uniform(st.explore_continuous, -1.0, 1.0);
            } else {
                choose(s, d, c);
            }
            const EnvStep r = env.step(d, std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
            ++total;
            ++el.steps;
            el.episode_return += r.reward;
            st.buffer.append({s, c, d, r.reward, r.observation, r.terminal});
            s = r.observation;
            if (total >= sch.warmup_steps && st.buffer.size() >= static_cast<std::size_t>(sch.batch_size) &&
                total % sch.update_every == 0) {
                for (int u = 0; u < sch.updates_per_step; ++u) {
                    learn(st.buffer.sample(sch.batch_size, st.sampler));
                    ++log.updates;
                }
            }
            const bool cut = sch.max_episode_steps > 0 && el.steps >= sch.max_episode_steps;
            if (r.terminal || r.truncated || cut) break;
        }
        log.episodes.push_back(el);
        if (on_episode) on_episode(el);
    }
    log.env_steps = total;
    return log;
}

}  // namespace

TrainingLog train_h_dsac(HybridEnv& env, HDsacAgent& agent, const Schedule& sch, const EpisodeCallback& cb) {
    validate(sch);
    check_env(env, agent.observation_size(), agent.continuous_size());
    if (env.discrete_options() != agent.options()) {
        throw std::invalid_argument("train_h_dsac: discrete options differ");
    }
    LoopState st(sch);
    return run_loop(
        env, sch, st,
        [&](const Vector& s, std::vector<int>& d, Vector& c) { agent.act(s, true, d, c); },
        [&](const dsac::Batch& b) { agent.update(b); }, cb);
}

TrainingLog train_dsac(HybridEnv& env, dsac::Agent& agent, const Schedule& sch, const EpisodeCallback& cb) {
    validate(sch);
    check_env(env, agent.config().obs_dim, agent.config().act_dim);
    LoopState st(sch);
    return run_loop(
        env, sch, st,
        [&](const Vector& s, std::vector<int>& d, Vector& c) {
            std::fill(d.begin(), d.end(), 0);
            c = agent.act(s, true);
        },
        [&](const dsac::Batch& b) { agent.update(b); }, cb);
}

double evaluate(HybridEnv& env, const HDsacAgent& agent, EvalPolicy which, std::uint64_t seed, int max_steps) {
    Vector s = env.reset(seed);
    double ret = 0.0;
    for (int t = 0; max_steps <= 0 || t < max_steps; ++t) {
        std::vector<int> d;
        Vector c;
        agent.greedy(s, which, d, c);
        const auto r = env.step(d, std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
        ret += r.reward;
        s = r.observation;
        if (r.terminal || r.truncated) break;
    }
    return ret;
}

// Toy environments ------------------------------------------------------------------

Bandit::Bandit(std::vector<double> bonus, std::vector<double> center)
    : bonus_(std::move(bonus)), center_(std::move(center)) {
    if (bonus_.empty() || bonus_.size() != center_.size()) {
        throw std::invalid_argument("Bandit: need one bonus and one center per arm");
    }
}

Vector Bandit::reset(std::uint64_t) { return Vector::Ones(1); }

double Bandit::reward(int arm, double a) const {
    const auto k = static_cast<std::size_t>(arm);
    return bonus_.at(k) - (a - center_.at(k)) * (a - center_.at(k));
}

EnvStep Bandit::step(std::span<const int> d, std::span<const double> c) {
    if (d.size() != 1 || c.size() != 1) throw std::invalid_argument("Bandit::step: action shape");
    return {Vector::Ones(1), reward(d[0], c[0]), true, false};
}

std::pair<int, double> Bandit::optimum() const {
    int best = 0;
    for (std::size_t k = 1; k < bonus_.size(); ++k) {
        if (bonus_[k] > bonus_[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
    }
    return {best, std::clamp(center_[static_cast<std::size_t>(best)], -1.0, 1.0)};
}

}  // namespace sagin::hybrid
