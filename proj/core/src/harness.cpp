#include "sagin/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace sagin::harness {

namespace {

constexpr std::pair<Policy, const char*> kPolicies[] = {
    {Policy::HDsac, "hdsac"},
    {Policy::FedAvgWeights, "hdsac_fedavg"},
    {Policy::HoveringUav, "hdsac_hovering"},
    {Policy::Random, "random"},
    {Policy::FixedReward, "fixed_reward"}};

constexpr std::pair<SweepAxis, const char*> kSweeps[] = {
    {SweepAxis::None, "none"},
    {SweepAxis::Time, "time"},
    {SweepAxis::UserPower, "user_power"},
    {SweepAxis::TaskCountIid, "task_count_iid"},
    {SweepAxis::TaskCountNonIid, "task_count_noniid"},
    {SweepAxis::Elevation, "elevation"}};

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, const char* column) {
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw std::invalid_argument(std::string("csv: column ") + column + ": not a number: '" + s + "'");
    }
    return v;
}

template <typename Int>
Int parse_int(const std::string& s, const char* column) {
    Int v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw std::invalid_argument(std::string("csv: column ") + column + ": not an integer: '" + s + "'");
    }
    return v;
}

std::string join(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ';';
        out += format_double(v[i]);
    }
    return out;
}

std::vector<double> split_values(const std::string& s, const char* column) {
    std::vector<double> out;
    if (s.empty()) return out;
    std::size_t start = 0;
    while (true) {
        const auto end = s.find(';', start);
        out.push_back(parse_double(s.substr(start, end - start), column));
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return out;
}

std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto end = line.find(',', start);
        out.push_back(line.substr(start, end - start));
        if (end == std::string::npos) break;
        start = end + 1;
    }
    return out;
}

bool plain_token(const std::string& s) {
    return s.find_first_of(",\n\r\"") == std::string::npos;
}

MetricRow make_row(const env::Env& e, const std::string& experiment, Policy policy, SweepAxis sweep,
                   double sweep_value, std::uint64_t seed, const char* phase, int episode) {
    MetricRow r;
    r.experiment = experiment;
    r.policy = to_string(policy);
    r.sweep = to_string(sweep);
    r.sweep_value = sweep_value;
    r.seed = seed;
    r.phase = phase;
    r.episode = episode;
    r.slot = e.slot();
    r.task_accuracy = e.accuracy();
    r.task_loss = e.loss();
    return r;
}

double population_std(const std::vector<double>& v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(v.size()));
}

std::uint64_t agent_seed(std::uint64_t schedule_seed, std::uint64_t seed) {
    return mix_seed(schedule_seed ^ mix_seed(seed + 0x5eed));
}

}  // namespace

std::string to_string(Policy p) {
    for (const auto& [v, n] : kPolicies) {
        if (v == p) return n;
    }
    throw std::invalid_argument("unknown policy");
}

std::string to_string(SweepAxis a) {
    for (const auto& [v, n] : kSweeps) {
        if (v == a) return n;
    }
    throw std::invalid_argument("unknown sweep axis");
}

Policy parse_policy(const std::string& name) {
    for (const auto& [v, n] : kPolicies) {
        if (name == n) return v;
    }
    throw std::invalid_argument("policy: unknown baseline '" + name + "'");
}

SweepAxis parse_sweep(const std::string& name) {
    for (const auto& [v, n] : kSweeps) {
        if (name == n) return v;
    }
    throw std::invalid_argument("sweep: unknown axis '" + name + "'");
}

ScenarioConfig scenario_for(const ScenarioConfig& base, Policy p) {
    ScenarioConfig c = base;
    if (p == Policy::FedAvgWeights) c.fedavg_weights = true;
    if (p == Policy::FixedReward) c.fixed_reward = true;
    return c;
}

bool sweep_reshapes(SweepAxis axis) {
    return axis == SweepAxis::TaskCountIid || axis == SweepAxis::TaskCountNonIid;
}

ScenarioConfig apply_sweep(const ScenarioConfig& base, SweepAxis axis, double value) {
    ScenarioConfig c = base;
    auto bad = [&](const char* what) {
        throw std::invalid_argument("sweep." + to_string(axis) + ": value " + format_double(value) + " " + what);
    };
    switch (axis) {
        case SweepAxis::None:
            break;
        case SweepAxis::Time:
            if (!(value >= 1.0) || value != std::floor(value)) bad("must be a whole number of slots");
            c.horizon = static_cast<int>(value);
            break;
        case SweepAxis::UserPower:
            if (!(value > 0.0) || !std::isfinite(value)) bad("must be a positive power in W");
            c.user_power_w = value;
            break;
        case SweepAxis::TaskCountIid:
        case SweepAxis::TaskCountNonIid:
            if (!(value >= 1.0) || value != std::floor(value) || value > 64) bad("must be a task count in [1, 64]");
            c.tasks = static_cast<int>(value);
            if (axis == SweepAxis::TaskCountIid) c.data.concentration = std::numeric_limits<double>::infinity();
            break;
        case SweepAxis::Elevation:
            if (!(value >= 0.0 && value < 90.0)) bad("must be an angle in [0, 90) degrees");
            c.min_elevation_deg = value;
            break;
    }
    validate(c);
    return c;
}

std::vector<double> default_sweep_values(SweepAxis axis, const ScenarioConfig& base) {
    switch (axis) {
        case SweepAxis::None: return {0.0};
        case SweepAxis::Time: return {static_cast<double>(base.horizon)};
        case SweepAxis::UserPower: return {0.05, 0.1, 0.2};
        case SweepAxis::TaskCountIid:
        case SweepAxis::TaskCountNonIid: return {1, 2, 3, 4};
        case SweepAxis::Elevation: return {30.0, 40.0, 50.0};
    }
    return {};
}

// SaginEnv ------------------------------------------------------------------------

SaginEnv::SaginEnv(ScenarioConfig cfg, Policy policy) : env_(std::move(cfg)), policy_(policy) {}

Vector SaginEnv::reset(std::uint64_t seed) {
    last_ = {};
    return pinned_ ? env_.reset(*pinned_, seed) : env_.reset(seed);
}

hybrid::EnvStep SaginEnv::step(std::span<const int> discrete, std::span<const double> continuous) {
    Vector raw = env_.raw_from_unit(continuous);
    if (policy_ == Policy::HoveringUav) {
        raw.head(env_.layout().edge_offset()).setZero();
    }
    last_action_ = env_.decode_action(discrete, std::span<const double>(raw.data(), static_cast<std::size_t>(raw.size())));
    auto r = env_.step(last_action_);
    last_ = std::move(r.info);
    hybrid::EnvStep out;
    out.observation = std::move(r.observation);
    out.reward = r.reward;
    out.truncated = r.done && env_.slot() >= env_.config().horizon;
    out.terminal = r.done && !out.truncated;
    return out;
}

// Metrics ---------------------------------------------------------------------------

double MetricRow::mean_accuracy() const {
    if (task_accuracy.empty()) return 0.0;
    double s = 0.0;
    for (double a : task_accuracy) s += a;
    return s / static_cast<double>(task_accuracy.size());
}

double MetricRow::accuracy_spread() const {
    if (task_accuracy.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(task_accuracy.begin(), task_accuracy.end());
    return *hi - *lo;
}

void validate_row(const MetricRow& r) {
    auto fail = [](const std::string& what) { throw std::invalid_argument("metric row: " + what); };
    for (const auto* s : {&r.experiment, &r.policy, &r.sweep, &r.phase}) {
        if (s->empty() || !plain_token(*s)) fail("text fields must be non-empty and free of commas");
    }
    if (r.phase != "train" && r.phase != "probe" && r.phase != "eval") fail("phase must be train, probe or eval");
    if (r.episode < 0 || r.slot < 0) fail("episode and slot must be non-negative");
    if (r.task_accuracy.empty()) fail("needs at least one task");
    if (r.task_loss.size() != r.task_accuracy.size()) fail("task_loss and task_accuracy lengths differ");
    for (double a : r.task_accuracy) {
        if (!(a >= 0.0 && a <= 1.0)) fail("accuracy outside [0, 1]");
    }
    for (double l : r.task_loss) {
        if (!(l >= 0.0) || !std::isfinite(l)) fail("loss must be finite and non-negative");
    }
    if (!std::isfinite(r.reward) || !std::isfinite(r.episode_return) || !std::isfinite(r.sweep_value)) {
        fail("reward, return and sweep value must be finite");
    }
}

void write_csv_header(std::ostream& out) {
    out << kCsvSchemaLine << '\n';
    bool first = true;
    for (const char* c : kCsvColumns) {
        out << (first ? "" : ",") << c;
        first = false;
    }
    out << '\n';
}

void write_csv_row(std::ostream& out, const MetricRow& r) {
    validate_row(r);
    out << r.experiment << ',' << r.policy << ',' << r.sweep << ',' << format_double(r.sweep_value) << ','
        << r.seed << ',' << r.phase << ',' << r.episode << ',' << r.slot << ',' << r.task_accuracy.size() << ','
        << format_double(r.mean_accuracy()) << ',' << format_double(r.accuracy_spread()) << ','
        << format_double(r.reward) << ',' << format_double(r.episode_return) << ',' << join(r.task_accuracy)
        << ',' << join(r.task_loss) << '\n';
}

std::vector<MetricRow> read_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kCsvSchemaLine) {
        throw std::invalid_argument(std::string("csv: first line must be '") + kCsvSchemaLine + "'");
    }
    if (!std::getline(in, line)) throw std::invalid_argument("csv: missing column header");
    const auto header = split_fields(line);
    constexpr std::size_t ncol = std::size(kCsvColumns);
    if (header.size() != ncol || !std::equal(header.begin(), header.end(), std::begin(kCsvColumns))) {
        throw std::invalid_argument("csv: column header does not match the schema");
    }
    std::vector<MetricRow> rows;
    int line_no = 2;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_fields(line);
        if (f.size() != ncol) {
            throw std::invalid_argument("csv: line " + std::to_string(line_no) + ": expected " +
                                        std::to_string(ncol) + " fields");
        }
        try {
            MetricRow r;
            r.experiment = f[0];
            r.policy = f[1];
            r.sweep = f[2];
            r.sweep_value = parse_double(f[3], "sweep_value");
            r.seed = parse_int<std::uint64_t>(f[4], "seed");
            r.phase = f[5];
            r.episode = parse_int<int>(f[6], "episode");
            r.slot = parse_int<int>(f[7], "slot");
            const int tasks = parse_int<int>(f[8], "task_count");
            r.reward = parse_double(f[11], "reward");
            r.episode_return = parse_double(f[12], "episode_return");
            r.task_accuracy = split_values(f[13], "task_accuracy");
            r.task_loss = split_values(f[14], "task_loss");
            if (static_cast<int>(r.task_accuracy.size()) != tasks) {
                throw std::invalid_argument("csv: task_count does not match task_accuracy");
            }
            validate_row(r);
            const double mean = parse_double(f[9], "mean_accuracy");
            const double spread = parse_double(f[10], "accuracy_spread");
            if (std::abs(mean - r.mean_accuracy()) > 1e-12 || std::abs(spread - r.accuracy_spread()) > 1e-12) {
                throw std::invalid_argument("csv: derived columns disagree with task_accuracy");
            }
            rows.push_back(std::move(r));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return rows;
}

std::vector<MetricRow> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("csv: cannot open " + path.string());
    try {
        return read_csv(in);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows) {
    using Key = std::tuple<std::string, std::string, std::string, double>;
    // final slot per (key, seed)
    std::map<std::pair<Key, std::uint64_t>, const MetricRow*> last;
    for (const auto& r : rows) {
        if (r.phase != "eval") continue;
        auto& slot = last[{Key{r.experiment, r.policy, r.sweep, r.sweep_value}, r.seed}];
        if (!slot || r.slot > slot->slot) slot = &r;
    }
    std::map<Key, std::pair<std::vector<double>, std::vector<double>>> grouped;
    for (const auto& [k, r] : last) {
        grouped[k.first].first.push_back(r->mean_accuracy());
        grouped[k.first].second.push_back(r->accuracy_spread());
    }
    std::vector<SummaryRow> out;
    for (const auto& [k, v] : grouped) {
        SummaryRow s;
        std::tie(s.experiment, s.policy, s.sweep, s.sweep_value) = k;
        s.seeds = static_cast<int>(v.first.size());
        for (double a : v.first) s.mean_accuracy += a;
        for (double a : v.second) s.mean_spread += a;
        s.mean_accuracy /= s.seeds;
        s.mean_spread /= s.seeds;
        s.std_accuracy = population_std(v.first, s.mean_accuracy);
        s.std_spread = population_std(v.second, s.mean_spread);
        out.push_back(s);
    }
    return out;
}

std::vector<SummaryRow> emit_summary(const std::vector<std::filesystem::path>& paths) {
    if (paths.empty()) throw std::invalid_argument("summarize: no CSV files given");
    std::vector<MetricRow> rows;
    for (const auto& p : paths) {
        auto r = read_csv(p);
        rows.insert(rows.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
    }
    return summarize(rows);
}

void write_summary(std::ostream& out, const std::vector<SummaryRow>& rows) {
    out << "experiment,policy,sweep,sweep_value,seeds,mean_accuracy,std_accuracy,mean_spread,std_spread\n";
    for (const auto& s : rows) {
        out << s.experiment << ',' << s.policy << ',' << s.sweep << ',' << format_double(s.sweep_value) << ','
            << s.seeds << ',' << std::fixed << std::setprecision(6) << s.mean_accuracy << ',' << s.std_accuracy
            << ',' << s.mean_spread << ',' << s.std_spread << '\n';
        out << std::defaultfloat;
    }
}

// Experiments -----------------------------------------------------------------------

void validate(const ExperimentSpec& spec) {
    if (spec.name.empty() || !plain_token(spec.name) || spec.name.find('/') != std::string::npos) {
        throw std::invalid_argument("experiment.name: must be non-empty without commas or slashes");
    }
    if (spec.seeds.empty()) throw std::invalid_argument("experiment.seeds: at least one seed is required");
    validate(spec.scenario);
    hybrid::validate(spec.schedule);
    for (double v : spec.sweep_values) apply_sweep(spec.scenario, spec.sweep, v);
}

std::vector<MetricRow> evaluate_episode(const ScenarioConfig& scenario, Policy policy,
                                        const hybrid::HDsacAgent* agent, std::uint64_t seed,
                                        const std::string& experiment, SweepAxis sweep, double sweep_value) {
    if (policy != Policy::Random && agent == nullptr) {
        throw std::invalid_argument("evaluate_episode: policy needs a trained agent");
    }
    SaginEnv env(scenario_for(scenario, policy), policy);
    Vector s = env.reset(seed);
    const auto options = env.discrete_options();
    const int cont = env.continuous_size();
    Rng rng = make_stream(seed, 0x7a2d);
    std::vector<MetricRow> rows;
    MetricRow first = make_row(env.env(), experiment, policy, sweep, sweep_value, seed, "eval", 0);
    rows.push_back(first);
    double ret = 0.0;
    while (true) {
        std::vector<int> d(options.size());
        Vector c(cont);
        if (agent) {
            agent->greedy(s, hybrid::EvalPolicy::Coupled, d, c);
        } else {
            for (std::size_t i = 0; i < options.size(); ++i) {
                d[i] = std::uniform_int_distribution<int>(0, options[i] - 1)(rng);
            }
            for (int i = 0; i < cont; ++i) c[i] = uniform(rng, -1.0, 1.0);
        }
        const auto r = env.step(d, std::span<const double>(c.data(), static_cast<std::size_t>(c.size())));
        ret += r.reward;
        MetricRow row = make_row(env.env(), experiment, policy, sweep, sweep_value, seed, "eval", 0);
        row.reward = r.reward;
        row.episode_return = ret;
        rows.push_back(std::move(row));
        s = r.observation;
        if (r.terminal || r.truncated) break;
    }
    return rows;
}

hybrid::HDsacAgent train_agent(const ScenarioConfig& scenario, Policy policy, const hybrid::Schedule& schedule,
                               std::uint64_t seed, bool pin_scenario, const std::string& experiment,
                               std::vector<MetricRow>* train_rows) {
    if (policy == Policy::Random) throw std::invalid_argument("train_agent: the random policy is not trained");
    SaginEnv env(scenario_for(scenario, policy), policy);
    if (pin_scenario) env.pin_scenario(seed);
    hybrid::Schedule sch = schedule;
    sch.seed = agent_seed(schedule.seed, seed);
    hybrid::HDsacAgent agent(env.observation_size(), env.discrete_options(), env.continuous_size(), sch);
    hybrid::train_h_dsac(env, agent, sch, [&](const hybrid::EpisodeLog& e) {
        if (!train_rows) return;
        MetricRow r = make_row(env.env(), experiment, policy, SweepAxis::None, 0.0, seed, "train", e.episode);
        r.episode_return = e.episode_return;
        train_rows->push_back(std::move(r));
        if (sch.eval_every > 0 && (e.episode + 1) % sch.eval_every == 0) {
            MetricRow p = evaluate_episode(scenario, policy, &agent, seed, experiment, SweepAxis::None, 0.0).back();
            p.phase = "probe";
            p.episode = e.episode;
            train_rows->push_back(std::move(p));
        }
    });
    return agent;
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
    validate(spec);
    const auto values = spec.sweep_values.empty() ? default_sweep_values(spec.sweep, spec.scenario) : spec.sweep_values;
    std::filesystem::create_directories(spec.output_dir / "agents");
    ExperimentResult res;
    res.csv = spec.output_dir / (spec.name + "_" + to_string(spec.policy) + ".csv");

    auto agent_for = [&](const ScenarioConfig& sc, std::uint64_t seed, const std::string& tag) {
        const auto path = spec.output_dir / "agents" /
                          (spec.name + "_" + to_string(spec.policy) + tag + "_seed" + std::to_string(seed) + ".bin");
        if (spec.reuse_agents && std::filesystem::exists(path)) {
            auto a = hybrid::HDsacAgent::load(path);
            SaginEnv probe(sc, spec.policy);
            if (a.observation_size() == probe.observation_size() && a.options() == probe.discrete_options()) {
                return a;
            }
        }
        auto a = train_agent(sc, spec.policy, spec.schedule, seed, spec.pin_training_scenario, spec.name, &res.rows);
        a.save(path);
        return a;
    };

    for (std::uint64_t seed : spec.seeds) {
        std::optional<hybrid::HDsacAgent> shared;
        if (spec.policy != Policy::Random && !sweep_reshapes(spec.sweep)) {
            shared = agent_for(spec.scenario, seed, "");
        }
        for (double v : values) {
            const ScenarioConfig sc = apply_sweep(spec.scenario, spec.sweep, v);
            std::optional<hybrid::HDsacAgent> own;
            if (spec.policy != Policy::Random && sweep_reshapes(spec.sweep)) {
                own = agent_for(sc, seed, "_" + to_string(spec.sweep) + format_double(v));
            }
            const hybrid::HDsacAgent* agent = own ? &*own : (shared ? &*shared : nullptr);
            auto rows = evaluate_episode(sc, spec.policy, agent, seed, spec.name, spec.sweep, v);
            res.rows.insert(res.rows.end(), rows.begin(), rows.end());
        }
    }

    std::ofstream out(res.csv);
    if (!out) throw std::runtime_error("cannot write " + res.csv.string());
    write_csv_header(out);
    for (const auto& r : res.rows) write_csv_row(out, r);
    return res;
}

ExperimentResult run_baseline(const std::string& name, ExperimentSpec spec) {
    const Policy p = parse_policy(name);
    if (p == Policy::HDsac) throw std::invalid_argument("baseline: 'hdsac' is the method, not a baseline");
    spec.policy = p;
    return run_experiment(spec);
}

}  // namespace sagin::harness
