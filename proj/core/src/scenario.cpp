#include "sagin/scenario.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace sagin {

using nlohmann::json;

namespace {

template <typename Enum>
struct EnumNames;

template <>
struct EnumNames<InterferenceMode> {
    static constexpr std::pair<InterferenceMode, const char*> table[] = {
        {InterferenceMode::AllTransmitters, "all_transmitters"},
        {InterferenceMode::SameReceiver, "same_receiver"}};
};
template <>
struct EnumNames<WeightPrior> {
    static constexpr std::pair<WeightPrior, const char*> table[] = {
        {WeightPrior::None, "none"}, {WeightPrior::LogDataSize, "log_data_size"}};
};
template <>
struct EnumNames<TaskScheduling> {
    static constexpr std::pair<TaskScheduling, const char*> table[] = {
        {TaskScheduling::RoundRobin, "round_robin"}, {TaskScheduling::Agent, "agent"}};
};
template <>
struct EnumNames<hfl::Normalization> {
    static constexpr std::pair<hfl::Normalization, const char*> table[] = {
        {hfl::Normalization::WeightedMean, "weighted_mean"},
        {hfl::Normalization::Literal, "literal"}};
};

[[noreturn]] void field_error(const std::string& key, const std::string& what) {
    throw std::invalid_argument("scenario." + key + ": " + what);
}

void read(const json& j, const std::string& key, int& out) {
    if (!j.is_number_integer()) {
        field_error(key, "expected an integer");
    }
    out = j.get<int>();
}

void read(const json& j, const std::string& key, double& out) {
    if (j.is_number()) {
        out = j.get<double>();
        return;
    }
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf" || s == "infinity") {
            out = std::numeric_limits<double>::infinity();
            return;
        }
    }
    field_error(key, "expected a number");
}

void read(const json& j, const std::string& key, bool& out) {
    if (!j.is_boolean()) {
        field_error(key, "expected true or false");
    }
    out = j.get<bool>();
}

template <typename Enum>
    requires std::is_enum_v<Enum>
void read(const json& j, const std::string& key, Enum& out) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        for (const auto& [value, name] : EnumNames<Enum>::table) {
            if (s == name) {
                out = value;
                return;
            }
        }
    }
    std::string options;
    for (const auto& [value, name] : EnumNames<Enum>::table) {
        options += options.empty() ? name : std::string(", ") + name;
    }
    field_error(key, "expected one of " + options);
}

json write(int v) { return v; }
json write(bool v) { return v; }
json write(double v) {
    if (std::isinf(v)) {
        return "inf";
    }
    return v;
}
template <typename Enum>
    requires std::is_enum_v<Enum>
json write(Enum v) {
    for (const auto& [value, name] : EnumNames<Enum>::table) {
        if (value == v) {
            return name;
        }
    }
    return nullptr;
}

template <typename Config, typename Visitor>
void visit_fields(Config& c, Visitor&& f) {
    f("users", c.users);
    f("uavs", c.uavs);
    f("satellites", c.satellites);
    f("tasks", c.tasks);
    f("horizon", c.horizon);
    f("slot_seconds", c.slot_seconds);
    f("arena_size", c.arena_size);
    f("uav_initial_altitude", c.uav_initial_altitude);
    f("uav_max_speed", c.uav_max_speed);
    f("uav_min_altitude", c.uav_min_altitude);
    f("uav_max_altitude", c.uav_max_altitude);
    f("leo_altitude", c.leo_altitude);
    f("leo_speed", c.leo_speed);
    f("min_elevation_deg", c.min_elevation_deg);
    f("sat_min_spacing", c.sat_min_spacing);
    f("sat_max_spacing", c.sat_max_spacing);
    f("rician_factor_db", c.rician_factor_db);
    f("path_loss_los", c.path_loss_los);
    f("path_loss_nlos", c.path_loss_nlos);
    f("uav_carrier_hz", c.uav_carrier_hz);
    f("leo_carrier_hz", c.leo_carrier_hz);
    f("isl_carrier_hz", c.isl_carrier_hz);
    f("uav_antenna_gain_db", c.uav_antenna_gain_db);
    f("leo_antenna_gain_db", c.leo_antenna_gain_db);
    f("isl_peak_gain_db", c.isl_peak_gain_db);
    f("ground_bandwidth_hz", c.ground_bandwidth_hz);
    f("isl_bandwidth_hz", c.isl_bandwidth_hz);
    f("noise_temperature_k", c.noise_temperature_k);
    f("user_power_w", c.user_power_w);
    f("uav_power_w", c.uav_power_w);
    f("leo_power_w", c.leo_power_w);
    f("doppler_hz", c.doppler_hz);
    f("csi_delay_s", c.csi_delay_s);
    f("interference", c.interference);
    f("data_concentration", c.data.concentration);
    f("data_input_dim", c.data.input_dim);
    f("data_classes", c.data.class_count);
    f("data_hidden_units", c.data.hidden_units);
    f("data_min_samples", c.data.min_samples);
    f("data_max_samples", c.data.max_samples);
    f("data_zero_probability", c.data.zero_probability);
    f("data_test_per_class", c.data.test_per_class);
    f("data_min_separation", c.data.min_separation);
    f("data_max_separation", c.data.max_separation);
    f("data_min_scale_spread", c.data.min_scale_spread);
    f("data_max_scale_spread", c.data.max_scale_spread);
    f("bits_per_parameter", c.data.bits_per_parameter);
    f("transfer_params", c.data.transfer_params);
    f("local_iterations", c.local_iterations);
    f("local_lr", c.local_lr);
    f("local_l2", c.local_l2);
    f("normalization", c.normalization);
    f("weight_prior", c.weight_prior);
    f("weight_logit_scale", c.weight_logit_scale);
    f("task_scheduling", c.task_scheduling);
    f("fedavg_weights", c.fedavg_weights);
    f("reward_decay", c.reward_decay);
    f("eps_c1", c.eps_c1);
    f("eps_c2", c.eps_c2);
    f("eps_f", c.eps_f);
    f("gamma_floor", c.gamma_floor);
    f("fixed_reward", c.fixed_reward);
    f("discount", c.discount);
    f("rho_min", c.rho_min);
    f("target_clip", c.target_clip);
    f("kl_total", c.kl_total);
    f("kl_continuous", c.kl_continuous);
    f("kl_discrete", c.kl_discrete);
}

void apply(ScenarioConfig& cfg, const std::string& key, const json& value) {
    bool found = false;
    visit_fields(cfg, [&](const char* name, auto& field) {
        if (!found && key == name) {
            read(value, key, field);
            found = true;
        }
    });
    if (!found) {
        field_error(key, "unknown field");
    }
}

void require(bool ok, const char* key, const char* what) {
    if (!ok) {
        field_error(key, what);
    }
}

}  // namespace

void validate(const ScenarioConfig& c) {
    require(c.users >= 1, "users", "must be at least 1");
    require(c.uavs >= 1, "uavs", "must be at least 1");
    require(c.satellites >= 1, "satellites", "must be at least 1");
    require(c.tasks >= 1, "tasks", "must be at least 1");
    require(c.horizon >= 1, "horizon", "must be at least 1");
    require(c.slot_seconds > 0.0, "slot_seconds", "must be positive");
    require(c.arena_size > 0.0, "arena_size", "must be positive");
    require(c.uav_max_speed >= 0.0, "uav_max_speed", "must be non-negative");
    require(c.uav_min_altitude > 0.0, "uav_min_altitude", "must be positive");
    require(c.uav_max_altitude >= c.uav_min_altitude, "uav_max_altitude",
            "must be at least uav_min_altitude");
    require(c.uav_initial_altitude >= c.uav_min_altitude &&
                c.uav_initial_altitude <= c.uav_max_altitude,
            "uav_initial_altitude", "must lie within the altitude limits");
    require(c.leo_altitude > 0.0, "leo_altitude", "must be positive");
    require(c.leo_speed > 0.0, "leo_speed", "must be positive");
    require(c.min_elevation_deg >= 0.0 && c.min_elevation_deg < 90.0, "min_elevation_deg",
            "must lie in [0, 90)");
    require(c.sat_min_spacing >= 0.0, "sat_min_spacing", "must be non-negative");
    require(c.sat_max_spacing >= c.sat_min_spacing, "sat_max_spacing",
            "must be at least sat_min_spacing");
    require(c.path_loss_los > 0.0, "path_loss_los", "must be positive");
    require(c.path_loss_nlos > 0.0, "path_loss_nlos", "must be positive");
    require(c.uav_carrier_hz > 0.0, "uav_carrier_hz", "must be positive");
    require(c.leo_carrier_hz > 0.0, "leo_carrier_hz", "must be positive");
    require(c.isl_carrier_hz > 0.0, "isl_carrier_hz", "must be positive");
    require(c.ground_bandwidth_hz > 0.0, "ground_bandwidth_hz", "must be positive");
    require(c.isl_bandwidth_hz > 0.0, "isl_bandwidth_hz", "must be positive");
    require(c.noise_temperature_k > 0.0, "noise_temperature_k", "must be positive");
    require(c.user_power_w > 0.0, "user_power_w", "must be positive");
    require(c.uav_power_w > 0.0, "uav_power_w", "must be positive");
    require(c.leo_power_w > 0.0, "leo_power_w", "must be positive");
    require(c.data.concentration > 0.0, "data_concentration", "must be positive");
    require(c.data.input_dim >= 1, "data_input_dim", "must be at least 1");
    require(c.data.class_count >= 2, "data_classes", "must be at least 2");
    require(c.data.hidden_units >= 0, "data_hidden_units", "must be non-negative");
    require(c.data.min_samples >= 1, "data_min_samples", "must be at least 1");
    require(c.data.max_samples >= c.data.min_samples, "data_max_samples",
            "must be at least data_min_samples");
    require(c.data.zero_probability >= 0.0 && c.data.zero_probability < 1.0,
            "data_zero_probability", "must lie in [0, 1)");
    require(c.data.test_per_class >= 1, "data_test_per_class", "must be at least 1");
    require(c.data.bits_per_parameter > 0.0, "bits_per_parameter", "must be positive");
    require(c.data.transfer_params >= 0.0, "transfer_params", "must be non-negative");
    require(c.local_iterations >= 1, "local_iterations", "must be at least 1");
    require(c.local_lr >= 0.0, "local_lr", "must be non-negative");
    require(c.local_l2 >= 0.0, "local_l2", "must be non-negative");
    require(c.weight_logit_scale > 0.0, "weight_logit_scale", "must be positive");
    require(c.reward_decay > 0.0 && c.reward_decay < 1.0, "reward_decay", "must lie in (0, 1)");
    require(c.eps_c1 > 0.0, "eps_c1", "must be positive");
    require(c.eps_c2 > 0.0, "eps_c2", "must be positive");
    require(c.eps_f > 0.0, "eps_f", "must be positive");
    require(c.gamma_floor > 0.0, "gamma_floor", "must be positive");
    require(c.discount > 0.0 && c.discount < 1.0, "discount", "must lie in (0, 1)");
    require(c.rho_min > 0.0, "rho_min", "must be positive");
    require(c.target_clip > 0.0, "target_clip", "must be positive");
    require(c.kl_total > 0.0, "kl_total", "must be positive");
    require(c.kl_continuous > 0.0, "kl_continuous", "must be positive");
    require(c.kl_discrete > 0.0, "kl_discrete", "must be positive");
}

ScenarioConfig parse_scenario(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(std::string("scenario: ") + e.what());
    }
    if (!doc.is_object()) {
        throw std::invalid_argument("scenario: top level must be an object");
    }
    ScenarioConfig cfg;
    for (const auto& [key, value] : doc.items()) {
        apply(cfg, key, value);
    }
    validate(cfg);
    return cfg;
}

ScenarioConfig load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("scenario: cannot open " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_scenario(buf.str());
}

void set_scenario_field(ScenarioConfig& cfg, const std::string& key, const std::string& value) {
    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = value;
    }
    apply(cfg, key, parsed);
}

std::string scenario_to_json(const ScenarioConfig& cfg) {
    json doc = json::object();
    visit_fields(const_cast<ScenarioConfig&>(cfg),
                 [&](const char* name, auto& field) { doc[name] = write(field); });
    return doc.dump(2);
}

}  // namespace sagin
