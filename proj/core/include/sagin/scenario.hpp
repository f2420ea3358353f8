#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "sagin/hfl.hpp"

namespace sagin {

enum class InterferenceMode { AllTransmitters, SameReceiver };
enum class WeightPrior { None, LogDataSize };
enum class TaskScheduling { RoundRobin, Agent };

/// Every knob of one simulated deployment. Angles are in degrees and gains in
/// dB here; the environment converts them once at reset.
struct ScenarioConfig {
    // Topology
    int users = 10;
    int uavs = 3;
    int satellites = 5;
    int tasks = 3;
    int horizon = 100;        // slots
    double slot_seconds = 1.0;
    double arena_size = 250.0;  // m, square side

    // UAVs
    double uav_initial_altitude = 50.0;
    double uav_max_speed = 5.0;
    double uav_min_altitude = 40.0;
    double uav_max_altitude = 60.0;

    // Constellation
    double leo_altitude = 800'000.0;
    double leo_speed = 7'800.0;
    double min_elevation_deg = 40.0;
    double sat_min_spacing = 100'000.0;
    double sat_max_spacing = 500'000.0;

    // Radio
    double rician_factor_db = 10.0;
    double path_loss_los = 2.0;
    double path_loss_nlos = 2.5;
    double uav_carrier_hz = 1e9;   // ground-air and UAV uplink
    double leo_carrier_hz = 30e9;  // satellite downlink
    double isl_carrier_hz = 23e9;
    double uav_antenna_gain_db = 25.0;
    double leo_antenna_gain_db = 40.0;
    double isl_peak_gain_db = 40.0;
    double ground_bandwidth_hz = 10e6;
    double isl_bandwidth_hz = 1e9;
    double noise_temperature_k = 354.81;
    double user_power_w = 0.1;
    double uav_power_w = 1.0;
    double leo_power_w = 2.0;
    double doppler_hz = -1.0;   // negative: v_L f / c at the satellite carrier
    double csi_delay_s = -1.0;  // negative: propagation delay of the link
    InterferenceMode interference = InterferenceMode::AllTransmitters;

    // Federated tasks
    hfl::SyntheticConfig data;
    int local_iterations = 5;
    double local_lr = 0.5;
    double local_l2 = 1e-3;
    hfl::Normalization normalization = hfl::Normalization::WeightedMean;
    WeightPrior weight_prior = WeightPrior::None;
    double weight_logit_scale = 3.0;
    TaskScheduling task_scheduling = TaskScheduling::RoundRobin;
    bool fedavg_weights = false;  // ignore learned weights, use data-size weights

    // Reward
    double reward_decay = 0.995;
    double eps_c1 = 200.0;
    double eps_c2 = 100.0;
    double eps_f = 0.01;
    double gamma_floor = 0.01;
    bool fixed_reward = false;  // alpha stays 1

    // Agent constants carried with the scenario
    double discount = 0.99;
    double rho_min = 1.0;
    double target_clip = 10.0;
    double kl_total = 0.1;
    double kl_continuous = 0.001;
    double kl_discrete = 0.01;
};

/// Throws std::invalid_argument naming the offending field.
void validate(const ScenarioConfig& cfg);

/// Flat JSON object; every key is optional and unknown keys are errors.
ScenarioConfig load_scenario(const std::filesystem::path& path);
ScenarioConfig parse_scenario(const std::string& json_text);
/// Applies `key=value` to cfg; value is parsed as JSON, bare strings allowed.
void set_scenario_field(ScenarioConfig& cfg, const std::string& key, const std::string& value);
std::string scenario_to_json(const ScenarioConfig& cfg);

}  // namespace sagin
