#pragma once

#include <complex>
#include <span>

#include "sagin/random.hpp"

namespace sagin::channel {

using Complex = std::complex<double>;

inline constexpr double kBoltzmann = 1.380649e-23;  // J/K
inline constexpr double kSpeedOfLight = 299'792'458.0;

double db_to_linear(double db);
double linear_to_db(double linear);

/// Thermal noise power kTB in watts.
double thermal_noise(double bandwidth, double kelvin);

struct LinkBudget {
    double coeff_mag_sq = 0.0;
    double bandwidth = 0.0;
    double tx_power = 0.0;
    double interference = 0.0;
    double noise = 0.0;
    double rate = 0.0;  // bit/s
};

/// One transmitter as seen at a receiver.
struct Emitter {
    double tx_power = 0.0;
    double coeff_mag_sq = 0.0;
};

struct LinkRequest {
    double bandwidth = 0.0;
    Emitter signal;
};

/// Shannon rate B log2(1 + S / (I + N)); fills every LinkBudget field.
LinkBudget shannon_link(double bandwidth, const Emitter& signal, double interference,
                        double noise);

struct FadingDraw {
    double rician_factor = 0.0;  // linear
    Complex los_coeff{1.0, 0.0};
    Complex nlos_coeff{0.0, 0.0};
};

/// Unit-magnitude LoS term with phase exp(-j 2 pi d / lambda) and a unit
/// variance circularly symmetric NLoS term.
FadingDraw draw_fading(double rician_factor, double distance, double wavelength, Rng& rng);

/// Rician ground-air coefficient with separate LoS/NLoS path-loss exponents.
/// An infinite Rician factor gives the pure LoS channel.
Complex ground_air_coeff(double distance, const FadingDraw& draw, double tau_los,
                         double tau_nlos);

LinkBudget uplink_rate_user_uav(const LinkRequest& target, std::span<const Emitter> co_channel,
                                double noise);

LinkBudget downlink_rate_uav_user(const LinkRequest& link, double noise);

/// Free-space satellite/UAV coefficient sqrt(xi) lambda / (4 pi d) e^{j phase}.
Complex sat_uav_coeff(double distance, double gain, double wavelength, double phase);

/// Correlation J0(2 pi D T) between a channel estimate and the true channel.
double csi_correlation(double doppler_hz, double delay_s);

/// delta * h_hat + sqrt(1 - delta^2) g, with g ~ CN(0, |h_hat|^2).
Complex outdated_csi(Complex h_hat, double doppler_hz, double delay_s, Rng& rng);

LinkBudget uplink_rate_uav_sat(const LinkRequest& target, std::span<const Emitter> interferers,
                               double noise);

LinkBudget downlink_rate_sat_uav(const LinkRequest& link, double noise);

/// Inter-satellite rate with free-space loss at the ISL carrier and thermal
/// noise at `kelvin` over the ISL bandwidth. `peak_gain` enters squared.
double isl_rate(double distance, double bandwidth, double tx_power, double peak_gain,
                double carrier_hz, double kelvin);

/// Maximum Doppler shift v f / c.
double max_doppler(double speed, double carrier_hz);

}  // namespace sagin::channel
