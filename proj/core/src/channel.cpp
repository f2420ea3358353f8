#include "sagin/channel.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace sagin::channel {

namespace {

void require_link(double bandwidth, const Emitter& e, double noise) {
    if (!(bandwidth > 0.0)) {
        throw std::invalid_argument("link bandwidth must be positive");
    }
    if (e.tx_power < 0.0 || e.coeff_mag_sq < 0.0 || noise < 0.0) {
        throw std::invalid_argument("link power, gain and noise must be non-negative");
    }
}

double interference_sum(std::span<const Emitter> emitters) {
    double total = 0.0;
    for (const auto& e : emitters) {
        if (e.tx_power < 0.0 || e.coeff_mag_sq < 0.0) {
            throw std::invalid_argument("interferer power and gain must be non-negative");
        }
        total += e.tx_power * e.coeff_mag_sq;
    }
    return total;
}

}  // namespace

double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

double linear_to_db(double linear) { return 10.0 * std::log10(linear); }

double thermal_noise(double bandwidth, double kelvin) { return kBoltzmann * kelvin * bandwidth; }

LinkBudget shannon_link(double bandwidth, const Emitter& signal, double interference,
                        double noise) {
    require_link(bandwidth, signal, noise);
    LinkBudget b;
    b.coeff_mag_sq = signal.coeff_mag_sq;
    b.bandwidth = bandwidth;
    b.tx_power = signal.tx_power;
    b.interference = interference;
    b.noise = noise;
    const double received = signal.tx_power * signal.coeff_mag_sq;
    const double floor = interference + noise;
    if (received == 0.0 || std::isinf(floor)) {
        b.rate = 0.0;
    } else if (floor == 0.0) {
        b.rate = std::numeric_limits<double>::infinity();
    } else {
        b.rate = bandwidth * std::log1p(received / floor) / std::numbers::ln2;
    }
    return b;
}

FadingDraw draw_fading(double rician_factor, double distance, double wavelength, Rng& rng) {
    FadingDraw d;
    d.rician_factor = rician_factor;
    const double phase = -2.0 * std::numbers::pi * distance / wavelength;
    d.los_coeff = std::polar(1.0, phase);
    d.nlos_coeff = complex_normal(rng, 1.0);
    return d;
}

Complex ground_air_coeff(double distance, const FadingDraw& draw, double tau_los,
                         double tau_nlos) {
    if (!(distance > 0.0)) {
        throw std::invalid_argument("ground_air_coeff: distance must be positive");
    }
    const double w = draw.rician_factor;
    double los_weight = 1.0;
    double nlos_weight = 0.0;
    if (!std::isinf(w)) {
        los_weight = std::sqrt(w / (w + 1.0));
        nlos_weight = std::sqrt(1.0 / (w + 1.0));
    }
    const Complex los = draw.los_coeff * std::pow(distance, -tau_los / 2.0);
    const Complex nlos = draw.nlos_coeff * std::pow(distance, -tau_nlos / 2.0);
    return los_weight * los + nlos_weight * nlos;
}

LinkBudget uplink_rate_user_uav(const LinkRequest& target, std::span<const Emitter> co_channel,
                                double noise) {
    return shannon_link(target.bandwidth, target.signal, interference_sum(co_channel), noise);
}

LinkBudget downlink_rate_uav_user(const LinkRequest& link, double noise) {
    return shannon_link(link.bandwidth, link.signal, 0.0, noise);
}

Complex sat_uav_coeff(double distance, double gain, double wavelength, double phase) {
    if (!(distance > 0.0)) {
        throw std::invalid_argument("sat_uav_coeff: distance must be positive");
    }
    if (!(wavelength > 0.0)) {
        throw std::invalid_argument("sat_uav_coeff: wavelength must be positive");
    }
    const double magnitude = std::sqrt(gain) * wavelength / (4.0 * std::numbers::pi * distance);
    return std::polar(magnitude, phase);
}

double csi_correlation(double doppler_hz, double delay_s) {
    return std::cyl_bessel_j(0.0, 2.0 * std::numbers::pi * doppler_hz * delay_s);
}

Complex outdated_csi(Complex h_hat, double doppler_hz, double delay_s, Rng& rng) {
    const double delta = csi_correlation(doppler_hz, delay_s);
    const Complex g = complex_normal(rng, std::norm(h_hat));
    return delta * h_hat + std::sqrt(std::max(0.0, 1.0 - delta * delta)) * g;
}

LinkBudget uplink_rate_uav_sat(const LinkRequest& target, std::span<const Emitter> interferers,
                               double noise) {
    return shannon_link(target.bandwidth, target.signal, interference_sum(interferers), noise);
}

LinkBudget downlink_rate_sat_uav(const LinkRequest& link, double noise) {
    return shannon_link(link.bandwidth, link.signal, 0.0, noise);
}

double isl_rate(double distance, double bandwidth, double tx_power, double peak_gain,
                double carrier_hz, double kelvin) {
    if (!(distance > 0.0) || !(bandwidth > 0.0) || !(tx_power > 0.0) || !(peak_gain > 0.0) ||
        !(carrier_hz > 0.0) || !(kelvin > 0.0)) {
        throw std::invalid_argument("isl_rate: all arguments must be positive");
    }
    if (std::isinf(distance)) {
        return 0.0;
    }
    const double spreading = 4.0 * std::numbers::pi * distance * carrier_hz / kSpeedOfLight;
    const double snr = tx_power * peak_gain * peak_gain /
                       (thermal_noise(bandwidth, kelvin) * spreading * spreading);
    return bandwidth * std::log1p(snr) / std::numbers::ln2;
}

double max_doppler(double speed, double carrier_hz) { return speed * carrier_hz / kSpeedOfLight; }

}  // namespace sagin::channel
