#pragma once

// Reference evaluations written straight from the model equations, in
// higher precision than the library and without calling into it.

#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace oracle {

using Big = boost::multiprecision::cpp_bin_float_50;
using LD = long double;

inline constexpr LD kPi = 3.141592653589793238462643383279502884L;
inline constexpr LD kBoltzmann = 1.380649e-23L;
inline constexpr LD kLight = 299792458.0L;

inline Big coverage_arc(double earth_radius, double altitude, double elevation_rad) {
    const Big re = earth_radius, rs = altitude, el = elevation_rad;
    return 2 * (re + rs) * (acos(re / (re + rs) * cos(el)) - el);
}

inline Big coverage_time(double earth_radius, double altitude, double elevation_rad, double speed) {
    return coverage_arc(earth_radius, altitude, elevation_rad) / Big(speed);
}

inline LD rate(LD bandwidth, LD power, LD gain, LD interference, LD noise) {
    return bandwidth * std::log1p(power * gain / (interference + noise)) / std::numbers::ln2_v<long double>;
}

/// |h|^2 of sqrt(w/(w+1)) g_los d^(-tl/2) + sqrt(1/(w+1)) g_nlos d^(-tn/2).
inline LD ground_air_mag_sq(LD d, LD omega, std::complex<LD> los, std::complex<LD> nlos, LD tl, LD tn) {
    const std::complex<LD> h = std::sqrt(omega / (omega + 1)) * los * std::pow(d, -tl / 2) +
                               std::sqrt(1 / (omega + 1)) * nlos * std::pow(d, -tn / 2);
    return std::norm(h);
}

inline LD ground_air_mean_sq(LD d, LD omega, LD tl, LD tn) {
    return omega / (omega + 1) * std::pow(d, -tl) + 1 / (omega + 1) * std::pow(d, -tn);
}

inline LD sat_uav_mag(LD d, LD gain, LD wavelength) { return std::sqrt(gain) * wavelength / (4 * kPi * d); }

inline LD isl_rate(LD d, LD bandwidth, LD power, LD peak_gain, LD carrier, LD kelvin) {
    const LD fspl = 4 * kPi * d * carrier / kLight;
    return bandwidth * std::log2(1 + power * peak_gain * peak_gain / (kBoltzmann * kelvin * bandwidth * fspl * fspl));
}

/// J0 by its power series sum (-1)^k (x/2)^{2k} / (k!)^2.
inline LD bessel_j0_series(LD x) {
    LD term = 1, sum = 1;
    const LD q = x * x / 4;
    for (int k = 1; k < 200; ++k) {
        term *= -q / (static_cast<LD>(k) * k);
        sum += term;
        if (std::abs(term) < 1e-30L) break;
    }
    return sum;
}

/// Sample-weighted mean of parameter vectors.
inline std::vector<LD> fedavg(const std::vector<std::vector<double>>& models, std::span<const double> sizes) {
    std::vector<LD> out(models.front().size(), 0.0L);
    LD total = 0;
    for (double s : sizes) total += s;
    for (std::size_t i = 0; i < models.size(); ++i) {
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += static_cast<LD>(sizes[i]) * models[i][j];
    }
    for (auto& v : out) v /= total;
    return out;
}

/// Eq. 17 reward from its definition.
inline LD reward(std::span<const double> gamma, int t, LD beta, LD c1, LD c2, LD ef, bool fixed) {
    const LD n = gamma.size();
    LD mean = 0;
    for (double g : gamma) mean += g;
    mean /= n;
    LD alpha = 1;
    if (!fixed) {
        for (int i = 0; i < t; ++i) alpha *= beta;
    }
    LD perf = 0, fair = 0;
    for (double g : gamma) {
        perf += (g / c1) / ef;
        fair += (g / c2) / (ef + std::abs(mean / g - 1));
    }
    return alpha / n * perf + (1 - alpha) / n * fair;
}

inline double relative_error(double got, long double want) {
    const long double scale = std::max(std::abs(want), 1e-300L);
    return static_cast<double>(std::abs(static_cast<long double>(got) - want) / scale);
}

}  // namespace oracle
