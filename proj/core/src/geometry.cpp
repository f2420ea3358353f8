#include "sagin/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sagin::geometry {

double coverage_arc(double earth_radius, double altitude, double elevation_min) {
    if (!(earth_radius > 0.0) || !(altitude > 0.0)) {
        throw std::invalid_argument("coverage_arc: radii must be positive");
    }
    if (!(elevation_min >= 0.0) || !(elevation_min < std::numbers::pi / 2.0)) {
        throw std::invalid_argument("coverage_arc: elevation must lie in [0, pi/2)");
    }
    const double orbit_radius = earth_radius + altitude;
    const double arg = earth_radius / orbit_radius * std::cos(elevation_min);
    if (arg < -1.0 || arg > 1.0) {
        throw std::domain_error("coverage_arc: arccos argument outside [-1, 1]");
    }
    const double half_angle = std::acos(arg) - elevation_min;
    return std::max(0.0, 2.0 * orbit_radius * half_angle);
}

double coverage_time(double arc, double speed) {
    if (!(speed > 0.0)) {
        throw std::invalid_argument("coverage_time: speed must be positive");
    }
    return arc / speed;
}

NodeState move_uav(const NodeState& uav, const Vec3& commanded_velocity, double dt,
                   const UavLimits& limits) {
    if (!(dt > 0.0)) {
        throw std::invalid_argument("move_uav: dt must be positive");
    }
    NodeState next = uav;
    Vec3 v = commanded_velocity;
    const double speed = v.norm();
    if (speed > limits.v_max) {
        v *= limits.v_max / speed;
    }
    next.velocity = v;
    next.position = uav.position + v * dt;
    next.position.z() = std::clamp(next.position.z(), limits.z_min, limits.z_max);
    return next;
}

Vec3 cartesian(const NodeState& node, double earth_radius) {
    if (node.kind != NodeKind::Leo) {
        return node.position;
    }
    const double orbit_radius = earth_radius + node.position.z();
    const double angle = node.position.x() / orbit_radius;
    return {orbit_radius * std::sin(angle), node.position.y(),
            orbit_radius * std::cos(angle) - earth_radius};
}

double distance(const NodeState& a, const NodeState& b, double earth_radius) {
    return (cartesian(a, earth_radius) - cartesian(b, earth_radius)).norm();
}

void advance_orbits(std::span<NodeState> satellites, std::span<CoverageWindow> windows,
                    double dt, double speed) {
    for (auto& sat : satellites) {
        sat.position.x() += speed * dt;
    }
    for (auto& w : windows) {
        w.remaining_time = std::max(0.0, w.remaining_time - dt);
    }
}

Constellation make_constellation(const ConstellationParams& params,
                                 std::span<const NodeState> uavs, Rng& rng) {
    if (params.satellite_count < 1) {
        throw std::invalid_argument("make_constellation: need at least one satellite");
    }
    if (params.min_spacing > params.max_spacing || params.min_spacing < 0.0) {
        throw std::invalid_argument("make_constellation: bad spacing range");
    }
    const double arc = coverage_arc(params.earth_radius, params.altitude, params.elevation_min);
    const double full_window = coverage_time(arc, params.speed);
    const double orbit_scale = (params.earth_radius + params.altitude) / params.earth_radius;

    Constellation c;
    double offset = -arc / 2.0;
    for (int n = 0; n < params.satellite_count; ++n) {
        if (n > 0) {
            const double gap = uniform(rng, params.min_spacing, params.max_spacing);
            c.spacings.push_back(gap);
            offset += gap;
        }
        NodeState sat;
        sat.kind = NodeKind::Leo;
        sat.position = {offset, 0.0, params.altitude};
        sat.velocity = {params.speed, 0.0, 0.0};
        sat.tx_power = params.tx_power;
        sat.antenna_gain = params.antenna_gain;
        c.satellites.push_back(sat);
    }
    for (int n = 0; n < params.satellite_count; ++n) {
        for (int m = 0; m < static_cast<int>(uavs.size()); ++m) {
            // Window closes when the satellite passes arc/2 beyond the UAV's
            // projection onto the orbit; UAV altitude is ignored here.
            const double uav_arc = uavs[m].position.x() * orbit_scale;
            const double left = (uav_arc + arc / 2.0 - c.satellites[n].position.x()) / params.speed;
            c.windows.push_back({n, m, std::clamp(left, 0.0, full_window)});
        }
    }
    return c;
}

}  // namespace sagin::geometry
