#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "sagin/random.hpp"

namespace sagin::geometry {

using Vec3 = Eigen::Vector3d;

inline constexpr double kEarthRadius = 6'371'000.0;  // m, mean radius

enum class NodeKind { GroundUser, Uav, Leo };

// Position frame depends on kind. Users and UAVs live in an Earth-tangent
// local frame (x east along the ground track, z up, origin on the surface).
// LEOs store (along-orbit arc offset, 0, altitude); the arc is measured at
// orbit radius and is zero when the satellite is at zenith over the origin.
struct NodeState {
    NodeKind kind = NodeKind::GroundUser;
    Vec3 position = Vec3::Zero();
    Vec3 velocity = Vec3::Zero();
    double tx_power = 0.0;      // W
    double antenna_gain = 1.0;  // linear
};

struct CoverageWindow {
    int satellite_id = 0;
    int uav_id = 0;
    double remaining_time = 0.0;  // s
};

struct UavLimits {
    double v_max = 5.0;   // m/s
    double z_min = 40.0;  // m
    double z_max = 60.0;  // m
};

/// Length of the orbital arc a satellite at altitude `altitude` travels while
/// it stays above `elevation_min` for a ground point.
double coverage_arc(double earth_radius, double altitude, double elevation_min);

double coverage_time(double arc, double speed);

NodeState move_uav(const NodeState& uav, const Vec3& commanded_velocity, double dt,
                   const UavLimits& limits);

/// Cartesian position in the local frame. LEO arc offsets are rotated about
/// the Earth centre, which sits at (0, 0, -earth_radius).
Vec3 cartesian(const NodeState& node, double earth_radius = kEarthRadius);

double distance(const NodeState& a, const NodeState& b, double earth_radius = kEarthRadius);

/// Moves every LEO forward by speed*dt along its orbit and burns dt off every
/// window, flooring at zero.
void advance_orbits(std::span<NodeState> satellites, std::span<CoverageWindow> windows,
                    double dt, double speed);

struct Constellation {
    std::vector<NodeState> satellites;
    std::vector<CoverageWindow> windows;  // satellite-major: index n * uav_count + m
    std::vector<double> spacings;         // m, between consecutive satellites
};

struct ConstellationParams {
    int satellite_count = 5;
    double earth_radius = kEarthRadius;
    double altitude = 800'000.0;
    double speed = 7'800.0;
    double elevation_min = 0.6981317007977318;  // 40 deg
    double min_spacing = 100'000.0;
    double max_spacing = 500'000.0;
    double tx_power = 2.0;
    double antenna_gain = 1.0e4;
};

/// Satellites in a single train on one orbit. The first one is entering
/// coverage of the local origin; each following one is ahead of its
/// predecessor by a uniform random spacing, so it has spacing/speed less
/// window left. Windows already used up start at zero.
Constellation make_constellation(const ConstellationParams& params,
                                 std::span<const NodeState> uavs, Rng& rng);

}  // namespace sagin::geometry
