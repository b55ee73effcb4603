#pragma once

#include <vector>

#include "distill3d/config.hpp"
#include "distill3d/rng.hpp"
#include "distill3d/types.hpp"

namespace distill3d {

struct CameraIntrinsics {
    int width = 0;
    int height = 0;
    double focal = 0;  // pixels, derived from a vertical field of view

    static CameraIntrinsics from_fov(int width, int height, double fov_deg);
    CameraIntrinsics resized(int new_width, int new_height) const;
    bool operator==(const CameraIntrinsics&) const = default;
};

// Spherical orbit pose around the world origin. Polar 0 is the +z pole,
// polar 90 the equator. Radius is held constant across a run.
struct CameraPose {
    double polar_deg = 90;
    double azimuth_deg = 0;
    double radius = 2.0;
    CameraIntrinsics intrinsics;

    Vec3 position() const;
    // Orthonormal camera basis: forward toward the origin, up derived from +z.
    void basis(Vec3& forward, Vec3& right, Vec3& up) const;
};

struct PoseDelta {
    double d_polar = 0;
    double d_azimuth = 0;  // wrapped to (-180, 180]
    double d_radius = 0;
};

struct RayBundle {
    std::vector<Vec3> origins;
    std::vector<Vec3> directions;  // unit norm
    int width = 0;
    int height = 0;
};

struct CameraConfig {
    double radius = 2.0;
    double fov_deg = 49.1;
    double polar_min = 60;
    double polar_max = 150;
    int width = 64;
    int height = 64;

    static CameraConfig from(const Config& cfg);
    CameraIntrinsics intrinsics() const {
        return CameraIntrinsics::from_fov(width, height, fov_deg);
    }
};

CameraPose front_pose(const CameraConfig& cfg);
CameraPose sample_novel_pose(Rng& rng, const CameraConfig& cfg);
RayBundle generate_rays(const CameraPose& pose);
PoseDelta pose_delta(const CameraPose& p, const CameraPose& p_ref);

}  // namespace distill3d
