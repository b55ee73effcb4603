#include "distill3d/camera.hpp"

#include <cmath>
#include <stdexcept>

namespace distill3d {

CameraIntrinsics CameraIntrinsics::from_fov(int width, int height, double fov_deg) {
    if (width < 1 || height < 1) throw std::invalid_argument("intrinsics: size must be >= 1");
    if (fov_deg <= 0 || fov_deg >= 180) throw std::invalid_argument("intrinsics: bad fov");
    CameraIntrinsics in;
    in.width = width;
    in.height = height;
    in.focal = (height / 2.0) / std::tan(deg2rad(fov_deg) / 2.0);
    return in;
}

CameraIntrinsics CameraIntrinsics::resized(int new_width, int new_height) const {
    CameraIntrinsics in;
    in.width = new_width;
    in.height = new_height;
    in.focal = focal * double(new_height) / double(height);
    return in;
}

Vec3 CameraPose::position() const {
    double th = deg2rad(polar_deg), ph = deg2rad(azimuth_deg);
    return {radius * std::sin(th) * std::cos(ph),
            radius * std::sin(th) * std::sin(ph),
            radius * std::cos(th)};
}

void CameraPose::basis(Vec3& forward, Vec3& right, Vec3& up) const {
    Vec3 pos = position();
    forward = normalized(-pos);
    Vec3 world_up{0, 0, 1};
    right = cross(forward, world_up);
    double n = norm(right);
    if (n < 1e-9) {
        // Looking straight along z; pick an arbitrary right vector.
        right = {1, 0, 0};
    } else {
        right = right / n;
    }
    up = cross(right, forward);
}

CameraConfig CameraConfig::from(const Config& cfg) {
    CameraConfig c;
    c.radius = cfg.get_double("camera.radius");
    c.fov_deg = cfg.get_double("camera.fov_deg");
    c.polar_min = cfg.get_double("camera.polar_min");
    c.polar_max = cfg.get_double("camera.polar_max");
    c.width = cfg.get_int("camera.width");
    c.height = cfg.get_int("camera.height");
    if (c.radius <= 0) throw std::invalid_argument("camera.radius must be > 0");
    return c;
}

CameraPose front_pose(const CameraConfig& cfg) {
    CameraPose p;
    p.polar_deg = 90;
    p.azimuth_deg = 0;
    p.radius = cfg.radius;
    p.intrinsics = cfg.intrinsics();
    return p;
}

CameraPose sample_novel_pose(Rng& rng, const CameraConfig& cfg) {
    CameraPose p;
    p.polar_deg = rng.uniform(cfg.polar_min, cfg.polar_max);
    p.azimuth_deg = rng.uniform(0.0, 360.0);
    p.radius = cfg.radius;
    p.intrinsics = cfg.intrinsics();
    return p;
}

RayBundle generate_rays(const CameraPose& pose) {
    const auto& in = pose.intrinsics;
    RayBundle rays;
    rays.width = in.width;
    rays.height = in.height;
    rays.origins.resize(size_t(in.width) * in.height);
    rays.directions.resize(size_t(in.width) * in.height);

    Vec3 fwd, right, up;
    pose.basis(fwd, right, up);
    Vec3 origin = pose.position();

    for (int y = 0; y < in.height; ++y) {
        for (int x = 0; x < in.width; ++x) {
            double sx = (x + 0.5 - in.width / 2.0) / in.focal;
            double sy = -(y + 0.5 - in.height / 2.0) / in.focal;
            Vec3 dir = normalized(fwd + right * sx + up * sy);
            size_t idx = size_t(y) * in.width + x;
            rays.origins[idx] = origin;
            rays.directions[idx] = dir;
        }
    }
    return rays;
}

PoseDelta pose_delta(const CameraPose& p, const CameraPose& p_ref) {
    PoseDelta d;
    d.d_polar = p.polar_deg - p_ref.polar_deg;
    double da = std::fmod(p.azimuth_deg - p_ref.azimuth_deg, 360.0);
    if (da <= -180.0) da += 360.0;
    if (da > 180.0) da -= 360.0;
    d.d_azimuth = da;
    d.d_radius = p.radius - p_ref.radius;
    return d;
}

}  // namespace distill3d
