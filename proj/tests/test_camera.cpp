#include <doctest.h>

#include <cmath>

#include "distill3d/camera.hpp"

using namespace distill3d;

TEST_CASE("front pose matches the configured orbit") {
    CameraConfig cfg;
    cfg.radius = 2.0;
    CameraPose p = front_pose(cfg);
    CHECK(p.polar_deg == 90.0);
    CHECK(p.azimuth_deg == 0.0);
    CHECK(p.radius == 2.0);
    Vec3 pos = p.position();
    CHECK(pos.x == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(std::abs(pos.y) < 1e-12);
    CHECK(std::abs(pos.z) < 1e-12);

    PoseDelta d = pose_delta(p, front_pose(cfg));
    CHECK(d.d_polar == 0.0);
    CHECK(d.d_azimuth == 0.0);
    CHECK(d.d_radius == 0.0);

    CameraPose q = front_pose(cfg);
    CHECK(p.polar_deg == q.polar_deg);
    CHECK(p.azimuth_deg == q.azimuth_deg);
    CHECK(p.radius == q.radius);
}

TEST_CASE("novel pose sampling stays inside the configured bands") {
    CameraConfig cfg;
    Rng rng(11);
    double polar_sum = 0;
    for (int i = 0; i < 10000; ++i) {
        CameraPose p = sample_novel_pose(rng, cfg);
        CHECK(p.polar_deg >= 60.0);
        CHECK(p.polar_deg <= 150.0);
        CHECK(p.azimuth_deg >= 0.0);
        CHECK(p.azimuth_deg < 360.0);
        CHECK(p.radius == cfg.radius);
        polar_sum += p.polar_deg;
    }
    CHECK(polar_sum / 10000.0 == doctest::Approx(105.0).epsilon(0.03));
}

TEST_CASE("ray generation is a pinhole aimed at the origin") {
    CameraConfig cfg;
    cfg.width = cfg.height = 65;  // odd so one pixel center hits the axis
    Rng rng(3);
    CameraPose pose = sample_novel_pose(rng, cfg);
    pose.intrinsics = cfg.intrinsics();
    RayBundle rays = generate_rays(pose);
    CHECK(rays.origins.size() == 65u * 65u);
    for (const auto& d : rays.directions) CHECK(std::abs(norm(d) - 1.0) < 1e-6);

    Vec3 to_origin = normalized(Vec3{0, 0, 0} - pose.position());
    const Vec3& center = rays.directions[size_t(32) * 65 + 32];
    CHECK(norm(center - to_origin) < 1e-4);
}

TEST_CASE("pose deltas wrap azimuth to the shortest arc") {
    CameraConfig cfg;
    CameraPose a = front_pose(cfg), b = front_pose(cfg);
    a.azimuth_deg = 350;
    b.azimuth_deg = 10;
    CHECK(pose_delta(a, b).d_azimuth == doctest::Approx(-20.0));

    a.azimuth_deg = 0;
    b.azimuth_deg = 0;
    a.polar_deg = 120;
    b.polar_deg = 90;
    CHECK(pose_delta(a, b).d_polar == doctest::Approx(30.0));

    Rng rng(5);
    for (int i = 0; i < 1000; ++i) {
        a.azimuth_deg = rng.uniform(0, 360);
        b.azimuth_deg = rng.uniform(0, 360);
        double d = pose_delta(a, b).d_azimuth;
        CHECK(d > -180.0);
        CHECK(d <= 180.0);
    }
}

TEST_CASE("intrinsics derive focal from the vertical field of view") {
    CameraIntrinsics in = CameraIntrinsics::from_fov(64, 64, 90.0);
    CHECK(in.focal == doctest::Approx(32.0).epsilon(1e-9));
    CameraIntrinsics half = in.resized(32, 32);
    CHECK(half.focal == doctest::Approx(16.0).epsilon(1e-9));
    CHECK(half.width == 32);
}
