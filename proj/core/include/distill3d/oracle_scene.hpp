#pragma once

#include "distill3d/camera.hpp"
#include "distill3d/image.hpp"
#include "distill3d/types.hpp"

namespace distill3d {

// Abstract density/color field; implemented by the trainable hash-grid field
// and by analytic test scenes.
class ScalarField {
public:
    virtual ~ScalarField() = default;
    virtual double density_at(const Vec3& p) const = 0;
    virtual Vec3 color_at(const Vec3& p) const = 0;
    virtual Aabb bounds() const = 0;
    // Combined lookup; overridden where one pass is cheaper than two.
    virtual void query(const Vec3& p, double& sigma, Vec3& color) const {
        sigma = density_at(p);
        color = color_at(p);
    }
};

// Synthetic scene with exact renders from every pose: a sphere at the origin
// with a smooth two-tone albedo. Ground truth for the oracle guidance backend
// and for desk-scale end-to-end runs.
struct OracleScene {
    double sphere_radius = 0.45;
    Vec3 color_neg{0.85, 0.25, 0.2};   // x < 0 side
    Vec3 color_pos{0.2, 0.35, 0.85};   // x > 0 side
    double blend_width = 0.12;
    double z_tint = 0.15;              // mild brightness ramp along z

    // Smooth density with value density_peak/2 exactly at the sphere surface,
    // so extraction at threshold density_peak/2 recovers the true radius.
    double density_peak = 20.0;
    double density_falloff = 0.03;

    Vec3 surface_color(const Vec3& p) const;
    double density(const Vec3& p) const;

    // Exact ray-traced render over a white background (rgb) plus coverage mask.
    void render(const CameraPose& pose, Image& rgb, Image& mask) const;
    Image render_rgb(const CameraPose& pose) const;
    // RGBA version of the front view, for producing CLI input images.
    Image render_rgba(const CameraPose& pose) const;
};

class AnalyticSphereField : public ScalarField {
public:
    explicit AnalyticSphereField(const OracleScene& scene, Aabb bounds = {})
        : scene_(scene), bounds_(bounds) {}
    double density_at(const Vec3& p) const override { return scene_.density(p); }
    Vec3 color_at(const Vec3& p) const override { return scene_.surface_color(p); }
    Aabb bounds() const override { return bounds_; }

private:
    OracleScene scene_;
    Aabb bounds_;
};

}  // namespace distill3d
