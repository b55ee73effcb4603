#include "distill3d/oracle_scene.hpp"

#include <algorithm>
#include <cmath>

namespace distill3d {

namespace {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Vec3 OracleScene::surface_color(const Vec3& p) const {
    double t = sigmoid(p.x / blend_width);
    Vec3 c = color_neg * (1.0 - t) + color_pos * t;
    double shade = 1.0 + z_tint * (p.z / std::max(sphere_radius, 1e-9));
    c *= std::clamp(shade, 0.0, 2.0);
    c.x = std::clamp(c.x, 0.0, 1.0);
    c.y = std::clamp(c.y, 0.0, 1.0);
    c.z = std::clamp(c.z, 0.0, 1.0);
    return c;
}

double OracleScene::density(const Vec3& p) const {
    return density_peak * sigmoid((sphere_radius - norm(p)) / density_falloff);
}

void OracleScene::render(const CameraPose& pose, Image& rgb, Image& mask) const {
    RayBundle rays = generate_rays(pose);
    rgb = Image(rays.width, rays.height, 3, 1.0);  // white background
    mask = Image(rays.width, rays.height, 1, 0.0);

    for (int y = 0; y < rays.height; ++y) {
        for (int x = 0; x < rays.width; ++x) {
            size_t idx = size_t(y) * rays.width + x;
            const Vec3& o = rays.origins[idx];
            const Vec3& d = rays.directions[idx];
            // |o + t d|^2 = r^2
            double b = dot(o, d);
            double c = dot(o, o) - sphere_radius * sphere_radius;
            double disc = b * b - c;
            if (disc < 0) continue;
            double t = -b - std::sqrt(disc);
            if (t <= 0) continue;
            Vec3 hit = o + d * t;
            Vec3 col = surface_color(hit);
            rgb.at(x, y, 0) = col.x;
            rgb.at(x, y, 1) = col.y;
            rgb.at(x, y, 2) = col.z;
            mask.at(x, y, 0) = 1.0;
        }
    }
}

Image OracleScene::render_rgb(const CameraPose& pose) const {
    Image rgb, mask;
    render(pose, rgb, mask);
    return rgb;
}

Image OracleScene::render_rgba(const CameraPose& pose) const {
    Image rgb, mask;
    render(pose, rgb, mask);
    Image rgba(rgb.width(), rgb.height(), 4);
    for (int y = 0; y < rgb.height(); ++y)
        for (int x = 0; x < rgb.width(); ++x) {
            for (int ch = 0; ch < 3; ++ch) rgba.at(x, y, ch) = rgb.at(x, y, ch);
            rgba.at(x, y, 3) = mask.at(x, y, 0);
        }
    return rgba;
}

}  // namespace distill3d
