#pragma once

#include <vector>

#include "distill3d/camera.hpp"
#include "distill3d/config.hpp"
#include "distill3d/image.hpp"
#include "distill3d/oracle_scene.hpp"
#include "distill3d/rng.hpp"
#include "distill3d/types.hpp"

namespace distill3d {

struct FieldConfig {
    int levels = 6;
    int base_res = 16;
    double per_level_scale = 1.45;
    int table_log2 = 14;   // entries per level = 2^table_log2
    int feature_dim = 2;
    int hidden = 32;
    int geo_dim = 7;
    Aabb bounds;           // default [-1,1]^3

    static FieldConfig from(const Config& cfg);
    int enc_dim() const { return levels * feature_dim; }
    int table_size() const { return 1 << table_log2; }
};

// Multi-level hash-grid encoding followed by small density and color MLPs.
// Density is shifted-softplus (>= 0 everywhere), color is sigmoid. All
// trainable parameters live in one flat vector; gradients accumulate into a
// caller-owned vector of the same layout.
class HashGridField : public ScalarField {
public:
    HashGridField(FieldConfig cfg, uint64_t seed);

    const FieldConfig& config() const { return cfg_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    size_t param_count() const { return params_.size(); }

    // Points outside bounds yield zero density.
    void query(const Vec3& p, double& sigma, Vec3& color) const override;
    double density_at(const Vec3& p) const override;
    Vec3 color_at(const Vec3& p) const override;
    Aabb bounds() const override { return cfg_.bounds; }

    // Accumulate d(loss)/d(params) for one query given upstream gradients on
    // the activated density and color.
    void query_backward(const Vec3& p, double d_sigma, const Vec3& d_color,
                        std::vector<double>& grad) const;
    void density_backward(const Vec3& p, double d_sigma, std::vector<double>& grad) const;

    // Edge length of one cell of the finest level (normal finite-difference step).
    double finest_cell_size() const;

private:
    struct Workspace;
    void forward(const Vec3& p, Workspace& ws, bool with_color) const;

    FieldConfig cfg_;
    std::vector<int> level_res_;
    std::vector<double> params_;

    // parameter layout offsets
    size_t off_tables_ = 0;
    size_t off_dw1_ = 0, off_db1_ = 0, off_dw2_ = 0, off_db2_ = 0;
    size_t off_cw1_ = 0, off_cb1_ = 0, off_cw2_ = 0, off_cb2_ = 0;
};

struct RenderOutput {
    Image rgb;     // H x W x 3, composited over white
    Image mask;    // H x W x 1, accumulated opacity
    Image normal;  // H x W x 3, unit vectors over foreground, zero elsewhere
    Image depth;   // H x W x 1, expected termination distance
};

struct RenderOptions {
    int samples_per_ray = 32;
    bool compute_normals = false;
    double normal_step = 0;          // 0 = finest cell size (analytic fields need a value)
    double normal_weight_cutoff = 1e-3;
    double early_stop_transmittance = 0;  // 0 disables early ray termination
};

RenderOutput volume_render(const ScalarField& field, const RayBundle& rays,
                           const RenderOptions& opts);

// Reverse pass: recomputes the forward per ray and accumulates parameter
// gradients. Pass empty images to skip a term. d_normal is only consumed if
// the forward options computed normals.
void volume_render_backward(const HashGridField& field, const RayBundle& rays,
                            const RenderOptions& opts, const Image& d_rgb,
                            const Image& d_mask, const Image& d_normal,
                            std::vector<double>& grad);

struct DensityGrid {
    int nx = 0, ny = 0, nz = 0;
    Aabb bounds;
    std::vector<double> values;  // x fastest

    double at(int i, int j, int k) const {
        return values[(size_t(k) * ny + j) * nx + i];
    }
};

DensityGrid density_grid(const ScalarField& field, int resolution, const Aabb& bounds);

}  // namespace distill3d
