#pragma once

#include <vector>

#include "distill3d/adam.hpp"
#include "distill3d/camera.hpp"
#include "distill3d/guidance.hpp"
#include "distill3d/image.hpp"
#include "distill3d/meshing.hpp"
#include "distill3d/objective.hpp"

namespace distill3d {

// Small 2 -> hidden -> hidden -> 2 MLP mapping the latent per-vertex UV
// offsets to actual UV displacements. Final layer is zero-initialized so the
// initial warp is exactly zero.
struct UvMlp {
    int hidden = 32;
    std::vector<double> params;

    void init(uint64_t seed);
    size_t param_count() const;
    Vec2 forward(const double* p, const Vec2& in) const;
    // Accumulates d(loss)/d(mlp params) into grad (same layout as params,
    // located at grad_off) and returns d(loss)/d(in).
    Vec2 backward(const double* p, const Vec2& in, const Vec2& d_out,
                  std::vector<double>& grad, size_t grad_off) const;
};

// Trainable refinement state over a baked mesh: per-vertex position offsets
// (shared between UV-duplicated copies of the same extraction vertex), latent
// UV offsets, the UV MLP, and a trainable texture copy. All trainables live
// in one flat vector so a single optimizer drives them.
class RefinableMesh {
public:
    RefinableMesh(TexturedMesh base, uint64_t seed);

    const TexturedMesh& base() const { return base_; }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    size_t param_count() const { return params_.size(); }

    int vertex_count() const { return int(base_.vertices.size()); }
    int offset_slots() const { return offset_slots_; }
    int weld_slot(int vertex) const { return weld_[vertex]; }

    Vec3 vertex_position(int i) const;
    Vec2 vertex_uv(int i) const;
    Vec3 texture_sample(const Vec2& uv) const;

    // Flat-vector sections.
    size_t off_delta_vec() const { return 0; }
    size_t off_delta_uv() const { return off_delta_uv_; }
    size_t off_mlp() const { return off_mlp_; }
    size_t off_texture() const { return off_texture_; }
    const UvMlp& uv_mlp() const { return mlp_; }
    int texture_size() const { return base_.texture.width(); }

    // Max offset magnitude over all slots (drift monitoring).
    double max_offset_norm() const;
    // Mesh with offsets applied and the current texture (for export).
    TexturedMesh realized() const;

private:
    TexturedMesh base_;
    std::vector<int> weld_;
    int offset_slots_ = 0;
    UvMlp mlp_;
    size_t off_delta_uv_ = 0, off_mlp_ = 0, off_texture_ = 0;
    std::vector<double> params_;
};

struct RasterOutput {
    Image rgb;     // over white background
    Image mask;    // hard {0,1} coverage
    Image normal;  // per-pixel face normals
};

struct RasterCache {
    std::vector<int> face;        // per pixel, -1 = background
    std::vector<double> bary;     // 3 per pixel
    std::vector<Vec2> screen;     // per vertex
    std::vector<double> cam_depth;
    std::vector<Vec3> world;
    std::vector<Vec2> warped_uv;
    int width = 0, height = 0;
};

// Perspective rasterization with per-step frozen visibility. Gradients flow
// to the texture and latent UV offsets through the bilinear lookup and to the
// vertex offsets through screen-space barycentrics and face normals.
RasterOutput rasterize(const RefinableMesh& mesh, const CameraPose& pose,
                       RasterCache* cache = nullptr);

void rasterize_backward(const RefinableMesh& mesh, const CameraPose& pose,
                        const RasterCache& cache, const Image& d_rgb,
                        const Image& d_normal, std::vector<double>& grad);

// Eq-style LoRA-guided gradient on the rasterized image: w * (eps_lora - eps).
Image refine_gradient(const LoraPredictor& lora, const GuidanceBackend& backend,
                      const Image& I_3d, int t, const std::string& y,
                      const CameraPose& c, const DiffusionSchedule& schedule, double w,
                      const Image& eps);

struct Stage3Setup {
    const GuidanceBackend* backend = nullptr;
    const LoraPredictor* lora = nullptr;  // frozen
    const Image* input_rgb = nullptr;     // reference view supervision
    const Image* input_mask = nullptr;
    CameraConfig camera;
    const DiffusionSchedule* schedule = nullptr;
    NoiseBand band;  // stage-2/3 band
    std::string prompt;
    std::string w_mode = "one_minus_alpha_bar";
    int resolution = 128;
    double lambda_rgb = 100, lambda_mask = 50, lambda_normal = 100, lambda_offset = 1;
    double guidance_weight = 1.0;
    bool normalize_guidance = true;  // rescale the prior gradient to unit RMS
    bool alternate_views = true;     // reference/novel alternation as in stages 1-2
};

struct Stage3StepMetrics {
    double loss = 0;          // scalar objective of the step's active terms
    double offset_term = 0;
    bool reference_step = false;
};

// One optimization step; `step` indexes from 0 and drives the alternation.
Stage3StepMetrics stage3_step(RefinableMesh& mesh, AdamState& opt, const Stage3Setup& setup,
                              int step, Rng& rng);

}  // namespace distill3d
