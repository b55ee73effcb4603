#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "distill3d/adam.hpp"
#include "distill3d/camera.hpp"
#include "distill3d/config.hpp"
#include "distill3d/field.hpp"
#include "distill3d/guidance.hpp"
#include "distill3d/mesh_refine.hpp"
#include "distill3d/meshing.hpp"

namespace distill3d {

// Per-stage record of what happened, for metrics files and tests.
struct StageTrace {
    std::vector<double> loss;  // one entry per optimization step
    double final_loss = 0;
    double front_psnr = 0;    // reference-view PSNR at stage end
    double heldout_psnr = 0;  // mean PSNR over fixed novel poses (stages 1-2)
    int reference_steps = 0;
    int novel_steps = 0;
};

// Orchestrates the three stages over one input image: coarse distillation
// into the radiance field, adapter-boosted refinement, then explicit mesh
// optimization. All randomness flows through one serializable rng so a fixed
// seed fixes the whole trajectory.
class Pipeline {
public:
    Pipeline(const Config& cfg, const Image& input_rgb, const Image& input_mask,
             std::string prompt, uint64_t seed);

    void run_stage1();
    void run_stage2();
    // Runs extraction plus refinement and returns the final textured mesh.
    TexturedMesh run_stage3();

    int stage_done() const { return stage_done_; }
    const StageTrace& trace(int stage) const;

    HashGridField& field() { return *field_; }
    const HashGridField& field() const { return *field_; }
    LoraModule& lora() { return *lora_; }
    GuidanceBackend& backend() { return *backend_; }
    const Config& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }

    // Render the current field at an arbitrary pose and resolution.
    RenderOutput render_view(const CameraPose& pose, int resolution,
                             bool normals = false) const;
    // Bake the current field into a textured mesh (stage-3 input).
    TexturedMesh extract_mesh() const;

    double front_view_psnr_of(const Image& render) const;
    double heldout_psnr() const;
    static std::vector<CameraPose> heldout_poses(const CameraConfig& cam);

    // Binary state blob: parameters, optimizer moments, rng, step counters,
    // traces. Loading requires a pipeline built with a matching config.
    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

private:
    void stage12_loop(int stage);
    void lora_train_step(const Image& x0, const CameraPose& pose, const NoiseBand& band);
    const Image& input_rgb_at(int resolution);
    const Image& input_mask_at(int resolution);
    void check_finite(double loss, int stage, int step) const;

    Config cfg_;
    std::string prompt_;
    uint64_t seed_;
    Rng rng_;

    CameraConfig camera_;
    DiffusionSchedule schedule_;
    StageBands bands_;
    OracleScene scene_;  // bundled scene, used for held-out evaluation

    Image input_rgb_, input_mask_;
    std::map<int, Image> rgb_cache_, mask_cache_;

    std::unique_ptr<GuidanceBackend> backend_;
    OracleBackend* oracle_ = nullptr;  // non-null when the backend is the oracle
    std::unique_ptr<HashGridField> field_;
    std::unique_ptr<LoraModule> lora_;
    AdamState field_opt_, lora_opt_;

    bool normalize_guidance_ = true;

    int stage_done_ = 0;
    int step_in_stage_ = 0;  // progress within the stage currently running
    long nerf_step_ = 0;     // global stage-1+2 counter driving weight ramps
    StageTrace traces_[3];
};

}  // namespace distill3d
