#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "distill3d/camera.hpp"
#include "distill3d/config.hpp"
#include "distill3d/image.hpp"
#include "distill3d/oracle_scene.hpp"
#include "distill3d/rng.hpp"

namespace distill3d {

// Forward-process schedule: table of cumulative signal fractions alpha_bar(t)
// for t in 1..T, strictly decreasing.
struct DiffusionSchedule {
    int T = 1000;
    std::vector<double> alpha_bar;  // size T+1, index 0 unused

    static DiffusionSchedule linear(int T);
    static DiffusionSchedule cosine(int T);
    static DiffusionSchedule from(const Config& cfg);

    double abar(int t) const;
};

struct NoiseBand {
    double t_min = 0;  // fractions of T
    double t_max = 1;

    void validate() const;
};

struct StageBands {
    NoiseBand stage1;
    NoiseBand stage23;

    // Stage-1 band must sit strictly above the stage-2/3 band.
    static StageBands from(const Config& cfg);
};

// Uniform draw from the band for the given stage (1, 2 or 3), in steps.
int sample_noise_level(int stage, const StageBands& bands, int T, Rng& rng);
int sample_noise_level(const NoiseBand& band, int T, Rng& rng);

// Epsilon-predictor backend. Pixel-space backends use identity encode/decode.
class GuidanceBackend {
public:
    virtual ~GuidanceBackend() = default;
    virtual Image predict_epsilon_text(const Image& x_t, int t, const std::string& y) const = 0;
    virtual Image predict_epsilon_view(const Image& x_t, int t, const Image& x0_ref,
                                       const PoseDelta& dp) const = 0;
    virtual Image encode(const Image& img) const { return img; }
    virtual Image decode(const Image& latent) const { return latent; }
    virtual double guidance_scale() const { return 1.0; }
    virtual std::string name() const = 0;
};

// Testing backend built from exact per-pose renders of a synthetic scene.
// Predicts eps_hat = (x_t - sqrt(abar_t) * target(pose)) / sqrt(1 - abar_t),
// so distillation gradients vanish exactly when the render matches the target.
class OracleBackend : public GuidanceBackend {
public:
    OracleBackend(OracleScene scene, DiffusionSchedule schedule, CameraConfig camera);

    // Text-conditioned prediction has no pose argument; the caller declares
    // the view it is rendering from before asking for predictions.
    void set_view(const CameraPose& pose) { view_ = pose; }
    const CameraPose& view() const { return view_; }

    Image predict_epsilon_text(const Image& x_t, int t, const std::string& y) const override;
    Image predict_epsilon_view(const Image& x_t, int t, const Image& x0_ref,
                               const PoseDelta& dp) const override;
    std::string name() const override { return "oracle"; }

    Image target_for(const CameraPose& pose, int width, int height) const;
    const OracleScene& scene() const { return scene_; }

private:
    Image epsilon_from_target(const Image& x_t, int t, const Image& target) const;

    OracleScene scene_;
    DiffusionSchedule schedule_;
    CameraConfig camera_;
    CameraPose view_;
};

// Deterministic stand-in predictor (fixed random conv + prompt/pose biases).
// Exists for plumbing and determinism tests, not for meaningful guidance.
class ToyConvBackend : public GuidanceBackend {
public:
    explicit ToyConvBackend(uint64_t seed = 7);
    Image predict_epsilon_text(const Image& x_t, int t, const std::string& y) const override;
    Image predict_epsilon_view(const Image& x_t, int t, const Image& x0_ref,
                               const PoseDelta& dp) const override;
    std::string name() const override { return "toy_conv"; }

private:
    std::array<double, 9> kernel_{};
    double self_gain_ = 1.0;
};

// Anything that predicts epsilon with prompt + camera conditioning; the
// trainable adapter below and test stubs implement this.
class LoraPredictor {
public:
    virtual ~LoraPredictor() = default;
    virtual Image predict(const Image& x_t, int t, const std::string& y,
                          const CameraPose& c) const = 0;
};

std::array<double, 5> camera_embedding(const CameraPose& c);

// Low-rank additive adapter over a frozen backend. Per-pixel features
// [x_t rgb, t/T, camera embedding] pass through rank-r factors B*A; B is
// zero-initialized so the adapter starts exactly equal to the base model.
class LoraModule : public LoraPredictor {
public:
    LoraModule(const GuidanceBackend* base, int rank, int T, uint64_t seed);

    Image predict(const Image& x_t, int t, const std::string& y,
                  const CameraPose& c) const override;

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    size_t param_count() const { return params_.size(); }
    int rank() const { return rank_; }
    const GuidanceBackend* base() const { return base_; }
    void set_base(const GuidanceBackend* base) { base_ = base; }

    // ||eps_hat - eps||_2 (rms form) on a fixed noised render; accumulates
    // d(loss)/d(params) into grad when non-null.
    double loss_and_grad(const Image& x0, int t_lora, const std::string& y,
                         const CameraPose& c, const Image& eps,
                         const DiffusionSchedule& schedule,
                         std::vector<double>* grad) const;

private:
    static constexpr int kFeatDim = 9;  // rgb(3) + t(1) + camera(5)
    const GuidanceBackend* base_;
    int rank_;
    int T_;
    std::vector<double> params_;  // A (rank x feat) followed by B (3 x rank)

    const double* A() const { return params_.data(); }
    const double* B() const { return params_.data() + size_t(rank_) * kFeatDim; }
};

double lora_loss(const LoraModule& lora, const Image& x0, int t_lora,
                 const std::string& y, const CameraPose& c, const Image& eps,
                 const DiffusionSchedule& schedule);

Image q_sample(const Image& x0, int t, const Image& eps, const DiffusionSchedule& schedule);

// w_t weight; default choice 1 - alpha_bar(t), "constant" gives 1.
double noise_weight(const DiffusionSchedule& schedule, int t, const std::string& mode);

// Distillation gradients w.r.t. the rendered image x0. The caller's backward
// pass applies dx/dtheta.
Image sds_gradient(const GuidanceBackend& backend, const Image& x0, int t,
                   const std::string& y, const DiffusionSchedule& schedule, double w,
                   const Image& eps);
Image sds3d_gradient(const GuidanceBackend& backend, const Image& x0, int t,
                     const Image& x0_ref, const PoseDelta& dp,
                     const DiffusionSchedule& schedule, double w, const Image& eps);
Image vsd_gradient(const GuidanceBackend& backend, const LoraPredictor& lora,
                   const Image& x0, int t, const std::string& y, const CameraPose& c,
                   const DiffusionSchedule& schedule, double w, const Image& eps);

// Deterministic image-to-image preview: noise the base image to strength*T,
// then DDIM-denoise with the adapter's predictions.
Image lora_preview(const LoraPredictor& lora, const Image& base_image,
                   const std::string& y, const CameraPose& c, double strength,
                   int steps, const DiffusionSchedule& schedule, Rng& rng);

// Named backend registry; config key guidance.backend selects one.
using BackendFactory =
    std::function<std::unique_ptr<GuidanceBackend>(const Config&)>;
void register_backend(const std::string& name, BackendFactory factory);
std::unique_ptr<GuidanceBackend> make_backend(const Config& cfg);
std::vector<std::string> registered_backends();

}  // namespace distill3d
