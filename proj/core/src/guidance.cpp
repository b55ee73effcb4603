#include "distill3d/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace distill3d {

// ---------------------------------------------------------------------------
// Schedule

DiffusionSchedule DiffusionSchedule::linear(int T) {
    if (T < 2) throw std::invalid_argument("schedule: T must be >= 2");
    DiffusionSchedule s;
    s.T = T;
    s.alpha_bar.assign(T + 1, 0.0);
    double beta_lo = 1e-4, beta_hi = 0.02;
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        double beta = beta_lo + (beta_hi - beta_lo) * double(t - 1) / double(T - 1);
        prod *= 1.0 - beta;
        s.alpha_bar[t] = prod;
    }
    return s;
}

DiffusionSchedule DiffusionSchedule::cosine(int T) {
    if (T < 2) throw std::invalid_argument("schedule: T must be >= 2");
    DiffusionSchedule s;
    s.T = T;
    s.alpha_bar.assign(T + 1, 0.0);
    const double eps = 0.008;
    auto f = [&](double t) {
        double v = std::cos((t / T + eps) / (1.0 + eps) * kPi / 2.0);
        return v * v;
    };
    double f0 = f(0);
    for (int t = 1; t <= T; ++t)
        s.alpha_bar[t] = std::clamp(f(double(t)) / f0, 1e-7, 1.0 - 1e-7);
    return s;
}

DiffusionSchedule DiffusionSchedule::from(const Config& cfg) {
    int T = cfg.get_int("diffusion.T");
    std::string kind = cfg.get_str("diffusion.schedule");
    if (kind == "linear") return linear(T);
    if (kind == "cosine") return cosine(T);
    throw std::runtime_error("unknown diffusion.schedule: " + kind);
}

double DiffusionSchedule::abar(int t) const {
    if (t < 1 || t > T) throw std::out_of_range("noise level t out of [1,T]");
    return alpha_bar[t];
}

// ---------------------------------------------------------------------------
// Noise bands

void NoiseBand::validate() const {
    if (!(t_min >= 0 && t_min < t_max && t_max <= 1))
        throw std::invalid_argument("noise band requires 0 <= t_min < t_max <= 1");
}

StageBands StageBands::from(const Config& cfg) {
    StageBands b;
    auto p1 = cfg.get_pair("guidance.t_band_stage1");
    auto p23 = cfg.get_pair("guidance.t_band_stage23");
    b.stage1 = {p1.first, p1.second};
    b.stage23 = {p23.first, p23.second};
    b.stage1.validate();
    b.stage23.validate();
    if (b.stage23.t_max >= b.stage1.t_min)
        throw std::invalid_argument(
            "misordered noise bands: stage-2/3 band must lie strictly below the stage-1 band");
    return b;
}

int sample_noise_level(const NoiseBand& band, int T, Rng& rng) {
    int lo = std::max(1, int(std::ceil(band.t_min * T)));
    int hi = std::min(T, std::max(lo, int(std::floor(band.t_max * T))));
    return rng.uniform_int(lo, hi);
}

int sample_noise_level(int stage, const StageBands& bands, int T, Rng& rng) {
    if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1..3");
    return sample_noise_level(stage == 1 ? bands.stage1 : bands.stage23, T, rng);
}

// ---------------------------------------------------------------------------
// q_sample and weights

Image q_sample(const Image& x0, int t, const Image& eps, const DiffusionSchedule& schedule) {
    if (!x0.same_shape(eps)) throw std::invalid_argument("q_sample: eps shape mismatch");
    double ab = schedule.abar(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Image out = x0;
    for (size_t i = 0; i < out.size(); ++i)
        out.raw()[i] = sa * x0.raw()[i] + sb * eps.raw()[i];
    return out;
}

double noise_weight(const DiffusionSchedule& schedule, int t, const std::string& mode) {
    if (mode == "constant") return 1.0;
    if (mode == "one_minus_alpha_bar") return 1.0 - schedule.abar(t);
    throw std::runtime_error("unknown guidance.w_schedule: " + mode);
}

// ---------------------------------------------------------------------------
// Oracle backend

OracleBackend::OracleBackend(OracleScene scene, DiffusionSchedule schedule, CameraConfig camera)
    : scene_(scene), schedule_(std::move(schedule)), camera_(camera) {
    view_ = front_pose(camera_);
}

Image OracleBackend::target_for(const CameraPose& pose, int width, int height) const {
    CameraPose p = pose;
    if (p.intrinsics.focal <= 0)
        p.intrinsics = CameraIntrinsics::from_fov(width, height, camera_.fov_deg);
    if (p.intrinsics.width != width || p.intrinsics.height != height)
        p.intrinsics = p.intrinsics.resized(width, height);
    return scene_.render_rgb(p);
}

Image OracleBackend::epsilon_from_target(const Image& x_t, int t, const Image& target) const {
    double ab = schedule_.abar(t);
    double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Image out = x_t;
    for (size_t i = 0; i < out.size(); ++i)
        out.raw()[i] = (x_t.raw()[i] - sa * target.raw()[i]) / sb;
    return out;
}

Image OracleBackend::predict_epsilon_text(const Image& x_t, int t, const std::string&) const {
    return epsilon_from_target(x_t, t, target_for(view_, x_t.width(), x_t.height()));
}

Image OracleBackend::predict_epsilon_view(const Image& x_t, int t, const Image&,
                                          const PoseDelta& dp) const {
    // The reference view is the front pose; dp recovers the render pose.
    CameraPose p = front_pose(camera_);
    p.polar_deg += dp.d_polar;
    p.azimuth_deg = std::fmod(p.azimuth_deg + dp.d_azimuth + 360.0, 360.0);
    p.radius += dp.d_radius;
    return epsilon_from_target(x_t, t, target_for(p, x_t.width(), x_t.height()));
}

// ---------------------------------------------------------------------------
// Toy backend

ToyConvBackend::ToyConvBackend(uint64_t seed) {
    Rng rng(seed);
    for (auto& k : kernel_) k = rng.uniform(-0.3, 0.3);
    self_gain_ = 0.8 + 0.4 * rng.uniform();
}

namespace {

double prompt_hash01(const std::string& y) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : y) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return double(h >> 11) * 0x1.0p-53;
}

}  // namespace

Image ToyConvBackend::predict_epsilon_text(const Image& x_t, int t, const std::string& y) const {
    Image out(x_t.width(), x_t.height(), x_t.channels());
    double bias = 0.2 * std::sin(prompt_hash01(y) * 20.0 + t * 0.01);
    for (int yy = 0; yy < x_t.height(); ++yy)
        for (int xx = 0; xx < x_t.width(); ++xx)
            for (int ch = 0; ch < x_t.channels(); ++ch) {
                double acc = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        int sx = std::clamp(xx + dx, 0, x_t.width() - 1);
                        int sy = std::clamp(yy + dy, 0, x_t.height() - 1);
                        acc += kernel_[(dy + 1) * 3 + (dx + 1)] * (x_t.at(sx, sy, ch) - 0.5);
                    }
                out.at(xx, yy, ch) = self_gain_ * (x_t.at(xx, yy, ch) - 0.5) + acc + bias;
            }
    return out;
}

Image ToyConvBackend::predict_epsilon_view(const Image& x_t, int t, const Image&,
                                           const PoseDelta& dp) const {
    Image out = predict_epsilon_text(x_t, t, "");
    double pose_bias = 0.05 * std::sin(deg2rad(dp.d_azimuth)) +
                       0.05 * std::sin(deg2rad(dp.d_polar));
    for (auto& v : out.raw()) v += pose_bias;
    return out;
}

// ---------------------------------------------------------------------------
// LoRA adapter

std::array<double, 5> camera_embedding(const CameraPose& c) {
    double az = deg2rad(c.azimuth_deg), po = deg2rad(c.polar_deg);
    return {std::sin(az), std::cos(az), std::sin(po), std::cos(po), c.radius / 10.0};
}

LoraModule::LoraModule(const GuidanceBackend* base, int rank, int T, uint64_t seed)
    : base_(base), rank_(rank), T_(T) {
    if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
    params_.assign(size_t(rank) * kFeatDim + 3 * size_t(rank), 0.0);
    Rng rng(seed);
    // A gets a small random init; B stays zero so the adapter starts as the
    // identity over the base predictor.
    for (size_t i = 0; i < size_t(rank) * kFeatDim; ++i)
        params_[i] = 0.3 * rng.normal();
}

Image LoraModule::predict(const Image& x_t, int t, const std::string& y,
                          const CameraPose& c) const {
    Image out = base_->predict_epsilon_text(x_t, t, y);
    auto cam = camera_embedding(c);
    const double tt = double(t) / double(T_);
    std::vector<double> h(kFeatDim), z(rank_);
    for (int yy = 0; yy < x_t.height(); ++yy)
        for (int xx = 0; xx < x_t.width(); ++xx) {
            for (int ch = 0; ch < 3; ++ch) h[ch] = x_t.at(xx, yy, ch) - 0.5;
            h[3] = tt;
            for (int k = 0; k < 5; ++k) h[4 + k] = cam[k];
            for (int r = 0; r < rank_; ++r) {
                double s = 0;
                for (int f = 0; f < kFeatDim; ++f) s += A()[r * kFeatDim + f] * h[f];
                z[r] = s;
            }
            for (int ch = 0; ch < 3; ++ch) {
                double s = 0;
                for (int r = 0; r < rank_; ++r) s += B()[ch * rank_ + r] * z[r];
                out.at(xx, yy, ch) += s;
            }
        }
    return out;
}

double LoraModule::loss_and_grad(const Image& x0, int t_lora, const std::string& y,
                                 const CameraPose& c, const Image& eps,
                                 const DiffusionSchedule& schedule,
                                 std::vector<double>* grad) const {
    Image x_t = q_sample(x0, t_lora, eps, schedule);
    Image pred = predict(x_t, t_lora, y, c);

    double ssq = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        double d = pred.raw()[i] - eps.raw()[i];
        ssq += d * d;
    }
    double n = double(pred.size());
    double loss = std::sqrt(ssq / n);
    if (!grad) return loss;

    if (grad->size() != params_.size()) grad->assign(params_.size(), 0.0);
    if (loss < 1e-12) return loss;

    double scale = 1.0 / (n * loss);
    auto cam = camera_embedding(c);
    const double tt = double(t_lora) / double(T_);
    std::vector<double> h(kFeatDim), z(rank_), dz(rank_);
    double* gA = grad->data();
    double* gB = grad->data() + size_t(rank_) * kFeatDim;
    for (int yy = 0; yy < x_t.height(); ++yy)
        for (int xx = 0; xx < x_t.width(); ++xx) {
            for (int ch = 0; ch < 3; ++ch) h[ch] = x_t.at(xx, yy, ch) - 0.5;
            h[3] = tt;
            for (int k = 0; k < 5; ++k) h[4 + k] = cam[k];
            for (int r = 0; r < rank_; ++r) {
                double s = 0;
                for (int f = 0; f < kFeatDim; ++f) s += A()[r * kFeatDim + f] * h[f];
                z[r] = s;
                dz[r] = 0;
            }
            for (int ch = 0; ch < 3; ++ch) {
                double dout = (pred.at(xx, yy, ch) - eps.at(xx, yy, ch)) * scale;
                for (int r = 0; r < rank_; ++r) {
                    gB[ch * rank_ + r] += dout * z[r];
                    dz[r] += dout * B()[ch * rank_ + r];
                }
            }
            for (int r = 0; r < rank_; ++r)
                for (int f = 0; f < kFeatDim; ++f) gA[r * kFeatDim + f] += dz[r] * h[f];
        }
    return loss;
}

double lora_loss(const LoraModule& lora, const Image& x0, int t_lora,
                 const std::string& y, const CameraPose& c, const Image& eps,
                 const DiffusionSchedule& schedule) {
    return lora.loss_and_grad(x0, t_lora, y, c, eps, schedule, nullptr);
}

// ---------------------------------------------------------------------------
// Distillation gradients

namespace {

Image weighted_diff(const Image& a, const Image& b, double w) {
    Image out = a;
    for (size_t i = 0; i < out.size(); ++i) out.raw()[i] = w * (a.raw()[i] - b.raw()[i]);
    return out;
}

}  // namespace

Image sds_gradient(const GuidanceBackend& backend, const Image& x0, int t,
                   const std::string& y, const DiffusionSchedule& schedule, double w,
                   const Image& eps) {
    Image x_t = q_sample(backend.encode(x0), t, eps, schedule);
    Image pred = backend.predict_epsilon_text(x_t, t, y);
    return weighted_diff(pred, eps, w);
}

Image sds3d_gradient(const GuidanceBackend& backend, const Image& x0, int t,
                     const Image& x0_ref, const PoseDelta& dp,
                     const DiffusionSchedule& schedule, double w, const Image& eps) {
    Image x_t = q_sample(backend.encode(x0), t, eps, schedule);
    Image pred = backend.predict_epsilon_view(x_t, t, x0_ref, dp);
    return weighted_diff(pred, eps, w);
}

Image vsd_gradient(const GuidanceBackend& backend, const LoraPredictor& lora,
                   const Image& x0, int t, const std::string& y, const CameraPose& c,
                   const DiffusionSchedule& schedule, double w, const Image& eps) {
    Image x_t = q_sample(backend.encode(x0), t, eps, schedule);
    Image pred_base = backend.predict_epsilon_text(x_t, t, y);
    Image pred_lora = lora.predict(x_t, t, y, c);
    return weighted_diff(pred_base, pred_lora, w);
}

// ---------------------------------------------------------------------------
// Preview sampler

Image lora_preview(const LoraPredictor& lora, const Image& base_image,
                   const std::string& y, const CameraPose& c, double strength,
                   int steps, const DiffusionSchedule& schedule, Rng& rng) {
    if (strength <= 0 || strength > 1)
        throw std::invalid_argument("lora_preview: strength must be in (0,1]");
    if (steps < 1) throw std::invalid_argument("lora_preview: steps must be >= 1");

    int t0 = int(std::lround(strength * schedule.T));
    if (t0 < 1) return base_image;

    Image eps(base_image.width(), base_image.height(), base_image.channels());
    for (auto& v : eps.raw()) v = rng.normal();
    Image x = q_sample(base_image, t0, eps, schedule);

    for (int k = steps; k >= 1; --k) {
        int t = std::max(1, int(std::lround(double(t0) * k / steps)));
        Image pred = lora.predict(x, t, y, c);
        double ab = schedule.abar(t);
        double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
        int t_next = int(std::lround(double(t0) * (k - 1) / steps));
        double ab_next = t_next >= 1 ? schedule.abar(t_next) : 1.0;
        double sa2 = std::sqrt(ab_next), sb2 = std::sqrt(1.0 - ab_next);
        for (size_t i = 0; i < x.size(); ++i) {
            double x0_hat = (x.raw()[i] - sb * pred.raw()[i]) / sa;
            x.raw()[i] = sa2 * x0_hat + sb2 * pred.raw()[i];
        }
    }
    for (auto& v : x.raw()) v = std::clamp(v, 0.0, 1.0);
    return x;
}

// ---------------------------------------------------------------------------
// Registry

namespace {

std::map<std::string, BackendFactory>& registry() {
    static std::map<std::string, BackendFactory> reg = [] {
        std::map<std::string, BackendFactory> m;
        m["oracle"] = [](const Config& cfg) -> std::unique_ptr<GuidanceBackend> {
            OracleScene scene;
            scene.sphere_radius = cfg.get_double("scene.sphere_radius");
            return std::make_unique<OracleBackend>(scene, DiffusionSchedule::from(cfg),
                                                   CameraConfig::from(cfg));
        };
        m["toy_conv"] = [](const Config&) -> std::unique_ptr<GuidanceBackend> {
            return std::make_unique<ToyConvBackend>();
        };
        m["external"] = [](const Config&) -> std::unique_ptr<GuidanceBackend> {
            throw std::runtime_error(
                "guidance.backend=external: register an adapter with register_backend() "
                "under a custom name and select it instead");
        };
        return m;
    }();
    return reg;
}

}  // namespace

void register_backend(const std::string& name, BackendFactory factory) {
    registry()[name] = std::move(factory);
}

std::unique_ptr<GuidanceBackend> make_backend(const Config& cfg) {
    std::string name = cfg.get_str("guidance.backend");
    auto it = registry().find(name);
    if (it == registry().end()) throw std::runtime_error("unknown guidance backend: " + name);
    return it->second(cfg);
}

std::vector<std::string> registered_backends() {
    std::vector<std::string> names;
    for (const auto& [k, v] : registry()) names.push_back(k);
    return names;
}

}  // namespace distill3d
