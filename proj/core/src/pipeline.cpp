#include "distill3d/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "distill3d/objective.hpp"

namespace distill3d {

namespace {

constexpr char kCkptMagic[8] = {'D', '3', 'D', 'C', 'K', '0', '0', '1'};

double psnr_db(const Image& a, const Image& b) {
    double m = mse(a, b);
    if (m <= 0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / m));
}

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
int64_t read_i64(std::istream& is) {
    int64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_vec(std::ostream& os, const std::vector<double>& v) {
    write_u64(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 8));
}
std::vector<double> read_vec(std::istream& is) {
    std::vector<double> v(read_u64(is));
    is.read(reinterpret_cast<char*>(v.data()), std::streamsize(v.size() * 8));
    return v;
}

void write_str(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), std::streamsize(s.size()));
}
std::string read_str(std::istream& is) {
    std::string s(read_u64(is), '\0');
    is.read(s.data(), std::streamsize(s.size()));
    return s;
}

void write_adam(std::ostream& os, const AdamState& a) {
    write_i64(os, a.step_count);
    write_vec(os, a.m);
    write_vec(os, a.v);
}
void read_adam(std::istream& is, AdamState& a) {
    a.step_count = long(read_i64(is));
    a.m = read_vec(is);
    a.v = read_vec(is);
}

WeightSchedule ramp(const Config& cfg, const std::string& key, int end_step) {
    WeightSchedule s;
    s.name = key;
    s.start_value = cfg.get_double("loss." + key + ".start");
    s.end_value = cfg.get_double("loss." + key + ".end");
    s.start_step = 0;
    s.end_step = end_step;
    return s;
}

}  // namespace

Pipeline::Pipeline(const Config& cfg, const Image& input_rgb, const Image& input_mask,
                   std::string prompt, uint64_t seed)
    : cfg_(cfg), prompt_(std::move(prompt)), seed_(seed), rng_(seed) {
    if (input_rgb.channels() != 3 || input_mask.channels() != 1 ||
        input_rgb.width() != input_mask.width() || input_rgb.height() != input_mask.height())
        throw std::invalid_argument("pipeline: expected RGB input plus matching 1-channel mask");
    double mask_max = 0;
    for (double v : input_mask.raw()) mask_max = std::max(mask_max, v);
    if (mask_max <= 0) throw std::invalid_argument("pipeline: input mask is empty");

    input_rgb_ = input_rgb;
    input_mask_ = input_mask;

    camera_ = CameraConfig::from(cfg_);
    schedule_ = DiffusionSchedule::from(cfg_);
    bands_ = StageBands::from(cfg_);
    if (cfg_.has("scene.sphere_radius"))
        scene_.sphere_radius = cfg_.get_double("scene.sphere_radius");

    backend_ = make_backend(cfg_);
    oracle_ = dynamic_cast<OracleBackend*>(backend_.get());

    field_ = std::make_unique<HashGridField>(FieldConfig::from(cfg_), seed_);
    lora_ = std::make_unique<LoraModule>(backend_.get(), cfg_.get_int("guidance.lora_rank"),
                                         schedule_.T, seed_ + 1);

    field_opt_.lr = cfg_.get_double("opt.lr_field");
    lora_opt_.lr = cfg_.get_double("opt.lr_lora");
    normalize_guidance_ = cfg_.get_bool("guidance.normalize");
}

const StageTrace& Pipeline::trace(int stage) const {
    if (stage < 1 || stage > 3) throw std::out_of_range("trace: stage must be 1..3");
    return traces_[stage - 1];
}

const Image& Pipeline::input_rgb_at(int resolution) {
    auto it = rgb_cache_.find(resolution);
    if (it == rgb_cache_.end())
        it = rgb_cache_.emplace(resolution, resize_bilinear(input_rgb_, resolution, resolution)).first;
    return it->second;
}

const Image& Pipeline::input_mask_at(int resolution) {
    auto it = mask_cache_.find(resolution);
    if (it == mask_cache_.end())
        it = mask_cache_.emplace(resolution, resize_bilinear(input_mask_, resolution, resolution)).first;
    return it->second;
}

void Pipeline::check_finite(double loss, int stage, int step) const {
    if (!std::isfinite(loss))
        throw std::runtime_error("non-finite loss at stage " + std::to_string(stage) +
                                 " step " + std::to_string(step));
}

void Pipeline::lora_train_step(const Image& x0, const CameraPose& pose, const NoiseBand& band) {
    // The base prediction must condition on the view of the image being
    // denoised, not on whichever view the previous step happened to set.
    if (oracle_) oracle_->set_view(pose);
    int t = sample_noise_level(band, schedule_.T, rng_);
    Image eps(x0.width(), x0.height(), 3);
    for (auto& v : eps.raw()) v = rng_.normal();
    std::vector<double> grad(lora_->param_count(), 0.0);
    double loss = lora_->loss_and_grad(x0, t, prompt_, pose, eps, schedule_, &grad);
    if (!std::isfinite(loss)) throw std::runtime_error("non-finite adapter loss");
    lora_opt_.step(lora_->params(), grad);
}

RenderOutput Pipeline::render_view(const CameraPose& pose, int resolution, bool normals) const {
    CameraPose p = pose;
    p.intrinsics = camera_.intrinsics().resized(resolution, resolution);
    RenderOptions opts;
    opts.samples_per_ray = cfg_.get_int("field.samples_per_ray");
    opts.compute_normals = normals;
    return volume_render(*field_, generate_rays(p), opts);
}

double Pipeline::front_view_psnr_of(const Image& render) const {
    Image ref = resize_bilinear(input_rgb_, render.width(), render.height());
    return psnr_db(render, ref);
}

std::vector<CameraPose> Pipeline::heldout_poses(const CameraConfig& cam) {
    std::vector<CameraPose> poses;
    for (double polar : {75.0, 105.0})
        for (double az : {45.0, 135.0, 225.0, 315.0}) {
            CameraPose p;
            p.polar_deg = polar;
            p.azimuth_deg = az;
            p.radius = cam.radius;
            p.intrinsics = cam.intrinsics();
            poses.push_back(p);
        }
    return poses;
}

double Pipeline::heldout_psnr() const {
    double sum = 0;
    auto poses = heldout_poses(camera_);
    for (const auto& pose : poses) {
        RenderOutput out = render_view(pose, camera_.width);
        CameraPose p = pose;
        p.intrinsics = camera_.intrinsics().resized(camera_.width, camera_.width);
        sum += psnr_db(out.rgb, scene_.render_rgb(p));
    }
    return sum / double(poses.size());
}

void Pipeline::stage12_loop(int stage) {
    const std::string pre = stage == 1 ? "stage1." : "stage2.";
    const int steps = cfg_.get_int(pre + "steps");
    const int total_nerf = cfg_.get_int("stage1.steps") + cfg_.get_int("stage2.steps");
    const int switch_step = stage == 1 ? cfg_.get_int("stage1.res_switch_step") : 0;
    const int res_low = stage == 1 ? cfg_.get_int("stage1.res_low") : 0;
    const int res_high = stage == 1 ? cfg_.get_int("stage1.res_high") : 0;
    const int novel_res = stage == 2 ? cfg_.get_int("stage2.novel_res") : 0;
    const int ref_res = stage == 2 ? cfg_.get_int("stage2.ref_res") : 0;

    const WeightSchedule w_rgb = ramp(cfg_, "lambda_rgb", total_nerf);
    const WeightSchedule w_mask = ramp(cfg_, "lambda_mask", total_nerf);
    const WeightSchedule w_normal = ramp(cfg_, "lambda_normal", total_nerf);
    const WeightSchedule w_sds = ramp(cfg_, "lambda_sds", total_nerf);
    const WeightSchedule w_3d = ramp(cfg_, "lambda_3d", total_nerf);
    const WeightSchedule w_vsd = ramp(cfg_, "lambda_vsd", total_nerf);

    const NoiseBand& band = stage == 1 ? bands_.stage1 : bands_.stage23;
    const std::string w_mode = cfg_.get_str("guidance.w_schedule");
    const std::string lora_src = cfg_.get_str("pipeline.lora_train_source");
    StageTrace& trace = traces_[stage - 1];

    RenderOptions opts;
    opts.samples_per_ray = cfg_.get_int("field.samples_per_ray");

    for (; step_in_stage_ < steps; ++step_in_stage_) {
        const int s = step_in_stage_;
        const int gs = int(nerf_step_);
        const bool reference = (s % 2 == 0);
        const int res = stage == 1 ? (s < switch_step ? res_low : res_high)
                                   : (reference ? ref_res : novel_res);

        std::vector<double> grad(field_->param_count(), 0.0);
        double loss = 0;

        if (reference) {
            CameraPose pose = front_pose(camera_);
            pose.intrinsics = camera_.intrinsics().resized(res, res);
            RayBundle rays = generate_rays(pose);
            opts.compute_normals = false;
            RenderOutput out = volume_render(*field_, rays, opts);
            Image dI, dM;
            loss = reference_view_loss_grad(out.rgb, out.mask, input_rgb_at(res),
                                            input_mask_at(res), schedule_value(w_rgb, gs),
                                            schedule_value(w_mask, gs), dI, dM);
            volume_render_backward(*field_, rays, opts, dI, dM, Image(), grad);
            trace.reference_steps++;
            if (lora_src == "both" || lora_src == "input")
                lora_train_step(input_rgb_at(res), pose, band);
            if (lora_src == "render") lora_train_step(out.rgb, pose, band);
        } else {
            CameraPose pose = sample_novel_pose(rng_, camera_);
            pose.intrinsics = camera_.intrinsics().resized(res, res);
            RayBundle rays = generate_rays(pose);
            double ln = schedule_value(w_normal, gs);
            opts.compute_normals = ln > 0;
            RenderOutput out = volume_render(*field_, rays, opts);

            int t = sample_noise_level(band, schedule_.T, rng_);
            Image eps(res, res, 3);
            for (auto& v : eps.raw()) v = rng_.normal();
            double w = noise_weight(schedule_, t, w_mode);
            if (oracle_) oracle_->set_view(pose);

            Image g;
            double prior_weight;
            if (stage == 1) {
                g = sds_gradient(*backend_, out.rgb, t, prompt_, schedule_, w, eps);
                prior_weight = schedule_value(w_sds, gs);
            } else {
                g = vsd_gradient(*backend_, *lora_, out.rgb, t, prompt_, pose, schedule_,
                                 w, eps);
                prior_weight = schedule_value(w_vsd, gs);
            }
            Image g3 = sds3d_gradient(*backend_, out.rgb, t, input_rgb_at(res),
                                      pose_delta(pose, front_pose(camera_)), schedule_, w, eps);
            double w3 = schedule_value(w_3d, gs);
            Image d_rgb(res, res, 3);
            double raw_sq = 0;
            for (size_t i = 0; i < d_rgb.size(); ++i) {
                double v = prior_weight * g.raw()[i] + w3 * g3.raw()[i];
                d_rgb.raw()[i] = v;
                raw_sq += v * v;
            }
            double rms = std::sqrt(raw_sq / double(d_rgb.size()));
            loss = rms;  // descent proxy for trace purposes
            // The diffusion-time factors in the prior gradient span orders of
            // magnitude across the noise band; normalizing keeps novel-view
            // steps commensurate with the photometric reference steps inside
            // the shared optimizer state.
            double scale = 1.0 / double(d_rgb.size());
            if (normalize_guidance_ && rms > 1e-12) scale = (prior_weight + w3) / (rms * double(d_rgb.size()));
            for (auto& v : d_rgb.raw()) v *= scale;

            Image d_normal;
            if (ln > 0) {
                Image dN;
                double nl = normal_smoothness_grad(out.normal, sample_shift_dir(rng_),
                                                   &out.mask, dN);
                loss += ln * nl;
                d_normal = Image(res, res, 3);
                for (size_t i = 0; i < dN.size(); ++i) d_normal.raw()[i] = ln * dN.raw()[i];
            }
            volume_render_backward(*field_, rays, opts, d_rgb, Image(), d_normal, grad);
            trace.novel_steps++;
            if (lora_src == "both" || lora_src == "render") lora_train_step(out.rgb, pose, band);
        }

        check_finite(loss, stage, s);
        field_opt_.step(field_->params(), grad);
        trace.loss.push_back(loss);
        ++nerf_step_;
    }

    stage_done_ = stage;
    step_in_stage_ = 0;
    trace.final_loss = trace.loss.empty() ? 0 : trace.loss.back();
    trace.front_psnr = front_view_psnr_of(render_view(front_pose(camera_), camera_.width).rgb);
    trace.heldout_psnr = heldout_psnr();
}

void Pipeline::run_stage1() {
    if (stage_done_ >= 1) throw std::runtime_error("stage 1 already completed");
    stage12_loop(1);
}

void Pipeline::run_stage2() {
    if (stage_done_ >= 2) throw std::runtime_error("stage 2 already completed");
    if (stage_done_ < 1 && !cfg_.get_bool("pipeline.allow_cold_lora"))
        throw std::runtime_error(
            "stage 2 requires a stage-1 state (set pipeline.allow_cold_lora to override)");
    stage12_loop(2);
}

TexturedMesh Pipeline::extract_mesh() const {
    const int res = cfg_.get_int("mesh.resolution");
    const double threshold = cfg_.get_double("mesh.threshold");
    const int texsize = cfg_.get_int("mesh.texture_size");

    DensityGrid grid = density_grid(*field_, res, field_->bounds());
    TriMesh tri = marching_cubes(grid, threshold);
    if (tri.empty()) {
        double dmax = 0;
        for (double v : grid.values) dmax = std::max(dmax, v);
        throw std::runtime_error("mesh extraction produced no surface at threshold " +
                                 std::to_string(threshold) + " (grid max density " +
                                 std::to_string(dmax) + ")");
    }
    UnwrappedMesh un = unwrap_uv(tri.vertices, tri.faces, texsize);
    TexturedMesh mesh;
    mesh.vertices = un.vertices;
    mesh.faces = un.faces;
    mesh.uv = un.uv;
    mesh.texture = bake_texture(*field_, un, texsize);
    return mesh;
}

TexturedMesh Pipeline::run_stage3() {
    if (stage_done_ >= 3) throw std::runtime_error("stage 3 already completed");
    if (stage_done_ < 2) throw std::runtime_error("stage 3 requires a stage-2 state");

    const int steps = cfg_.get_int("refine.steps");
    const int res = cfg_.get_int("refine.resolution");
    const int total_nerf = cfg_.get_int("stage1.steps") + cfg_.get_int("stage2.steps");

    RefinableMesh rmesh(extract_mesh(), rng_.next_u64());
    AdamState opt;
    opt.lr = cfg_.get_double("opt.lr_refine");

    WeightSchedule w_normal3;
    w_normal3.name = "lambda_normal_stage3";
    w_normal3.start_value = cfg_.get_double("loss.lambda_normal.stage3_start");
    w_normal3.end_value = cfg_.get_double("loss.lambda_normal.stage3_end");
    w_normal3.start_step = 0;
    w_normal3.end_step = std::max(1, steps - 1);

    Stage3Setup setup;
    setup.backend = backend_.get();
    setup.lora = lora_.get();
    setup.input_rgb = &input_rgb_at(res);
    setup.input_mask = &input_mask_at(res);
    setup.camera = camera_;
    setup.schedule = &schedule_;
    setup.band = bands_.stage23;
    setup.prompt = prompt_;
    setup.w_mode = cfg_.get_str("guidance.w_schedule");
    setup.resolution = res;
    setup.lambda_rgb = schedule_value(ramp(cfg_, "lambda_rgb", total_nerf), total_nerf);
    setup.lambda_mask = schedule_value(ramp(cfg_, "lambda_mask", total_nerf), total_nerf);
    setup.lambda_offset = cfg_.get_double("loss.lambda_offset");
    setup.guidance_weight = schedule_value(ramp(cfg_, "lambda_vsd", total_nerf), total_nerf);
    setup.normalize_guidance = normalize_guidance_;

    StageTrace& trace = traces_[2];
    for (int s = 0; s < steps; ++s) {
        setup.lambda_normal = schedule_value(w_normal3, s);
        Stage3StepMetrics m = stage3_step(rmesh, opt, setup, s, rng_);
        check_finite(m.loss, 3, s);
        trace.loss.push_back(m.loss);
        if (m.reference_step)
            trace.reference_steps++;
        else
            trace.novel_steps++;
    }

    stage_done_ = 3;
    trace.final_loss = trace.loss.empty() ? 0 : trace.loss.back();
    CameraPose front = front_pose(camera_);
    front.intrinsics = camera_.intrinsics().resized(res, res);
    trace.front_psnr = front_view_psnr_of(rasterize(rmesh, front).rgb);
    return rmesh.realized();
}

void Pipeline::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    os.write(kCkptMagic, 8);
    write_u64(os, seed_);
    write_i64(os, stage_done_);
    write_i64(os, step_in_stage_);
    write_i64(os, nerf_step_);
    write_vec(os, field_->params());
    write_adam(os, field_opt_);
    write_vec(os, lora_->params());
    write_adam(os, lora_opt_);
    write_str(os, rng_.serialize());
    for (const auto& t : traces_) {
        write_vec(os, t.loss);
        write_f64(os, t.final_loss);
        write_f64(os, t.front_psnr);
        write_f64(os, t.heldout_psnr);
        write_i64(os, t.reference_steps);
        write_i64(os, t.novel_steps);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

void Pipeline::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint version mismatch or corrupt file: " + path);
    seed_ = read_u64(is);
    stage_done_ = int(read_i64(is));
    step_in_stage_ = int(read_i64(is));
    nerf_step_ = long(read_i64(is));
    std::vector<double> fp = read_vec(is);
    if (fp.size() != field_->param_count())
        throw std::runtime_error("checkpoint does not match the configured field size");
    field_->params() = std::move(fp);
    read_adam(is, field_opt_);
    std::vector<double> lp = read_vec(is);
    if (lp.size() != lora_->param_count())
        throw std::runtime_error("checkpoint does not match the configured adapter size");
    lora_->params() = std::move(lp);
    read_adam(is, lora_opt_);
    rng_.deserialize(read_str(is));
    for (auto& t : traces_) {
        t.loss = read_vec(is);
        t.final_loss = read_f64(is);
        t.front_psnr = read_f64(is);
        t.heldout_psnr = read_f64(is);
        t.reference_steps = int(read_i64(is));
        t.novel_steps = int(read_i64(is));
    }
    if (!is) throw std::runtime_error("checkpoint truncated: " + path);
}

}  // namespace distill3d
