// Command-line driver for the three-stage image-to-3D pipeline.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "distill3d/io.hpp"
#include "distill3d/pipeline.hpp"

namespace fs = std::filesystem;
using namespace distill3d;

namespace {

struct Options {
    std::string image;
    std::string prompt = "a small two-tone sphere";
    std::string config_path;
    std::string out;
    std::string resume;
    std::string profile;
    uint64_t seed = 0;
    std::vector<std::string> overrides;  // key=value
    int n_turntable = 8;
    double preview_strength = 0.5;
    int preview_steps = 10;
    int make_input_size = 0;
};

Config build_config(const Options& opt) {
    std::string profile = opt.profile;
    if (profile.empty()) {
        const char* env = std::getenv("DISTILL3D_PROFILE");
        profile = env ? env : "desk";
    }
    Config cfg = Config::profile_defaults(profile);
    if (!opt.config_path.empty()) cfg.load_file(opt.config_path);
    for (const auto& kv : opt.overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("--set expects key=value, got: " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

// Without --image the bundled synthetic scene provides the reference view.
InputImage resolve_input(const Options& opt, const Config& cfg) {
    if (!opt.image.empty()) return load_input(opt.image);
    OracleScene scene;
    if (cfg.has("scene.sphere_radius"))
        scene.sphere_radius = cfg.get_double("scene.sphere_radius");
    CameraConfig cam = CameraConfig::from(cfg);
    Image rgba = scene.render_rgba(front_pose(cam));
    InputImage in;
    in.rgb = Image(rgba.width(), rgba.height(), 3);
    in.mask = Image(rgba.width(), rgba.height(), 1);
    for (int y = 0; y < rgba.height(); ++y)
        for (int x = 0; x < rgba.width(); ++x) {
            double a = rgba.at(x, y, 3);
            in.mask.at(x, y, 0) = a;
            for (int ch = 0; ch < 3; ++ch)
                in.rgb.at(x, y, ch) = rgba.at(x, y, ch) * a + (1.0 - a);
        }
    return in;
}

std::string out_dir(const Options& opt) {
    std::string dir = opt.out.empty() ? timestamped_dir("distill3d_run") : opt.out;
    fs::create_directories(dir);
    return dir;
}

std::unique_ptr<Pipeline> make_pipeline(const Options& opt, const Config& cfg) {
    InputImage in = resolve_input(opt, cfg);
    auto p = std::make_unique<Pipeline>(cfg, in.rgb, in.mask, opt.prompt, opt.seed);
    if (!opt.resume.empty()) p->load_checkpoint(opt.resume);
    return p;
}

Image render_mesh_view(const TexturedMesh& mesh, const CameraConfig& cam,
                       const CameraPose& pose, int res) {
    RefinableMesh rm(mesh, 0);
    CameraPose p = pose;
    p.intrinsics = cam.intrinsics().resized(res, res);
    return rasterize(rm, p).rgb;
}

void write_metrics_and_snapshots(Pipeline& p, const std::string& dir, double wall_s) {
    write_text_file((fs::path(dir) / "metrics.json").string(), metrics_json(p, wall_s));
    CameraConfig cam = CameraConfig::from(p.config());
    write_png((fs::path(dir) / "front_view.png").string(),
              p.render_view(front_pose(cam), cam.width).rgb);
}

int run(const std::string& cmd, const Options& opt) {
    Config cfg = build_config(opt);
    CameraConfig cam = CameraConfig::from(cfg);

    if (cmd == "make-input") {
        OracleScene scene;
        if (cfg.has("scene.sphere_radius"))
            scene.sphere_radius = cfg.get_double("scene.sphere_radius");
        CameraConfig c = cam;
        if (opt.make_input_size > 0) c.width = c.height = opt.make_input_size;
        std::string dir = out_dir(opt);
        std::string path = (fs::path(dir) / "input.png").string();
        write_png(path, scene.render_rgba(front_pose(c)));
        std::cout << path << "\n";
        return 0;
    }

    auto t0 = std::chrono::steady_clock::now();
    auto wall = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    if (cmd == "metrics") {
        if (opt.resume.empty()) throw std::runtime_error("metrics needs --resume <checkpoint>");
        auto p = make_pipeline(opt, cfg);
        std::cout << metrics_json(*p, 0.0);
        return 0;
    }

    if (cmd == "preview") {
        if (opt.resume.empty()) throw std::runtime_error("preview needs --resume <checkpoint>");
        auto p = make_pipeline(opt, cfg);
        std::string dir = out_dir(opt);
        Image base = p->render_view(front_pose(cam), cam.width).rgb;
        Rng rng(opt.seed);
        Image img = lora_preview(p->lora(), base, opt.prompt, front_pose(cam),
                                 opt.preview_strength, opt.preview_steps,
                                 DiffusionSchedule::from(cfg), rng);
        write_png((fs::path(dir) / "preview.png").string(), img);
        return 0;
    }

    auto p = make_pipeline(opt, cfg);
    std::string dir = out_dir(opt);

    auto finish_nerf_stage = [&](int stage) {
        p->save_checkpoint((fs::path(dir) / ("stage" + std::to_string(stage) + ".ckpt")).string());
        std::cout << "stage " << stage << " done: front PSNR "
                  << p->trace(stage).front_psnr << " dB, held-out "
                  << p->trace(stage).heldout_psnr << " dB\n";
    };

    auto do_stage3 = [&] {
        TexturedMesh mesh = p->run_stage3();
        export_obj(mesh, (fs::path(dir) / "mesh").string());
        write_png((fs::path(dir) / "mesh_front.png").string(),
                  render_mesh_view(mesh, cam, front_pose(cam),
                                   cfg.get_int("refine.resolution")));
        turntable([&](const CameraPose& pose) { return p->render_view(pose, cam.width).rgb; },
                  cam, opt.n_turntable, (fs::path(dir) / "turntable").string());
        p->save_checkpoint((fs::path(dir) / "stage3.ckpt").string());
        std::cout << "stage 3 done: mesh front PSNR " << p->trace(3).front_psnr << " dB\n";
    };

    if (cmd == "stage1") {
        p->run_stage1();
        finish_nerf_stage(1);
    } else if (cmd == "stage2") {
        if (opt.resume.empty() && p->stage_done() < 1)
            throw std::runtime_error("stage2 needs --resume <stage-1 checkpoint>");
        p->run_stage2();
        finish_nerf_stage(2);
    } else if (cmd == "stage3") {
        if (opt.resume.empty() && p->stage_done() < 2)
            throw std::runtime_error("stage3 needs --resume <stage-2 checkpoint>");
        do_stage3();
    } else if (cmd == "run-all") {
        if (p->stage_done() < 1) {
            p->run_stage1();
            finish_nerf_stage(1);
        }
        if (p->stage_done() < 2) {
            p->run_stage2();
            finish_nerf_stage(2);
        }
        do_stage3();
    } else {
        throw std::runtime_error("unknown command: " + cmd);
    }

    write_metrics_and_snapshots(*p, dir, wall());
    std::cout << "outputs in " << dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"single-image to textured 3D mesh via staged score distillation"};
    app.require_subcommand(1);

    Options opt;
    std::string cmd;
    for (const char* name : {"stage1", "stage2", "stage3", "run-all", "preview",
                             "metrics", "make-input"}) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--image", opt.image, "input PNG (RGBA, or RGB with sidecar mask)");
        sub->add_option("--prompt", opt.prompt, "text prompt");
        sub->add_option("--config", opt.config_path, "key=value config file");
        sub->add_option("--out", opt.out, "output directory (default: timestamped)");
        sub->add_option("--seed", opt.seed, "rng seed");
        sub->add_option("--profile", opt.profile, "desk or paper (env DISTILL3D_PROFILE)");
        sub->add_option("--resume", opt.resume, "checkpoint to restore before running");
        sub->add_option("--set", opt.overrides, "config override key=value (repeatable)");
        sub->add_option("--views", opt.n_turntable, "turntable view count");
        sub->add_option("--strength", opt.preview_strength, "preview noise strength in [0,1]");
        sub->add_option("--steps", opt.preview_steps, "preview denoise steps");
        sub->add_option("--size", opt.make_input_size, "make-input image size");
        sub->callback([&cmd, name] { cmd = name; });
    }

    CLI11_PARSE(app, argc, argv);

    try {
        return run(cmd, opt);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
