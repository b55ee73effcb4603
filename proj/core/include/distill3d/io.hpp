#pragma once

#include <functional>
#include <string>

#include "distill3d/camera.hpp"
#include "distill3d/image.hpp"
#include "distill3d/pipeline.hpp"

namespace distill3d {

struct InputImage {
    Image rgb;   // [0,1], pre-composited over white outside the mask
    Image mask;  // [0,1], single channel
};

// Loads a PNG input. RGBA images take the mask from alpha; RGB images need a
// sidecar "<name>_mask.png" next to the file.
InputImage load_input(const std::string& path);

// 10*log10(1/MSE); identical images give +infinity. Metrics files cap at 99.
double psnr(const Image& a, const Image& b);
double psnr_capped(const Image& a, const Image& b);

// Renders n equally spaced azimuths at polar 90 and writes
// out_dir/view_###.png. View 0 is the front pose.
void turntable(const std::function<Image(const CameraPose&)>& render,
               const CameraConfig& cam, int n_views, const std::string& out_dir);

struct RunManifest {
    std::string image_path;
    std::string prompt;
    std::string config_path;  // optional
    std::string out_dir;
    uint64_t seed = 0;
    std::string profile = "desk";
    std::string stages;  // "stage1" | "stage2" | "stage3" | "run-all"
};

// Unique run directory: prefix plus a timestamp suffix.
std::string timestamped_dir(const std::string& prefix);

// Flat JSON with per-stage losses, PSNR numbers, step counts and wall time.
// Everything except wall_time_s is deterministic at fixed seed.
std::string metrics_json(const Pipeline& pipeline, double wall_time_s);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace distill3d
