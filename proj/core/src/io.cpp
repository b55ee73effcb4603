#include "distill3d/io.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace distill3d {

InputImage load_input(const std::string& path) {
    Image raw = read_png(path);
    InputImage in;
    in.rgb = Image(raw.width(), raw.height(), 3);
    in.mask = Image(raw.width(), raw.height(), 1);

    if (raw.channels() == 4) {
        for (int y = 0; y < raw.height(); ++y)
            for (int x = 0; x < raw.width(); ++x) {
                double a = raw.at(x, y, 3);
                in.mask.at(x, y, 0) = a;
                for (int ch = 0; ch < 3; ++ch)
                    in.rgb.at(x, y, ch) = raw.at(x, y, ch) * a + (1.0 - a);
            }
        return in;
    }

    std::filesystem::path p(path);
    std::filesystem::path side = p.parent_path() / (p.stem().string() + "_mask.png");
    if (!std::filesystem::exists(side))
        throw std::runtime_error("input " + path +
                                 " has no alpha channel; supply a mask as " + side.string());
    Image m = read_png(side.string());
    if (m.width() != raw.width() || m.height() != raw.height())
        throw std::runtime_error("mask " + side.string() + " does not match the input size");
    for (int y = 0; y < raw.height(); ++y)
        for (int x = 0; x < raw.width(); ++x) {
            double a = m.at(x, y, 0);  // grayscale masks arrive expanded to rgb
            in.mask.at(x, y, 0) = a;
            for (int ch = 0; ch < 3; ++ch)
                in.rgb.at(x, y, ch) = raw.at(x, y, ch) * a + (1.0 - a);
        }
    return in;
}

double psnr(const Image& a, const Image& b) {
    double m = mse(a, b);
    if (m <= 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / m);
}

double psnr_capped(const Image& a, const Image& b) { return std::min(99.0, psnr(a, b)); }

void turntable(const std::function<Image(const CameraPose&)>& render,
               const CameraConfig& cam, int n_views, const std::string& out_dir) {
    if (n_views < 1) throw std::invalid_argument("turntable: n_views must be >= 1");
    std::filesystem::create_directories(out_dir);
    for (int i = 0; i < n_views; ++i) {
        CameraPose pose = front_pose(cam);
        pose.azimuth_deg = 360.0 * i / n_views;
        char name[32];
        std::snprintf(name, sizeof(name), "view_%03d.png", i);
        write_png((std::filesystem::path(out_dir) / name).string(), render(pose));
    }
}

std::string timestamped_dir(const std::string& prefix) {
    auto now = std::chrono::system_clock::now().time_since_epoch();
    auto us = std::chrono::duration_cast<std::chrono::microseconds>(now).count();
    return prefix + "_" + std::to_string(us);
}

std::string metrics_json(const Pipeline& pipeline, double wall_time_s) {
    nlohmann::ordered_json j;
    j["seed"] = pipeline.seed();
    j["backend"] = pipeline.config().get_str("guidance.backend");
    j["stages_completed"] = pipeline.stage_done();
    const char* names[3] = {"stage1", "stage2", "stage3"};
    for (int s = 1; s <= 3; ++s) {
        const StageTrace& t = pipeline.trace(s);
        std::string k = names[s - 1];
        j[k + ".steps"] = t.loss.size();
        j[k + ".final_loss"] = t.final_loss;
        j[k + ".front_psnr"] = std::min(99.0, t.front_psnr);
        if (s < 3) j[k + ".heldout_psnr"] = std::min(99.0, t.heldout_psnr);
        j[k + ".reference_steps"] = t.reference_steps;
        j[k + ".novel_steps"] = t.novel_steps;
    }
    j["wall_time_s"] = wall_time_s;
    return j.dump(2) + "\n";
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write file: " + path);
    os << text;
}

}  // namespace distill3d
