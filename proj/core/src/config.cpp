#include "distill3d/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace distill3d {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

Config Config::profile_defaults(const std::string& profile) {
    Config c;
    auto& kv = c.kv_;

    // Camera (shared by all stages; intrinsics fixed for a run).
    kv["camera.radius"] = "2.0";
    kv["camera.fov_deg"] = "49.1";
    kv["camera.polar_min"] = "60";
    kv["camera.polar_max"] = "150";

    // Diffusion machinery.
    kv["diffusion.T"] = "1000";
    kv["diffusion.schedule"] = "linear";
    kv["guidance.backend"] = "oracle";
    kv["guidance.t_band_stage1"] = "0.5,0.98";
    kv["guidance.t_band_stage23"] = "0.02,0.45";
    kv["guidance.w_schedule"] = "one_minus_alpha_bar";
    kv["guidance.cfg_scale"] = "1";
    kv["guidance.lora_rank"] = "4";
    // Scale-free guidance: divide the per-step prior gradient by its RMS so
    // its Adam contribution is commensurate with the photometric terms.
    kv["guidance.normalize"] = "true";

    // Loss weights; linear schedules run over total NeRF training steps
    // (stages 1+2), lambda_normal has a separate stage-3 ramp.
    kv["loss.lambda_rgb.start"] = "100";
    kv["loss.lambda_rgb.end"] = "1000";
    kv["loss.lambda_mask.start"] = "50";
    kv["loss.lambda_mask.end"] = "500";
    kv["loss.lambda_normal.start"] = "0";
    kv["loss.lambda_normal.end"] = "100";
    kv["loss.lambda_normal.stage3_start"] = "100";
    kv["loss.lambda_normal.stage3_end"] = "10";
    kv["loss.lambda_sds.start"] = "0.2";
    kv["loss.lambda_sds.end"] = "0.2";
    kv["loss.lambda_3d.start"] = "1";
    kv["loss.lambda_3d.end"] = "1";
    kv["loss.lambda_vsd.start"] = "1";
    kv["loss.lambda_vsd.end"] = "1";
    kv["loss.lambda_offset"] = "1.0";

    // Pipeline behavior.
    kv["pipeline.alternation"] = "1";  // reference:novel = 1:1
    kv["pipeline.allow_cold_lora"] = "false";
    kv["pipeline.lora_train_source"] = "both";  // both | render | input
    kv["pipeline.heldout_views"] = "8";

    // Mesh extraction and refinement.
    kv["mesh.threshold"] = "10";
    kv["scene.sphere_radius"] = "0.45";

    kv["opt.lr_lora"] = "0.01";

    if (profile == "paper") {
        kv["camera.width"] = "512";
        kv["camera.height"] = "512";
        kv["stage1.steps"] = "1500";
        kv["stage1.res_low"] = "64";
        kv["stage1.res_high"] = "128";
        kv["stage1.res_switch_step"] = "500";
        kv["stage2.steps"] = "3500";
        kv["stage2.novel_res"] = "256";
        kv["stage2.ref_res"] = "512";
        kv["refine.steps"] = "2000";
        kv["refine.resolution"] = "800";
        kv["mesh.resolution"] = "512";
        kv["mesh.texture_size"] = "1024";
        kv["field.levels"] = "12";
        kv["field.base_res"] = "16";
        kv["field.per_level_scale"] = "1.45";
        kv["field.table_log2"] = "17";
        kv["field.feature_dim"] = "2";
        kv["field.hidden"] = "64";
        kv["field.samples_per_ray"] = "64";
        kv["opt.lr_field"] = "0.01";
        kv["opt.lr_refine"] = "0.0001";
    } else if (profile == "desk") {
        kv["camera.width"] = "64";
        kv["camera.height"] = "64";
        kv["stage1.steps"] = "300";
        kv["stage1.res_low"] = "48";
        kv["stage1.res_high"] = "64";
        kv["stage1.res_switch_step"] = "100";
        kv["stage2.steps"] = "500";
        kv["stage2.novel_res"] = "64";
        kv["stage2.ref_res"] = "96";
        kv["refine.steps"] = "200";
        kv["refine.resolution"] = "128";
        kv["mesh.resolution"] = "64";
        // Charts are per-triangle; a 64^3 extraction needs this many texels
        // for each chart to span several of them.
        kv["mesh.texture_size"] = "512";
        kv["field.levels"] = "6";
        kv["field.base_res"] = "16";
        kv["field.per_level_scale"] = "1.45";
        kv["field.table_log2"] = "14";
        kv["field.feature_dim"] = "2";
        kv["field.hidden"] = "32";
        kv["field.samples_per_ray"] = "32";
        kv["opt.lr_field"] = "0.01";
        kv["opt.lr_refine"] = "0.002";
        // With RMS-normalized guidance the prior weights compete directly
        // with the photometric weights (100..1000); at desk scale the novel
        // views carry most of the shape information, so weight them up.
        kv["loss.lambda_sds.start"] = "50";
        kv["loss.lambda_sds.end"] = "50";
        kv["loss.lambda_3d.start"] = "100";
        kv["loss.lambda_3d.end"] = "100";
        kv["loss.lambda_vsd.start"] = "20";
        kv["loss.lambda_vsd.end"] = "20";
    } else {
        throw std::invalid_argument("unknown profile: " + profile);
    }
    return c;
}

void Config::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty key");
        kv_[key] = val;
    }
}

void Config::set(const std::string& key, const std::string& value) { kv_[key] = value; }

bool Config::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string Config::get_str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::out_of_range("missing config key: " + key);
    return it->second;
}

double Config::get_double(const std::string& key) const {
    try {
        return std::stod(get_str(key));
    } catch (const std::invalid_argument&) {
        throw std::runtime_error("config key " + key + " is not a number");
    }
}

int Config::get_int(const std::string& key) const {
    try {
        return std::stoi(get_str(key));
    } catch (const std::invalid_argument&) {
        throw std::runtime_error("config key " + key + " is not an integer");
    }
}

bool Config::get_bool(const std::string& key) const {
    std::string v = get_str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::runtime_error("config key " + key + " is not a boolean");
}

std::pair<double, double> Config::get_pair(const std::string& key) const {
    std::string v = get_str(key);
    for (auto& ch : v)
        if (ch == ',') ch = ' ';
    std::istringstream is(v);
    double a, b;
    if (!(is >> a >> b)) throw std::runtime_error("config key " + key + " is not a pair");
    return {a, b};
}

}  // namespace distill3d
