#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "distill3d/io.hpp"
#include "distill3d/pipeline.hpp"

using namespace distill3d;

namespace {

Config tiny_config() {
    Config cfg = Config::profile_defaults("desk");
    cfg.set("camera.width", "32");
    cfg.set("camera.height", "32");
    cfg.set("stage1.steps", "8");
    cfg.set("stage1.res_low", "24");
    cfg.set("stage1.res_high", "32");
    cfg.set("stage1.res_switch_step", "4");
    cfg.set("stage2.steps", "8");
    cfg.set("stage2.novel_res", "24");
    cfg.set("stage2.ref_res", "32");
    cfg.set("refine.steps", "4");
    cfg.set("refine.resolution", "48");
    cfg.set("mesh.resolution", "24");
    cfg.set("mesh.texture_size", "64");
    cfg.set("mesh.threshold", "0.05");
    cfg.set("field.samples_per_ray", "16");
    return cfg;
}

InputImage oracle_input(const Config& cfg) {
    OracleScene scene;
    CameraConfig cam = CameraConfig::from(cfg);
    InputImage in;
    in.rgb = Image(cam.width, cam.height, 3);
    in.mask = Image(cam.width, cam.height, 1);
    CameraPose pose = front_pose(cam);
    pose.intrinsics = cam.intrinsics();
    scene.render(pose, in.rgb, in.mask);
    return in;
}

}  // namespace

TEST_CASE("stage 1 alternates reference and novel steps evenly") {
    Config cfg = tiny_config();
    InputImage in = oracle_input(cfg);
    Pipeline p(cfg, in.rgb, in.mask, "sphere", 1);
    p.run_stage1();
    const StageTrace& t = p.trace(1);
    CHECK(int(t.loss.size()) == 8);
    CHECK(std::abs(t.reference_steps - t.novel_steps) <= 1);
    for (double l : t.loss) CHECK(std::isfinite(l));
}

TEST_CASE("stage ordering is enforced with an ablation escape hatch") {
    Config cfg = tiny_config();
    InputImage in = oracle_input(cfg);
    Pipeline p(cfg, in.rgb, in.mask, "sphere", 1);
    CHECK_THROWS(p.run_stage2());
    CHECK_THROWS(p.run_stage3());

    Config cold = tiny_config();
    cold.set("pipeline.allow_cold_lora", "true");
    cold.set("stage2.steps", "2");
    Pipeline q(cold, in.rgb, in.mask, "sphere", 1);
    CHECK_NOTHROW(q.run_stage2());
}

TEST_CASE("the adapter trains across stage boundaries") {
    Config cfg = tiny_config();
    InputImage in = oracle_input(cfg);
    Pipeline p(cfg, in.rgb, in.mask, "sphere", 1);
    std::vector<double> before = p.lora().params();
    p.run_stage1();
    std::vector<double> mid = p.lora().params();
    CHECK(mid != before);
    p.run_stage2();
    CHECK(p.lora().params() != mid);
}

TEST_CASE("fixed seeds give bitwise-identical training traces") {
    Config cfg = tiny_config();
    InputImage in = oracle_input(cfg);
    Pipeline a(cfg, in.rgb, in.mask, "sphere", 5);
    Pipeline b(cfg, in.rgb, in.mask, "sphere", 5);
    a.run_stage1();
    b.run_stage1();
    CHECK(a.trace(1).loss == b.trace(1).loss);
    CHECK(a.field().params() == b.field().params());
}

TEST_CASE("checkpoints round-trip bit-identically and resume the trajectory") {
    Config cfg = tiny_config();
    InputImage in = oracle_input(cfg);
    std::string path = "/tmp/d3d_test_ckpt.bin";

    Pipeline a(cfg, in.rgb, in.mask, "sphere", 9);
    a.run_stage1();
    a.save_checkpoint(path);

    Pipeline b(cfg, in.rgb, in.mask, "sphere", 9);
    b.load_checkpoint(path);
    CHECK(b.stage_done() == 1);
    CHECK(b.field().params() == a.field().params());
    CHECK(b.lora().params() == a.lora().params());
    CHECK(b.trace(1).loss == a.trace(1).loss);

    a.run_stage2();
    b.run_stage2();
    CHECK(a.trace(2).loss == b.trace(2).loss);
    CHECK(a.field().params() == b.field().params());
    std::remove(path.c_str());
}

TEST_CASE("corrupt or wrong-version checkpoints are rejected") {
    Config cfg = tiny_config();
    InputImage in = oracle_input(cfg);
    Pipeline p(cfg, in.rgb, in.mask, "sphere", 9);

    std::string path = "/tmp/d3d_test_ckpt_bad.bin";
    {
        std::ofstream os(path, std::ios::binary);
        os << "D3DCK999 and then garbage";
    }
    CHECK_THROWS(p.load_checkpoint(path));
    CHECK_THROWS(p.load_checkpoint("/tmp/no_such_checkpoint.bin"));
    std::remove(path.c_str());
}

TEST_CASE("zero refinement steps return the freshly baked mesh") {
    Config cfg = tiny_config();
    cfg.set("refine.steps", "0");
    InputImage in = oracle_input(cfg);
    Pipeline p(cfg, in.rgb, in.mask, "sphere", 2);
    p.run_stage1();
    p.run_stage2();
    TexturedMesh baked = p.extract_mesh();
    TexturedMesh refined = p.run_stage3();
    REQUIRE(refined.vertices.size() == baked.vertices.size());
    double vmax = 0;
    for (size_t i = 0; i < baked.vertices.size(); ++i)
        vmax = std::max(vmax, norm(refined.vertices[i] - baked.vertices[i]));
    CHECK(vmax < 1e-12);
    CHECK(max_abs_diff(refined.texture, baked.texture) < 1e-12);
}

TEST_CASE("failed extraction reports the grid's maximum density") {
    Config cfg = tiny_config();
    cfg.set("mesh.threshold", "1000000");
    InputImage in = oracle_input(cfg);
    Pipeline p(cfg, in.rgb, in.mask, "sphere", 2);
    try {
        p.extract_mesh();
        FAIL("expected an extraction error");
    } catch (const std::exception& e) {
        CHECK(std::string(e.what()).find("max density") != std::string::npos);
    }
}

TEST_CASE("empty masks are rejected at construction") {
    Config cfg = tiny_config();
    InputImage in = oracle_input(cfg);
    Image empty_mask(in.mask.width(), in.mask.height(), 1, 0.0);
    CHECK_THROWS(Pipeline(cfg, in.rgb, empty_mask, "sphere", 1));
}
