#include <doctest.h>

#include <cmath>
#include <vector>

#include "distill3d/mesh_refine.hpp"

using namespace distill3d;

namespace {

TexturedMesh single_triangle() {
    TexturedMesh m;
    m.vertices = {{0, -0.5, -0.5}, {0, 0.5, -0.5}, {0, 0, 0.5}};
    m.faces = {{0, 1, 2}};
    m.uv = {{0.1, 0.1}, {0.9, 0.1}, {0.5, 0.9}};
    m.texture = Image(32, 32, 3);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            m.texture.at(x, y, 0) = x / 31.0;
            m.texture.at(x, y, 1) = y / 31.0;
            m.texture.at(x, y, 2) = 0.5;
        }
    return m;
}

CameraPose view(int res) {
    CameraConfig cam;
    CameraPose pose = front_pose(cam);
    pose.intrinsics = cam.intrinsics().resized(res, res);
    return pose;
}

struct ExactNoiseLora : LoraPredictor {
    const Image* eps = nullptr;
    Image predict(const Image&, int, const std::string&, const CameraPose&) const override {
        return *eps;
    }
};

}  // namespace

TEST_CASE("fresh refinement state reproduces the base mesh exactly") {
    TexturedMesh base = single_triangle();
    RefinableMesh mesh(base, 99);
    TexturedMesh out = mesh.realized();
    REQUIRE(out.vertices.size() == base.vertices.size());
    for (size_t i = 0; i < base.vertices.size(); ++i) {
        CHECK(norm(out.vertices[i] - base.vertices[i]) < 1e-12);
        CHECK(std::abs(out.uv[i].u - base.uv[i].u) < 1e-12);
        CHECK(std::abs(out.uv[i].v - base.uv[i].v) < 1e-12);
    }
    CHECK(max_abs_diff(out.texture, base.texture) < 1e-12);
    CHECK(mesh.max_offset_norm() == 0.0);

    Image a = rasterize(mesh, view(32)).rgb;
    Image b = rasterize(mesh, view(32)).rgb;
    CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_CASE("texture gradients through the rasterizer match finite differences") {
    RefinableMesh mesh(single_triangle(), 1);
    CameraPose pose = view(24);

    Rng rng(3);
    Image d_rgb(24, 24, 3);
    for (auto& v : d_rgb.raw()) v = rng.uniform(-1, 1);

    auto loss = [&](const RefinableMesh& m) {
        Image rgb = rasterize(m, pose).rgb;
        double L = 0;
        for (size_t i = 0; i < rgb.size(); ++i) L += d_rgb.raw()[i] * rgb.raw()[i];
        return L;
    };

    RasterCache cache;
    rasterize(mesh, pose, &cache);
    std::vector<double> grad(mesh.param_count(), 0.0);
    rasterize_backward(mesh, pose, cache, d_rgb, Image(), grad);

    std::vector<size_t> active;
    for (size_t i = mesh.off_texture(); i < mesh.param_count(); ++i)
        if (std::abs(grad[i]) > 1e-6) active.push_back(i);
    REQUIRE(!active.empty());

    const double h = 1e-6;
    size_t stride = active.size() / 12 + 1;
    int checked = 0;
    for (size_t n = 0; n < active.size(); n += stride) {
        size_t i = active[n];
        RefinableMesh mp = mesh, mm = mesh;
        mp.params()[i] += h;
        mm.params()[i] -= h;
        double fd = (loss(mp) - loss(mm)) / (2 * h);
        CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-3));
        ++checked;
    }
    CHECK(checked > 0);
}

TEST_CASE("vertex and uv-warp gradients match finite differences on interior pixels") {
    RefinableMesh mesh(single_triangle(), 1);
    // give the uv warp a nonzero final layer so the latent offsets see gradient
    {
        Rng r(5);
        for (size_t i = mesh.off_mlp(); i < mesh.off_texture(); ++i)
            mesh.params()[i] += 0.02 * r.normal();
        for (size_t i = mesh.off_delta_uv(); i < mesh.off_mlp(); ++i)
            mesh.params()[i] = 0.05 * r.normal();
    }
    CameraPose pose = view(24);

    RasterCache cache;
    rasterize(mesh, pose, &cache);

    // restrict the loss to pixels well inside the triangle so tiny vertex
    // moves cannot flip visibility
    Image d_rgb(24, 24, 3, 0.0);
    Rng rng(7);
    int interior = 0;
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x) {
            size_t idx = size_t(y) * 24 + x;
            if (cache.face[idx] < 0) continue;
            double b0 = cache.bary[idx * 3], b1 = cache.bary[idx * 3 + 1],
                   b2 = cache.bary[idx * 3 + 2];
            if (std::min({b0, b1, b2}) < 0.15) continue;
            for (int ch = 0; ch < 3; ++ch) d_rgb.at(x, y, ch) = rng.uniform(-1, 1);
            ++interior;
        }
    REQUIRE(interior > 4);

    auto loss = [&](const RefinableMesh& m) {
        Image rgb = rasterize(m, pose).rgb;
        double L = 0;
        for (size_t i = 0; i < rgb.size(); ++i) L += d_rgb.raw()[i] * rgb.raw()[i];
        return L;
    };

    std::vector<double> grad(mesh.param_count(), 0.0);
    rasterize_backward(mesh, pose, cache, d_rgb, Image(), grad);

    const double h = 1e-6;
    auto check_range = [&](size_t lo, size_t hi, size_t stride, double tol) {
        int checked = 0;
        for (size_t i = lo; i < hi; i += stride) {
            if (std::abs(grad[i]) < 1e-7) continue;
            RefinableMesh mp = mesh, mm = mesh;
            mp.params()[i] += h;
            mm.params()[i] -= h;
            double fd = (loss(mp) - loss(mm)) / (2 * h);
            CHECK(grad[i] == doctest::Approx(fd).epsilon(tol));
            ++checked;
        }
        return checked;
    };

    CHECK(check_range(mesh.off_delta_vec(), mesh.off_delta_uv(), 1, 2e-3) > 0);
    CHECK(check_range(mesh.off_delta_uv(), mesh.off_mlp(), 1, 2e-3) > 0);
    CHECK(check_range(mesh.off_mlp(), mesh.off_texture(), 13, 2e-3) > 0);
}

TEST_CASE("lateral vertex translation shifts the silhouette by the projected amount") {
    RefinableMesh mesh(single_triangle(), 1);
    CameraPose pose = view(48);

    auto centroid_x = [&](const RefinableMesh& m) {
        Image mask = rasterize(m, pose).mask;
        double sx = 0, n = 0;
        for (int y = 0; y < 48; ++y)
            for (int x = 0; x < 48; ++x)
                if (mask.at(x, y, 0) > 0.5) {
                    sx += x;
                    n += 1;
                }
        REQUIRE(n > 0);
        return sx / n;
    };

    double before = centroid_x(mesh);
    const double dy = 0.05;  // world y is screen-horizontal from the front pose
    for (int s = 0; s < mesh.offset_slots(); ++s) mesh.params()[s * 3 + 1] = dy;
    double after = centroid_x(mesh);

    double f = pose.intrinsics.focal;
    double expected_px = f * dy / 2.0;  // depth of the triangle plane
    CHECK(std::abs((after - before) - expected_px) <= 1.0);
}

TEST_CASE("refine gradient follows the adapter residual") {
    DiffusionSchedule s = DiffusionSchedule::linear(1000);
    OracleScene scene;
    CameraConfig cam;
    OracleBackend oracle(scene, s, cam);
    CameraPose pose = front_pose(cam);
    pose.intrinsics = cam.intrinsics().resized(16, 16);
    oracle.set_view(pose);
    Image target = oracle.target_for(pose, 16, 16);

    Rng rng(12);
    Image I(16, 16, 3);
    for (auto& v : I.raw()) v = rng.uniform();
    Image eps(16, 16, 3);
    for (auto& v : eps.raw()) v = rng.normal();
    int t = 200;
    double w = noise_weight(s, t, "one_minus_alpha_bar");

    ExactNoiseLora exact;
    exact.eps = &eps;
    Image g0 = refine_gradient(exact, oracle, I, t, "y", pose, s, w, eps);
    for (double v : g0.raw()) CHECK(v == 0.0);

    // zero-initialized adapter over the oracle base: the residual is the
    // oracle pull toward the pose target
    LoraModule lora(&oracle, 4, s.T, 3);
    Image g = refine_gradient(lora, oracle, I, t, "y", pose, s, w, eps);
    double k = w * std::sqrt(s.abar(t) / (1 - s.abar(t)));
    for (size_t i = 0; i < g.size(); ++i)
        CHECK(g.raw()[i] == doctest::Approx(k * (I.raw()[i] - target.raw()[i])).epsilon(1e-9));
    CHECK(g.width() == I.width());
}

TEST_CASE("with only the offset penalty active the offsets decay monotonically") {
    OracleScene scene;
    AnalyticSphereField field(scene);
    TexturedMesh base = extract_textured_mesh(field, 16, 10.0, 64);
    RefinableMesh mesh(base, 4);

    Rng seed_rng(2);
    for (int s = 0; s < mesh.offset_slots() * 3; ++s)
        mesh.params()[s] = 0.01 * seed_rng.normal();

    DiffusionSchedule sch = DiffusionSchedule::linear(1000);
    CameraConfig cam;
    OracleBackend oracle(scene, sch, cam);
    LoraModule lora(&oracle, 4, sch.T, 3);
    Image input = scene.render_rgb(front_pose(cam));
    Image mask(input.width(), input.height(), 1, 1.0);

    Stage3Setup setup;
    setup.backend = &oracle;
    setup.lora = &lora;
    setup.input_rgb = &input;
    setup.input_mask = &mask;
    setup.camera = cam;
    setup.schedule = &sch;
    setup.band = {0.02, 0.45};
    setup.resolution = input.width();
    setup.lambda_normal = 0;
    setup.guidance_weight = 0;
    setup.lambda_offset = 1.0;
    setup.alternate_views = false;  // novel-only steps, guidance zeroed

    AdamState opt;
    opt.lr = 1e-3;
    Rng rng(6);
    double prev = mesh.max_offset_norm();
    CHECK(prev > 0);
    for (int s = 0; s < 20; ++s) {
        stage3_step(mesh, opt, setup, s, rng);
        double now = mesh.max_offset_norm();
        CHECK(now < prev + 1e-12);
        prev = now;
    }
}

TEST_CASE("a one-pixel target sends gradient to texture, uv offsets, and vertex offsets") {
    RefinableMesh mesh(single_triangle(), 1);
    Rng r(9);
    for (size_t i = mesh.off_mlp(); i < mesh.off_texture(); ++i)
        mesh.params()[i] += 0.02 * r.normal();

    CameraPose pose = view(24);
    RasterCache cache;
    rasterize(mesh, pose, &cache);

    Image d_rgb(24, 24, 3, 0.0);
    bool set = false;
    for (int y = 0; y < 24 && !set; ++y)
        for (int x = 0; x < 24 && !set; ++x)
            if (cache.face[size_t(y) * 24 + x] >= 0) {
                d_rgb.at(x, y, 0) = 1.0;
                set = true;
            }
    REQUIRE(set);

    std::vector<double> grad(mesh.param_count(), 0.0);
    rasterize_backward(mesh, pose, cache, d_rgb, Image(), grad);

    auto section_nonzero = [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i)
            if (grad[i] != 0.0) return true;
        return false;
    };
    CHECK(section_nonzero(mesh.off_delta_vec(), mesh.off_delta_uv()));
    CHECK(section_nonzero(mesh.off_delta_uv(), mesh.off_mlp()));
    CHECK(section_nonzero(mesh.off_texture(), mesh.param_count()));
}
