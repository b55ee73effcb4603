#include <benchmark/benchmark.h>

#include "distill3d/field.hpp"
#include "distill3d/mesh_refine.hpp"
#include "distill3d/meshing.hpp"
#include "distill3d/oracle_scene.hpp"

using namespace distill3d;

namespace {

HashGridField make_field() {
    FieldConfig fc;
    fc.levels = 6;
    fc.base_res = 8;
    fc.per_level_scale = 1.5;
    fc.table_log2 = 14;
    fc.feature_dim = 2;
    fc.hidden = 32;
    return HashGridField(fc, 7);
}

CameraPose pose_at(int res) {
    CameraConfig cam;
    CameraPose pose = front_pose(cam);
    pose.intrinsics = cam.intrinsics().resized(res, res);
    return pose;
}

void BM_FieldQuery(benchmark::State& state) {
    HashGridField field = make_field();
    Rng rng(1);
    std::vector<Vec3> pts(1024);
    for (auto& p : pts) p = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    double sigma;
    Vec3 color;
    for (auto _ : state) {
        for (const auto& p : pts) {
            field.query(p, sigma, color);
            benchmark::DoNotOptimize(sigma);
        }
    }
    state.SetItemsProcessed(state.iterations() * int64_t(pts.size()));
}
BENCHMARK(BM_FieldQuery);

void BM_VolumeRender(benchmark::State& state) {
    HashGridField field = make_field();
    const int res = int(state.range(0));
    RayBundle rays = generate_rays(pose_at(res));
    RenderOptions opts;
    opts.samples_per_ray = 32;
    for (auto _ : state) {
        RenderOutput out = volume_render(field, rays, opts);
        benchmark::DoNotOptimize(out.rgb.raw().data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(res) * res);
}
BENCHMARK(BM_VolumeRender)->Arg(32)->Arg(64);

void BM_VolumeRenderBackward(benchmark::State& state) {
    HashGridField field = make_field();
    const int res = int(state.range(0));
    RayBundle rays = generate_rays(pose_at(res));
    RenderOptions opts;
    opts.samples_per_ray = 32;
    Image d_rgb(res, res, 3, 1e-3);
    std::vector<double> grad(field.param_count());
    for (auto _ : state) {
        std::fill(grad.begin(), grad.end(), 0.0);
        volume_render_backward(field, rays, opts, d_rgb, Image(), Image(), grad);
        benchmark::DoNotOptimize(grad.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(res) * res);
}
BENCHMARK(BM_VolumeRenderBackward)->Arg(32);

void BM_MarchingCubes(benchmark::State& state) {
    OracleScene scene;
    AnalyticSphereField field(scene);
    const int n = int(state.range(0));
    DensityGrid grid = density_grid(field, n, field.bounds());
    for (auto _ : state) {
        TriMesh mesh = marching_cubes(grid, 10.0);
        benchmark::DoNotOptimize(mesh.vertices.data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(n) * n * n);
}
BENCHMARK(BM_MarchingCubes)->Arg(32)->Arg(64);

void BM_Rasterize(benchmark::State& state) {
    OracleScene scene;
    AnalyticSphereField field(scene);
    TexturedMesh base = extract_textured_mesh(field, 24, 10.0, 128);
    RefinableMesh mesh(base, 3);
    const int res = int(state.range(0));
    CameraPose pose = pose_at(res);
    for (auto _ : state) {
        RasterOutput out = rasterize(mesh, pose);
        benchmark::DoNotOptimize(out.rgb.raw().data());
    }
    state.SetItemsProcessed(state.iterations() * int64_t(res) * res);
}
BENCHMARK(BM_Rasterize)->Arg(64)->Arg(128);

}  // namespace

BENCHMARK_MAIN();
