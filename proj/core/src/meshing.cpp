#include "distill3d/meshing.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "distill3d/mc_tables.hpp"

namespace distill3d {

namespace {

// Corner offsets in the Bourke layout.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeEnds[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                  {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

inline double tri_area(const Vec3& a, const Vec3& b, const Vec3& c) {
    return 0.5 * norm(cross(b - a, c - a));
}

}  // namespace

TriMesh marching_cubes(const DensityGrid& grid, double threshold) {
    if (grid.nx < 2 || grid.ny < 2 || grid.nz < 2)
        throw std::invalid_argument("marching_cubes: grid must be >= 2 per axis");
    if (!std::isfinite(threshold))
        throw std::invalid_argument("marching_cubes: threshold must be finite");

    TriMesh mesh;
    // Canonical key for a lattice edge: packed ids of its two endpoints.
    // Indices are shifted by one because the sweep visits a one-cell apron of
    // virtual below-threshold samples around the grid, which closes surfaces
    // that would otherwise run into the grid boundary.
    auto point_id = [&](int i, int j, int k) {
        return uint64_t((size_t(k + 1) * (grid.ny + 2) + (j + 1)) * (grid.nx + 2) + (i + 1));
    };
    auto sample = [&](int i, int j, int k) {
        if (i < 0 || j < 0 || k < 0 || i >= grid.nx || j >= grid.ny || k >= grid.nz)
            return threshold - 1.0;
        return grid.at(i, j, k);
    };
    std::unordered_map<uint64_t, int> edge_vertex;
    edge_vertex.reserve(1 << 16);

    Vec3 ext = grid.bounds.extent();
    auto lattice_pos = [&](int i, int j, int k) {
        return Vec3{grid.bounds.lo.x + ext.x * i / double(grid.nx - 1),
                    grid.bounds.lo.y + ext.y * j / double(grid.ny - 1),
                    grid.bounds.lo.z + ext.z * k / double(grid.nz - 1)};
    };

    for (int k = -1; k < grid.nz; ++k)
        for (int j = -1; j < grid.ny; ++j)
            for (int i = -1; i < grid.nx; ++i) {
                double val[8];
                int ci[8][3];
                int cube = 0;
                for (int c = 0; c < 8; ++c) {
                    ci[c][0] = i + kCorner[c][0];
                    ci[c][1] = j + kCorner[c][1];
                    ci[c][2] = k + kCorner[c][2];
                    val[c] = sample(ci[c][0], ci[c][1], ci[c][2]);
                    if (val[c] < threshold) cube |= 1 << c;
                }
                if (!kMcEdgeTable[cube]) continue;

                int edge_v[12];
                for (int e = 0; e < 12; ++e) {
                    if (!(kMcEdgeTable[cube] & (1 << e))) continue;
                    int a = kEdgeEnds[e][0], b = kEdgeEnds[e][1];
                    uint64_t ida = point_id(ci[a][0], ci[a][1], ci[a][2]);
                    uint64_t idb = point_id(ci[b][0], ci[b][1], ci[b][2]);
                    uint64_t key = ida < idb ? (ida << 32 | idb) : (idb << 32 | ida);
                    auto it = edge_vertex.find(key);
                    if (it != edge_vertex.end()) {
                        edge_v[e] = it->second;
                        continue;
                    }
                    double denom = val[b] - val[a];
                    double t = std::abs(denom) < 1e-12 ? 0.5 : (threshold - val[a]) / denom;
                    t = std::clamp(t, 0.0, 1.0);
                    Vec3 pa = lattice_pos(ci[a][0], ci[a][1], ci[a][2]);
                    Vec3 pb = lattice_pos(ci[b][0], ci[b][1], ci[b][2]);
                    int idx = int(mesh.vertices.size());
                    mesh.vertices.push_back(pa + (pb - pa) * t);
                    edge_vertex.emplace(key, idx);
                    edge_v[e] = idx;
                }

                for (int n = 0; kMcTriTable[cube][n] != -1; n += 3)
                    mesh.faces.push_back({edge_v[kMcTriTable[cube][n]],
                                          edge_v[kMcTriTable[cube][n + 1]],
                                          edge_v[kMcTriTable[cube][n + 2]]});
            }

    // Degenerate cleanup.
    std::vector<std::array<int, 3>> kept;
    kept.reserve(mesh.faces.size());
    for (const auto& f : mesh.faces) {
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2]) continue;
        if (tri_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]) < 1e-12)
            continue;
        kept.push_back(f);
    }
    mesh.faces = std::move(kept);
    return mesh;
}

std::vector<Vec3> vertex_colors(const ScalarField& field, const std::vector<Vec3>& vertices) {
    std::vector<Vec3> colors;
    colors.reserve(vertices.size());
    for (const auto& v : vertices) colors.push_back(field.color_at(v));
    return colors;
}

UnwrappedMesh PerTriangleUnwrapper::unwrap(const std::vector<Vec3>& vertices,
                                           const std::vector<std::array<int, 3>>& faces,
                                           int texture_size) const {
    UnwrappedMesh out;
    const int n = int(faces.size());
    out.chart_count = n;
    if (n == 0) return out;

    int cells = int(std::ceil(std::sqrt(double(n))));
    double cell = 1.0 / cells;
    // >= 1 texel of gutter at the default texture size
    double margin = std::max(1.5 / double(texture_size), 0.05 * cell);

    out.vertices.reserve(size_t(n) * 3);
    out.uv.reserve(size_t(n) * 3);
    out.faces.reserve(n);
    for (int f = 0; f < n; ++f) {
        int cx = f % cells, cy = f / cells;
        double u0 = cx * cell + margin, v0 = cy * cell + margin;
        double u1 = (cx + 1) * cell - margin, v1 = (cy + 1) * cell - margin;
        int base = int(out.vertices.size());
        for (int k = 0; k < 3; ++k) out.vertices.push_back(vertices[faces[f][k]]);
        out.uv.push_back({u0, v0});
        out.uv.push_back({u1, v0});
        out.uv.push_back({u0, v1});
        out.faces.push_back({base, base + 1, base + 2});
    }
    return out;
}

UnwrappedMesh unwrap_uv(const std::vector<Vec3>& vertices,
                        const std::vector<std::array<int, 3>>& faces, int texture_size) {
    return PerTriangleUnwrapper().unwrap(vertices, faces, texture_size);
}

Image bake_texture(const ScalarField& field, const UnwrappedMesh& mesh, int texture_size) {
    Image tex(texture_size, texture_size, 3, 0.0);
    std::vector<uint8_t> covered(size_t(texture_size) * texture_size, 0);

    for (const auto& f : mesh.faces) {
        Vec2 uv0 = mesh.uv[f[0]], uv1 = mesh.uv[f[1]], uv2 = mesh.uv[f[2]];
        Vec3 p0 = mesh.vertices[f[0]], p1 = mesh.vertices[f[1]], p2 = mesh.vertices[f[2]];
        double min_u = std::min({uv0.u, uv1.u, uv2.u}), max_u = std::max({uv0.u, uv1.u, uv2.u});
        double min_v = std::min({uv0.v, uv1.v, uv2.v}), max_v = std::max({uv0.v, uv1.v, uv2.v});
        int x0 = std::max(0, int(std::floor(min_u * texture_size)));
        int x1 = std::min(texture_size - 1, int(std::ceil(max_u * texture_size)));
        int y0 = std::max(0, int(std::floor(min_v * texture_size)));
        int y1 = std::min(texture_size - 1, int(std::ceil(max_v * texture_size)));

        double det = (uv1.u - uv0.u) * (uv2.v - uv0.v) - (uv2.u - uv0.u) * (uv1.v - uv0.v);
        if (std::abs(det) < 1e-18) continue;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double u = (x + 0.5) / texture_size, v = (y + 0.5) / texture_size;
                double b1 = ((u - uv0.u) * (uv2.v - uv0.v) - (uv2.u - uv0.u) * (v - uv0.v)) / det;
                double b2 = ((uv1.u - uv0.u) * (v - uv0.v) - (u - uv0.u) * (uv1.v - uv0.v)) / det;
                double b0 = 1.0 - b1 - b2;
                if (b0 < -1e-9 || b1 < -1e-9 || b2 < -1e-9) continue;
                Vec3 p = p0 * b0 + p1 * b1 + p2 * b2;
                Vec3 c = field.color_at(p);
                tex.at(x, y, 0) = c.x;
                tex.at(x, y, 1) = c.y;
                tex.at(x, y, 2) = c.z;
                covered[size_t(y) * texture_size + x] = 1;
            }
    }

    // Gutter dilation: a few passes of nearest-covered-neighbor fill.
    for (int pass = 0; pass < 4; ++pass) {
        std::vector<uint8_t> next = covered;
        for (int y = 0; y < texture_size; ++y)
            for (int x = 0; x < texture_size; ++x) {
                if (covered[size_t(y) * texture_size + x]) continue;
                for (int d = 0; d < 4; ++d) {
                    static constexpr int off[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
                    int nx = x + off[d][0], ny = y + off[d][1];
                    if (nx < 0 || ny < 0 || nx >= texture_size || ny >= texture_size) continue;
                    if (!covered[size_t(ny) * texture_size + nx]) continue;
                    for (int ch = 0; ch < 3; ++ch) tex.at(x, y, ch) = tex.at(nx, ny, ch);
                    next[size_t(y) * texture_size + x] = 1;
                    break;
                }
            }
        covered.swap(next);
    }
    return tex;
}

TexturedMesh extract_textured_mesh(const ScalarField& field, int grid_resolution,
                                   double threshold, int texture_size) {
    DensityGrid grid = density_grid(field, grid_resolution, field.bounds());
    TriMesh tri = marching_cubes(grid, threshold);
    UnwrappedMesh un = unwrap_uv(tri.vertices, tri.faces, texture_size);
    TexturedMesh mesh;
    mesh.vertices = un.vertices;
    mesh.faces = un.faces;
    mesh.uv = un.uv;
    mesh.texture = bake_texture(field, un, texture_size);
    return mesh;
}

void export_obj(const TexturedMesh& mesh, const std::string& base_path,
                const std::vector<Vec3>* vert_colors) {
    namespace fs = std::filesystem;
    std::string stem = fs::path(base_path).filename().string();
    std::string obj_path = base_path + ".obj";
    std::string mtl_path = base_path + ".mtl";
    std::string png_path = base_path + ".png";

    std::ofstream obj(obj_path);
    if (!obj) throw std::runtime_error("cannot write " + obj_path);
    obj << "mtllib " << stem << ".mtl\n";
    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const Vec3& v = mesh.vertices[i];
        obj << "v " << v.x << " " << v.y << " " << v.z;
        if (vert_colors && i < vert_colors->size()) {
            const Vec3& c = (*vert_colors)[i];
            obj << " " << c.x << " " << c.y << " " << c.z;
        }
        obj << "\n";
    }
    for (const auto& uv : mesh.uv) obj << "vt " << uv.u << " " << 1.0 - uv.v << "\n";
    obj << "usemtl material0\n";
    for (const auto& f : mesh.faces)
        obj << "f " << f[0] + 1 << "/" << f[0] + 1 << " " << f[1] + 1 << "/" << f[1] + 1
            << " " << f[2] + 1 << "/" << f[2] + 1 << "\n";

    std::ofstream mtl(mtl_path);
    if (!mtl) throw std::runtime_error("cannot write " + mtl_path);
    mtl << "newmtl material0\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nmap_Kd " << stem << ".png\n";

    if (!mesh.texture.empty()) write_png(png_path, mesh.texture);
}

double enclosed_volume(const std::vector<Vec3>& vertices,
                       const std::vector<std::array<int, 3>>& faces) {
    double vol = 0;
    for (const auto& f : faces) {
        const Vec3& a = vertices[f[0]];
        const Vec3& b = vertices[f[1]];
        const Vec3& c = vertices[f[2]];
        vol += dot(a, cross(b, c)) / 6.0;
    }
    return std::abs(vol);
}

}  // namespace distill3d
