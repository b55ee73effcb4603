#pragma once

#include <array>
#include <string>
#include <vector>

#include "distill3d/field.hpp"
#include "distill3d/image.hpp"
#include "distill3d/types.hpp"

namespace distill3d {

struct TriMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;

    bool empty() const { return faces.empty(); }
};

// Mesh with per-vertex UVs into a single texture image. The default
// per-triangle unwrapper duplicates vertices so every face owns its chart.
struct TexturedMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;
    std::vector<Vec2> uv;  // one per vertex, inside [0,1]^2
    Image texture;         // K x K x 3
};

// Isosurface extraction with shared edge vertices (watertight on closed
// surfaces) and degenerate-triangle cleanup. Vertices are expressed in the
// grid's bounds coordinates. An empty mesh is a valid result.
TriMesh marching_cubes(const DensityGrid& grid, double threshold);

std::vector<Vec3> vertex_colors(const ScalarField& field, const std::vector<Vec3>& vertices);

// Pluggable UV unwrapper interface; the default assigns each triangle its own
// right-triangle chart in a grid of cells with a gutter margin.
struct UnwrappedMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;
    std::vector<Vec2> uv;
    int chart_count = 0;
};

class UvUnwrapper {
public:
    virtual ~UvUnwrapper() = default;
    virtual UnwrappedMesh unwrap(const std::vector<Vec3>& vertices,
                                 const std::vector<std::array<int, 3>>& faces,
                                 int texture_size) const = 0;
};

class PerTriangleUnwrapper : public UvUnwrapper {
public:
    UnwrappedMesh unwrap(const std::vector<Vec3>& vertices,
                         const std::vector<std::array<int, 3>>& faces,
                         int texture_size) const override;
};

UnwrappedMesh unwrap_uv(const std::vector<Vec3>& vertices,
                        const std::vector<std::array<int, 3>>& faces,
                        int texture_size);

// Fill each chart texel with the field color at the corresponding barycentric
// 3D point, then dilate into the gutters.
Image bake_texture(const ScalarField& field, const UnwrappedMesh& mesh, int texture_size);

TexturedMesh extract_textured_mesh(const ScalarField& field, int grid_resolution,
                                   double threshold, int texture_size);

// Writes base_path.obj / .mtl / .png. Optional per-vertex colors are stored in
// the OBJ's extended vertex syntax.
void export_obj(const TexturedMesh& mesh, const std::string& base_path,
                const std::vector<Vec3>* vert_colors = nullptr);

// Signed volume by the divergence theorem; meaningful for closed meshes.
double enclosed_volume(const std::vector<Vec3>& vertices,
                       const std::vector<std::array<int, 3>>& faces);

}  // namespace distill3d
