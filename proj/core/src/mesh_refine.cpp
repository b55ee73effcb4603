#include "distill3d/mesh_refine.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <tuple>

namespace distill3d {

// ---------------------------------------------------------------------------
// UV MLP

namespace {
constexpr int kUvIn = 2, kUvOut = 2;
}

size_t UvMlp::param_count() const {
    return size_t(hidden) * kUvIn + hidden + size_t(hidden) * hidden + hidden +
           size_t(kUvOut) * hidden + kUvOut;
}

void UvMlp::init(uint64_t seed) {
    params.assign(param_count(), 0.0);
    Rng rng(seed);
    auto xavier = [&](size_t off, int fin, int fout, size_t n) {
        double b = std::sqrt(6.0 / double(fin + fout));
        for (size_t i = 0; i < n; ++i) params[off + i] = rng.uniform(-b, b);
    };
    size_t off = 0;
    xavier(off, kUvIn, hidden, size_t(hidden) * kUvIn);
    off += size_t(hidden) * kUvIn + hidden;  // b1 stays zero
    xavier(off, hidden, hidden, size_t(hidden) * hidden);
    // b2, W3, b3 stay zero: the warp starts as the exact identity.
}

Vec2 UvMlp::forward(const double* p, const Vec2& in) const {
    const int H = hidden;
    const double* W1 = p;
    const double* b1 = W1 + size_t(H) * kUvIn;
    const double* W2 = b1 + H;
    const double* b2 = W2 + size_t(H) * H;
    const double* W3 = b2 + H;
    const double* b3 = W3 + size_t(kUvOut) * H;

    double h1[64], h2[64];
    for (int j = 0; j < H; ++j) {
        double s = b1[j] + W1[j * kUvIn] * in.u + W1[j * kUvIn + 1] * in.v;
        h1[j] = s > 0 ? s : 0;
    }
    for (int j = 0; j < H; ++j) {
        double s = b2[j];
        for (int i = 0; i < H; ++i) s += W2[size_t(j) * H + i] * h1[i];
        h2[j] = s > 0 ? s : 0;
    }
    Vec2 out;
    out.u = b3[0];
    out.v = b3[1];
    for (int i = 0; i < H; ++i) {
        out.u += W3[i] * h2[i];
        out.v += W3[size_t(H) + i] * h2[i];
    }
    return out;
}

Vec2 UvMlp::backward(const double* p, const Vec2& in, const Vec2& d_out,
                     std::vector<double>& grad, size_t grad_off) const {
    const int H = hidden;
    const double* W1 = p;
    const double* b1 = W1 + size_t(H) * kUvIn;
    const double* W2 = b1 + H;
    const double* b2 = W2 + size_t(H) * H;
    const double* W3 = b2 + H;

    double h1[64], h1_pre[64], h2[64], h2_pre[64];
    for (int j = 0; j < H; ++j) {
        double s = b1[j] + W1[j * kUvIn] * in.u + W1[j * kUvIn + 1] * in.v;
        h1_pre[j] = s;
        h1[j] = s > 0 ? s : 0;
    }
    for (int j = 0; j < H; ++j) {
        double s = b2[j];
        for (int i = 0; i < H; ++i) s += W2[size_t(j) * H + i] * h1[i];
        h2_pre[j] = s;
        h2[j] = s > 0 ? s : 0;
    }

    size_t oW1 = grad_off;
    size_t ob1 = oW1 + size_t(H) * kUvIn;
    size_t oW2 = ob1 + H;
    size_t ob2 = oW2 + size_t(H) * H;
    size_t oW3 = ob2 + H;
    size_t ob3 = oW3 + size_t(kUvOut) * H;

    double d_h2[64] = {0};
    grad[ob3] += d_out.u;
    grad[ob3 + 1] += d_out.v;
    for (int i = 0; i < H; ++i) {
        grad[oW3 + i] += d_out.u * h2[i];
        grad[oW3 + H + i] += d_out.v * h2[i];
        d_h2[i] = d_out.u * W3[i] + d_out.v * W3[size_t(H) + i];
    }
    double d_h1[64] = {0};
    for (int j = 0; j < H; ++j) {
        if (h2_pre[j] <= 0) continue;
        double dj = d_h2[j];
        grad[ob2 + j] += dj;
        for (int i = 0; i < H; ++i) {
            grad[oW2 + size_t(j) * H + i] += dj * h1[i];
            d_h1[i] += dj * W2[size_t(j) * H + i];
        }
    }
    Vec2 d_in{0, 0};
    for (int j = 0; j < H; ++j) {
        if (h1_pre[j] <= 0) continue;
        double dj = d_h1[j];
        grad[ob1 + j] += dj;
        grad[oW1 + j * kUvIn] += dj * in.u;
        grad[oW1 + j * kUvIn + 1] += dj * in.v;
        d_in.u += dj * W1[j * kUvIn];
        d_in.v += dj * W1[j * kUvIn + 1];
    }
    return d_in;
}

// ---------------------------------------------------------------------------
// RefinableMesh

RefinableMesh::RefinableMesh(TexturedMesh base, uint64_t seed) : base_(std::move(base)) {
    if (base_.texture.empty() || base_.texture.channels() != 3)
        throw std::invalid_argument("RefinableMesh: base mesh needs an RGB texture");
    if (base_.uv.size() != base_.vertices.size())
        throw std::invalid_argument("RefinableMesh: per-vertex UVs required");

    // UV-duplicated copies of the same extraction vertex share one offset slot
    // so refinement cannot tear the surface.
    std::map<std::tuple<long, long, long>, int> slots;
    weld_.resize(base_.vertices.size());
    for (size_t i = 0; i < base_.vertices.size(); ++i) {
        const Vec3& v = base_.vertices[i];
        auto key = std::make_tuple(std::lround(v.x * 1e6), std::lround(v.y * 1e6),
                                   std::lround(v.z * 1e6));
        auto [it, inserted] = slots.emplace(key, offset_slots_);
        if (inserted) ++offset_slots_;
        weld_[i] = it->second;
    }

    mlp_.init(seed);
    const size_t n_dvec = size_t(offset_slots_) * 3;
    const size_t n_duv = base_.vertices.size() * 2;
    off_delta_uv_ = n_dvec;
    off_mlp_ = off_delta_uv_ + n_duv;
    off_texture_ = off_mlp_ + mlp_.param_count();
    params_.assign(off_texture_ + base_.texture.size(), 0.0);
    std::copy(mlp_.params.begin(), mlp_.params.end(), params_.begin() + off_mlp_);
    std::copy(base_.texture.raw().begin(), base_.texture.raw().end(),
              params_.begin() + off_texture_);
}

Vec3 RefinableMesh::vertex_position(int i) const {
    int s = weld_[i];
    return base_.vertices[i] + Vec3{params_[s * 3], params_[s * 3 + 1], params_[s * 3 + 2]};
}

Vec2 RefinableMesh::vertex_uv(int i) const {
    Vec2 latent{params_[off_delta_uv_ + size_t(i) * 2], params_[off_delta_uv_ + size_t(i) * 2 + 1]};
    return base_.uv[i] + mlp_.forward(params_.data() + off_mlp_, latent);
}

Vec3 RefinableMesh::texture_sample(const Vec2& uv) const {
    const int K = texture_size();
    const double* tex = params_.data() + off_texture_;
    double gx = uv.u * K - 0.5, gy = uv.v * K - 0.5;
    int x0 = std::clamp(int(std::floor(gx)), 0, K - 1), x1 = std::min(x0 + 1, K - 1);
    int y0 = std::clamp(int(std::floor(gy)), 0, K - 1), y1 = std::min(y0 + 1, K - 1);
    double fx = std::clamp(gx - x0, 0.0, 1.0), fy = std::clamp(gy - y0, 0.0, 1.0);
    Vec3 out;
    for (int ch = 0; ch < 3; ++ch) {
        double top = tex[(size_t(y0) * K + x0) * 3 + ch] * (1 - fx) +
                     tex[(size_t(y0) * K + x1) * 3 + ch] * fx;
        double bot = tex[(size_t(y1) * K + x0) * 3 + ch] * (1 - fx) +
                     tex[(size_t(y1) * K + x1) * 3 + ch] * fx;
        out[ch] = top * (1 - fy) + bot * fy;
    }
    return out;
}

double RefinableMesh::max_offset_norm() const {
    double m = 0;
    for (int s = 0; s < offset_slots_; ++s) {
        Vec3 d{params_[s * 3], params_[s * 3 + 1], params_[s * 3 + 2]};
        m = std::max(m, norm(d));
    }
    return m;
}

TexturedMesh RefinableMesh::realized() const {
    TexturedMesh out = base_;
    for (int i = 0; i < vertex_count(); ++i) {
        out.vertices[i] = vertex_position(i);
        out.uv[i] = vertex_uv(i);
        out.uv[i].u = std::clamp(out.uv[i].u, 0.0, 1.0);
        out.uv[i].v = std::clamp(out.uv[i].v, 0.0, 1.0);
    }
    std::copy(params_.begin() + off_texture_, params_.end(), out.texture.raw().begin());
    for (auto& v : out.texture.raw()) v = std::clamp(v, 0.0, 1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Rasterizer

namespace {

constexpr double kZNear = 0.05;

struct Projected {
    std::vector<Vec3> world;
    std::vector<Vec2> screen;
    std::vector<double> depth;
};

Projected project_vertices(const RefinableMesh& mesh, const CameraPose& pose) {
    Projected pr;
    const int n = mesh.vertex_count();
    pr.world.resize(n);
    pr.screen.resize(n);
    pr.depth.resize(n);
    Vec3 fwd, right, up;
    pose.basis(fwd, right, up);
    Vec3 eye = pose.position();
    const auto& in = pose.intrinsics;
    for (int i = 0; i < n; ++i) {
        Vec3 w = mesh.vertex_position(i);
        Vec3 rel = w - eye;
        double d = dot(rel, fwd);
        pr.world[i] = w;
        pr.depth[i] = d;
        if (d > kZNear) {
            pr.screen[i] = {in.width / 2.0 + in.focal * dot(rel, right) / d,
                            in.height / 2.0 - in.focal * dot(rel, up) / d};
        } else {
            pr.screen[i] = {-1e9, -1e9};
        }
    }
    return pr;
}

inline double cross2(const Vec2& a, const Vec2& b) { return a.u * b.v - a.v * b.u; }

}  // namespace

RasterOutput rasterize(const RefinableMesh& mesh, const CameraPose& pose, RasterCache* cache) {
    const auto& in = pose.intrinsics;
    const int W = in.width, H = in.height;
    Projected pr = project_vertices(mesh, pose);

    std::vector<int> face_buf(size_t(W) * H, -1);
    std::vector<double> bary_buf(size_t(W) * H * 3, 0.0);
    std::vector<double> z_buf(size_t(W) * H, 1e30);

    const auto& faces = mesh.base().faces;
    for (int f = 0; f < int(faces.size()); ++f) {
        int i0 = faces[f][0], i1 = faces[f][1], i2 = faces[f][2];
        if (pr.depth[i0] <= kZNear || pr.depth[i1] <= kZNear || pr.depth[i2] <= kZNear)
            continue;
        Vec2 a = pr.screen[i0], b = pr.screen[i1], c = pr.screen[i2];
        double det = cross2(b - a, c - a);
        if (std::abs(det) < 1e-12) continue;
        int x0 = std::max(0, int(std::floor(std::min({a.u, b.u, c.u}))));
        int x1 = std::min(W - 1, int(std::ceil(std::max({a.u, b.u, c.u}))));
        int y0 = std::max(0, int(std::floor(std::min({a.v, b.v, c.v}))));
        int y1 = std::min(H - 1, int(std::ceil(std::max({a.v, b.v, c.v}))));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                Vec2 p{x + 0.5, y + 0.5};
                double b1 = cross2(p - a, c - a) / det;
                double b2 = cross2(b - a, p - a) / det;
                double b0 = 1.0 - b1 - b2;
                if (b0 < 0 || b1 < 0 || b2 < 0) continue;
                double z = b0 * pr.depth[i0] + b1 * pr.depth[i1] + b2 * pr.depth[i2];
                size_t idx = size_t(y) * W + x;
                if (z >= z_buf[idx]) continue;
                z_buf[idx] = z;
                face_buf[idx] = f;
                bary_buf[idx * 3] = b0;
                bary_buf[idx * 3 + 1] = b1;
                bary_buf[idx * 3 + 2] = b2;
            }
    }

    std::vector<Vec2> warped(mesh.vertex_count());
    for (int i = 0; i < mesh.vertex_count(); ++i) warped[i] = mesh.vertex_uv(i);

    RasterOutput out;
    out.rgb = Image(W, H, 3, 1.0);
    out.mask = Image(W, H, 1, 0.0);
    out.normal = Image(W, H, 3, 0.0);

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            size_t idx = size_t(y) * W + x;
            int f = face_buf[idx];
            if (f < 0) continue;
            int i0 = faces[f][0], i1 = faces[f][1], i2 = faces[f][2];
            double b0 = bary_buf[idx * 3], b1 = bary_buf[idx * 3 + 1], b2 = bary_buf[idx * 3 + 2];
            Vec2 uv = warped[i0] * b0 + warped[i1] * b1 + warped[i2] * b2;
            Vec3 col = mesh.texture_sample(uv);
            out.rgb.at(x, y, 0) = col.x;
            out.rgb.at(x, y, 1) = col.y;
            out.rgb.at(x, y, 2) = col.z;
            out.mask.at(x, y, 0) = 1.0;
            Vec3 n = normalized(cross(pr.world[i1] - pr.world[i0], pr.world[i2] - pr.world[i0]));
            out.normal.at(x, y, 0) = n.x;
            out.normal.at(x, y, 1) = n.y;
            out.normal.at(x, y, 2) = n.z;
        }

    if (cache) {
        cache->face = std::move(face_buf);
        cache->bary = std::move(bary_buf);
        cache->screen = std::move(pr.screen);
        cache->cam_depth = std::move(pr.depth);
        cache->world = std::move(pr.world);
        cache->warped_uv = std::move(warped);
        cache->width = W;
        cache->height = H;
    }
    return out;
}

void rasterize_backward(const RefinableMesh& mesh, const CameraPose& pose,
                        const RasterCache& cache, const Image& d_rgb,
                        const Image& d_normal, std::vector<double>& grad) {
    const int W = cache.width, H = cache.height;
    const int K = mesh.texture_size();
    const auto& faces = mesh.base().faces;
    const double* mlp_p = mesh.params().data() + mesh.off_mlp();
    const double* tex = mesh.params().data() + mesh.off_texture();
    const bool use_rgb = !d_rgb.empty();
    const bool use_normal = !d_normal.empty();

    std::vector<Vec2> d_screen(cache.screen.size(), {0, 0});
    std::vector<Vec3> d_face_n(faces.size(), {0, 0, 0});

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            size_t idx = size_t(y) * W + x;
            int f = cache.face[idx];
            if (f < 0) continue;
            int vi[3] = {faces[f][0], faces[f][1], faces[f][2]};
            double b[3] = {cache.bary[idx * 3], cache.bary[idx * 3 + 1], cache.bary[idx * 3 + 2]};

            if (use_rgb) {
                Vec3 dc{d_rgb.at(x, y, 0), d_rgb.at(x, y, 1), d_rgb.at(x, y, 2)};
                if (dc.x != 0 || dc.y != 0 || dc.z != 0) {
                    Vec2 uv = cache.warped_uv[vi[0]] * b[0] + cache.warped_uv[vi[1]] * b[1] +
                              cache.warped_uv[vi[2]] * b[2];
                    // bilinear texture lookup backward
                    double gx = uv.u * K - 0.5, gy = uv.v * K - 0.5;
                    int x0 = std::clamp(int(std::floor(gx)), 0, K - 1), x1 = std::min(x0 + 1, K - 1);
                    int y0 = std::clamp(int(std::floor(gy)), 0, K - 1), y1 = std::min(y0 + 1, K - 1);
                    double fx = std::clamp(gx - x0, 0.0, 1.0), fy = std::clamp(gy - y0, 0.0, 1.0);
                    double du = 0, dv = 0;
                    size_t ot = mesh.off_texture();
                    for (int ch = 0; ch < 3; ++ch) {
                        double g = dc[ch];
                        if (g == 0) continue;
                        grad[ot + (size_t(y0) * K + x0) * 3 + ch] += g * (1 - fx) * (1 - fy);
                        grad[ot + (size_t(y0) * K + x1) * 3 + ch] += g * fx * (1 - fy);
                        grad[ot + (size_t(y1) * K + x0) * 3 + ch] += g * (1 - fx) * fy;
                        grad[ot + (size_t(y1) * K + x1) * 3 + ch] += g * fx * fy;
                        double t00 = tex[(size_t(y0) * K + x0) * 3 + ch];
                        double t10 = tex[(size_t(y0) * K + x1) * 3 + ch];
                        double t01 = tex[(size_t(y1) * K + x0) * 3 + ch];
                        double t11 = tex[(size_t(y1) * K + x1) * 3 + ch];
                        du += g * ((t10 - t00) * (1 - fy) + (t11 - t01) * fy) * K;
                        dv += g * ((t01 - t00) * (1 - fx) + (t11 - t10) * fx) * K;
                    }
                    Vec2 d_uv{du, dv};

                    // uv = sum_k b_k * uv_k
                    double d_b[3];
                    for (int k = 0; k < 3; ++k) {
                        Vec2 d_uvk = d_uv * b[k];
                        // uv_k = base_uv + mlp(latent_k)
                        size_t lo = mesh.off_delta_uv() + size_t(vi[k]) * 2;
                        Vec2 latent{mesh.params()[lo], mesh.params()[lo + 1]};
                        Vec2 d_latent = mesh.uv_mlp().backward(mlp_p, latent, d_uvk, grad,
                                                               mesh.off_mlp());
                        grad[lo] += d_latent.u;
                        grad[lo + 1] += d_latent.v;
                        d_b[k] = d_uv.u * cache.warped_uv[vi[k]].u +
                                 d_uv.v * cache.warped_uv[vi[k]].v;
                    }

                    // screen-space barycentric backward
                    Vec2 a = cache.screen[vi[0]], bb = cache.screen[vi[1]], cc = cache.screen[vi[2]];
                    Vec2 p{x + 0.5, y + 0.5};
                    double N1 = cross2(p - a, cc - a);
                    double N2 = cross2(bb - a, p - a);
                    double D = cross2(bb - a, cc - a);
                    double invD = 1.0 / D;
                    // db1 = (dN1*D - N1*dD)/D^2, db2 analog, db0 = -(db1+db2)
                    double g1 = (d_b[1] - d_b[0]) * invD;  // coefficient for dN1 etc.
                    double g2 = (d_b[2] - d_b[0]) * invD;
                    double gD = -(N1 * (d_b[1] - d_b[0]) + N2 * (d_b[2] - d_b[0])) * invD * invD;

                    // partials of N1, N2, D w.r.t. vertex screen coords
                    d_screen[vi[0]].u += g1 * (p.v - cc.v) + g2 * (bb.v - p.v) + gD * (bb.v - cc.v);
                    d_screen[vi[0]].v += g1 * (cc.u - p.u) + g2 * (p.u - bb.u) + gD * (cc.u - bb.u);
                    d_screen[vi[1]].u += g2 * (p.v - a.v) + gD * (cc.v - a.v);
                    d_screen[vi[1]].v += g2 * (a.u - p.u) + gD * (a.u - cc.u);
                    d_screen[vi[2]].u += g1 * (a.v - p.v) + gD * (a.v - bb.v);
                    d_screen[vi[2]].v += g1 * (p.u - a.u) + gD * (bb.u - a.u);
                }
            }
            if (use_normal) {
                Vec3 dn{d_normal.at(x, y, 0), d_normal.at(x, y, 1), d_normal.at(x, y, 2)};
                d_face_n[f] += dn;
            }
        }

    // screen -> world -> offset slots
    Vec3 fwd, right, up;
    pose.basis(fwd, right, up);
    Vec3 eye = pose.position();
    const double focal = pose.intrinsics.focal;
    for (int i = 0; i < mesh.vertex_count(); ++i) {
        Vec2 ds = d_screen[i];
        if (ds.u == 0 && ds.v == 0) continue;
        double d = cache.cam_depth[i];
        if (d <= kZNear) continue;
        Vec3 rel = cache.world[i] - eye;
        double rx = dot(rel, right), ux = dot(rel, up);
        // s.x = W/2 + f*rx/d ; s.y = H/2 - f*ux/d
        Vec3 dpos = (right * d - fwd * rx) * (focal / (d * d)) * ds.u +
                    (up * d - fwd * ux) * (-focal / (d * d)) * ds.v;
        int slot = mesh.weld_slot(i);
        grad[size_t(slot) * 3] += dpos.x;
        grad[size_t(slot) * 3 + 1] += dpos.y;
        grad[size_t(slot) * 3 + 2] += dpos.z;
    }

    // face-normal backward: n = normalize(cross(e1, e2))
    for (int f = 0; f < int(faces.size()); ++f) {
        Vec3 g = d_face_n[f];
        if (g.x == 0 && g.y == 0 && g.z == 0) continue;
        const Vec3& w0 = cache.world[faces[f][0]];
        const Vec3& w1 = cache.world[faces[f][1]];
        const Vec3& w2 = cache.world[faces[f][2]];
        Vec3 e1 = w1 - w0, e2 = w2 - w0;
        Vec3 nraw = cross(e1, e2);
        double ln = norm(nraw);
        if (ln < 1e-12) continue;
        Vec3 n = nraw / ln;
        Vec3 d_nraw = (g - n * dot(g, n)) / ln;
        Vec3 d_e1 = cross(e2, d_nraw);
        Vec3 d_e2 = cross(d_nraw, e1);
        Vec3 d_w0 = -(d_e1 + d_e2);
        int s0 = mesh.weld_slot(faces[f][0]);
        int s1 = mesh.weld_slot(faces[f][1]);
        int s2 = mesh.weld_slot(faces[f][2]);
        for (int k = 0; k < 3; ++k) {
            grad[size_t(s0) * 3 + k] += d_w0[k];
            grad[size_t(s1) * 3 + k] += d_e1[k];
            grad[size_t(s2) * 3 + k] += d_e2[k];
        }
    }
}

// ---------------------------------------------------------------------------
// LoRA-guided refinement

Image refine_gradient(const LoraPredictor& lora, const GuidanceBackend& backend,
                      const Image& I_3d, int t, const std::string& y,
                      const CameraPose& c, const DiffusionSchedule& schedule, double w,
                      const Image& eps) {
    Image x_t = q_sample(backend.encode(I_3d), t, eps, schedule);
    Image pred = lora.predict(x_t, t, y, c);
    Image out = pred;
    for (size_t i = 0; i < out.size(); ++i)
        out.raw()[i] = w * (pred.raw()[i] - eps.raw()[i]);
    return out;
}

Stage3StepMetrics stage3_step(RefinableMesh& mesh, AdamState& opt, const Stage3Setup& setup,
                              int step, Rng& rng) {
    if (!setup.backend || !setup.lora || !setup.schedule)
        throw std::invalid_argument("stage3_step: incomplete setup");

    Stage3StepMetrics metrics;
    metrics.reference_step = setup.alternate_views ? (step % 2 == 0) : false;

    CameraPose pose;
    if (metrics.reference_step) {
        pose = front_pose(setup.camera);
    } else {
        pose = sample_novel_pose(rng, setup.camera);
    }
    pose.intrinsics = pose.intrinsics.resized(setup.resolution, setup.resolution);

    RasterCache cache;
    RasterOutput out = rasterize(mesh, pose, &cache);

    std::vector<double> grad(mesh.param_count(), 0.0);
    Image d_rgb, d_normal;

    if (metrics.reference_step) {
        Image dI, dM;
        metrics.loss += reference_view_loss_grad(out.rgb, out.mask, *setup.input_rgb,
                                                 *setup.input_mask, setup.lambda_rgb,
                                                 setup.lambda_mask, dI, dM);
        // Coverage is hard; only the rgb term backpropagates.
        d_rgb = std::move(dI);
    } else {
        int t = sample_noise_level(setup.band, setup.schedule->T, rng);
        Image eps(out.rgb.width(), out.rgb.height(), 3);
        for (auto& v : eps.raw()) v = rng.normal();
        double w = noise_weight(*setup.schedule, t, setup.w_mode);
        if (auto* oracle = dynamic_cast<const OracleBackend*>(setup.backend))
            const_cast<OracleBackend*>(oracle)->set_view(pose);
        Image g = refine_gradient(*setup.lora, *setup.backend, out.rgb, t, setup.prompt,
                                  pose, *setup.schedule, w, eps);
        // mean convention, matching the photometric losses
        double scale = setup.guidance_weight / double(g.size());
        if (setup.normalize_guidance) {
            double sq = 0;
            for (double v : g.raw()) sq += v * v;
            double rms = std::sqrt(sq / double(g.size()));
            if (rms > 1e-12) scale = setup.guidance_weight / (rms * double(g.size()));
        }
        d_rgb = Image(g.width(), g.height(), 3);
        for (size_t i = 0; i < g.size(); ++i) d_rgb.raw()[i] = g.raw()[i] * scale;

        if (setup.lambda_normal > 0) {
            Image dN;
            double nl = normal_smoothness_grad(out.normal, sample_shift_dir(rng),
                                               &out.mask, dN);
            metrics.loss += setup.lambda_normal * nl;
            d_normal = Image(dN.width(), dN.height(), 3);
            for (size_t i = 0; i < dN.size(); ++i)
                d_normal.raw()[i] = setup.lambda_normal * dN.raw()[i];
        }
    }

    rasterize_backward(mesh, pose, cache, d_rgb, d_normal, grad);

    // L2 penalty on the vertex offsets.
    double off_sum = 0;
    for (int s = 0; s < mesh.offset_slots() * 3; ++s) {
        double v = mesh.params()[s];
        off_sum += v * v;
        grad[s] += 2.0 * setup.lambda_offset * v;
    }
    metrics.offset_term = setup.lambda_offset * off_sum;
    metrics.loss += metrics.offset_term;

    opt.step(mesh.params(), grad);
    return metrics;
}

}  // namespace distill3d
