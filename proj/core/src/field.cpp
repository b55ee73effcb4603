#include "distill3d/field.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace distill3d {

namespace {

inline double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kDensityShift = -1.0;

}  // namespace

FieldConfig FieldConfig::from(const Config& cfg) {
    FieldConfig f;
    f.levels = cfg.get_int("field.levels");
    f.base_res = cfg.get_int("field.base_res");
    f.per_level_scale = cfg.get_double("field.per_level_scale");
    f.table_log2 = cfg.get_int("field.table_log2");
    f.feature_dim = cfg.get_int("field.feature_dim");
    f.hidden = cfg.get_int("field.hidden");
    if (f.levels < 1 || f.base_res < 2 || f.per_level_scale <= 1.0)
        throw std::invalid_argument("bad field config");
    return f;
}

struct HashGridField::Workspace {
    bool inside = false;
    std::vector<double> enc;            // enc_dim
    std::vector<uint32_t> corner_idx;   // levels * 8 (table entry index)
    std::vector<double> corner_w;       // levels * 8
    std::vector<double> h1, h1_pre;     // hidden
    std::vector<double> dens_out;       // 1 + geo_dim (pre-activation)
    double sigma = 0;
    std::vector<double> h2, h2_pre;     // hidden
    std::vector<double> color_pre;      // 3
    Vec3 color;
};

HashGridField::HashGridField(FieldConfig cfg, uint64_t seed) : cfg_(cfg) {
    level_res_.resize(cfg_.levels);
    double r = cfg_.base_res;
    for (int l = 0; l < cfg_.levels; ++l) {
        level_res_[l] = std::max(2, int(std::floor(r)));
        r *= cfg_.per_level_scale;
    }

    const int enc = cfg_.enc_dim(), hid = cfg_.hidden, geo = cfg_.geo_dim;
    const size_t tbl = size_t(cfg_.levels) * cfg_.table_size() * cfg_.feature_dim;
    off_tables_ = 0;
    off_dw1_ = tbl;
    off_db1_ = off_dw1_ + size_t(hid) * enc;
    off_dw2_ = off_db1_ + hid;
    off_db2_ = off_dw2_ + size_t(1 + geo) * hid;
    off_cw1_ = off_db2_ + (1 + geo);
    off_cb1_ = off_cw1_ + size_t(hid) * geo;
    off_cw2_ = off_cb1_ + hid;
    off_cb2_ = off_cw2_ + size_t(3) * hid;
    params_.assign(off_cb2_ + 3, 0.0);

    Rng rng(seed);
    for (size_t i = 0; i < tbl; ++i) params_[i] = rng.uniform(-1e-2, 1e-2);
    auto xavier = [&](size_t off, int fan_in, int fan_out, size_t n) {
        double b = std::sqrt(6.0 / double(fan_in + fan_out));
        for (size_t i = 0; i < n; ++i) params_[off + i] = rng.uniform(-b, b);
    };
    xavier(off_dw1_, enc, hid, size_t(hid) * enc);
    xavier(off_dw2_, hid, 1 + geo, size_t(1 + geo) * hid);
    xavier(off_cw1_, geo, hid, size_t(hid) * geo);
    xavier(off_cw2_, hid, 3, size_t(3) * hid);
}

namespace {

inline uint32_t hash_coords(int x, int y, int z) {
    return uint32_t(x) ^ (uint32_t(y) * 2654435761u) ^ (uint32_t(z) * 805459861u);
}

}  // namespace

void HashGridField::forward(const Vec3& p, Workspace& ws, bool with_color) const {
    const int enc = cfg_.enc_dim(), hid = cfg_.hidden, geo = cfg_.geo_dim;
    const int F = cfg_.feature_dim;
    const uint32_t mask = uint32_t(cfg_.table_size() - 1);

    ws.enc.assign(enc, 0.0);
    ws.corner_idx.resize(size_t(cfg_.levels) * 8);
    ws.corner_w.resize(size_t(cfg_.levels) * 8);

    Vec3 ext = cfg_.bounds.extent();
    Vec3 u{(p.x - cfg_.bounds.lo.x) / ext.x, (p.y - cfg_.bounds.lo.y) / ext.y,
           (p.z - cfg_.bounds.lo.z) / ext.z};
    ws.inside = u.x >= 0 && u.x <= 1 && u.y >= 0 && u.y <= 1 && u.z >= 0 && u.z <= 1;
    if (!ws.inside) {
        ws.sigma = 0;
        ws.color = {0, 0, 0};
        return;
    }

    for (int l = 0; l < cfg_.levels; ++l) {
        const int res = level_res_[l];
        const bool dense = (size_t(res + 1) * (res + 1) * (res + 1)) <= size_t(cfg_.table_size());
        double gx = u.x * res, gy = u.y * res, gz = u.z * res;
        int ix = std::min(int(gx), res - 1), iy = std::min(int(gy), res - 1),
            iz = std::min(int(gz), res - 1);
        double fx = gx - ix, fy = gy - iy, fz = gz - iz;
        const double* table = params_.data() + off_tables_ +
                              size_t(l) * cfg_.table_size() * F;
        for (int c = 0; c < 8; ++c) {
            int dx = c & 1, dy = (c >> 1) & 1, dz = (c >> 2) & 1;
            double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
            uint32_t idx;
            if (dense)
                idx = uint32_t(ix + dx) +
                      uint32_t(res + 1) * (uint32_t(iy + dy) + uint32_t(res + 1) * uint32_t(iz + dz));
            else
                idx = hash_coords(ix + dx, iy + dy, iz + dz) & mask;
            ws.corner_idx[size_t(l) * 8 + c] = idx;
            ws.corner_w[size_t(l) * 8 + c] = w;
            for (int k = 0; k < F; ++k) ws.enc[l * F + k] += w * table[size_t(idx) * F + k];
        }
    }

    // density MLP
    ws.h1.resize(hid);
    ws.h1_pre.resize(hid);
    const double* dw1 = params_.data() + off_dw1_;
    const double* db1 = params_.data() + off_db1_;
    for (int j = 0; j < hid; ++j) {
        double s = db1[j];
        const double* row = dw1 + size_t(j) * enc;
        for (int e = 0; e < enc; ++e) s += row[e] * ws.enc[e];
        ws.h1_pre[j] = s;
        ws.h1[j] = s > 0 ? s : 0;
    }
    ws.dens_out.resize(1 + geo);
    const double* dw2 = params_.data() + off_dw2_;
    const double* db2 = params_.data() + off_db2_;
    for (int k = 0; k < 1 + geo; ++k) {
        double s = db2[k];
        const double* row = dw2 + size_t(k) * hid;
        for (int j = 0; j < hid; ++j) s += row[j] * ws.h1[j];
        ws.dens_out[k] = s;
    }
    ws.sigma = softplus(ws.dens_out[0] + kDensityShift);

    if (!with_color) return;

    // color MLP over geometric features
    ws.h2.resize(hid);
    ws.h2_pre.resize(hid);
    const double* cw1 = params_.data() + off_cw1_;
    const double* cb1 = params_.data() + off_cb1_;
    for (int j = 0; j < hid; ++j) {
        double s = cb1[j];
        const double* row = cw1 + size_t(j) * geo;
        for (int g = 0; g < geo; ++g) s += row[g] * ws.dens_out[1 + g];
        ws.h2_pre[j] = s;
        ws.h2[j] = s > 0 ? s : 0;
    }
    ws.color_pre.resize(3);
    const double* cw2 = params_.data() + off_cw2_;
    const double* cb2 = params_.data() + off_cb2_;
    for (int ch = 0; ch < 3; ++ch) {
        double s = cb2[ch];
        const double* row = cw2 + size_t(ch) * hid;
        for (int j = 0; j < hid; ++j) s += row[j] * ws.h2[j];
        ws.color_pre[ch] = s;
    }
    ws.color = {sigmoid(ws.color_pre[0]), sigmoid(ws.color_pre[1]), sigmoid(ws.color_pre[2])};
}

void HashGridField::query(const Vec3& p, double& sigma, Vec3& color) const {
    static thread_local Workspace ws;
    forward(p, ws, true);
    sigma = ws.sigma;
    color = ws.color;
}

double HashGridField::density_at(const Vec3& p) const {
    static thread_local Workspace ws;
    forward(p, ws, false);
    return ws.sigma;
}

Vec3 HashGridField::color_at(const Vec3& p) const {
    double s;
    Vec3 c;
    query(p, s, c);
    return c;
}

void HashGridField::query_backward(const Vec3& p, double d_sigma, const Vec3& d_color,
                                   std::vector<double>& grad) const {
    static thread_local Workspace ws;
    forward(p, ws, true);
    if (!ws.inside) return;

    const int enc = cfg_.enc_dim(), hid = cfg_.hidden, geo = cfg_.geo_dim;
    const int F = cfg_.feature_dim;

    static thread_local std::vector<double> d_out, d_h1, d_enc, d_h2;
    d_out.assign(1 + geo, 0.0);

    // color head backward
    bool has_color = d_color.x != 0 || d_color.y != 0 || d_color.z != 0;
    if (has_color) {
        d_h2.assign(hid, 0.0);
        const double* cw2 = params_.data() + off_cw2_;
        for (int ch = 0; ch < 3; ++ch) {
            double c = ch == 0 ? ws.color.x : (ch == 1 ? ws.color.y : ws.color.z);
            double dpre = d_color[ch] * c * (1 - c);
            if (dpre == 0) continue;
            grad[off_cb2_ + ch] += dpre;
            const double* row = cw2 + size_t(ch) * hid;
            for (int j = 0; j < hid; ++j) {
                grad[off_cw2_ + size_t(ch) * hid + j] += dpre * ws.h2[j];
                d_h2[j] += dpre * row[j];
            }
        }
        const double* cw1 = params_.data() + off_cw1_;
        for (int j = 0; j < hid; ++j) {
            if (ws.h2_pre[j] <= 0 || d_h2[j] == 0) continue;
            double dj = d_h2[j];
            grad[off_cb1_ + j] += dj;
            const double* row = cw1 + size_t(j) * geo;
            for (int g = 0; g < geo; ++g) {
                grad[off_cw1_ + size_t(j) * geo + g] += dj * ws.dens_out[1 + g];
                d_out[1 + g] += dj * row[g];
            }
        }
    }

    // density activation backward: softplus' = sigmoid
    d_out[0] += d_sigma * sigmoid(ws.dens_out[0] + kDensityShift);

    // density MLP backward
    d_h1.assign(hid, 0.0);
    const double* dw2 = params_.data() + off_dw2_;
    for (int k = 0; k < 1 + geo; ++k) {
        double dk = d_out[k];
        if (dk == 0) continue;
        grad[off_db2_ + k] += dk;
        const double* row = dw2 + size_t(k) * hid;
        for (int j = 0; j < hid; ++j) {
            grad[off_dw2_ + size_t(k) * hid + j] += dk * ws.h1[j];
            d_h1[j] += dk * row[j];
        }
    }
    d_enc.assign(enc, 0.0);
    const double* dw1 = params_.data() + off_dw1_;
    for (int j = 0; j < hid; ++j) {
        if (ws.h1_pre[j] <= 0 || d_h1[j] == 0) continue;
        double dj = d_h1[j];
        grad[off_db1_ + j] += dj;
        const double* row = dw1 + size_t(j) * enc;
        for (int e = 0; e < enc; ++e) {
            grad[off_dw1_ + size_t(j) * enc + e] += dj * ws.enc[e];
            d_enc[e] += dj * row[e];
        }
    }

    // scatter into hash tables
    for (int l = 0; l < cfg_.levels; ++l) {
        size_t base = off_tables_ + size_t(l) * cfg_.table_size() * F;
        for (int c = 0; c < 8; ++c) {
            double w = ws.corner_w[size_t(l) * 8 + c];
            uint32_t idx = ws.corner_idx[size_t(l) * 8 + c];
            for (int k = 0; k < F; ++k)
                grad[base + size_t(idx) * F + k] += w * d_enc[l * F + k];
        }
    }
}

void HashGridField::density_backward(const Vec3& p, double d_sigma,
                                     std::vector<double>& grad) const {
    query_backward(p, d_sigma, {0, 0, 0}, grad);
}

double HashGridField::finest_cell_size() const {
    Vec3 ext = cfg_.bounds.extent();
    double m = std::min({ext.x, ext.y, ext.z});
    return m / double(level_res_.back());
}

// ---------------------------------------------------------------------------
// Volume rendering

namespace {

bool ray_aabb(const Vec3& o, const Vec3& d, const Aabb& box, double& t0, double& t1) {
    t0 = 1e-4;
    t1 = 1e30;
    for (int a = 0; a < 3; ++a) {
        double inv = 1.0 / (d[a] != 0 ? d[a] : 1e-30);
        double ta = (box.lo[a] - o[a]) * inv;
        double tb = (box.hi[a] - o[a]) * inv;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    return t1 > t0;
}

struct SampleRec {
    Vec3 p;
    double t, dt, sigma, alpha, w, T;
    Vec3 color;
    Vec3 n;       // unit accumulated-normal contribution (zero if skipped)
    bool has_n = false;
};

Vec3 fd_density_gradient(const ScalarField& field, const Vec3& p, double h) {
    Vec3 g;
    for (int k = 0; k < 3; ++k) {
        Vec3 pa = p, pb = p;
        pa[k] += h;
        pb[k] -= h;
        g[k] = (field.density_at(pa) - field.density_at(pb)) / (2 * h);
    }
    return g;
}

// Shared forward walk; fills recs when non-null.
void march_ray(const ScalarField& field, const Vec3& o, const Vec3& d,
               const RenderOptions& opts, double step_h,
               Vec3& rgb, double& mask, Vec3& nrm_acc, double& depth,
               std::vector<SampleRec>* recs) {
    rgb = {0, 0, 0};
    mask = 0;
    nrm_acc = {0, 0, 0};
    depth = 0;
    double t0, t1;
    if (!ray_aabb(o, d, field.bounds(), t0, t1)) return;
    const int S = opts.samples_per_ray;
    const double dt = (t1 - t0) / S;
    double T = 1.0;
    for (int i = 0; i < S; ++i) {
        double t = t0 + (i + 0.5) * dt;
        Vec3 p = o + d * t;
        double sigma;
        Vec3 c;
        field.query(p, sigma, c);
        double sd = std::min(sigma * dt, 60.0);
        double alpha = 1.0 - std::exp(-sd);
        double w = T * alpha;
        rgb += c * w;
        mask += w;
        depth += w * t;
        SampleRec rec;
        if (recs) {
            rec.p = p;
            rec.t = t;
            rec.dt = dt;
            rec.sigma = sigma;
            rec.alpha = alpha;
            rec.w = w;
            rec.T = T;
            rec.color = c;
        }
        if (opts.compute_normals && w > opts.normal_weight_cutoff) {
            Vec3 g = fd_density_gradient(field, p, step_h);
            double gn = norm(g);
            if (gn > 1e-12) {
                Vec3 n = -g / gn;
                nrm_acc += n * w;
                if (recs) {
                    rec.n = n;
                    rec.has_n = true;
                }
            }
        }
        if (recs) recs->push_back(rec);
        T *= 1.0 - alpha;
        if (opts.early_stop_transmittance > 0 && T < opts.early_stop_transmittance) break;
    }
}

}  // namespace

RenderOutput volume_render(const ScalarField& field, const RayBundle& rays,
                           const RenderOptions& opts) {
    if (opts.samples_per_ray < 2)
        throw std::invalid_argument("volume_render: samples_per_ray must be >= 2");
    double step_h = opts.normal_step;
    if (step_h <= 0) {
        if (auto* hg = dynamic_cast<const HashGridField*>(&field))
            step_h = hg->finest_cell_size();
        else
            step_h = 0.01;
    }

    RenderOutput out;
    out.rgb = Image(rays.width, rays.height, 3);
    out.mask = Image(rays.width, rays.height, 1);
    out.normal = Image(rays.width, rays.height, 3);
    out.depth = Image(rays.width, rays.height, 1);

    for (int y = 0; y < rays.height; ++y)
        for (int x = 0; x < rays.width; ++x) {
            size_t idx = size_t(y) * rays.width + x;
            Vec3 rgb, nacc;
            double mask, depth;
            march_ray(field, rays.origins[idx], rays.directions[idx], opts, step_h,
                      rgb, mask, nacc, depth, nullptr);
            for (int ch = 0; ch < 3; ++ch)
                out.rgb.at(x, y, ch) = rgb[ch] + (1.0 - mask);  // white background
            out.mask.at(x, y, 0) = mask;
            out.depth.at(x, y, 0) = depth;
            if (opts.compute_normals && mask > 0.5) {
                Vec3 n = normalized(nacc);
                for (int ch = 0; ch < 3; ++ch) out.normal.at(x, y, ch) = n[ch];
            }
        }
    return out;
}

void volume_render_backward(const HashGridField& field, const RayBundle& rays,
                            const RenderOptions& opts, const Image& d_rgb,
                            const Image& d_mask, const Image& d_normal,
                            std::vector<double>& grad) {
    double step_h = opts.normal_step > 0 ? opts.normal_step : field.finest_cell_size();
    const bool use_rgb = !d_rgb.empty();
    const bool use_mask = !d_mask.empty();
    const bool use_normal = !d_normal.empty() && opts.compute_normals;

    std::vector<SampleRec> recs;
    for (int y = 0; y < rays.height; ++y)
        for (int x = 0; x < rays.width; ++x) {
            Vec3 gr{use_rgb ? d_rgb.at(x, y, 0) : 0, use_rgb ? d_rgb.at(x, y, 1) : 0,
                    use_rgb ? d_rgb.at(x, y, 2) : 0};
            double gm = use_mask ? d_mask.at(x, y, 0) : 0;
            Vec3 gn{use_normal ? d_normal.at(x, y, 0) : 0,
                    use_normal ? d_normal.at(x, y, 1) : 0,
                    use_normal ? d_normal.at(x, y, 2) : 0};
            if (gr.x == 0 && gr.y == 0 && gr.z == 0 && gm == 0 && gn.x == 0 && gn.y == 0 &&
                gn.z == 0)
                continue;

            size_t idx = size_t(y) * rays.width + x;
            recs.clear();
            Vec3 rgb, nacc;
            double mask, depth;
            march_ray(field, rays.origins[idx], rays.directions[idx], opts, step_h,
                      rgb, mask, nacc, depth, &recs);
            if (recs.empty()) continue;

            // Backprop through the final normal normalization: N = nacc/|nacc|
            // (only emitted when mask > 0.5).
            Vec3 d_nacc{0, 0, 0};
            bool normals_active = use_normal && mask > 0.5;
            if (normals_active) {
                double nn = norm(nacc);
                if (nn > 1e-12) {
                    Vec3 N = nacc / nn;
                    double proj = dot(gn, N);
                    d_nacc = (gn - N * proj) / nn;
                } else {
                    normals_active = false;
                }
            }

            const double sum_gr = gr.x + gr.y + gr.z;
            const int n = int(recs.size());
            // dL/dw_i, including the white-background term rgb += (1 - sum w).
            std::vector<double> G(n);
            for (int i = 0; i < n; ++i) {
                const auto& r = recs[i];
                double g = dot(r.color, gr) - sum_gr + gm;
                if (normals_active && r.has_n) g += dot(d_nacc, r.n);
                G[i] = g;
            }
            // dL/dalpha_i = T_i G_i - suffix(G_j w_j) / (1 - alpha_i)
            double suffix = 0;
            for (int i = n - 1; i >= 0; --i) {
                const auto& r = recs[i];
                double one_m_a = 1.0 - r.alpha;
                double d_alpha = r.T * G[i] - (one_m_a > 1e-300 ? suffix / one_m_a : 0.0);
                suffix += G[i] * r.w;

                // alpha = 1 - exp(-sigma*dt): d alpha/d sigma = dt*(1-alpha)
                double d_sigma = d_alpha * r.dt * one_m_a;
                Vec3 d_color = gr * r.w;
                if (d_sigma != 0 || d_color.x != 0 || d_color.y != 0 || d_color.z != 0)
                    field.query_backward(r.p, d_sigma, d_color, grad);

                if (normals_active && r.has_n) {
                    Vec3 d_n = d_nacc * r.w;
                    // n = -g/|g|; recompute g for the jacobian
                    Vec3 gvec = fd_density_gradient(field, r.p, step_h);
                    double gl = norm(gvec);
                    if (gl > 1e-12) {
                        Vec3 nunit = -gvec / gl;
                        double proj = dot(d_n, nunit);
                        Vec3 d_v = (d_n - nunit * proj) / gl;  // d wrt (-g)
                        for (int k = 0; k < 3; ++k) {
                            double dgk = -d_v[k];  // g = -v
                            if (dgk == 0) continue;
                            Vec3 pa = r.p, pb = r.p;
                            pa[k] += step_h;
                            pb[k] -= step_h;
                            field.density_backward(pa, dgk / (2 * step_h), grad);
                            field.density_backward(pb, -dgk / (2 * step_h), grad);
                        }
                    }
                }
            }
        }
}

DensityGrid density_grid(const ScalarField& field, int resolution, const Aabb& bounds) {
    if (resolution < 2) throw std::invalid_argument("density_grid: resolution must be >= 2");
    DensityGrid g;
    g.nx = g.ny = g.nz = resolution;
    g.bounds = bounds;
    g.values.resize(size_t(resolution) * resolution * resolution);
    Vec3 ext = bounds.extent();
    for (int k = 0; k < resolution; ++k)
        for (int j = 0; j < resolution; ++j)
            for (int i = 0; i < resolution; ++i) {
                Vec3 p{bounds.lo.x + ext.x * i / double(resolution - 1),
                       bounds.lo.y + ext.y * j / double(resolution - 1),
                       bounds.lo.z + ext.z * k / double(resolution - 1)};
                g.values[(size_t(k) * resolution + j) * resolution + i] = field.density_at(p);
            }
    return g;
}

}  // namespace distill3d
