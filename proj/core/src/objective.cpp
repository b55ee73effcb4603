#include "distill3d/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace distill3d {

double schedule_value(const WeightSchedule& s, int step) {
    if (s.end_step <= s.start_step) return step < s.start_step ? s.start_value : s.end_value;
    if (step <= s.start_step) return s.start_value;
    if (step >= s.end_step) return s.end_value;
    double f = double(step - s.start_step) / double(s.end_step - s.start_step);
    return s.start_value + f * (s.end_value - s.start_value);
}

double reference_view_loss(const Image& I, const Image& M, const Image& I0,
                           const Image& M0, double lambda_rgb, double lambda_mask) {
    Image dI, dM;
    return reference_view_loss_grad(I, M, I0, M0, lambda_rgb, lambda_mask, dI, dM);
}

double reference_view_loss_grad(const Image& I, const Image& M, const Image& I0,
                                const Image& M0, double lambda_rgb, double lambda_mask,
                                Image& dI, Image& dM) {
    if (!I.same_shape(I0) || !M.same_shape(M0))
        throw std::invalid_argument("reference_view_loss: shape mismatch");

    dI = Image(I.width(), I.height(), I.channels());
    dM = Image(M.width(), M.height(), M.channels());

    double l1 = 0;
    double inv_n_rgb = 1.0 / double(I.size());
    for (size_t i = 0; i < I.size(); ++i) {
        double d = I0.raw()[i] - I.raw()[i];
        l1 += std::abs(d);
        // d/dI of |I0 - I| = -sign(I0 - I)
        dI.raw()[i] = -lambda_rgb * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)) * inv_n_rgb;
    }
    l1 *= inv_n_rgb;

    double l2 = 0;
    double inv_n_mask = 1.0 / double(M.size());
    for (size_t i = 0; i < M.size(); ++i) {
        double d = M0.raw()[i] - M.raw()[i];
        l2 += d * d;
        dM.raw()[i] = -2.0 * lambda_mask * d * inv_n_mask;
    }
    l2 *= inv_n_mask;

    return lambda_rgb * l1 + lambda_mask * l2;
}

ShiftDir sample_shift_dir(Rng& rng) {
    static const ShiftDir dirs[8] = {{1, 0},  {-1, 0}, {0, 1},  {0, -1},
                                     {1, 1},  {1, -1}, {-1, 1}, {-1, -1}};
    return dirs[rng.uniform_int(0, 7)];
}

namespace {

inline int clampi(int v, int lo, int hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

double normal_smoothness(const Image& N, const ShiftDir& dir, const Image* mask) {
    Image dN;
    Image copy = N;  // grad discarded
    return normal_smoothness_grad(copy, dir, mask, dN);
}

double normal_smoothness(const Image& N, Rng& rng, const Image* mask) {
    return normal_smoothness(N, sample_shift_dir(rng), mask);
}

double normal_smoothness_grad(const Image& N, const ShiftDir& dir, const Image* mask,
                              Image& dN) {
    const int w = N.width(), h = N.height(), c = N.channels();
    dN = Image(w, h, c);
    double sum = 0;
    double inv_n = 1.0 / double(size_t(w) * h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (mask && mask->at(x, y, 0) <= 0.5) continue;
            int xs = clampi(x + dir.dx, 0, w - 1);
            int ys = clampi(y + dir.dy, 0, h - 1);
            for (int ch = 0; ch < c; ++ch) {
                double d = N.at(x, y, ch) - N.at(xs, ys, ch);
                sum += d * d;
                dN.at(x, y, ch) += 2.0 * d * inv_n;
                dN.at(xs, ys, ch) -= 2.0 * d * inv_n;
            }
        }
    }
    return sum * inv_n;
}

double offset_penalty(const std::vector<double>& delta_v) {
    double s = 0;
    for (double v : delta_v) s += v * v;
    return s;
}

void offset_penalty_grad(const std::vector<double>& delta_v, double weight,
                         std::vector<double>& grad) {
    if (grad.size() != delta_v.size()) grad.assign(delta_v.size(), 0.0);
    for (size_t i = 0; i < delta_v.size(); ++i) grad[i] += 2.0 * weight * delta_v[i];
}

}  // namespace distill3d
