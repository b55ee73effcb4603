#pragma once

#include <string>

#include "distill3d/image.hpp"
#include "distill3d/rng.hpp"

namespace distill3d {

// Piecewise-linear weight ramp, constant outside [start_step, end_step].
struct WeightSchedule {
    std::string name;
    double start_value = 0;
    double end_value = 0;
    int start_step = 0;
    int end_step = 0;
};

double schedule_value(const WeightSchedule& s, int step);

// Eq-style reference-view loss: lambda_rgb * mean-L1(rgb) + lambda_mask * mean-MSE(mask).
double reference_view_loss(const Image& I, const Image& M, const Image& I0,
                           const Image& M0, double lambda_rgb, double lambda_mask);

// Same loss with gradients w.r.t. the rendered rgb and mask.
double reference_view_loss_grad(const Image& I, const Image& M, const Image& I0,
                                const Image& M0, double lambda_rgb, double lambda_mask,
                                Image& dI, Image& dM);

// One of the 8 pixel-shift directions used by the smoothness loss.
struct ShiftDir {
    int dx = 1;
    int dy = 0;
};
ShiftDir sample_shift_dir(Rng& rng);

// Mean squared difference between the normal map and a 1-pixel shift of it
// (edge-replicated borders). When a mask is given only pixels with
// mask > 0.5 contribute.
double normal_smoothness(const Image& N, const ShiftDir& dir, const Image* mask = nullptr);
double normal_smoothness(const Image& N, Rng& rng, const Image* mask = nullptr);
double normal_smoothness_grad(const Image& N, const ShiftDir& dir, const Image* mask,
                              Image& dN);

// Sum of squared per-vertex offsets (coordinates flattened).
double offset_penalty(const std::vector<double>& delta_v);
void offset_penalty_grad(const std::vector<double>& delta_v, double weight,
                         std::vector<double>& grad);

}  // namespace distill3d
