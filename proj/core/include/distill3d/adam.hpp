#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace distill3d {

struct AdamState {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;
    std::vector<double> m, v;

    void step(std::vector<double>& params, const std::vector<double>& grad) {
        if (m.size() != params.size()) {
            m.assign(params.size(), 0.0);
            v.assign(params.size(), 0.0);
        }
        if (grad.size() != params.size())
            throw std::invalid_argument("adam: grad/param size mismatch");
        ++step_count;
        double c1 = 1.0 - std::pow(beta1, double(step_count));
        double c2 = 1.0 - std::pow(beta2, double(step_count));
        for (size_t i = 0; i < params.size(); ++i) {
            double g = grad[i];
            m[i] = beta1 * m[i] + (1 - beta1) * g;
            v[i] = beta2 * v[i] + (1 - beta2) * g * g;
            params[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

}  // namespace distill3d
