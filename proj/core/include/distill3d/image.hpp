#pragma once

#include <string>
#include <vector>

#include "distill3d/types.hpp"

namespace distill3d {

// Row-major H x W x C image of doubles, values nominally in [0,1].
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels, double fill = 0.0)
        : w_(width), h_(height), c_(channels),
          data_(size_t(width) * height * channels, fill) {}

    int width() const { return w_; }
    int height() const { return h_; }
    int channels() const { return c_; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& at(int x, int y, int ch) { return data_[(size_t(y) * w_ + x) * c_ + ch]; }
    double at(int x, int y, int ch) const { return data_[(size_t(y) * w_ + x) * c_ + ch]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const Image& o) const {
        return w_ == o.w_ && h_ == o.h_ && c_ == o.c_;
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

private:
    int w_ = 0, h_ = 0, c_ = 0;
    std::vector<double> data_;
};

// PNG I/O (8-bit). Reads RGB or RGBA; grayscale is expanded to RGB.
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

double max_abs_diff(const Image& a, const Image& b);
double mse(const Image& a, const Image& b);
Image resize_bilinear(const Image& src, int new_width, int new_height);

}  // namespace distill3d
