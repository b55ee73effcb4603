#include "distill3d/image.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace distill3d {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open PNG: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("PNG decode error: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    int channels = png_get_channels(png, info);
    std::vector<png_byte> row(size_t(w) * channels);
    Image img(int(w), int(h), channels);
    for (png_uint_32 y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 x = 0; x < w; ++x)
            for (int ch = 0; ch < channels; ++ch)
                img.at(int(x), int(y), ch) = row[size_t(x) * channels + ch] / 255.0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_png(const std::string& path, const Image& img) {
    if (img.channels() != 1 && img.channels() != 3 && img.channels() != 4)
        throw std::runtime_error("write_png: unsupported channel count");

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot write PNG: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("PNG encode error: " + path);
    }
    png_init_io(png, fp.get());

    int color = img.channels() == 1   ? PNG_COLOR_TYPE_GRAY
                : img.channels() == 3 ? PNG_COLOR_TYPE_RGB
                                      : PNG_COLOR_TYPE_RGBA;
    png_set_IHDR(png, info, img.width(), img.height(), 8, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(size_t(img.width()) * img.channels());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x)
            for (int ch = 0; ch < img.channels(); ++ch) {
                double v = std::clamp(img.at(x, y, ch), 0.0, 1.0);
                row[size_t(x) * img.channels() + ch] = png_byte(std::lround(v * 255.0));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

double max_abs_diff(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.raw()[i] - b.raw()[i]));
    return m;
}

double mse(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mse: shape mismatch");
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a.raw()[i] - b.raw()[i];
        s += d * d;
    }
    return a.size() ? s / double(a.size()) : 0.0;
}

Image resize_bilinear(const Image& src, int new_width, int new_height) {
    if (src.width() == new_width && src.height() == new_height) return src;
    Image dst(new_width, new_height, src.channels());
    for (int y = 0; y < new_height; ++y) {
        double sy = (y + 0.5) * src.height() / double(new_height) - 0.5;
        int y0 = std::clamp(int(std::floor(sy)), 0, src.height() - 1);
        int y1 = std::min(y0 + 1, src.height() - 1);
        double fy = std::clamp(sy - y0, 0.0, 1.0);
        for (int x = 0; x < new_width; ++x) {
            double sx = (x + 0.5) * src.width() / double(new_width) - 0.5;
            int x0 = std::clamp(int(std::floor(sx)), 0, src.width() - 1);
            int x1 = std::min(x0 + 1, src.width() - 1);
            double fx = std::clamp(sx - x0, 0.0, 1.0);
            for (int ch = 0; ch < src.channels(); ++ch) {
                double top = src.at(x0, y0, ch) * (1 - fx) + src.at(x1, y0, ch) * fx;
                double bot = src.at(x0, y1, ch) * (1 - fx) + src.at(x1, y1, ch) * fx;
                dst.at(x, y, ch) = top * (1 - fy) + bot * fy;
            }
        }
    }
    return dst;
}

}  // namespace distill3d
