#include "cellattn/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include <png.h>

namespace cellattn {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t quantize(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
    if (img.channels != 3)
        throw ConfigError("write_png expects a 3-channel image, got " +
                          std::to_string(img.channels));
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot open for write: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path);
    }
    png_init_io(png, fp.get());
    // no ancillary chunks (no timestamps): byte-identical output per content
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[static_cast<size_t>(x) * 3 + c] = quantize(img.at(c, y, x));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open image: " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("png read failed: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    // normalize any input to 8-bit RGB
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    Image img(3, h, w);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = static_cast<float>(row[static_cast<size_t>(x) * 3 + c]) / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

std::vector<float> bilinear_resize(const std::vector<float>& map, int h, int w, int out_h,
                                   int out_w) {
    if (h < 1 || w < 1 || out_h < 1 || out_w < 1)
        throw ConfigError("bilinear_resize: degenerate dimensions");
    if (static_cast<size_t>(h) * w != map.size())
        throw ConfigError("bilinear_resize: map size does not match dims");
    std::vector<float> out(static_cast<size_t>(out_h) * out_w);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        // pixel-center mapping, clamped at borders
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            const double v = (1 - wy) * ((1 - wx) * map[static_cast<size_t>(y0) * w + x0] +
                                         wx * map[static_cast<size_t>(y0) * w + x1]) +
                             wy * ((1 - wx) * map[static_cast<size_t>(y1) * w + x0] +
                                   wx * map[static_cast<size_t>(y1) * w + x1]);
            out[static_cast<size_t>(y) * out_w + x] = static_cast<float>(v);
        }
    }
    return out;
}

Image resample_image(const Image& img, int side) {
    if (side < 8) throw ConfigError("resample side must be >= 8, got " + std::to_string(side));
    if (img.height < 1 || img.width < 1) throw ConfigError("resample: degenerate input image");
    Image out(img.channels, side, side);
    for (int c = 0; c < img.channels; ++c) {
        std::vector<float> plane(img.data.begin() + c * img.plane_size(),
                                 img.data.begin() + (c + 1) * img.plane_size());
        std::vector<float> rs = bilinear_resize(plane, img.height, img.width, side, side);
        std::copy(rs.begin(), rs.end(), out.data.begin() + c * out.plane_size());
    }
    return out;
}

Tensor image_to_tensor(const Image& img, bool requires_grad) {
    return Tensor::from_data({img.channels, img.height, img.width}, img.data, requires_grad);
}

Image tensor_to_image(const Tensor& t) {
    if (t.rank() != 3)
        throw ShapeError("tensor_to_image expects (C,H,W), got " + shape_str(t.shape()));
    Image img(static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)));
    std::copy(t.data().begin(), t.data().end(), img.data.begin());
    return img;
}

}  // namespace cellattn
