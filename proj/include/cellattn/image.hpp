#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellattn/common.hpp"
#include "cellattn/tensor.hpp"

namespace cellattn {

// Planar float image, channel-major (CHW), values in [0,1] for stored data.
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int c, int h, int w) : channels(c), height(h), width(w),
                                 data(static_cast<size_t>(c) * h * w, 0.0f) {}

    float& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    size_t plane_size() const { return static_cast<size_t>(height) * width; }
};

// 8-bit RGB PNG (grayscale and RGBA inputs are widened/flattened to RGB).
// Values quantize as round(v*255) on write and reconstruct as v/255 on read.
void write_png(const std::string& path, const Image& img);
Image read_png(const std::string& path);

// Bilinear resample to side x side, per channel.
Image resample_image(const Image& img, int side);

// Bilinear resize of a single-channel map (h,w) -> (H,W).
std::vector<float> bilinear_resize(const std::vector<float>& map, int h, int w, int out_h,
                                   int out_w);

Tensor image_to_tensor(const Image& img, bool requires_grad = false);
Image tensor_to_image(const Tensor& t);

}  // namespace cellattn
