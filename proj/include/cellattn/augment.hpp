#pragma once

#include <array>
#include <string>
#include <vector>

#include "cellattn/image.hpp"
#include "cellattn/rng.hpp"

namespace cellattn {

enum class AugmentKind { rotate, width_shift, height_shift, zca };

AugmentKind augment_kind_from_string(const std::string& s);
std::string to_string(AugmentKind k);

// Shift budget scales with the image side: 20 px at side 512.
int max_shift_pixels(int side);

// rotate: random angle in [-15, 15] degrees, bilinear, zero fill.
// width/height shift: random integer shift up to max_shift_pixels, zero fill.
// zca: per-image channel whitening (eps 1e-2) mapped back into [0,1].
Image augment(const Image& img, AugmentKind kind, Rng& rng);

Image rotate_image(const Image& img, double degrees);
Image shift_image(const Image& img, int dx, int dy);
Image add_noise(const Image& img, float sigma, Rng& rng);

// ZCA over the 3-channel pixel covariance. Fit on one image or on a batch;
// apply() returns raw whitened values (zero mean, unit channel variance),
// apply_rescaled() maps them back into [0,1] for storage.
class ZcaWhitener {
public:
    static ZcaWhitener fit(const std::vector<const Image*>& batch, float eps = 1e-2f);
    static ZcaWhitener fit(const Image& img, float eps = 1e-2f);

    Image apply(const Image& img) const;
    Image apply_rescaled(const Image& img) const;

    const std::array<double, 9>& transform() const { return w_; }
    const std::array<double, 3>& mean() const { return mean_; }

private:
    std::array<double, 9> w_{};     // 3x3 whitening matrix, row-major
    std::array<double, 3> mean_{};  // per-channel mean
};

}  // namespace cellattn
