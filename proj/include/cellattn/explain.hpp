#pragma once

#include <string>
#include <vector>

#include "cellattn/encoder.hpp"
#include "cellattn/image.hpp"

namespace cellattn {

// Non-negative class activation map aligned to an image; max-scaled to [0,1]
// when normalized (unless all-zero).
struct SaliencyMap {
    std::vector<float> values;
    int height = 0;
    int width = 0;
    std::string source_image_id;
    int target_class = 0;
    bool normalized = false;
};

// Per-pixel Pearson correlation map in [-1,1]; degenerate (zero-variance)
// windows are stored as 0.
struct CorrelationImage {
    std::vector<float> values;
    int height = 0;
    int width = 0;
    int window_halfwidth = 2;
    float significance_threshold = 0.5f;
};

struct RatioScores {
    double positive_ratio = 0.0;
    double negative_ratio = 0.0;
    double neutral_ratio = 0.0;
    double threshold = 0.5;
};

// The weighting core: alpha_k = spatial mean of grads over map k, output
// ReLU(sum_k alpha_k A_k) at the activation resolution.
std::vector<float> cam_from_activation(std::span<const float> activations,
                                       std::span<const float> grads, int64_t maps, int64_t h,
                                       int64_t w);

// Gradient-weighted class activation map: alpha weights from the gradient of
// the pre-softmax target logit w.r.t. the selected conv activation, combined
// by cam_from_activation, bilinearly upsampled to the input resolution and
// max-normalized. An empty layer_selector picks the last convolution executed.
SaliencyMap gradcam(const EncoderConfig& cfg, ParamStore& ps, const Tensor& image,
                    int target_class, const std::string& layer_selector = "",
                    const std::string& image_id = "");

// Names of conv activations a given model records, in execution order.
std::vector<std::string> gradcam_layers(const EncoderConfig& cfg, ParamStore& ps);

// Weighted geometric mean per pixel: exp(sum(w_i ln x_i) / sum(w_i)), pixel
// values floored at `floor_eps` before the log.
std::vector<float> gmean(const std::vector<std::vector<float>>& maps,
                         const std::vector<double>& weights, float floor_eps = 1e-6f);

// Pearson correlation of the (2h+1)^2 windows centered at each pixel,
// windows clipped at the borders.
CorrelationImage correlation_image(const std::vector<float>& gmean_shape,
                                   const std::vector<float>& gmean_gradcam, int height, int width,
                                   int halfwidth = 2);

// positive = fraction of pixels with C > t, negative = fraction with C < -t.
RatioScores ratio_scores(const CorrelationImage& corr, double threshold = 0.5);

// Jet-style overlay: out = (1-s) * image + s * colormap(s); a zero map
// returns the image unchanged and a saturated pixel the pure top color.
Image overlay_heatmap(const Image& img, const SaliencyMap& saliency);

// Luminance (R,G,B mean) of an image, the aggregation input for the shape map.
std::vector<float> luminance_map(const Image& img);

}  // namespace cellattn
