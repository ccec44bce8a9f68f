#include "cellattn/explain.hpp"

#include <algorithm>
#include <cmath>

namespace cellattn {

namespace {

// classic jet ramp: blue -> cyan -> yellow -> red
void jet(float v, float& r, float& g, float& b) {
    v = std::clamp(v, 0.0f, 1.0f);
    r = std::clamp(1.5f - std::fabs(4.0f * v - 3.0f), 0.0f, 1.0f);
    g = std::clamp(1.5f - std::fabs(4.0f * v - 2.0f), 0.0f, 1.0f);
    b = std::clamp(1.5f - std::fabs(4.0f * v - 1.0f), 0.0f, 1.0f);
}

const Tensor* find_activation(const ForwardTrace& trace, const std::string& selector) {
    if (trace.conv_activations.empty())
        throw ConfigError("gradcam: model recorded no convolutional activations");
    if (selector.empty()) return &trace.conv_activations.back().second;
    for (const auto& [name, t] : trace.conv_activations)
        if (name == selector) return &t;
    std::string known;
    for (const auto& [name, t] : trace.conv_activations) known += " " + name;
    throw ConfigError("gradcam: unknown layer '" + selector + "'; available:" + known);
}

}  // namespace

std::vector<float> cam_from_activation(std::span<const float> activations,
                                       std::span<const float> grads, int64_t maps, int64_t h,
                                       int64_t w) {
    const int64_t plane = h * w;
    if (static_cast<int64_t>(activations.size()) != maps * plane ||
        grads.size() != activations.size())
        throw ConfigError("cam_from_activation: activation/gradient sizes disagree");
    std::vector<float> out(static_cast<size_t>(plane), 0.0f);
    for (int64_t k = 0; k < maps; ++k) {
        double alpha = 0.0;  // global average pooling of the gradient
        for (int64_t v = 0; v < plane; ++v) alpha += grads[static_cast<size_t>(k * plane + v)];
        alpha /= static_cast<double>(plane);
        for (int64_t v = 0; v < plane; ++v)
            out[static_cast<size_t>(v)] +=
                static_cast<float>(alpha * activations[static_cast<size_t>(k * plane + v)]);
    }
    for (auto& v : out) v = std::max(v, 0.0f);
    return out;
}

std::vector<std::string> gradcam_layers(const EncoderConfig& cfg, ParamStore& ps) {
    Rng rng(0);
    Tensor probe = Tensor::zeros({1, 3, cfg.image_side, cfg.image_side});
    ForwardTrace trace;
    encoder_forward(probe, cfg, ps, false, rng, &trace);
    std::vector<std::string> names;
    for (const auto& [name, t] : trace.conv_activations) names.push_back(name);
    return names;
}

SaliencyMap gradcam(const EncoderConfig& cfg, ParamStore& ps, const Tensor& image,
                    int target_class, const std::string& layer_selector,
                    const std::string& image_id) {
    if (target_class < 0 || target_class >= cfg.num_classes)
        throw ConfigError("gradcam: target class " + std::to_string(target_class) +
                          " out of range");
    Tensor batched = image;
    if (image.rank() == 3)
        batched = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    if (batched.rank() != 4 || batched.dim(0) != 1)
        throw ShapeError("gradcam expects a single (3,H,W) image, got " +
                         shape_str(image.shape()));

    Rng rng(0);  // inference path; dropout inactive
    ForwardTrace trace;
    encoder_forward(batched, cfg, ps, false, rng, &trace);
    const Tensor* act = find_activation(trace, layer_selector);
    if (!act->requires_grad())
        throw ConfigError("gradcam: selected activation carries no gradient path");

    // y_c is the pre-softmax logit of the target class
    Tensor y_c = select_scalar(trace.logits, target_class);
    backward(y_c);

    const int64_t K = act->dim(1), h = act->dim(2), w = act->dim(3);
    std::vector<float> map = cam_from_activation(act->data(), act->grad(), K, h, w);

    SaliencyMap out;
    out.height = static_cast<int>(batched.dim(2));
    out.width = static_cast<int>(batched.dim(3));
    out.values = bilinear_resize(map, static_cast<int>(h), static_cast<int>(w), out.height,
                                 out.width);
    for (auto& v : out.values) v = std::max(v, 0.0f);
    out.source_image_id = image_id;
    out.target_class = target_class;
    float mx = 0.0f;
    for (float v : out.values) mx = std::max(mx, v);
    if (mx > 0.0f)
        for (auto& v : out.values) v /= mx;
    out.normalized = true;
    return out;
}

std::vector<float> gmean(const std::vector<std::vector<float>>& maps,
                         const std::vector<double>& weights, float floor_eps) {
    if (maps.empty()) throw ConfigError("gmean: empty map list");
    if (maps.size() != weights.size())
        throw ConfigError("gmean: " + std::to_string(maps.size()) + " maps vs " +
                          std::to_string(weights.size()) + " weights");
    const size_t n = maps[0].size();
    double wsum = 0.0;
    for (size_t i = 0; i < maps.size(); ++i) {
        if (maps[i].size() != n)
            throw ConfigError("gmean: map " + std::to_string(i) + " size mismatch");
        if (weights[i] <= 0.0) throw ConfigError("gmean: weights must be > 0");
        wsum += weights[i];
    }
    std::vector<float> out(n);
    for (size_t p = 0; p < n; ++p) {
        double acc = 0.0;
        for (size_t i = 0; i < maps.size(); ++i)
            acc += weights[i] * std::log(std::max(static_cast<double>(maps[i][p]),
                                                  static_cast<double>(floor_eps)));
        out[p] = static_cast<float>(std::exp(acc / wsum));
    }
    return out;
}

CorrelationImage correlation_image(const std::vector<float>& gmean_shape,
                                   const std::vector<float>& gmean_gradcam, int height, int width,
                                   int halfwidth) {
    if (halfwidth < 1) throw ConfigError("correlation_image: halfwidth must be >= 1");
    const size_t n = static_cast<size_t>(height) * width;
    if (gmean_shape.size() != n || gmean_gradcam.size() != n)
        throw ConfigError("correlation_image: map sizes do not match " + std::to_string(height) +
                          "x" + std::to_string(width));
    CorrelationImage out;
    out.height = height;
    out.width = width;
    out.window_halfwidth = halfwidth;
    out.values.assign(n, 0.0f);
    for (int y = 0; y < height; ++y) {
        const int y0 = std::max(0, y - halfwidth);
        const int y1 = std::min(height - 1, y + halfwidth);
        for (int x = 0; x < width; ++x) {
            const int x0 = std::max(0, x - halfwidth);
            const int x1 = std::min(width - 1, x + halfwidth);
            const int count = (y1 - y0 + 1) * (x1 - x0 + 1);
            double sa = 0.0, sb = 0.0;
            for (int yy = y0; yy <= y1; ++yy)
                for (int xx = x0; xx <= x1; ++xx) {
                    sa += gmean_shape[static_cast<size_t>(yy) * width + xx];
                    sb += gmean_gradcam[static_cast<size_t>(yy) * width + xx];
                }
            const double ma = sa / count, mb = sb / count;
            double cov = 0.0, va = 0.0, vb = 0.0;
            for (int yy = y0; yy <= y1; ++yy)
                for (int xx = x0; xx <= x1; ++xx) {
                    const double da = gmean_shape[static_cast<size_t>(yy) * width + xx] - ma;
                    const double db = gmean_gradcam[static_cast<size_t>(yy) * width + xx] - mb;
                    cov += da * db;
                    va += da * da;
                    vb += db * db;
                }
            // zero-variance windows carry no evidence
            if (va <= 0.0 || vb <= 0.0) continue;
            const double r = cov / std::sqrt(va * vb);
            out.values[static_cast<size_t>(y) * width + x] =
                static_cast<float>(std::clamp(r, -1.0, 1.0));
        }
    }
    return out;
}

RatioScores ratio_scores(const CorrelationImage& corr, double threshold) {
    if (threshold <= 0.0 || threshold > 1.0)
        throw ConfigError("ratio_scores: threshold must be in (0,1]");
    RatioScores rs;
    rs.threshold = threshold;
    if (corr.values.empty()) throw ConfigError("ratio_scores: empty correlation image");
    size_t pos = 0, neg = 0;
    for (float v : corr.values) {
        if (v > threshold)
            ++pos;
        else if (v < -threshold)
            ++neg;
    }
    const double total = static_cast<double>(corr.values.size());
    rs.positive_ratio = pos / total;
    rs.negative_ratio = neg / total;
    rs.neutral_ratio = (total - pos - neg) / total;
    return rs;
}

Image overlay_heatmap(const Image& img, const SaliencyMap& saliency) {
    if (img.channels != 3)
        throw ConfigError("overlay_heatmap expects a 3-channel image");
    if (saliency.height != img.height || saliency.width != img.width)
        throw ConfigError("overlay_heatmap: saliency " + std::to_string(saliency.height) + "x" +
                          std::to_string(saliency.width) + " vs image " +
                          std::to_string(img.height) + "x" + std::to_string(img.width));
    Image out(3, img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float s = std::clamp(
                saliency.values[static_cast<size_t>(y) * img.width + x], 0.0f, 1.0f);
            float r, g, b;
            jet(s, r, g, b);
            out.at(0, y, x) = (1.0f - s) * img.at(0, y, x) + s * r;
            out.at(1, y, x) = (1.0f - s) * img.at(1, y, x) + s * g;
            out.at(2, y, x) = (1.0f - s) * img.at(2, y, x) + s * b;
        }
    return out;
}

std::vector<float> luminance_map(const Image& img) {
    std::vector<float> out(img.plane_size());
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out[static_cast<size_t>(y) * img.width + x] =
                (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0f;
    return out;
}

}  // namespace cellattn
