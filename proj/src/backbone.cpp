#include "cellattn/backbone.hpp"

#include <cmath>

namespace cellattn {

namespace {

constexpr float kBnEps = 1e-5f;
constexpr float kBnMomentum = 0.9f;

void init_conv(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch, int ksize,
               Rng& rng) {
    const int64_t fan_in = static_cast<int64_t>(in_ch) * ksize * ksize;
    const int64_t fan_out = static_cast<int64_t>(out_ch) * ksize * ksize;
    ps.add_param(prefix + ".kernel",
                 Tensor::glorot_uniform({out_ch, in_ch, ksize, ksize}, fan_in, fan_out, rng));
    ps.add_param(prefix + ".bias", Tensor::zeros({out_ch}, true));
}

void init_bn(ParamStore& ps, const std::string& prefix, int channels) {
    ps.add_param(prefix + ".gamma", Tensor::full({channels}, 1.0f, true));
    ps.add_param(prefix + ".beta", Tensor::zeros({channels}, true));
    ps.add_buffer(prefix + ".running_mean", Tensor::zeros({channels}));
    ps.add_buffer(prefix + ".running_var", Tensor::full({channels}, 1.0f));
}

Tensor apply_conv(const Tensor& x, ParamStore& ps, const std::string& prefix, int stride,
                  int padding) {
    return bias_add_nchw(conv2d(x, ps.get(prefix + ".kernel"), stride, padding),
                         ps.get(prefix + ".bias"));
}

// Batch statistics while training (running averages updated with momentum
// 0.9), frozen running statistics at inference.
Tensor apply_bn(const Tensor& x, ParamStore& ps, const std::string& prefix, bool training) {
    Tensor& gamma = ps.get(prefix + ".gamma");
    Tensor& beta = ps.get(prefix + ".beta");
    Tensor& rmean = ps.get(prefix + ".running_mean");
    Tensor& rvar = ps.get(prefix + ".running_var");
    if (!training)
        return batchnorm_infer(x, gamma, beta, rmean.data(), rvar.data(), kBnEps);
    std::vector<float> bmean, bvar;
    Tensor y = batchnorm(x, gamma, beta, kBnEps, &bmean, &bvar);
    auto rm = rmean.mutable_data();
    auto rv = rvar.mutable_data();
    for (size_t c = 0; c < bmean.size(); ++c) {
        rm[c] = kBnMomentum * rm[c] + (1.0f - kBnMomentum) * bmean[c];
        rv[c] = kBnMomentum * rv[c] + (1.0f - kBnMomentum) * bvar[c];
    }
    return y;
}

int growth_for(const BackboneConfig& cfg) { return std::max(1, cfg.base_filters / 2); }

}  // namespace

BackboneKind backbone_kind_from_string(const std::string& s) {
    if (s == "plain_cnn") return BackboneKind::plain_cnn;
    if (s == "residual") return BackboneKind::residual;
    if (s == "dense_concat") return BackboneKind::dense_concat;
    throw ConfigError("unknown backbone kind: " + s +
                      " (expected plain_cnn|residual|dense_concat)");
}

std::string to_string(BackboneKind k) {
    switch (k) {
        case BackboneKind::plain_cnn: return "plain_cnn";
        case BackboneKind::residual: return "residual";
        case BackboneKind::dense_concat: return "dense_concat";
    }
    throw ConfigError("invalid backbone kind value");
}

void BackboneConfig::validate() const {
    if (input_channels != 1 && input_channels != 3)
        throw ConfigError("backbone input_channels must be 1 or 3, got " +
                          std::to_string(input_channels));
    if (blocks < 1) throw ConfigError("backbone blocks must be >= 1");
    if (base_filters < 1) throw ConfigError("backbone base_filters must be >= 1");
    if (downsample_stages < 0) throw ConfigError("backbone downsample_stages must be >= 0");
    if (kind == BackboneKind::plain_cnn && downsample_stages > 2)
        throw ConfigError("plain_cnn has exactly 3 conv layers and supports at most 2 "
                          "downsample stages, got " +
                          std::to_string(downsample_stages));
    if (num_classes < 2) throw ConfigError("backbone num_classes must be >= 2");
}

int64_t signal_len(const BackboneConfig& cfg, int64_t image_side) {
    cfg.validate();
    const int64_t factor = int64_t{1} << cfg.downsample_stages;
    if (image_side < factor || image_side % factor != 0)
        throw ConfigError("image side " + std::to_string(image_side) + " not divisible by 2^" +
                          std::to_string(cfg.downsample_stages));
    const int64_t side = image_side / factor;
    return side * side;
}

// ---- residual block --------------------------------------------------------

void init_residual_block(ParamStore& ps, const std::string& prefix, int in_channels,
                         int out_channels, Rng& rng) {
    init_bn(ps, prefix + ".bn1", in_channels);
    init_conv(ps, prefix + ".conv1", in_channels, out_channels, 3, rng);
    init_bn(ps, prefix + ".bn2", out_channels);
    init_conv(ps, prefix + ".conv2", out_channels, out_channels, 3, rng);
    if (in_channels != out_channels) init_conv(ps, prefix + ".proj", in_channels, out_channels, 1, rng);
}

Tensor residual_block(const Tensor& x, ParamStore& ps, const std::string& prefix, bool training) {
    if (x.rank() != 4)
        throw ShapeError("residual_block expects (N,C,H,W), got " + shape_str(x.shape()));
    Tensor h = apply_conv(relu(apply_bn(x, ps, prefix + ".bn1", training)), ps, prefix + ".conv1",
                          1, 1);
    h = apply_conv(relu(apply_bn(h, ps, prefix + ".bn2", training)), ps, prefix + ".conv2", 1, 1);
    Tensor skip = x;
    if (ps.has(prefix + ".proj.kernel")) skip = apply_conv(x, ps, prefix + ".proj", 1, 0);
    if (h.shape() != skip.shape())
        throw ConfigError("residual_block transform output " + shape_str(h.shape()) +
                          " does not match skip " + shape_str(skip.shape()));
    return add(h, skip);
}

// ---- dense block -----------------------------------------------------------

void init_dense_block(ParamStore& ps, const std::string& prefix, int in_channels, int growth,
                      int layers, Rng& rng) {
    int ch = in_channels;
    for (int l = 0; l < layers; ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l);
        init_bn(ps, lp + ".bn", ch);
        init_conv(ps, lp + ".conv", ch, growth, 3, rng);
        ch += growth;
    }
}

Tensor dense_block(const Tensor& x0, ParamStore& ps, const std::string& prefix, int layers,
                   bool training) {
    if (x0.rank() != 4)
        throw ShapeError("dense_block expects (N,C,H,W), got " + shape_str(x0.shape()));
    if (layers < 1) throw ConfigError("dense_block layers must be >= 1");
    std::vector<Tensor> feats{x0};
    Tensor cur = x0;
    for (int l = 0; l < layers; ++l) {
        const std::string lp = prefix + ".l" + std::to_string(l);
        Tensor f = apply_conv(relu(apply_bn(cur, ps, lp + ".bn", training)), ps, lp + ".conv", 1, 1);
        if (f.dim(2) != x0.dim(2) || f.dim(3) != x0.dim(3))
            throw ConfigError("dense_block feature map spatial mismatch at layer " +
                              std::to_string(l));
        feats.push_back(f);
        cur = concat(feats, 1);
    }
    return cur;
}

// ---- full backbone ---------------------------------------------------------

void init_backbone_params(const BackboneConfig& cfg, ParamStore& ps, const std::string& prefix,
                          Rng& rng) {
    cfg.validate();
    const int stages = cfg.downsample_stages;
    switch (cfg.kind) {
        case BackboneKind::plain_cnn: {
            init_conv(ps, prefix + ".conv1", cfg.input_channels, cfg.base_filters, 3, rng);
            init_conv(ps, prefix + ".conv2", cfg.base_filters, cfg.base_filters, 3, rng);
            init_conv(ps, prefix + ".conv3", cfg.base_filters, cfg.num_classes, 3, rng);
            break;
        }
        case BackboneKind::residual: {
            init_conv(ps, prefix + ".stem.conv", cfg.input_channels, cfg.base_filters, 3, rng);
            init_bn(ps, prefix + ".stem.bn", cfg.base_filters);
            for (int b = 0; b < cfg.blocks; ++b)
                init_residual_block(ps, prefix + ".block" + std::to_string(b), cfg.base_filters,
                                    cfg.base_filters, rng);
            for (int t = 2; t <= stages; ++t) {
                const std::string tp = prefix + ".trans" + std::to_string(t);
                init_conv(ps, tp + ".conv", cfg.base_filters, cfg.base_filters, 3, rng);
                init_bn(ps, tp + ".bn", cfg.base_filters);
            }
            init_conv(ps, prefix + ".final_conv", cfg.base_filters, cfg.num_classes, 3, rng);
            break;
        }
        case BackboneKind::dense_concat: {
            const int g = growth_for(cfg);
            init_conv(ps, prefix + ".stem.conv", cfg.input_channels, cfg.base_filters, 3, rng);
            init_bn(ps, prefix + ".stem.bn", cfg.base_filters);
            init_dense_block(ps, prefix + ".stage1", cfg.base_filters, g, cfg.blocks, rng);
            int ch = cfg.base_filters + cfg.blocks * g;
            for (int t = 2; t <= stages; ++t) {
                const std::string tp = prefix + ".trans" + std::to_string(t);
                init_bn(ps, tp + ".bn", ch);
                init_conv(ps, tp + ".conv", ch, cfg.base_filters, 1, rng);
                init_dense_block(ps, prefix + ".stage" + std::to_string(t), cfg.base_filters, g,
                                 cfg.blocks, rng);
                ch = cfg.base_filters + cfg.blocks * g;
            }
            init_conv(ps, prefix + ".final_conv", ch, cfg.num_classes, 3, rng);
            break;
        }
    }
}

Tensor backbone_forward_raw(const Tensor& images, const BackboneConfig& cfg, ParamStore& ps,
                            const std::string& prefix, bool training, ForwardTrace* trace) {
    cfg.validate();
    if (images.rank() != 4)
        throw ShapeError("backbone_forward expects (N,C,H,W), got " + shape_str(images.shape()));
    if (images.dim(1) != cfg.input_channels)
        throw ConfigError("backbone configured for " + std::to_string(cfg.input_channels) +
                          " input channels, image has " + std::to_string(images.dim(1)));
    signal_len(cfg, images.dim(2));  // validates divisibility
    if (images.dim(2) != images.dim(3))
        throw ConfigError("backbone expects square inputs, got " + shape_str(images.shape()));

    const int stages = cfg.downsample_stages;
    auto rec = [&](const std::string& name, const Tensor& t) {
        if (trace) trace->record_conv(prefix + "." + name, t);
    };

    switch (cfg.kind) {
        case BackboneKind::plain_cnn: {
            Tensor x = apply_conv(images, ps, prefix + ".conv1", stages >= 1 ? 2 : 1, 1);
            rec("conv1", x);
            x = relu(x);
            x = apply_conv(x, ps, prefix + ".conv2", stages >= 2 ? 2 : 1, 1);
            rec("conv2", x);
            x = relu(x);
            x = apply_conv(x, ps, prefix + ".conv3", 1, 1);
            rec("conv3", x);
            return x;
        }
        case BackboneKind::residual: {
            Tensor x = apply_conv(images, ps, prefix + ".stem.conv", stages >= 1 ? 2 : 1, 1);
            rec("stem.conv", x);
            x = relu(apply_bn(x, ps, prefix + ".stem.bn", training));
            for (int b = 0; b < cfg.blocks; ++b)
                x = residual_block(x, ps, prefix + ".block" + std::to_string(b), training);
            for (int t = 2; t <= stages; ++t) {
                const std::string tp = prefix + ".trans" + std::to_string(t);
                x = apply_conv(x, ps, tp + ".conv", 2, 1);
                rec("trans" + std::to_string(t) + ".conv", x);
                x = relu(apply_bn(x, ps, tp + ".bn", training));
            }
            Tensor out = apply_conv(x, ps, prefix + ".final_conv", 1, 1);
            rec("final_conv", out);
            return out;
        }
        case BackboneKind::dense_concat: {
            Tensor x = apply_conv(images, ps, prefix + ".stem.conv", stages >= 1 ? 2 : 1, 1);
            rec("stem.conv", x);
            x = relu(apply_bn(x, ps, prefix + ".stem.bn", training));
            x = dense_block(x, ps, prefix + ".stage1", cfg.blocks, training);
            for (int t = 2; t <= stages; ++t) {
                const std::string tp = prefix + ".trans" + std::to_string(t);
                x = apply_conv(relu(apply_bn(x, ps, tp + ".bn", training)), ps, tp + ".conv", 1, 0);
                rec("trans" + std::to_string(t) + ".conv", x);
                x = avg_pool2d(x, 2);
                x = dense_block(x, ps, prefix + ".stage" + std::to_string(t), cfg.blocks, training);
            }
            Tensor out = apply_conv(x, ps, prefix + ".final_conv", 1, 1);
            rec("final_conv", out);
            return out;
        }
    }
    throw ConfigError("invalid backbone kind value");
}

Tensor class_map_to_signal(const Tensor& maps, int64_t n) {
    if (maps.rank() != 4)
        throw ShapeError("class_map_to_signal expects (N,C,h,w), got " + shape_str(maps.shape()));
    const int64_t C = maps.dim(1), L = maps.dim(2) * maps.dim(3);
    Tensor one = slice(maps, 0, n, n + 1);
    return transpose2d(reshape(one, {C, L}));
}

Tensor backbone_forward(const Tensor& image, const BackboneConfig& cfg, ParamStore& ps,
                        const std::string& prefix, bool training, ForwardTrace* trace) {
    if (image.rank() != 3)
        throw ShapeError("backbone_forward expects a (C,H,W) image, got " +
                         shape_str(image.shape()));
    Tensor batched = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    Tensor maps = backbone_forward_raw(batched, cfg, ps, prefix, training, trace);
    return class_map_to_signal(maps, 0);
}

}  // namespace cellattn
