#pragma once

#include <string>
#include <vector>

#include "cellattn/params.hpp"
#include "cellattn/tensor.hpp"

namespace cellattn {

enum class BackboneKind { plain_cnn, residual, dense_concat };

BackboneKind backbone_kind_from_string(const std::string& s);
std::string to_string(BackboneKind k);

struct BackboneConfig {
    BackboneKind kind = BackboneKind::plain_cnn;
    int input_channels = 3;    // 1 (isolated channel) or 3 (full image)
    int blocks = 3;            // residual blocks / dense-block layers
    int base_filters = 8;
    int downsample_stages = 2;  // stride-2 reductions; spatial side shrinks 2^stages
    int num_classes = 2;

    void validate() const;
};

// Flattened signal rows for a square input: (side / 2^stages)^2. The side
// must be divisible by 2^stages.
int64_t signal_len(const BackboneConfig& cfg, int64_t image_side);

// Conv activations captured during a forward pass, in execution order, plus
// the classifier outputs once the encoder fills them in.
struct ForwardTrace {
    std::vector<std::pair<std::string, Tensor>> conv_activations;
    Tensor logits;
    Tensor probabilities;

    void record_conv(const std::string& name, const Tensor& t) {
        conv_activations.emplace_back(name, t);
    }
};

// ---- building blocks -----------------------------------------------------

void init_residual_block(ParamStore& ps, const std::string& prefix, int in_channels,
                         int out_channels, Rng& rng);
// Pre-activation transform H(x) plus the identity; a learned 1x1 projection
// carries the skip when channel counts differ.
Tensor residual_block(const Tensor& x, ParamStore& ps, const std::string& prefix, bool training);

void init_dense_block(ParamStore& ps, const std::string& prefix, int in_channels, int growth,
                      int layers, Rng& rng);
// Eq.-2 style block: layer i consumes the concatenation of the input and all
// previous layer outputs; each composite is BN -> ReLU -> 3x3 conv. Returns
// concat(x0, f1, ..., f_layers).
Tensor dense_block(const Tensor& x0, ParamStore& ps, const std::string& prefix, int layers,
                   bool training);

// ---- full backbone ---------------------------------------------------------

void init_backbone_params(const BackboneConfig& cfg, ParamStore& ps, const std::string& prefix,
                          Rng& rng);

// Batched core: images (N,C,H,W) -> class maps (N,num_classes,h,w).
Tensor backbone_forward_raw(const Tensor& images, const BackboneConfig& cfg, ParamStore& ps,
                            const std::string& prefix, bool training, ForwardTrace* trace = nullptr);

// Single image (C,H,W) -> flattened per-position class signal (L,num_classes).
Tensor backbone_forward(const Tensor& image, const BackboneConfig& cfg, ParamStore& ps,
                        const std::string& prefix, bool training, ForwardTrace* trace = nullptr);

// (N,num_classes,h,w) -> per-image signal (L,num_classes) for image n.
Tensor class_map_to_signal(const Tensor& maps, int64_t n);

}  // namespace cellattn
