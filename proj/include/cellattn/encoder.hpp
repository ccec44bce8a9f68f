#pragma once

#include <string>

#include "cellattn/attention.hpp"
#include "cellattn/backbone.hpp"
#include "cellattn/params.hpp"

namespace cellattn {

enum class Family { RGB, MHL };

Family family_from_string(const std::string& s);
std::string to_string(Family f);

struct EncoderConfig {
    Family family = Family::MHL;
    int heads = 2;
    int d_model = 2;  // class-signal width coming out of the backbone
    BackboneConfig backbone;
    int image_side = 64;
    int mlp_dim1 = 1024;
    int mlp_dim2 = 512;
    float mlp_dropout = 0.3f;
    int num_classes = 2;

    void validate() const;
    // Flattened feature width entering the MLP head.
    int64_t mlp_input_dim() const;
    int64_t attention_rows() const;  // L

    // Line-oriented key=value model config file.
    static EncoderConfig from_file(const std::string& path);
    static EncoderConfig from_kv(const std::vector<std::pair<std::string, std::string>>& kv);
    void apply_override(const std::string& key, const std::string& value);
    std::string to_kv_text() const;
};

// Fresh parameter store for the configured model (seeded init).
ParamStore init_encoder_params(const EncoderConfig& cfg, Rng& rng);

// mlp: dense(1024) -> ReLU -> dropout -> dense(512) -> ReLU -> dropout ->
// dense(num_classes); rows of the softmax output sum to 1.
Tensor mlp_head(const Tensor& features, const EncoderConfig& cfg, ParamStore& ps, bool training,
                Rng& rng, Tensor* logits_out = nullptr);

// images (N,3,side,side) -> class probabilities (N,2). The RGB family
// isolates channels and runs one backbone per channel into six attention
// blocks; MHL runs one backbone on the full image into one self-attention
// block. Inference (training=false) is deterministic.
Tensor encoder_forward(const Tensor& images, const EncoderConfig& cfg, ParamStore& ps,
                       bool training, Rng& rng, ForwardTrace* trace = nullptr);

}  // namespace cellattn
