#include "cellattn/encoder.hpp"

#include <fstream>
#include <sstream>

namespace cellattn {

Family family_from_string(const std::string& s) {
    if (s == "rgb" || s == "RGB") return Family::RGB;
    if (s == "mhl" || s == "MHL") return Family::MHL;
    throw ConfigError("unknown family: " + s + " (expected rgb|mhl)");
}

std::string to_string(Family f) { return f == Family::RGB ? "rgb" : "mhl"; }

void EncoderConfig::validate() const {
    backbone.validate();
    if (heads < 1) throw ConfigError("heads must be >= 1");
    if (d_model % heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    if (d_model != backbone.num_classes)
        throw ConfigError("d_model must equal the backbone class-signal width");
    if (family == Family::RGB && backbone.input_channels != 1)
        throw ConfigError("RGB family runs one single-channel backbone per isolated channel; "
                          "set backbone.input_channels = 1");
    if (family == Family::MHL && backbone.input_channels != 3)
        throw ConfigError("MHL family consumes the full image; set backbone.input_channels = 3");
    if (mlp_dropout < 0.0f || mlp_dropout >= 1.0f)
        throw ConfigError("mlp_dropout must be in [0,1)");
    if (image_side < 8) throw ConfigError("image_side must be >= 8");
    if (mlp_dim1 < 1 || mlp_dim2 < 1) throw ConfigError("mlp dims must be >= 1");
    signal_len(backbone, image_side);
}

int64_t EncoderConfig::attention_rows() const { return signal_len(backbone, image_side); }

int64_t EncoderConfig::mlp_input_dim() const {
    // six concatenated (L,d) blocks for RGB, one for MHL
    const int64_t blocks = family == Family::RGB ? 6 : 1;
    return attention_rows() * d_model * blocks;
}

ParamStore init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    ParamStore ps;
    if (cfg.family == Family::RGB) {
        for (const char* ch : {"r", "g", "b"})
            init_backbone_params(cfg.backbone, ps, std::string("backbone_") + ch, rng);
        for (int i = 0; i < 6; ++i)
            init_head_weights(ps, "dh" + std::to_string(i), cfg.d_model, cfg.heads, rng);
    } else {
        init_backbone_params(cfg.backbone, ps, "backbone", rng);
        init_head_weights(ps, "mha", cfg.d_model, cfg.heads, rng);
    }
    const int64_t f = cfg.mlp_input_dim();
    ps.add_param("mlp.w1", Tensor::glorot_uniform({f, cfg.mlp_dim1}, f, cfg.mlp_dim1, rng));
    ps.add_param("mlp.b1", Tensor::zeros({cfg.mlp_dim1}, true));
    ps.add_param("mlp.w2", Tensor::glorot_uniform({cfg.mlp_dim1, cfg.mlp_dim2}, cfg.mlp_dim1,
                                                  cfg.mlp_dim2, rng));
    ps.add_param("mlp.b2", Tensor::zeros({cfg.mlp_dim2}, true));
    ps.add_param("mlp.w3", Tensor::glorot_uniform({cfg.mlp_dim2, cfg.num_classes}, cfg.mlp_dim2,
                                                  cfg.num_classes, rng));
    ps.add_param("mlp.b3", Tensor::zeros({cfg.num_classes}, true));
    return ps;
}

Tensor mlp_head(const Tensor& features, const EncoderConfig& cfg, ParamStore& ps, bool training,
                Rng& rng, Tensor* logits_out) {
    if (features.rank() != 2)
        throw ShapeError("mlp_head expects (N,F) features, got " + shape_str(features.shape()));
    Tensor h = relu(dense(features, ps.get("mlp.w1"), ps.get("mlp.b1")));
    h = dropout(h, cfg.mlp_dropout, training, rng);
    h = relu(dense(h, ps.get("mlp.w2"), ps.get("mlp.b2")));
    h = dropout(h, cfg.mlp_dropout, training, rng);
    Tensor logits = dense(h, ps.get("mlp.w3"), ps.get("mlp.b3"));
    if (logits_out) *logits_out = logits;
    return softmax(logits, 1);
}

Tensor encoder_forward(const Tensor& images, const EncoderConfig& cfg, ParamStore& ps,
                       bool training, Rng& rng, ForwardTrace* trace) {
    cfg.validate();
    if (images.rank() != 4)
        throw ShapeError("encoder_forward expects (N,3,H,W), got " + shape_str(images.shape()));
    if (images.dim(1) != 3 || images.dim(2) != cfg.image_side || images.dim(3) != cfg.image_side)
        throw ConfigError("encoder configured for (N,3," + std::to_string(cfg.image_side) + "," +
                          std::to_string(cfg.image_side) + "), got " + shape_str(images.shape()));
    const int64_t n_images = images.dim(0);
    std::vector<Tensor> rows;
    rows.reserve(static_cast<size_t>(n_images));

    if (cfg.family == Family::RGB) {
        std::vector<HeadWeights> dh_weights;
        for (int i = 0; i < 6; ++i)
            dh_weights.push_back(
                head_weights_from_store(ps, "dh" + std::to_string(i), cfg.d_model, cfg.heads));
        // per-channel batches through the three backbones
        Tensor red = slice(images, 1, 0, 1);
        Tensor green = slice(images, 1, 1, 2);
        Tensor blue = slice(images, 1, 2, 3);
        Tensor mr = backbone_forward_raw(red, cfg.backbone, ps, "backbone_r", training, trace);
        Tensor mg = backbone_forward_raw(green, cfg.backbone, ps, "backbone_g", training, trace);
        Tensor mb = backbone_forward_raw(blue, cfg.backbone, ps, "backbone_b", training, trace);
        for (int64_t n = 0; n < n_images; ++n) {
            Tensor sr = class_map_to_signal(mr, n);
            Tensor sg = class_map_to_signal(mg, n);
            Tensor sb = class_map_to_signal(mb, n);
            Tensor mal = mal_rgb(build_dhead_rgb(sr, sg, sb, dh_weights));
            rows.push_back(reshape(mal, {1, mal.numel()}));
        }
    } else {
        HeadWeights w = head_weights_from_store(ps, "mha", cfg.d_model, cfg.heads);
        Tensor maps = backbone_forward_raw(images, cfg.backbone, ps, "backbone", training, trace);
        for (int64_t n = 0; n < n_images; ++n) {
            Tensor mal = mal_mhl(class_map_to_signal(maps, n), w);
            rows.push_back(reshape(mal, {1, mal.numel()}));
        }
    }

    Tensor features = rows.size() == 1 ? rows[0] : concat(rows, 0);
    Tensor logits;
    Tensor probs = mlp_head(features, cfg, ps, training, rng, &logits);
    if (trace) {
        trace->logits = logits;
        trace->probabilities = probs;
    }
    return probs;
}

// ---- config file -----------------------------------------------------------

namespace {

std::vector<std::pair<std::string, std::string>> parse_kv_lines(std::istream& is,
                                                                const std::string& origin) {
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return kv;
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not an integer: " + value);
    }
}

float parse_float(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        const float v = std::stof(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": not a number: " + value);
    }
}

}  // namespace

void EncoderConfig::apply_override(const std::string& key, const std::string& value) {
    if (key == "family") {
        family = family_from_string(value);
        backbone.input_channels = family == Family::RGB ? 1 : 3;
    } else if (key == "backbone.kind") {
        backbone.kind = backbone_kind_from_string(value);
    } else if (key == "backbone.blocks") {
        backbone.blocks = parse_int(key, value);
    } else if (key == "backbone.base_filters") {
        backbone.base_filters = parse_int(key, value);
    } else if (key == "backbone.downsample_stages") {
        backbone.downsample_stages = parse_int(key, value);
    } else if (key == "heads") {
        heads = parse_int(key, value);
    } else if (key == "image_side") {
        image_side = parse_int(key, value);
    } else if (key == "mlp_dropout") {
        mlp_dropout = parse_float(key, value);
    } else {
        throw ConfigError("unknown model config key: " + key);
    }
}

EncoderConfig EncoderConfig::from_kv(const std::vector<std::pair<std::string, std::string>>& kv) {
    EncoderConfig cfg;
    for (const auto& [k, v] : kv) cfg.apply_override(k, v);
    return cfg;
}

EncoderConfig EncoderConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open model config: " + path);
    return from_kv(parse_kv_lines(is, path));
}

std::string EncoderConfig::to_kv_text() const {
    std::ostringstream os;
    os << "family = " << to_string(family) << "\n";
    os << "backbone.kind = " << to_string(backbone.kind) << "\n";
    os << "backbone.blocks = " << backbone.blocks << "\n";
    os << "backbone.base_filters = " << backbone.base_filters << "\n";
    os << "backbone.downsample_stages = " << backbone.downsample_stages << "\n";
    os << "heads = " << heads << "\n";
    os << "image_side = " << image_side << "\n";
    os << "mlp_dropout = " << mlp_dropout << "\n";
    return os.str();
}

}  // namespace cellattn
