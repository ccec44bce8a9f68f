#include "cellattn/attention.hpp"

#include <atomic>
#include <cmath>

namespace cellattn {

namespace {

std::atomic<uint64_t> g_sdp_calls{0};
std::atomic<uint64_t> g_mha_calls{0};

}  // namespace

uint64_t scaled_dot_attention_calls() { return g_sdp_calls.load(); }
uint64_t multi_head_attention_calls() { return g_mha_calls.load(); }
void reset_attention_counters() {
    g_sdp_calls = 0;
    g_mha_calls = 0;
}

HeadWeights init_head_weights(ParamStore& ps, const std::string& prefix, int d_model, int heads,
                              Rng& rng) {
    if (heads < 1) throw ConfigError("attention heads must be >= 1");
    if (d_model % heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                          std::to_string(heads));
    const int d_k = d_model / heads;
    HeadWeights w;
    w.d_model = d_model;
    w.d_k = d_k;
    for (int c = 0; c < heads; ++c) {
        const std::string hp = prefix + ".head" + std::to_string(c);
        w.wq.push_back(ps.add_param(hp + ".wq", Tensor::glorot_uniform({d_model, d_k}, d_model, d_k, rng)));
        w.wk.push_back(ps.add_param(hp + ".wk", Tensor::glorot_uniform({d_model, d_k}, d_model, d_k, rng)));
        w.wv.push_back(ps.add_param(hp + ".wv", Tensor::glorot_uniform({d_model, d_k}, d_model, d_k, rng)));
    }
    w.wo = ps.add_param(prefix + ".wo",
                        Tensor::glorot_uniform({heads * d_k, d_model}, heads * d_k, d_model, rng));
    return w;
}

HeadWeights head_weights_from_store(ParamStore& ps, const std::string& prefix, int d_model,
                                    int heads) {
    const int d_k = d_model / heads;
    HeadWeights w;
    w.d_model = d_model;
    w.d_k = d_k;
    for (int c = 0; c < heads; ++c) {
        const std::string hp = prefix + ".head" + std::to_string(c);
        w.wq.push_back(ps.get(hp + ".wq"));
        w.wk.push_back(ps.get(hp + ".wk"));
        w.wv.push_back(ps.get(hp + ".wv"));
    }
    w.wo = ps.get(prefix + ".wo");
    return w;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    g_sdp_calls.fetch_add(1, std::memory_order_relaxed);
    const float scale = 1.0f / std::sqrt(static_cast<float>(q.dim(1)));
    return sdp_attention(q, k, v, scale);
}

Tensor scaled_dot_attention_with_weights(const Tensor& q, const Tensor& k, const Tensor& v,
                                         std::vector<float>& weights) {
    g_sdp_calls.fetch_add(1, std::memory_order_relaxed);
    const float scale = 1.0f / std::sqrt(static_cast<float>(q.dim(1)));
    return sdp_attention(q, k, v, scale, &weights);
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const HeadWeights& w) {
    if (w.heads() < 1) throw ConfigError("multi_head_attention: no heads configured");
    g_mha_calls.fetch_add(1, std::memory_order_relaxed);
    std::vector<Tensor> heads;
    heads.reserve(static_cast<size_t>(w.heads()));
    for (int c = 0; c < w.heads(); ++c)
        heads.push_back(scaled_dot_attention(matmul(q, w.wq[static_cast<size_t>(c)]),
                                             matmul(k, w.wk[static_cast<size_t>(c)]),
                                             matmul(v, w.wv[static_cast<size_t>(c)])));
    Tensor cat = heads.size() == 1 ? heads[0] : concat(heads, 1);
    return matmul(cat, w.wo);
}

std::array<Tensor, 6> build_dhead_rgb(const Tensor& r, const Tensor& g, const Tensor& b,
                                      const std::vector<HeadWeights>& weights) {
    if (r.shape() != g.shape() || g.shape() != b.shape())
        throw ShapeError("build_dhead_rgb: channel signals disagree: R " + shape_str(r.shape()) +
                         ", G " + shape_str(g.shape()) + ", B " + shape_str(b.shape()));
    if (weights.size() != 6)
        throw ConfigError("build_dhead_rgb needs 6 weight blocks, got " +
                          std::to_string(weights.size()));
    // upper triangle of the channel-pair matrix; dh(i,j): Q from i, K,V from j
    const std::array<std::pair<const Tensor*, const Tensor*>, 6> pairs = {{
        {&r, &r}, {&r, &g}, {&r, &b}, {&g, &g}, {&g, &b}, {&b, &b},
    }};
    std::array<Tensor, 6> out;
    for (size_t i = 0; i < 6; ++i)
        out[i] = multi_head_attention(*pairs[i].first, *pairs[i].second, *pairs[i].second,
                                      weights[i]);
    return out;
}

Tensor mal_rgb(const std::array<Tensor, 6>& dheads) {
    for (size_t i = 1; i < 6; ++i)
        if (dheads[i].shape() != dheads[0].shape())
            throw ShapeError("mal_rgb: block " + std::to_string(i) + " shape " +
                             shape_str(dheads[i].shape()) + " != " + shape_str(dheads[0].shape()));
    return concat(std::vector<Tensor>(dheads.begin(), dheads.end()), 1);
}

Tensor mal_mhl(const Tensor& signal, const HeadWeights& w) {
    if (signal.rank() != 2)
        throw ShapeError("mal_mhl expects a (L,d) signal, got " + shape_str(signal.shape()));
    return multi_head_attention(signal, signal, signal, w);
}

std::array<Tensor, 3> isolate_channels(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ConfigError("isolate_channels expects a (3,H,W) image, got " +
                          shape_str(image.shape()));
    return {slice(image, 0, 0, 1), slice(image, 0, 1, 2), slice(image, 0, 2, 3)};
}

}  // namespace cellattn
