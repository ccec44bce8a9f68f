#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cellattn/params.hpp"
#include "cellattn/tensor.hpp"

namespace cellattn {

// Per-head Q/K/V projections plus the shared output projection. With
// d_model=2 and two heads, d_k = d_v = 1 and sqrt(d_k) = 1.
struct HeadWeights {
    std::vector<Tensor> wq, wk, wv;  // one (d_model, d_k) matrix per head
    Tensor wo;                       // (heads * d_v, d_model)
    int d_model = 0;
    int d_k = 0;

    int heads() const { return static_cast<int>(wq.size()); }
};

HeadWeights init_head_weights(ParamStore& ps, const std::string& prefix, int d_model, int heads,
                              Rng& rng);
// Rebind an initialized block to tensors already present in a store.
HeadWeights head_weights_from_store(ParamStore& ps, const std::string& prefix, int d_model,
                                    int heads);

// softmax(Q K^T / sqrt(d_k)) V
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);
// Same, exposing the row-stochastic weight matrix (Lq x Lk) for inspection.
Tensor scaled_dot_attention_with_weights(const Tensor& q, const Tensor& k, const Tensor& v,
                                         std::vector<float>& weights);

// Concat(head_1..head_n) W_O with head_c = AT(Q Wq_c, K Wk_c, V Wv_c).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const HeadWeights& w);

// The six upper-triangular channel-pair blocks, fixed order:
// (R,R), (R,G), (R,B), (G,G), (G,B), (B,B). Queries come from the first
// channel of the pair, keys and values from the second.
std::array<Tensor, 6> build_dhead_rgb(const Tensor& r, const Tensor& g, const Tensor& b,
                                      const std::vector<HeadWeights>& weights);

// Feature-axis concatenation of the six blocks in build_dhead_rgb order.
Tensor mal_rgb(const std::array<Tensor, 6>& dheads);

// Single self-attention block over the whole-image signal; the concat over
// one element is the identity.
Tensor mal_mhl(const Tensor& signal, const HeadWeights& w);

// (3,H,W) -> R, G, B slices in that order; concatenating them restores the
// input bit-exactly.
std::array<Tensor, 3> isolate_channels(const Tensor& image);

// Invocation counters for the attention primitives, for call-count tests.
uint64_t scaled_dot_attention_calls();
uint64_t multi_head_attention_calls();
void reset_attention_counters();

}  // namespace cellattn
