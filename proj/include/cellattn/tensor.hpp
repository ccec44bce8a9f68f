#pragma once

#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cellattn/common.hpp"
#include "cellattn/rng.hpp"

namespace cellattn {

struct TensorImpl;

// Dense row-major float32 tensor with reverse-mode autodiff. Copying a Tensor
// copies the handle; the buffer and graph node are shared. Data is immutable
// once an op has consumed the tensor; gradient buffers are the only state
// mutated by backward().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    // Uniform init in ±sqrt(6/(fan_in+fan_out)).
    static Tensor glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int64_t numel() const;
    int64_t dim(int axis) const;
    int rank() const;

    std::span<const float> data() const;
    std::span<float> mutable_data();
    bool requires_grad() const;
    // Gradient buffer; allocated zero-filled on first access. Only meaningful
    // on tensors with requires_grad after backward() has run.
    std::span<float> grad();
    std::span<const float> grad() const;
    bool has_grad() const;
    void zero_grad();

    float item() const;  // scalar tensors only

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Graph node state lives directly on the tensor buffer it produced. Parents
// plus the closure capture everything the backward pass needs; the graph is
// acyclic because ops only ever link new nodes to existing ones.
struct TensorImpl {
    Shape shape;
    FloatBuffer data;
    FloatBuffer grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;
    bool backward_ran = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0f);
    }
};

// ---- forward ops ------------------------------------------------------

// input (N,C,H,W) * kernel (O,C,kh,kw), stride s, zero padding p.
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
// x (N,C,H,W) + bias (C), broadcast over N,H,W.
Tensor bias_add_nchw(const Tensor& x, const Tensor& bias);
Tensor avg_pool2d(const Tensor& x, int window);
Tensor max_pool2d(const Tensor& x, int window);
// x (N,D) * w (D,M) + b (M).
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
// a (N,K) * b (K,M).
Tensor matmul(const Tensor& a, const Tensor& b);
// a (N,K) * b (M,K)^T -> (N,M).
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
// Per-channel batch statistics over all axes except axis 1 (rank 2 or 4).
// Writes the batch mean/var it used to batch_mean/batch_var when non-null so
// layers can maintain running averages.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                 std::vector<float>* batch_mean = nullptr, std::vector<float>* batch_var = nullptr);
// Normalizes with frozen statistics (inference path).
Tensor batchnorm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const float> mean, std::span<const float> var, float eps);
// Inverted-scaling dropout: kept units divided by 1-rate; identity when not training.
Tensor dropout(const Tensor& x, float rate, bool training, Rng& rng);
// Fused softmax(Q K^T * scale_factor) V as a single graph node. Q (Lq,dk),
// K (Lk,dk), V (Lk,dv) -> (Lq,dv). The row-stochastic weight matrix is kept
// for backward; pass weights_out to copy it out for inspection.
Tensor sdp_attention(const Tensor& q, const Tensor& k, const Tensor& v, float scale_factor,
                     std::vector<float>* weights_out = nullptr);
Tensor concat(const std::vector<Tensor>& ts, int axis);
// Half-open [from,to) along `axis`.
Tensor slice(const Tensor& x, int axis, int64_t from, int64_t to);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor transpose2d(const Tensor& x);
// Collapses all axes after the first: (d0,...) -> (d0, numel/d0).
Tensor flatten(const Tensor& x);
Tensor scale(const Tensor& x, float c);
Tensor add(const Tensor& a, const Tensor& b);
Tensor select_scalar(const Tensor& x, int64_t flat_index);
Tensor sum_all(const Tensor& x);
// probabilities (N,2) vs one-hot labels (N,2), mean over all entries.
// Probabilities are clamped to [eps,1-eps] before the log.
Tensor bce_loss(const Tensor& probs, const Tensor& labels, float clamp_eps = 1e-7f);

// ---- backward / optimizer ---------------------------------------------

// Reverse-topological sweep from a scalar loss. Calling twice on the same
// graph root is an error; rebuild the graph with a fresh forward pass.
void backward(const Tensor& loss);
// p <- p - lr * grad(p) for every parameter, then gradients are zeroed.
void sgd_step(std::span<Tensor> params, float lr);
void zero_grads(std::span<Tensor> params);

// ---- serialization ------------------------------------------------------

// Binary layout: magic "TNSR", u32 rank, rank x u64 dims, little-endian f32 payload.
void write_tnsr(std::ostream& os, const Tensor& t);
Tensor read_tnsr(std::istream& is);
void save_tnsr_file(const std::string& path, const Tensor& t);
Tensor load_tnsr_file(const std::string& path);

}  // namespace cellattn
