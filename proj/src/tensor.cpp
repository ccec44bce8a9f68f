#include "cellattn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <unordered_set>

namespace cellattn {

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad, bool zeroed) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    int64_t n = shape_numel(impl->shape);
    if (n < 0) throw ShapeError("negative tensor shape " + shape_str(impl->shape));
    if (zeroed)
        impl->data.assign(static_cast<size_t>(n), 0.0f);
    else
        impl->data.resize(static_cast<size_t>(n));
    impl->requires_grad = requires_grad;
    return impl;
}

// Output node wiring: requires_grad is inherited from any parent that has it.
Tensor make_result(Shape shape, const char* op, std::vector<Tensor> parents,
                   std::function<void(TensorImpl&)> backward_fn) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    auto impl = make_impl(std::move(shape), rg, /*zeroed=*/false);
    impl->op = op;
    if (rg) {
        impl->parents.reserve(parents.size());
        for (auto& p : parents) impl->parents.push_back(p.impl());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(impl));
}

void check_rank(const Tensor& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
}

// Reductions accumulate in 64-bit. Four independent partial sums break the
// FP dependency chain; the grouping is fixed, so results stay deterministic.
__attribute__((always_inline)) inline double dot_f32(const float* a, const float* b, int64_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += static_cast<double>(a[i]) * b[i];
        s1 += static_cast<double>(a[i + 1]) * b[i + 1];
        s2 += static_cast<double>(a[i + 2]) * b[i + 2];
        s3 += static_cast<double>(a[i + 3]) * b[i + 3];
    }
    for (; i < n; ++i) s0 += static_cast<double>(a[i]) * b[i];
    return (s0 + s1) + (s2 + s3);
}

__attribute__((always_inline)) inline double sum_f32(const float* a, int64_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int64_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i];
        s1 += a[i + 1];
        s2 += a[i + 2];
        s3 += a[i + 3];
    }
    for (; i < n; ++i) s0 += a[i];
    return (s0 + s1) + (s2 + s3);
}

// exp for the attention softmax: range-reduced degree-6 polynomial, ~1e-7
// relative error, branch-free so the row loop vectorizes. Inputs are already
// max-subtracted (x <= 0).
inline float fast_expf(float x) {
    x = std::max(x, -87.0f);
    const float n = std::floor(x * 1.44269504f + 0.5f);
    const float r = x - n * 0.693147180559945f;
    float p = 1.0f / 720.0f;
    p = p * r + 1.0f / 120.0f;
    p = p * r + 1.0f / 24.0f;
    p = p * r + 1.0f / 6.0f;
    p = p * r + 0.5f;
    p = p * r + 1.0f;
    p = p * r + 1.0f;
    const uint32_t bits = static_cast<uint32_t>(static_cast<int32_t>(n) + 127) << 23;
    float s;
    std::memcpy(&s, &bits, 4);
    return p * s;
}

void sum_sumsq_f32(const float* a, int64_t n, double& sum, double& sumsq) {
    double s0 = 0.0, s1 = 0.0, q0 = 0.0, q1 = 0.0;
    int64_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const double d0 = a[i], d1 = a[i + 1];
        s0 += d0;
        s1 += d1;
        q0 += d0 * d0;
        q1 += d1 * d1;
    }
    if (i < n) {
        const double d = a[i];
        s0 += d;
        q0 += d * d;
    }
    sum += s0 + s1;
    sumsq += q0 + q1;
}

}  // namespace

// ---- Tensor handle -------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), requires_grad, /*zeroed=*/true));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto impl = make_impl(std::move(shape), requires_grad, /*zeroed=*/false);
    std::fill(impl->data.begin(), impl->data.end(), value);
    return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    int64_t n = shape_numel(shape);
    if (static_cast<int64_t>(data.size()) != n)
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(data.begin(), data.end());
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::glorot_uniform(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
    auto impl = make_impl(std::move(shape), true, /*zeroed=*/false);
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : impl->data) v = static_cast<float>(rng.uniform(-limit, limit));
    return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::numel() const { return static_cast<int64_t>(impl_->data.size()); }
int64_t Tensor::dim(int axis) const { return impl_->shape.at(static_cast<size_t>(axis)); }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
std::span<const float> Tensor::data() const { return impl_->data; }
std::span<float> Tensor::mutable_data() { return impl_->data; }
bool Tensor::requires_grad() const { return impl_->requires_grad; }

std::span<float> Tensor::grad() {
    impl_->ensure_grad();
    return impl_->grad;
}

std::span<const float> Tensor::grad() const {
    impl_->ensure_grad();
    return impl_->grad;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (numel() != 1)
        throw ConfigError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    return impl_->data[0];
}

// ---- conv / pool ----------------------------------------------------------

namespace {

// Geometry of one conv op, shared by forward and backward kernels. Inner
// loops are specialized on stride 1 (the common case) so they vectorize.
struct ConvDims {
    int64_t N, C, H, W, O, KH, KW, HO, WO;
    int s, p;

    // valid output range for a kernel tap so that the input index stays in bounds
    int64_t lo(int64_t kk) const {
        const int64_t v = p - kk;
        return v <= 0 ? int64_t{0} : (v + s - 1) / s;
    }
    int64_t hi(int64_t kk, int64_t in_dim, int64_t out_dim) const {
        return std::min((in_dim - 1 + p - kk) / s, out_dim - 1);
    }
};

// Scratch for the 3x3 fast paths: input rows widened to f64 once so the
// stencil loop runs pure double FMAs (the accumulation dtype).
struct Stencil3x3Scratch {
    std::vector<double> acc;
    std::vector<double> rows;  // 4 rows: ring of 3 + zero row

    explicit Stencil3x3Scratch(int64_t H, int64_t W)
        : acc(static_cast<size_t>(H * W)), rows(static_cast<size_t>(4 * W), 0.0) {}

    double* ring(int64_t i, int64_t W) { return rows.data() + (i % 3) * W; }
    double* zero(int64_t W) { return rows.data() + 3 * W; }
};

// Accumulate a full 3x3 same-size stencil of `plane` into `acc` in a single
// pass: nine multiply-adds per element, borders fed from a zero row.
void stencil3x3_acc(const float* plane, const float w[9], int64_t H, int64_t W,
                    Stencil3x3Scratch& s) {
    const double w00 = w[0], w01 = w[1], w02 = w[2];
    const double w10 = w[3], w11 = w[4], w12 = w[5];
    const double w20 = w[6], w21 = w[7], w22 = w[8];
    double* acc = s.acc.data();
    {
        double* r = s.ring(0, W);
        for (int64_t j = 0; j < W; ++j) r[j] = plane[j];
    }
    if (H > 1) {
        double* r = s.ring(1, W);
        const float* src = plane + W;
        for (int64_t j = 0; j < W; ++j) r[j] = src[j];
    }
    for (int64_t i = 0; i < H; ++i) {
        if (i + 1 < H && i > 0) {
            double* r = s.ring(i + 1, W);
            const float* src = plane + (i + 1) * W;
            for (int64_t j = 0; j < W; ++j) r[j] = src[j];
        }
        const double* ra = i > 0 ? s.ring(i - 1, W) : s.zero(W);
        const double* rb = s.ring(i, W);
        const double* rc = i < H - 1 ? s.ring(i + 1, W) : s.zero(W);
        double* ac = acc + i * W;
        ac[0] += w01 * ra[0] + w02 * ra[1] + w11 * rb[0] + w12 * rb[1] + w21 * rc[0] + w22 * rc[1];
        for (int64_t j = 1; j < W - 1; ++j)
            ac[j] += w00 * ra[j - 1] + w01 * ra[j] + w02 * ra[j + 1] + w10 * rb[j - 1] +
                     w11 * rb[j] + w12 * rb[j + 1] + w20 * rc[j - 1] + w21 * rc[j] +
                     w22 * rc[j + 1];
        ac[W - 1] += w00 * ra[W - 2] + w01 * ra[W - 1] + w10 * rb[W - 2] + w11 * rb[W - 1] +
                     w20 * rc[W - 2] + w21 * rc[W - 1];
    }
}

// 3x3, stride 1, pad 1 (same-size) fast paths.
void conv_forward_3x3(const ConvDims& d, const float* in, const float* k, float* out) {
    const int64_t H = d.H, W = d.W;
    Stencil3x3Scratch scratch(H, W);
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t o = 0; o < d.O; ++o) {
            std::fill(scratch.acc.begin(), scratch.acc.end(), 0.0);
            for (int64_t c = 0; c < d.C; ++c)
                stencil3x3_acc(in + (n * d.C + c) * H * W, k + (o * d.C + c) * 9, H, W, scratch);
            float* op = out + (n * d.O + o) * H * W;
            for (int64_t v = 0; v < H * W; ++v) op[v] = static_cast<float>(scratch.acc[v]);
        }
}

void conv_grad_input_3x3(const ConvDims& d, const float* k, const float* gout, float* gin) {
    const int64_t H = d.H, W = d.W;
    Stencil3x3Scratch scratch(H, W);
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t c = 0; c < d.C; ++c) {
            std::fill(scratch.acc.begin(), scratch.acc.end(), 0.0);
            for (int64_t o = 0; o < d.O; ++o) {
                // transposed conv = same stencil with a 180-degree rotated kernel
                const float* kb = k + (o * d.C + c) * 9;
                const float rot[9] = {kb[8], kb[7], kb[6], kb[5], kb[4], kb[3], kb[2], kb[1], kb[0]};
                stencil3x3_acc(gout + (n * d.O + o) * H * W, rot, H, W, scratch);
            }
            float* g = gin + (n * d.C + c) * H * W;
            for (int64_t v = 0; v < H * W; ++v) g[v] += static_cast<float>(scratch.acc[v]);
        }
}

// grad of a 3x3/s1/p1 conv kernel: three shifted dot products per tap row,
// one pass over each gradient row.
void conv_grad_kernel_3x3(const ConvDims& d, const float* in, const float* gout, float* gk) {
    const int64_t H = d.H, W = d.W;
    for (int64_t o = 0; o < d.O; ++o)
        for (int64_t c = 0; c < d.C; ++c) {
            double acc[9] = {};
            for (int64_t n = 0; n < d.N; ++n) {
                const float* gplane = gout + (n * d.O + o) * H * W;
                const float* plane = in + (n * d.C + c) * H * W;
                for (int64_t kh = 0; kh < 3; ++kh) {
                    const int64_t i0 = kh == 0 ? 1 : 0;
                    const int64_t i1 = kh == 2 ? H - 2 : H - 1;
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                    for (int64_t i = i0; i <= i1; ++i) {
                        const float* go = gplane + i * W;
                        const float* row = plane + (i + kh - 1) * W;
                        a1 += static_cast<double>(go[0]) * row[0];
                        a2 += static_cast<double>(go[0]) * row[1];
                        for (int64_t j = 1; j < W - 1; ++j) {
                            const double gv = go[j];
                            a0 += gv * row[j - 1];
                            a1 += gv * row[j];
                            a2 += gv * row[j + 1];
                        }
                        a0 += static_cast<double>(go[W - 1]) * row[W - 2];
                        a1 += static_cast<double>(go[W - 1]) * row[W - 1];
                    }
                    acc[kh * 3] += a0;
                    acc[kh * 3 + 1] += a1;
                    acc[kh * 3 + 2] += a2;
                }
            }
            float* dst = gk + (o * d.C + c) * 9;
            for (int t = 0; t < 9; ++t) dst[t] += static_cast<float>(acc[t]);
        }
}

template <bool Stride1>
void conv_forward(const ConvDims& d, const float* in, const float* k, float* out) {
    std::vector<double> acc(static_cast<size_t>(d.HO * d.WO));
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t o = 0; o < d.O; ++o) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int64_t c = 0; c < d.C; ++c)
                for (int64_t kh = 0; kh < d.KH; ++kh) {
                    const int64_t i0 = d.lo(kh), i1 = d.hi(kh, d.H, d.HO);
                    for (int64_t kw = 0; kw < d.KW; ++kw) {
                        const double wv = k[((o * d.C + c) * d.KH + kh) * d.KW + kw];
                        const int64_t j0 = d.lo(kw), j1 = d.hi(kw, d.W, d.WO);
                        for (int64_t i = i0; i <= i1; ++i) {
                            const float* row =
                                in + ((n * d.C + c) * d.H + (i * d.s + kh - d.p)) * d.W + (kw - d.p);
                            double* ac = acc.data() + i * d.WO;
                            if constexpr (Stride1) {
                                for (int64_t j = j0; j <= j1; ++j) ac[j] += wv * row[j];
                            } else {
                                for (int64_t j = j0; j <= j1; ++j) ac[j] += wv * row[j * d.s];
                            }
                        }
                    }
                }
            float* op = out + (n * d.O + o) * d.HO * d.WO;
            for (int64_t v = 0; v < d.HO * d.WO; ++v) op[v] = static_cast<float>(acc[v]);
        }
}

template <bool Stride1>
void conv_grad_input(const ConvDims& d, const float* k, const float* gout, float* gin) {
    std::vector<double> acc(static_cast<size_t>(d.H * d.W));
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t c = 0; c < d.C; ++c) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int64_t o = 0; o < d.O; ++o)
                for (int64_t kh = 0; kh < d.KH; ++kh) {
                    const int64_t i0 = d.lo(kh), i1 = d.hi(kh, d.H, d.HO);
                    for (int64_t kw = 0; kw < d.KW; ++kw) {
                        const double wv = k[((o * d.C + c) * d.KH + kh) * d.KW + kw];
                        const int64_t j0 = d.lo(kw), j1 = d.hi(kw, d.W, d.WO);
                        for (int64_t i = i0; i <= i1; ++i) {
                            const float* go = gout + ((n * d.O + o) * d.HO + i) * d.WO;
                            double* ac = acc.data() + (i * d.s + kh - d.p) * d.W + (kw - d.p);
                            if constexpr (Stride1) {
                                for (int64_t j = j0; j <= j1; ++j) ac[j] += wv * go[j];
                            } else {
                                for (int64_t j = j0; j <= j1; ++j) ac[j * d.s] += wv * go[j];
                            }
                        }
                    }
                }
            float* g = gin + (n * d.C + c) * d.H * d.W;
            for (int64_t v = 0; v < d.H * d.W; ++v) g[v] += static_cast<float>(acc[v]);
        }
}

template <bool Stride1>
void conv_grad_kernel(const ConvDims& d, const float* in, const float* gout, float* gk) {
    for (int64_t o = 0; o < d.O; ++o)
        for (int64_t c = 0; c < d.C; ++c)
            for (int64_t kh = 0; kh < d.KH; ++kh) {
                const int64_t i0 = d.lo(kh), i1 = d.hi(kh, d.H, d.HO);
                for (int64_t kw = 0; kw < d.KW; ++kw) {
                    const int64_t j0 = d.lo(kw), j1 = d.hi(kw, d.W, d.WO);
                    double acc = 0.0;
                    for (int64_t n = 0; n < d.N; ++n)
                        for (int64_t i = i0; i <= i1; ++i) {
                            const float* go = gout + ((n * d.O + o) * d.HO + i) * d.WO;
                            const float* row =
                                in + ((n * d.C + c) * d.H + (i * d.s + kh - d.p)) * d.W + (kw - d.p);
                            if constexpr (Stride1) {
                                acc += dot_f32(go + j0, row + j0, j1 - j0 + 1);
                            } else {
                                for (int64_t j = j0; j <= j1; ++j) acc += go[j] * row[j * d.s];
                            }
                        }
                    gk[((o * d.C + c) * d.KH + kh) * d.KW + kw] += static_cast<float>(acc);
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    check_rank(input, 4, "conv2d input");
    check_rank(kernel, 4, "conv2d kernel");
    if (stride < 1) throw ConfigError("conv2d stride must be >= 1");
    if (padding < 0) throw ConfigError("conv2d padding must be >= 0");
    const int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const int64_t O = kernel.dim(0), KC = kernel.dim(1), KH = kernel.dim(2), KW = kernel.dim(3);
    if (C != KC)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
    const int64_t HO = (H + 2 * padding - KH) / stride + 1;
    const int64_t WO = (W + 2 * padding - KW) / stride + 1;
    if (HO < 1 || WO < 1)
        throw ShapeError("conv2d output spatial dims < 1 for input " + shape_str(input.shape()) +
                         " kernel " + shape_str(kernel.shape()));
    const ConvDims dims{N, C, H, W, O, KH, KW, HO, WO, stride, padding};
    const bool same3x3 = stride == 1 && padding == 1 && KH == 3 && KW == 3 && H >= 2 && W >= 2;

    auto out = make_result({N, O, HO, WO}, "conv2d", {input, kernel},
                           [input, kernel, dims, same3x3](TensorImpl& self) {
                               const float* gout = self.grad.data();
                               if (input.requires_grad()) {
                                   input.impl()->ensure_grad();
                                   float* gin = input.impl()->grad.data();
                                   if (same3x3)
                                       conv_grad_input_3x3(dims, kernel.data().data(), gout, gin);
                                   else if (dims.s == 1)
                                       conv_grad_input<true>(dims, kernel.data().data(), gout, gin);
                                   else
                                       conv_grad_input<false>(dims, kernel.data().data(), gout, gin);
                               }
                               if (kernel.requires_grad()) {
                                   kernel.impl()->ensure_grad();
                                   float* gk = kernel.impl()->grad.data();
                                   if (same3x3)
                                       conv_grad_kernel_3x3(dims, input.data().data(), gout, gk);
                                   else if (dims.s == 1)
                                       conv_grad_kernel<true>(dims, input.data().data(), gout, gk);
                                   else
                                       conv_grad_kernel<false>(dims, input.data().data(), gout, gk);
                               }
                           });
    if (same3x3)
        conv_forward_3x3(dims, input.data().data(), kernel.data().data(),
                         out.mutable_data().data());
    else if (dims.s == 1)
        conv_forward<true>(dims, input.data().data(), kernel.data().data(),
                           out.mutable_data().data());
    else
        conv_forward<false>(dims, input.data().data(), kernel.data().data(),
                            out.mutable_data().data());
    return out;
}

Tensor bias_add_nchw(const Tensor& x, const Tensor& bias) {
    check_rank(x, 4, "bias_add_nchw input");
    check_rank(bias, 1, "bias_add_nchw bias");
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    if (bias.dim(0) != C)
        throw ShapeError("bias_add_nchw: bias " + shape_str(bias.shape()) + " vs input " +
                         shape_str(x.shape()));
    auto out = make_result(x.shape(), "bias_add", {x, bias}, [x, bias, N, C, HW](TensorImpl& self) {
        const float* g = self.grad.data();
        if (x.requires_grad()) {
            x.impl()->ensure_grad();
            float* gx = x.impl()->grad.data();
            for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
        }
        if (bias.requires_grad()) {
            bias.impl()->ensure_grad();
            float* gb = bias.impl()->grad.data();
            for (int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int64_t n = 0; n < N; ++n) acc += sum_f32(g + (n * C + c) * HW, HW);
                gb[c] += static_cast<float>(acc);
            }
        }
    });
    const float* in = x.data().data();
    const float* b = bias.data().data();
    float* ot = out.mutable_data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const float bv = b[c];
            const float* src = in + (n * C + c) * HW;
            float* dst = ot + (n * C + c) * HW;
            for (int64_t v = 0; v < HW; ++v) dst[v] = src[v] + bv;
        }
    return out;
}

namespace {

void check_pool(const Tensor& x, int window, const char* what) {
    check_rank(x, 4, what);
    if (window < 1) throw ConfigError(std::string(what) + ": window must be >= 1");
    if (x.dim(2) % window != 0 || x.dim(3) % window != 0)
        throw ShapeError(std::string(what) + ": spatial dims of " + shape_str(x.shape()) +
                         " not divisible by window " + std::to_string(window));
}

}  // namespace

Tensor avg_pool2d(const Tensor& x, int window) {
    check_pool(x, window, "avg_pool2d");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t HO = H / window, WO = W / window;
    const double inv = 1.0 / (static_cast<double>(window) * window);
    auto out = make_result({N, C, HO, WO}, "avg_pool2d", {x},
                           [x, window, N, C, H, W, HO, WO, inv](TensorImpl& self) {
                               if (!x.requires_grad()) return;
                               x.impl()->ensure_grad();
                               float* gx = x.impl()->grad.data();
                               const float* g = self.grad.data();
                               for (int64_t nc = 0; nc < N * C; ++nc)
                                   for (int64_t i = 0; i < HO; ++i)
                                       for (int64_t j = 0; j < WO; ++j) {
                                           const float gv =
                                               static_cast<float>(g[(nc * HO + i) * WO + j] * inv);
                                           for (int64_t a = 0; a < window; ++a)
                                               for (int64_t b = 0; b < window; ++b)
                                                   gx[(nc * H + i * window + a) * W + j * window + b] += gv;
                                       }
                           });
    const float* in = x.data().data();
    float* ot = out.mutable_data().data();
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t i = 0; i < HO; ++i)
            for (int64_t j = 0; j < WO; ++j) {
                double acc = 0.0;
                for (int64_t a = 0; a < window; ++a)
                    for (int64_t b = 0; b < window; ++b)
                        acc += in[(nc * H + i * window + a) * W + j * window + b];
                ot[(nc * HO + i) * WO + j] = static_cast<float>(acc * inv);
            }
    return out;
}

Tensor max_pool2d(const Tensor& x, int window) {
    check_pool(x, window, "max_pool2d");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t HO = H / window, WO = W / window;
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(N * C * HO * WO));
    const float* in = x.data().data();
    std::vector<float> vals(static_cast<size_t>(N * C * HO * WO));
    for (int64_t nc = 0; nc < N * C; ++nc)
        for (int64_t i = 0; i < HO; ++i)
            for (int64_t j = 0; j < WO; ++j) {
                int64_t best = (nc * H + i * window) * W + j * window;
                float bv = in[best];
                for (int64_t a = 0; a < window; ++a)
                    for (int64_t b = 0; b < window; ++b) {
                        const int64_t idx = (nc * H + i * window + a) * W + j * window + b;
                        if (in[idx] > bv) {
                            bv = in[idx];
                            best = idx;
                        }
                    }
                const int64_t oidx = (nc * HO + i) * WO + j;
                vals[static_cast<size_t>(oidx)] = bv;
                (*argmax)[static_cast<size_t>(oidx)] = best;
            }
    auto out = make_result({N, C, HO, WO}, "max_pool2d", {x}, [x, argmax](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float* g = self.grad.data();
        for (size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += g[i];
    });
    std::copy(vals.begin(), vals.end(), out.mutable_data().begin());
    return out;
}

// ---- dense / matmul -------------------------------------------------------

namespace {

// out(N,M) += a(N,K) x b(K,M), double row accumulators.
void mm_forward(const float* a, const float* b, float* out, int64_t N, int64_t K, int64_t M) {
    std::vector<double> row(static_cast<size_t>(M));
    for (int64_t i = 0; i < N; ++i) {
        std::fill(row.begin(), row.end(), 0.0);
        const float* ai = a + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double av = ai[k];
            const float* bk = b + k * M;
            for (int64_t j = 0; j < M; ++j) row[j] += av * bk[j];
        }
        float* oi = out + i * M;
        for (int64_t j = 0; j < M; ++j) oi[j] = static_cast<float>(row[j]);
    }
}

// out(N,M) += a(N,K) x b(K,M), accumulating on top of existing values.
void mm_forward_accumulate(const float* a, const float* b, float* out, int64_t N, int64_t K,
                           int64_t M) {
    std::vector<double> row(static_cast<size_t>(M));
    for (int64_t i = 0; i < N; ++i) {
        float* oi = out + i * M;
        for (int64_t j = 0; j < M; ++j) row[j] = oi[j];
        const float* ai = a + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double av = ai[k];
            const float* bk = b + k * M;
            for (int64_t j = 0; j < M; ++j) row[j] += av * bk[j];
        }
        for (int64_t j = 0; j < M; ++j) oi[j] = static_cast<float>(row[j]);
    }
}

// ga(N,K) += gout(N,M) x b(K,M)^T  (dot of contiguous rows)
void mm_grad_a(const float* gout, const float* b, float* ga, int64_t N, int64_t K, int64_t M) {
    if (M <= 4) {
        for (int64_t i = 0; i < N; ++i) {
            const float* gi = gout + i * M;
            for (int64_t k = 0; k < K; ++k) {
                double acc = 0.0;
                for (int64_t j = 0; j < M; ++j) acc += static_cast<double>(gi[j]) * b[k * M + j];
                ga[i * K + k] += static_cast<float>(acc);
            }
        }
        return;
    }
    for (int64_t i = 0; i < N; ++i) {
        const float* gi = gout + i * M;
        for (int64_t k = 0; k < K; ++k)
            ga[i * K + k] += static_cast<float>(dot_f32(gi, b + k * M, M));
    }
}

// gb(K,M) += a(N,K)^T x gout(N,M)
void mm_grad_b(const float* a, const float* gout, float* gb, int64_t N, int64_t K, int64_t M) {
    std::vector<double> row(static_cast<size_t>(M));
    for (int64_t k = 0; k < K; ++k) {
        {
            const double av = a[k];
            for (int64_t j = 0; j < M; ++j) row[j] = av * gout[j];
        }
        for (int64_t i = 1; i < N; ++i) {
            const double av = a[i * K + k];
            const float* gi = gout + i * M;
            for (int64_t j = 0; j < M; ++j) row[j] += av * gi[j];
        }
        float* gk = gb + k * M;
        for (int64_t j = 0; j < M; ++j) gk[j] += static_cast<float>(row[j]);
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "matmul lhs");
    check_rank(b, 2, "matmul rhs");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner dims: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int64_t N = a.dim(0), K = a.dim(1), M = b.dim(1);
    auto out = make_result({N, M}, "matmul", {a, b}, [a, b, N, K, M](TensorImpl& self) {
        const float* g = self.grad.data();
        if (a.requires_grad()) {
            a.impl()->ensure_grad();
            mm_grad_a(g, b.data().data(), a.impl()->grad.data(), N, K, M);
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            mm_grad_b(a.data().data(), g, b.impl()->grad.data(), N, K, M);
        }
    });
    mm_forward(a.data().data(), b.data().data(), out.mutable_data().data(), N, K, M);
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check_rank(a, 2, "matmul_nt lhs");
    check_rank(b, 2, "matmul_nt rhs");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt inner dims: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
    const int64_t N = a.dim(0), K = a.dim(1), M = b.dim(0);
    auto out = make_result({N, M}, "matmul_nt", {a, b}, [a, b, N, K, M](TensorImpl& self) {
        const float* g = self.grad.data();
        if (a.requires_grad()) {
            a.impl()->ensure_grad();
            // ga(N,K) += gout(N,M) x b(M,K)
            mm_forward_accumulate(g, b.data().data(), a.impl()->grad.data(), N, M, K);
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            // gb(M,K) += gout(N,M)^T x a(N,K)
            mm_grad_b(g, a.data().data(), b.impl()->grad.data(), N, M, K);
        }
    });
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    float* op = out.mutable_data().data();
    for (int64_t i = 0; i < N; ++i) {
        const float* ai = ap + i * K;
        for (int64_t j = 0; j < M; ++j) op[i * M + j] = static_cast<float>(dot_f32(ai, bp + j * K, K));
    }
    return out;
}

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_rank(x, 2, "dense input");
    check_rank(w, 2, "dense weight");
    check_rank(b, 1, "dense bias");
    if (x.dim(1) != w.dim(0) || w.dim(1) != b.dim(0))
        throw ShapeError("dense dims: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
    const int64_t N = x.dim(0), K = x.dim(1), M = w.dim(1);
    auto out = make_result({N, M}, "dense", {x, w, b}, [x, w, b, N, K, M](TensorImpl& self) {
        const float* g = self.grad.data();
        if (x.requires_grad()) {
            x.impl()->ensure_grad();
            mm_grad_a(g, w.data().data(), x.impl()->grad.data(), N, K, M);
        }
        if (w.requires_grad()) {
            w.impl()->ensure_grad();
            mm_grad_b(x.data().data(), g, w.impl()->grad.data(), N, K, M);
        }
        if (b.requires_grad()) {
            b.impl()->ensure_grad();
            float* gb = b.impl()->grad.data();
            for (int64_t j = 0; j < M; ++j) {
                double acc = 0.0;
                for (int64_t i = 0; i < N; ++i) acc += g[i * M + j];
                gb[j] += static_cast<float>(acc);
            }
        }
    });
    mm_forward(x.data().data(), w.data().data(), out.mutable_data().data(), N, K, M);
    float* op = out.mutable_data().data();
    const float* bp = b.data().data();
    for (int64_t i = 0; i < N; ++i)
        for (int64_t j = 0; j < M; ++j) op[i * M + j] += bp[j];
    return out;
}

// ---- elementwise / structural --------------------------------------------

Tensor relu(const Tensor& x) {
    auto out = make_result(x.shape(), "relu", {x}, [x](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float* g = self.grad.data();
        const float* in = x.data().data();
        for (size_t i = 0; i < self.grad.size(); ++i)
            gx[i] += in[i] > 0.0f ? g[i] : 0.0f;
    });
    const float* in = x.data().data();
    float* op = out.mutable_data().data();
    for (int64_t i = 0; i < x.numel(); ++i) op[i] = in[i] > 0.0f ? in[i] : 0.0f;
    return out;
}

namespace {

// Decompose `shape` around `axis` into (outer, len, inner) for slice-wise loops.
void axis_split(const Shape& shape, int axis, int64_t& outer, int64_t& len, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[static_cast<size_t>(i)];
    len = shape[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank())
        throw ConfigError("softmax axis " + std::to_string(axis) + " invalid for shape " +
                          shape_str(x.shape()));
    int64_t outer, len, inner;
    axis_split(x.shape(), axis, outer, len, inner);
    auto out = make_result(x.shape(), "softmax", {x}, [x, outer, len, inner](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float* g = self.grad.data();
        const float* y = self.data.data();
        for (int64_t o = 0; o < outer; ++o)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = o * len * inner + in;
                double dot = 0.0;
                for (int64_t l = 0; l < len; ++l) {
                    const int64_t idx = base + l * inner;
                    dot += static_cast<double>(g[idx]) * y[idx];
                }
                for (int64_t l = 0; l < len; ++l) {
                    const int64_t idx = base + l * inner;
                    gx[idx] += static_cast<float>(y[idx] * (g[idx] - dot));
                }
            }
    });
    const float* in = x.data().data();
    float* op = out.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t ii = 0; ii < inner; ++ii) {
            const int64_t base = o * len * inner + ii;
            float mx = in[base];
            for (int64_t l = 1; l < len; ++l) mx = std::max(mx, in[base + l * inner]);
            double sum = 0.0;
            for (int64_t l = 0; l < len; ++l) sum += std::exp(static_cast<double>(in[base + l * inner]) - mx);
            for (int64_t l = 0; l < len; ++l) {
                const int64_t idx = base + l * inner;
                op[idx] = static_cast<float>(std::exp(static_cast<double>(in[idx]) - mx) / sum);
            }
        }
    return out;
}

namespace {

void check_bn_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (x.rank() != 2 && x.rank() != 4)
        throw ShapeError("batchnorm expects rank 2 or 4 input, got " + shape_str(x.shape()));
    const int64_t C = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw ShapeError("batchnorm gamma/beta must be (" + std::to_string(C) + ") for input " +
                         shape_str(x.shape()));
}

}  // namespace

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                 std::vector<float>* batch_mean, std::vector<float>* batch_var) {
    check_bn_shapes(x, gamma, beta);
    const int64_t C = x.dim(1);
    const int64_t N = x.dim(0);
    const int64_t HW = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    const int64_t m = N * HW;
    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
    const float* in = x.data().data();
    {
        std::vector<double> sum(static_cast<size_t>(C)), sumsq(static_cast<size_t>(C));
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                sum_sumsq_f32(in + (n * C + c) * HW, HW, sum[static_cast<size_t>(c)],
                              sumsq[static_cast<size_t>(c)]);
        for (int64_t c = 0; c < C; ++c) {
            const double mu = sum[static_cast<size_t>(c)] / static_cast<double>(m);
            const double var =
                std::max(0.0, sumsq[static_cast<size_t>(c)] / static_cast<double>(m) - mu * mu);
            (*mean)[static_cast<size_t>(c)] = mu;
            (*inv_std)[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
            if (batch_mean) {
                batch_mean->resize(static_cast<size_t>(C));
                (*batch_mean)[static_cast<size_t>(c)] = static_cast<float>(mu);
            }
            if (batch_var) {
                batch_var->resize(static_cast<size_t>(C));
                (*batch_var)[static_cast<size_t>(c)] = static_cast<float>(var);
            }
        }
    }

    auto out = make_result(
        x.shape(), "batchnorm", {x, gamma, beta},
        [x, gamma, beta, C, N, HW, m, mean, inv_std](TensorImpl& self) {
            const float* g = self.grad.data();
            const float* in = x.data().data();
            const float* gm = gamma.data().data();
            const double md = static_cast<double>(m);
            std::vector<double> sum_dy(static_cast<size_t>(C)), sum_dy_xhat(static_cast<size_t>(C));
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t base = (n * C + c) * HW;
                    const double mu = (*mean)[static_cast<size_t>(c)];
                    const double is = (*inv_std)[static_cast<size_t>(c)];
                    const double sd = sum_f32(g + base, HW);
                    // sum(g * xhat) = is * (dot(g,x) - mu * sum(g))
                    sum_dy[static_cast<size_t>(c)] += sd;
                    sum_dy_xhat[static_cast<size_t>(c)] +=
                        is * (dot_f32(g + base, in + base, HW) - mu * sd);
                }
            if (gamma.requires_grad()) {
                gamma.impl()->ensure_grad();
                for (int64_t c = 0; c < C; ++c)
                    gamma.impl()->grad[static_cast<size_t>(c)] +=
                        static_cast<float>(sum_dy_xhat[static_cast<size_t>(c)]);
            }
            if (beta.requires_grad()) {
                beta.impl()->ensure_grad();
                for (int64_t c = 0; c < C; ++c)
                    beta.impl()->grad[static_cast<size_t>(c)] +=
                        static_cast<float>(sum_dy[static_cast<size_t>(c)]);
            }
            if (x.requires_grad()) {
                x.impl()->ensure_grad();
                float* gx = x.impl()->grad.data();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (n * C + c) * HW;
                        const double mu = (*mean)[static_cast<size_t>(c)];
                        const double is = (*inv_std)[static_cast<size_t>(c)];
                        const double k = gm[c] * is;
                        const double sd = sum_dy[static_cast<size_t>(c)] / md;
                        const double sdx = sum_dy_xhat[static_cast<size_t>(c)] / md;
                        for (int64_t v = 0; v < HW; ++v)
                            gx[base + v] += static_cast<float>(
                                k * (g[base + v] - sd - (in[base + v] - mu) * is * sdx));
                    }
            }
        });
    float* op = out.mutable_data().data();
    const float* gm = gamma.data().data();
    const float* bt = beta.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const int64_t base = (n * C + c) * HW;
            const float a = static_cast<float>(gm[c] * (*inv_std)[static_cast<size_t>(c)]);
            const float b =
                static_cast<float>(bt[c] - (*mean)[static_cast<size_t>(c)] * gm[c] *
                                               (*inv_std)[static_cast<size_t>(c)]);
            for (int64_t v = 0; v < HW; ++v) op[base + v] = a * in[base + v] + b;
        }
    return out;
}

Tensor batchnorm_infer(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::span<const float> mean, std::span<const float> var, float eps) {
    check_bn_shapes(x, gamma, beta);
    const int64_t C = x.dim(1);
    if (static_cast<int64_t>(mean.size()) != C || static_cast<int64_t>(var.size()) != C)
        throw ShapeError("batchnorm_infer running stats size mismatch for input " +
                         shape_str(x.shape()));
    const int64_t N = x.dim(0);
    const int64_t HW = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(C));
    auto mu = std::make_shared<std::vector<double>>(mean.begin(), mean.end());
    for (int64_t c = 0; c < C; ++c)
        (*inv_std)[static_cast<size_t>(c)] = 1.0 / std::sqrt(static_cast<double>(var[c]) + eps);

    auto out = make_result(
        x.shape(), "batchnorm_infer", {x, gamma, beta},
        [x, gamma, beta, C, N, HW, mu, inv_std](TensorImpl& self) {
            const float* g = self.grad.data();
            const float* in = x.data().data();
            const float* gm = gamma.data().data();
            std::vector<double> sum_dy(static_cast<size_t>(C)), sum_dy_xhat(static_cast<size_t>(C));
            if (gamma.requires_grad() || beta.requires_grad()) {
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (n * C + c) * HW;
                        const double is = (*inv_std)[static_cast<size_t>(c)];
                        const double m = (*mu)[static_cast<size_t>(c)];
                        const double sd = sum_f32(g + base, HW);
                        sum_dy[static_cast<size_t>(c)] += sd;
                        sum_dy_xhat[static_cast<size_t>(c)] +=
                            is * (dot_f32(g + base, in + base, HW) - m * sd);
                    }
                if (gamma.requires_grad()) {
                    gamma.impl()->ensure_grad();
                    for (int64_t c = 0; c < C; ++c)
                        gamma.impl()->grad[static_cast<size_t>(c)] +=
                            static_cast<float>(sum_dy_xhat[static_cast<size_t>(c)]);
                }
                if (beta.requires_grad()) {
                    beta.impl()->ensure_grad();
                    for (int64_t c = 0; c < C; ++c)
                        beta.impl()->grad[static_cast<size_t>(c)] +=
                            static_cast<float>(sum_dy[static_cast<size_t>(c)]);
                }
            }
            if (x.requires_grad()) {
                x.impl()->ensure_grad();
                float* gx = x.impl()->grad.data();
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (n * C + c) * HW;
                        const float k =
                            static_cast<float>(gm[c] * (*inv_std)[static_cast<size_t>(c)]);
                        for (int64_t v = 0; v < HW; ++v) gx[base + v] += k * g[base + v];
                    }
            }
        });
    float* op = out.mutable_data().data();
    const float* in = x.data().data();
    const float* gm = gamma.data().data();
    const float* bt = beta.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const int64_t base = (n * C + c) * HW;
            const float a = static_cast<float>(gm[c] * (*inv_std)[static_cast<size_t>(c)]);
            const float b = static_cast<float>(bt[c] - (*mu)[static_cast<size_t>(c)] * gm[c] *
                                                           (*inv_std)[static_cast<size_t>(c)]);
            for (int64_t v = 0; v < HW; ++v) op[base + v] = a * in[base + v] + b;
        }
    return out;
}

Tensor sdp_attention(const Tensor& q, const Tensor& k, const Tensor& v, float scale_factor,
                     std::vector<float>* weights_out) {
    check_rank(q, 2, "sdp_attention Q");
    check_rank(k, 2, "sdp_attention K");
    check_rank(v, 2, "sdp_attention V");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("sdp_attention: Q " + shape_str(q.shape()) + " and K " +
                         shape_str(k.shape()) + " disagree on d_k");
    if (k.dim(0) != v.dim(0))
        throw ShapeError("sdp_attention: K " + shape_str(k.shape()) + " and V " +
                         shape_str(v.shape()) + " disagree on row count");
    const int64_t Lq = q.dim(0), dk = q.dim(1), Lk = k.dim(0), dv = v.dim(1);

    // row-stochastic attention weights, saved for backward
    auto wmat = std::make_shared<FloatBuffer>();
    wmat->resize(static_cast<size_t>(Lq * Lk));
    {
        const float* qp = q.data().data();
        const float* kp = k.data().data();
        std::vector<float> logits(static_cast<size_t>(Lk));
        for (int64_t i = 0; i < Lq; ++i) {
            float* wrow = wmat->data() + i * Lk;
            if (dk == 1) {
                const float qs = static_cast<float>(qp[i] * static_cast<double>(scale_factor));
                for (int64_t j = 0; j < Lk; ++j) logits[static_cast<size_t>(j)] = qs * kp[j];
            } else {
                const float* qi = qp + i * dk;
                for (int64_t j = 0; j < Lk; ++j)
                    logits[static_cast<size_t>(j)] =
                        static_cast<float>(dot_f32(qi, kp + j * dk, dk) * scale_factor);
            }
            float m0 = logits[0], m1 = logits[0], m2 = logits[0], m3 = logits[0];
            int64_t j = 0;
            for (; j + 4 <= Lk; j += 4) {
                m0 = std::max(m0, logits[static_cast<size_t>(j)]);
                m1 = std::max(m1, logits[static_cast<size_t>(j + 1)]);
                m2 = std::max(m2, logits[static_cast<size_t>(j + 2)]);
                m3 = std::max(m3, logits[static_cast<size_t>(j + 3)]);
            }
            for (; j < Lk; ++j) m0 = std::max(m0, logits[static_cast<size_t>(j)]);
            const float mx = std::max(std::max(m0, m1), std::max(m2, m3));
            for (int64_t t = 0; t < Lk; ++t)
                wrow[t] = fast_expf(logits[static_cast<size_t>(t)] - mx);
            const float inv = static_cast<float>(1.0 / sum_f32(wrow, Lk));
            for (int64_t t = 0; t < Lk; ++t) wrow[t] *= inv;
        }
    }
    if (weights_out) weights_out->assign(wmat->begin(), wmat->end());

    auto out = make_result(
        {Lq, dv}, "sdp_attention", {q, k, v},
        [q, k, v, wmat, scale_factor, Lq, dk, Lk, dv](TensorImpl& self) {
            const float* g = self.grad.data();
            const float* qp = q.data().data();
            const float* kp = k.data().data();
            const float* vp = v.data().data();
            const bool need_qk = q.requires_grad() || k.requires_grad();
            float* gq = nullptr;
            float* gk = nullptr;
            float* gv = nullptr;
            if (q.requires_grad()) {
                q.impl()->ensure_grad();
                gq = q.impl()->grad.data();
            }
            if (k.requires_grad()) {
                k.impl()->ensure_grad();
                gk = k.impl()->grad.data();
            }
            if (v.requires_grad()) {
                v.impl()->ensure_grad();
                gv = v.impl()->grad.data();
            }
            if (dk == 1 && dv == 1) {
                // contiguous column vectors; every j-loop below streams
                std::vector<float> ds(static_cast<size_t>(Lk));
                for (int64_t i = 0; i < Lq; ++i) {
                    const float g0 = g[i];
                    const float* wrow = wmat->data() + i * Lk;
                    if (gv)
                        for (int64_t j = 0; j < Lk; ++j) gv[j] += wrow[j] * g0;
                    if (!need_qk) continue;
                    // dw_j = g0 * v_j; rowdot = g0 * dot(w,v)
                    const double rowdot = static_cast<double>(g0) * dot_f32(wrow, vp, Lk);
                    const float rd = static_cast<float>(rowdot);
                    for (int64_t j = 0; j < Lk; ++j)
                        ds[static_cast<size_t>(j)] = scale_factor * wrow[j] * (g0 * vp[j] - rd);
                    if (gq) gq[i] += static_cast<float>(dot_f32(ds.data(), kp, Lk));
                    if (gk) {
                        const float qi0 = qp[i];
                        for (int64_t j = 0; j < Lk; ++j) gk[j] += ds[static_cast<size_t>(j)] * qi0;
                    }
                }
            } else {
                std::vector<double> dw(static_cast<size_t>(Lk));
                std::vector<double> dq_row(static_cast<size_t>(dk));
                for (int64_t i = 0; i < Lq; ++i) {
                    const float* grow = g + i * dv;
                    const float* wrow = wmat->data() + i * Lk;
                    if (gv) {
                        for (int64_t j = 0; j < Lk; ++j) {
                            const float wv = wrow[j];
                            float* gvj = gv + j * dv;
                            for (int64_t t = 0; t < dv; ++t) gvj[t] += wv * grow[t];
                        }
                    }
                    if (!need_qk) continue;
                    // dS = W o (dW - rowdot(dW, W)), dW = gout V^T
                    double rowdot = 0.0;
                    for (int64_t j = 0; j < Lk; ++j) {
                        const double acc = dot_f32(grow, vp + j * dv, dv);
                        dw[static_cast<size_t>(j)] = acc;
                        rowdot += acc * wrow[j];
                    }
                    std::fill(dq_row.begin(), dq_row.end(), 0.0);
                    const float* qi = qp + i * dk;
                    for (int64_t j = 0; j < Lk; ++j) {
                        const double ds =
                            scale_factor * wrow[j] * (dw[static_cast<size_t>(j)] - rowdot);
                        const float* kj = kp + j * dk;
                        if (gq)
                            for (int64_t t = 0; t < dk; ++t)
                                dq_row[static_cast<size_t>(t)] += ds * kj[t];
                        if (gk) {
                            float* gkj = gk + j * dk;
                            for (int64_t t = 0; t < dk; ++t) gkj[t] += static_cast<float>(ds * qi[t]);
                        }
                    }
                    if (gq) {
                        float* gqi = gq + i * dk;
                        for (int64_t t = 0; t < dk; ++t)
                            gqi[t] += static_cast<float>(dq_row[static_cast<size_t>(t)]);
                    }
                }
            }
        });
    // out = W V
    {
        const float* vp = v.data().data();
        float* op = out.mutable_data().data();
        if (dv == 1) {
            for (int64_t i = 0; i < Lq; ++i)
                op[i] = static_cast<float>(dot_f32(wmat->data() + i * Lk, vp, Lk));
        } else {
            std::vector<double> row(static_cast<size_t>(dv));
            for (int64_t i = 0; i < Lq; ++i) {
                std::fill(row.begin(), row.end(), 0.0);
                const float* wrow = wmat->data() + i * Lk;
                for (int64_t j = 0; j < Lk; ++j) {
                    const double wv = wrow[j];
                    const float* vj = vp + j * dv;
                    for (int64_t t = 0; t < dv; ++t) row[static_cast<size_t>(t)] += wv * vj[t];
                }
                for (int64_t t = 0; t < dv; ++t)
                    op[i * dv + t] = static_cast<float>(row[static_cast<size_t>(t)]);
            }
        }
    }
    return out;
}

Tensor dropout(const Tensor& x, float rate, bool training, Rng& rng) {
    if (rate < 0.0f || rate >= 1.0f)
        throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(rate));
    if (!training || rate == 0.0f) return x;
    auto mask = std::make_shared<std::vector<float>>(static_cast<size_t>(x.numel()));
    const float keep_scale = 1.0f / (1.0f - rate);
    for (auto& mv : *mask) mv = rng.uniform() < rate ? 0.0f : keep_scale;
    auto out = make_result(x.shape(), "dropout", {x}, [x, mask](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
    const float* in = x.data().data();
    float* op = out.mutable_data().data();
    for (int64_t i = 0; i < x.numel(); ++i) op[i] = in[i] * (*mask)[static_cast<size_t>(i)];
    return out;
}

Tensor concat(const std::vector<Tensor>& ts, int axis) {
    if (ts.empty()) throw ConfigError("concat: empty tensor list");
    const Shape& first = ts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(first.size()))
        throw ConfigError("concat axis " + std::to_string(axis) + " invalid for shape " +
                          shape_str(first));
    int64_t total_len = 0;
    for (const auto& t : ts) {
        if (t.rank() != static_cast<int>(first.size()))
            throw ShapeError("concat rank mismatch: " + shape_str(first) + " vs " +
                             shape_str(t.shape()));
        for (int i = 0; i < t.rank(); ++i)
            if (i != axis && t.dim(i) != first[static_cast<size_t>(i)])
                throw ShapeError("concat off-axis mismatch: " + shape_str(first) + " vs " +
                                 shape_str(t.shape()));
        total_len += t.dim(axis);
    }
    Shape out_shape = first;
    out_shape[static_cast<size_t>(axis)] = total_len;
    int64_t outer, len_total, inner;
    axis_split(out_shape, axis, outer, len_total, inner);

    std::vector<Tensor> parents = ts;
    auto out = make_result(out_shape, "concat", parents,
                           [parents, axis, outer, inner, len_total](TensorImpl& self) {
                               const float* g = self.grad.data();
                               int64_t off = 0;
                               for (const auto& t : parents) {
                                   const int64_t len = t.dim(axis);
                                   if (t.requires_grad()) {
                                       t.impl()->ensure_grad();
                                       float* gt = t.impl()->grad.data();
                                       for (int64_t o = 0; o < outer; ++o) {
                                           const float* src = g + (o * len_total + off) * inner;
                                           float* dst = gt + o * len * inner;
                                           for (int64_t v = 0; v < len * inner; ++v) dst[v] += src[v];
                                       }
                                   }
                                   off += len;
                               }
                           });
    float* op = out.mutable_data().data();
    int64_t off = 0;
    for (const auto& t : ts) {
        const int64_t len = t.dim(axis);
        const float* src = t.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(op + (o * len_total + off) * inner, src + o * len * inner,
                        static_cast<size_t>(len * inner) * sizeof(float));
        off += len;
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int64_t from, int64_t to) {
    if (axis < 0 || axis >= x.rank())
        throw ConfigError("slice axis " + std::to_string(axis) + " invalid for shape " +
                          shape_str(x.shape()));
    if (from < 0 || to > x.dim(axis) || from >= to)
        throw ConfigError("slice range [" + std::to_string(from) + "," + std::to_string(to) +
                          ") invalid for axis " + std::to_string(axis) + " of " +
                          shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = to - from;
    int64_t outer, len, inner;
    axis_split(x.shape(), axis, outer, len, inner);
    const int64_t out_len = to - from;
    auto out = make_result(out_shape, "slice", {x},
                           [x, outer, len, inner, from, out_len](TensorImpl& self) {
                               if (!x.requires_grad()) return;
                               x.impl()->ensure_grad();
                               float* gx = x.impl()->grad.data();
                               const float* g = self.grad.data();
                               for (int64_t o = 0; o < outer; ++o) {
                                   float* dst = gx + (o * len + from) * inner;
                                   const float* src = g + o * out_len * inner;
                                   for (int64_t v = 0; v < out_len * inner; ++v) dst[v] += src[v];
                               }
                           });
    float* op = out.mutable_data().data();
    const float* in = x.data().data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(op + o * out_len * inner, in + (o * len + from) * inner,
                    static_cast<size_t>(out_len * inner) * sizeof(float));
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
    auto out = make_result(new_shape, "reshape", {x}, [x](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
    });
    std::memcpy(out.mutable_data().data(), x.data().data(),
                static_cast<size_t>(x.numel()) * sizeof(float));
    return out;
}

Tensor transpose2d(const Tensor& x) {
    check_rank(x, 2, "transpose2d");
    const int64_t R = x.dim(0), C = x.dim(1);
    auto out = make_result({C, R}, "transpose2d", {x}, [x, R, C](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float* g = self.grad.data();
        for (int64_t i = 0; i < R; ++i)
            for (int64_t j = 0; j < C; ++j) gx[i * C + j] += g[j * R + i];
    });
    const float* in = x.data().data();
    float* op = out.mutable_data().data();
    for (int64_t i = 0; i < R; ++i)
        for (int64_t j = 0; j < C; ++j) op[j * R + i] = in[i * C + j];
    return out;
}

Tensor flatten(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("flatten needs rank >= 1");
    const int64_t d0 = x.rank() == 1 ? 1 : x.dim(0);
    return reshape(x, {d0, x.numel() / d0});
}

Tensor scale(const Tensor& x, float c) {
    auto out = make_result(x.shape(), "scale", {x}, [x, c](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float* g = self.grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i] * c;
    });
    const float* in = x.data().data();
    float* op = out.mutable_data().data();
    for (int64_t i = 0; i < x.numel(); ++i) op[i] = in[i] * c;
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    auto out = make_result(a.shape(), "add", {a, b}, [a, b](TensorImpl& self) {
        const float* g = self.grad.data();
        for (const Tensor& t : {a, b}) {
            if (!t.requires_grad()) continue;
            t.impl()->ensure_grad();
            float* gt = t.impl()->grad.data();
            for (size_t i = 0; i < self.grad.size(); ++i) gt[i] += g[i];
        }
    });
    const float* ap = a.data().data();
    const float* bp = b.data().data();
    float* op = out.mutable_data().data();
    for (int64_t i = 0; i < a.numel(); ++i) op[i] = ap[i] + bp[i];
    return out;
}

Tensor select_scalar(const Tensor& x, int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.numel())
        throw ConfigError("select_scalar index " + std::to_string(flat_index) +
                          " out of range for " + shape_str(x.shape()));
    auto out = make_result({1}, "select_scalar", {x}, [x, flat_index](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        x.impl()->grad[static_cast<size_t>(flat_index)] += self.grad[0];
    });
    out.mutable_data()[0] = x.data()[static_cast<size_t>(flat_index)];
    return out;
}

Tensor sum_all(const Tensor& x) {
    auto out = make_result({1}, "sum_all", {x}, [x](TensorImpl& self) {
        if (!x.requires_grad()) return;
        x.impl()->ensure_grad();
        float* gx = x.impl()->grad.data();
        const float g = self.grad[0];
        for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
    out.mutable_data()[0] = static_cast<float>(sum_f32(x.data().data(), x.numel()));
    return out;
}

Tensor bce_loss(const Tensor& probs, const Tensor& labels, float clamp_eps) {
    check_rank(probs, 2, "bce_loss probabilities");
    check_rank(labels, 2, "bce_loss labels");
    if (probs.shape() != labels.shape())
        throw ShapeError("bce_loss shape mismatch: " + shape_str(probs.shape()) + " vs " +
                         shape_str(labels.shape()));
    const int64_t N = probs.dim(0), C = probs.dim(1);
    const float* y = labels.data().data();
    for (int64_t i = 0; i < N; ++i) {
        float row_sum = 0.0f;
        bool binary = true;
        for (int64_t c = 0; c < C; ++c) {
            const float v = y[i * C + c];
            binary = binary && (v == 0.0f || v == 1.0f);
            row_sum += v;
        }
        if (!binary || row_sum != 1.0f)
            throw ConfigError("bce_loss: label row " + std::to_string(i) + " is not one-hot");
    }
    const double inv_count = 1.0 / static_cast<double>(N * C);
    const double lo = clamp_eps, hi = 1.0 - clamp_eps;
    auto out = make_result(
        {1}, "bce_loss", {probs, labels}, [probs, labels, inv_count, lo, hi](TensorImpl& self) {
            if (!probs.requires_grad()) return;
            probs.impl()->ensure_grad();
            float* gp = probs.impl()->grad.data();
            const float* p = probs.data().data();
            const float* y = labels.data().data();
            const double g = self.grad[0];
            for (int64_t i = 0; i < probs.numel(); ++i) {
                const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
                gp[i] += static_cast<float>(g * inv_count * (pc - y[i]) / (pc * (1.0 - pc)));
            }
        });
    const float* p = probs.data().data();
    double acc = 0.0;
    for (int64_t i = 0; i < probs.numel(); ++i) {
        const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
        acc -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
    }
    out.mutable_data()[0] = static_cast<float>(acc * inv_count);
    return out;
}

// ---- backward / optimizer ---------------------------------------------

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ConfigError("backward requires a scalar loss tensor");
    auto root = loss.impl();
    if (root->backward_ran)
        throw ConfigError("backward already ran on this graph; run a fresh forward pass first");
    root->backward_ran = true;
    if (!root->requires_grad) return;

    // iterative post-order DFS -> reverse topological order
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->backward_fn) continue;
        node->ensure_grad();
        node->backward_fn(*node);
    }
}

void sgd_step(std::span<Tensor> params, float lr) {
    for (auto& p : params) {
        if (p.has_grad()) {
            auto d = p.mutable_data();
            auto g = p.grad();
            for (size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
        }
        p.zero_grad();
    }
}

void zero_grads(std::span<Tensor> params) {
    for (auto& p : params) p.zero_grad();
}

// ---- serialization ------------------------------------------------------

namespace {

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_tnsr(std::ostream& os, const Tensor& t) {
    os.write("TNSR", 4);
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u64(os, static_cast<uint64_t>(t.dim(i)));
    for (float v : t.data()) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(os, bits);
    }
    if (!os) throw IoError("TNSR write failed");
}

Tensor read_tnsr(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNSR", 4) != 0) throw IoError("TNSR: bad magic");
    const uint32_t rank = get_u32(is);
    if (rank > 8) throw IoError("TNSR: rank " + std::to_string(rank) + " too large");
    Shape shape(rank);
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int64_t>(get_u64(is));
        if (shape[i] < 1) throw IoError("TNSR: non-positive dim");
        n *= shape[i];
    }
    std::vector<float> data(static_cast<size_t>(n));
    for (auto& v : data) {
        const uint32_t bits = get_u32(is);
        std::memcpy(&v, &bits, 4);
    }
    if (!is) throw IoError("TNSR: truncated payload");
    return Tensor::from_data(std::move(shape), std::move(data));
}

void save_tnsr_file(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    write_tnsr(os, t);
}

Tensor load_tnsr_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    return read_tnsr(is);
}

}  // namespace cellattn
