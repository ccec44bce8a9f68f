#pragma once

// Finite-difference sweep over every differentiable primitive, shared by the
// unit tests and the acceptance suite. Each instance rebuilds the graph from
// scratch; the oracle never touches the analytic backward path it checks.

#include <string>
#include <vector>

#include "oracles.hpp"

namespace gradient_suite {

using cellattn::Rng;
using cellattn::Tensor;

struct OpReport {
    std::string op;
    int instances = 0;
    int checks = 0;
    int failures = 0;
    double worst_rel = 0.0;
};

struct SuiteReport {
    std::vector<OpReport> ops;
    bool all_passed() const {
        for (const auto& r : ops)
            if (r.failures > 0) return false;
        return true;
    }
};

namespace detail {

// Compare every gradient of `param` (or `sample` random indices of it)
// against central finite differences of `forward`.
inline void check_param(Tensor& param, const std::function<double()>& forward,
                        const std::function<void()>& run_backward, OpReport& report, Rng& rng,
                        double rel_tol, int sample = -1) {
    run_backward();
    std::vector<float> analytic(param.grad().begin(), param.grad().end());
    std::vector<int64_t> indices;
    if (sample < 0 || sample >= param.numel()) {
        for (int64_t i = 0; i < param.numel(); ++i) indices.push_back(i);
    } else {
        for (int s = 0; s < sample; ++s)
            indices.push_back(rng.uniform_int(0, param.numel() - 1));
    }
    for (int64_t i : indices) {
        const double numeric = oracles::finite_diff(param, i, forward);
        const double a = analytic[static_cast<size_t>(i)];
        const double scale = std::max({std::fabs(a), std::fabs(numeric), 0.25});
        const double rel = std::fabs(a - numeric) / scale;
        report.worst_rel = std::max(report.worst_rel, rel);
        ++report.checks;
        if (rel > rel_tol) ++report.failures;
    }
}

// One op instance: builds inputs, then checks every listed parameter.
template <typename BuildLoss>
void run_instance(OpReport& report, std::vector<Tensor> params, BuildLoss&& build_loss, Rng& rng,
                  double rel_tol, int sample = -1) {
    ++report.instances;
    auto forward = [&]() -> double {
        for (auto& p : params) p.zero_grad();
        return static_cast<double>(build_loss().item());
    };  // keeps readouts O(1): f32 rounding of the functional bounds FD noise
    auto run_backward = [&]() {
        for (auto& p : params) p.zero_grad();
        Tensor loss = build_loss();
        cellattn::backward(loss);
    };
    for (auto& p : params) check_param(p, forward, run_backward, report, rng, rel_tol, sample);
}

}  // namespace detail

inline SuiteReport run(int instances_per_op, double rel_tol = 1e-3, uint64_t seed = 20240901) {
    using namespace cellattn;
    Rng rng(seed);
    SuiteReport suite;

    {
        OpReport r{"conv2d", 0, 0, 0, 0.0};
        const int strides[4] = {1, 1, 2, 2};
        const int pads[4] = {0, 1, 1, 0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor input = oracles::random_tensor({1, 3, 8, 8}, rng, true);
            Tensor kernel = oracles::random_tensor({4, 3, 3, 3}, rng, true, -0.5, 0.5);
            const int s = strides[it % 4], p = pads[it % 4];
            detail::run_instance(
                r, {kernel, input},
                [&]() { return scale(sum_all(conv2d(input, kernel, s, p)), 0.05f); }, rng, rel_tol,
                it % 2 == 0 ? -1 : 24);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"avg_pool2d", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor x = oracles::random_tensor({1, 2, 4, 4}, rng, true);
            detail::run_instance(r, {x}, [&]() { return sum_all(scale(avg_pool2d(x, 2), 0.25f)); },
                                 rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"max_pool2d", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            // well-separated values so the FD step cannot flip an argmax
            std::vector<float> vals(32);
            for (size_t i = 0; i < vals.size(); ++i) vals[i] = 0.07f * static_cast<float>(i) - 1.0f;
            for (size_t i = vals.size(); i > 1; --i)
                std::swap(vals[i - 1], vals[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
            Tensor x = Tensor::from_data({1, 2, 4, 4}, vals, true);
            detail::run_instance(r, {x}, [&]() { return sum_all(scale(max_pool2d(x, 2), 0.25f)); },
                                 rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"dense", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor x = oracles::random_tensor({4, 5}, rng, true);
            Tensor w = oracles::random_tensor({5, 3}, rng, true);
            Tensor b = oracles::random_tensor({3}, rng, true);
            detail::run_instance(r, {x, w, b}, [&]() { return scale(sum_all(relu(dense(x, w, b))), 0.2f); },
                                 rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"matmul", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor a = oracles::random_tensor({3, 4}, rng, true);
            Tensor b = oracles::random_tensor({4, 2}, rng, true);
            detail::run_instance(r, {a, b}, [&]() { return scale(sum_all(matmul(a, b)), 0.3f); }, rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"matmul_nt", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor a = oracles::random_tensor({3, 4}, rng, true);
            Tensor b = oracles::random_tensor({5, 4}, rng, true);
            detail::run_instance(r, {a, b}, [&]() { return scale(sum_all(matmul_nt(a, b)), 0.3f); }, rng,
                                 rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"relu", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            // keep inputs away from the kink at 0
            Tensor x = oracles::random_tensor({3, 7}, rng, true);
            auto d = x.mutable_data();
            for (auto& v : d) v += v >= 0.0f ? 0.05f : -0.05f;
            detail::run_instance(r, {x}, [&]() { return scale(sum_all(relu(x)), 0.2f); }, rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"softmax", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor x = oracles::random_tensor({4, 5}, rng, true, -2.0, 2.0);
            const int axis = it % 2;
            Tensor mixer = oracles::random_tensor({4, 5}, rng, false, -0.3, 0.3);
            detail::run_instance(
                r, {x},
                [&]() {
                    // weighted readout so the gradient is not the trivial zero
                    Tensor sm = softmax(x, axis);
                    return sum_all(matmul_nt(sm, mixer));
                },
                rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"batchnorm", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor x = oracles::random_tensor({2, 3, 4, 4}, rng, true);
            Tensor gamma = oracles::random_tensor({3}, rng, true, 0.5, 1.5);
            Tensor beta = oracles::random_tensor({3}, rng, true, -0.5, 0.5);
            Tensor mixer = oracles::random_tensor({2, 3, 4, 4}, rng, false, -0.1, 0.1);
            detail::run_instance(
                r, {x, gamma, beta},
                [&]() {
                    Tensor y = batchnorm(x, gamma, beta, 1e-5f);
                    return sum_all(matmul_nt(reshape(y, {1, y.numel()}),
                                             reshape(mixer, {1, mixer.numel()})));
                },
                rng, rel_tol, 20);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"batchnorm_infer", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor x = oracles::random_tensor({2, 3, 4, 4}, rng, true);
            Tensor gamma = oracles::random_tensor({3}, rng, true, 0.5, 1.5);
            Tensor beta = oracles::random_tensor({3}, rng, true, -0.5, 0.5);
            std::vector<float> mean = {0.1f, -0.2f, 0.05f};
            std::vector<float> var = {1.1f, 0.8f, 1.4f};
            detail::run_instance(
                r, {x, gamma, beta},
                [&]() { return scale(sum_all(batchnorm_infer(x, gamma, beta, mean, var, 1e-5f)), 0.1f); },
                rng, rel_tol, 20);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"dropout", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor x = oracles::random_tensor({4, 6}, rng, true);
            const uint64_t mask_seed = rng.next_u64();
            detail::run_instance(
                r, {x},
                [&]() {
                    Rng mask_rng(mask_seed);  // same mask on every evaluation
                    return scale(sum_all(dropout(x, 0.3f, true, mask_rng)), 0.2f);
                },
                rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"concat_slice", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor a = oracles::random_tensor({2, 3}, rng, true);
            Tensor b = oracles::random_tensor({2, 2}, rng, true);
            detail::run_instance(
                r, {a, b},
                [&]() {
                    Tensor cat = concat({a, b}, 1);
                    return sum_all(scale(slice(cat, 1, 1, 4), 0.4f));
                },
                rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"structural", 0, 0, 0, 0.0};  // reshape/transpose/add/scale/select
        for (int it = 0; it < instances_per_op; ++it) {
            Tensor a = oracles::random_tensor({3, 4}, rng, true);
            Tensor b = oracles::random_tensor({4, 3}, rng, true);
            detail::run_instance(
                r, {a, b},
                [&]() {
                    Tensor s = add(transpose2d(a), b);
                    Tensor flat = reshape(scale(s, 1.5f), {1, 12});
                    return select_scalar(flat, 5);
                },
                rng, rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"bce_loss", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            std::vector<float> pd(16);
            std::vector<float> lab(16, 0.0f);
            for (int i = 0; i < 8; ++i) {
                const float p = static_cast<float>(rng.uniform(0.05, 0.95));
                pd[2 * i] = p;
                pd[2 * i + 1] = 1.0f - p;
                lab[2 * i + static_cast<int>(rng.uniform_int(0, 1))] = 1.0f;
            }
            Tensor probs = Tensor::from_data({8, 2}, pd, true);
            Tensor labels = Tensor::from_data({8, 2}, lab);
            detail::run_instance(r, {probs}, [&]() { return bce_loss(probs, labels); }, rng,
                                 rel_tol);
        }
        suite.ops.push_back(r);
    }
    {
        OpReport r{"sdp_attention", 0, 0, 0, 0.0};
        for (int it = 0; it < instances_per_op; ++it) {
            const int64_t dk = 1 + it % 2;
            Tensor q = oracles::random_tensor({5, dk}, rng, true);
            Tensor k = oracles::random_tensor({5, dk}, rng, true);
            Tensor v = oracles::random_tensor({5, 2}, rng, true);
            const float s = 1.0f / std::sqrt(static_cast<float>(dk));
            detail::run_instance(r, {q, k, v},
                                 [&]() { return scale(sum_all(sdp_attention(q, k, v, s)), 0.5f); }, rng,
                                 rel_tol);
        }
        suite.ops.push_back(r);
    }
    return suite;
}

}  // namespace gradient_suite
