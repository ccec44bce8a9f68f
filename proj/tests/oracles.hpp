#pragma once

// Test-only reference implementations, independent of the library's compute
// paths: central finite differences for gradients, explicit-loop attention,
// pairwise-comparison AUC, textbook Pearson. Everything accumulates in
// double.

#include <cmath>
#include <functional>
#include <vector>

#include "cellattn/rng.hpp"
#include "cellattn/tensor.hpp"

namespace oracles {

// Central finite difference d f / d p[i] with h = 1e-3, evaluated through a
// caller-provided forward that rebuilds the graph from scratch.
inline double finite_diff(cellattn::Tensor& param, int64_t index,
                          const std::function<double()>& forward, double h = 1e-3) {
    auto data = param.mutable_data();
    const float saved = data[static_cast<size_t>(index)];
    data[static_cast<size_t>(index)] = static_cast<float>(saved + h);
    const double plus_h = static_cast<double>(data[static_cast<size_t>(index)]);
    const double f_plus = forward();
    data[static_cast<size_t>(index)] = static_cast<float>(saved - h);
    const double minus_h = static_cast<double>(data[static_cast<size_t>(index)]);
    const double f_minus = forward();
    data[static_cast<size_t>(index)] = saved;
    // the f32 parameter rounds the step; use the realized step width
    return (f_plus - f_minus) / (plus_h - minus_h);
}

// Relative-error gate with a small-magnitude floor to absorb f32 forward
// rounding in the difference quotient.
inline bool grad_close(double analytic, double numeric, double rel_tol, double floor = 0.25) {
    const double scale = std::max({std::fabs(analytic), std::fabs(numeric), floor});
    return std::fabs(analytic - numeric) <= rel_tol * scale;
}

// Explicit-loop scaled dot-product attention, all arithmetic in double.
inline std::vector<double> loop_attention(const std::vector<double>& q,
                                          const std::vector<double>& k,
                                          const std::vector<double>& v, int64_t lq, int64_t dk,
                                          int64_t lk, int64_t dv) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<double> out(static_cast<size_t>(lq * dv), 0.0);
    for (int64_t i = 0; i < lq; ++i) {
        std::vector<double> logits(static_cast<size_t>(lk));
        double mx = -1e300;
        for (int64_t j = 0; j < lk; ++j) {
            double dot = 0.0;
            for (int64_t t = 0; t < dk; ++t) dot += q[i * dk + t] * k[j * dk + t];
            logits[static_cast<size_t>(j)] = dot * scale;
            mx = std::max(mx, logits[static_cast<size_t>(j)]);
        }
        double sum = 0.0;
        for (int64_t j = 0; j < lk; ++j) {
            logits[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
            sum += logits[static_cast<size_t>(j)];
        }
        for (int64_t j = 0; j < lk; ++j)
            for (int64_t t = 0; t < dv; ++t)
                out[static_cast<size_t>(i * dv + t)] +=
                    logits[static_cast<size_t>(j)] / sum * v[j * dv + t];
    }
    return out;
}

// Explicit-loop multi-head attention built on loop_attention.
inline std::vector<double> loop_mha(const std::vector<double>& q, const std::vector<double>& k,
                                    const std::vector<double>& v, int64_t l, int64_t d_model,
                                    const std::vector<std::vector<double>>& wq,
                                    const std::vector<std::vector<double>>& wk,
                                    const std::vector<std::vector<double>>& wv,
                                    const std::vector<double>& wo, int64_t d_k) {
    const int64_t heads = static_cast<int64_t>(wq.size());
    auto project = [&](const std::vector<double>& x, const std::vector<double>& w) {
        std::vector<double> out(static_cast<size_t>(l * d_k), 0.0);
        for (int64_t i = 0; i < l; ++i)
            for (int64_t jj = 0; jj < d_k; ++jj)
                for (int64_t t = 0; t < d_model; ++t)
                    out[static_cast<size_t>(i * d_k + jj)] +=
                        x[i * d_model + t] * w[static_cast<size_t>(t * d_k + jj)];
        return out;
    };
    std::vector<double> cat(static_cast<size_t>(l * heads * d_k));
    for (int64_t h = 0; h < heads; ++h) {
        auto head = loop_attention(project(q, wq[static_cast<size_t>(h)]),
                                   project(k, wk[static_cast<size_t>(h)]),
                                   project(v, wv[static_cast<size_t>(h)]), l, d_k, l, d_k);
        for (int64_t i = 0; i < l; ++i)
            for (int64_t t = 0; t < d_k; ++t)
                cat[static_cast<size_t>(i * heads * d_k + h * d_k + t)] =
                    head[static_cast<size_t>(i * d_k + t)];
    }
    std::vector<double> out(static_cast<size_t>(l * d_model), 0.0);
    for (int64_t i = 0; i < l; ++i)
        for (int64_t jj = 0; jj < d_model; ++jj)
            for (int64_t t = 0; t < heads * d_k; ++t)
                out[static_cast<size_t>(i * d_model + jj)] +=
                    cat[static_cast<size_t>(i * heads * d_k + t)] *
                    wo[static_cast<size_t>(t * d_model + jj)];
    return out;
}

// Pairwise-comparison AUC: concordant pairs / total with ties counted half.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    double wins = 0.0;
    int64_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!positive[i]) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (positive[j]) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

// Textbook Pearson correlation in double.
inline double pearson_ref(const std::vector<double>& a, const std::vector<double>& b) {
    const size_t n = a.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

inline cellattn::Tensor random_tensor(cellattn::Shape shape, cellattn::Rng& rng,
                                      bool requires_grad = false, double lo = -1.0,
                                      double hi = 1.0) {
    std::vector<float> data(static_cast<size_t>(cellattn::shape_numel(shape)));
    for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
    return cellattn::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace oracles
