#include "cellattn/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cellattn {

namespace {

double mean_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double sample_var(std::span<const double> v, double mean) {
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return ss / static_cast<double>(v.size() - 1);
}

// modified Lentz continued fraction for the incomplete beta
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 1e-14;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) return h;
    }
    throw NumericError("incomplete beta continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
    if (a <= 0.0 || b <= 0.0) throw ConfigError("incomplete beta requires a,b > 0");
    if (x < 0.0 || x > 1.0) throw ConfigError("incomplete beta requires x in [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
    if (df <= 0.0) throw ConfigError("student_t_cdf requires df > 0");
    const double x = df / (df + t * t);
    const double tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - tail : tail;
}

WelchResult welch_ttest(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2)
        throw ConfigError("welch_ttest: each sample needs n >= 2");
    const double ma = mean_of(a), mb = mean_of(b);
    const double va = sample_var(a, ma), vb = sample_var(b, mb);
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    if (va == 0.0 && vb == 0.0) {
        if (ma == mb) return {0.0, na + nb - 2.0, 1.0};
        throw ConfigError("welch_ttest: both samples have zero variance with unequal means");
    }
    if (va == 0.0 || vb == 0.0)
        throw ConfigError("welch_ttest: a sample has zero variance");
    const double se2a = va / na, se2b = vb / nb;
    const double se2 = se2a + se2b;
    const double t = (ma - mb) / std::sqrt(se2);
    const double df =
        se2 * se2 / (se2a * se2a / (na - 1.0) + se2b * se2b / (nb - 1.0));
    const double p = 2.0 * student_t_cdf(-std::fabs(t), df);
    return {t, df, std::min(p, 1.0)};
}

std::vector<bool> bonferroni_gate(const std::vector<double>& p_values, double alpha, int m) {
    if (m < 1) throw ConfigError("bonferroni_gate: m must be >= 1");
    if (alpha <= 0.0 || alpha >= 1.0) throw ConfigError("bonferroni_gate: alpha must be in (0,1)");
    const double threshold = alpha / static_cast<double>(m);
    std::vector<bool> out(p_values.size());
    for (size_t i = 0; i < p_values.size(); ++i) out[i] = p_values[i] < threshold;
    return out;
}

std::vector<double> standardize(std::span<const double> values) {
    if (values.size() < 2) throw ConfigError("standardize: need n >= 2");
    const double m = mean_of(values);
    const double sd = std::sqrt(sample_var(values, m));
    if (sd == 0.0) throw ConfigError("standardize: zero variance");
    std::vector<double> out(values.size());
    for (size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - m) / sd;
    return out;
}

double pearson(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("pearson: length mismatch");
    if (a.size() < 2) throw ConfigError("pearson: need n >= 2");
    const double ma = mean_of(a), mb = mean_of(b);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0) throw ConfigError("pearson: zero variance input");
    return cov / std::sqrt(va * vb);
}

namespace {

std::vector<double> fractional_ranks(std::span<const double> v) {
    std::vector<size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> rank(v.size());
    size_t i = 0;
    while (i < v.size()) {
        size_t j = i;
        while (j + 1 < v.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t t = i; t <= j; ++t) rank[order[t]] = avg;
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ConfigError("spearman: length mismatch");
    const auto ra = fractional_ranks(a);
    const auto rb = fractional_ranks(b);
    return pearson(ra, rb);
}

}  // namespace cellattn
