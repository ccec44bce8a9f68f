#include "cellattn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cellattn {

namespace {

void check_inputs(const std::vector<float>& probs, const std::vector<int>& labels) {
    if (labels.empty()) throw ConfigError("compute_metrics: empty label set");
    if (probs.size() != labels.size() * 2)
        throw ConfigError("compute_metrics: probs must be N x 2 (" +
                          std::to_string(labels.size()) + " labels, " +
                          std::to_string(probs.size()) + " probabilities)");
    for (int l : labels)
        if (l != 0 && l != 1) throw ConfigError("compute_metrics: labels must be 0 or 1");
}

}  // namespace

double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    const size_t n = scores.size();
    size_t n_pos = 0;
    for (bool p : positive) n_pos += p ? 1 : 0;
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw ConfigError("binary_auc: both classes must be present");
    // average ranks with ties shared, then the Mann-Whitney identity
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t t = i; t <= j; ++t) rank[order[t]] = avg;
        i = j + 1;
    }
    double rank_sum_pos = 0.0;
    for (size_t t = 0; t < n; ++t)
        if (positive[t]) rank_sum_pos += rank[t];
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

MetricsReport compute_metrics(const std::vector<float>& probs, const std::vector<int>& labels) {
    check_inputs(probs, labels);
    const size_t n = labels.size();

    std::vector<int> pred(n);
    for (size_t i = 0; i < n; ++i) pred[i] = probs[2 * i + 1] > probs[2 * i] ? 1 : 0;

    double tp[2] = {0, 0}, fp[2] = {0, 0}, fn[2] = {0, 0};
    size_t support[2] = {0, 0};
    size_t correct = 0;
    for (size_t i = 0; i < n; ++i) {
        ++support[labels[i]];
        if (pred[i] == labels[i]) {
            ++correct;
            ++tp[labels[i]];
        } else {
            ++fp[pred[i]];
            ++fn[labels[i]];
        }
    }

    auto safe_div = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
    double rec[2], prec[2], f1[2];
    for (int c = 0; c < 2; ++c) {
        rec[c] = safe_div(tp[c], tp[c] + fn[c]);
        prec[c] = safe_div(tp[c], tp[c] + fp[c]);
        f1[c] = safe_div(2.0 * prec[c] * rec[c], prec[c] + rec[c]);
    }

    MetricsReport r;
    r.recall = (rec[0] + rec[1]) / 2.0;
    r.precision = (prec[0] + prec[1]) / 2.0;
    r.f1_macro = (f1[0] + f1[1]) / 2.0;
    r.f1_weight = (support[0] * f1[0] + support[1] * f1[1]) / static_cast<double>(n);
    // single-label: pooled counts collapse to accuracy
    r.f1_micro = static_cast<double>(correct) / static_cast<double>(n);
    // per-sample F1 of singleton prediction/truth sets: 1 on a match, else 0
    double sample_sum = 0.0;
    for (size_t i = 0; i < n; ++i) sample_sum += pred[i] == labels[i] ? 1.0 : 0.0;
    r.f1_sample = sample_sum / static_cast<double>(n);

    if (support[0] > 0 && support[1] > 0) {
        double auc_c[2];
        for (int c = 0; c < 2; ++c) {
            std::vector<double> scores(n);
            std::vector<bool> pos(n);
            for (size_t i = 0; i < n; ++i) {
                scores[i] = probs[2 * i + static_cast<size_t>(c)];
                pos[i] = labels[i] == c;
            }
            auc_c[c] = binary_auc(scores, pos);
        }
        r.auc_macro = (auc_c[0] + auc_c[1]) / 2.0;
        r.auc_weight =
            (support[0] * auc_c[0] + support[1] * auc_c[1]) / static_cast<double>(n);
        // micro: pool the per-class score columns into one binary problem
        std::vector<double> pooled(2 * n);
        std::vector<bool> pooled_pos(2 * n);
        for (size_t i = 0; i < n; ++i)
            for (int c = 0; c < 2; ++c) {
                pooled[2 * i + static_cast<size_t>(c)] = probs[2 * i + static_cast<size_t>(c)];
                pooled_pos[2 * i + static_cast<size_t>(c)] = labels[i] == c;
            }
        r.auc_micro = binary_auc(pooled, pooled_pos);
    }
    return r;
}

const std::vector<std::string>& MetricsReport::field_names() {
    static const std::vector<std::string> names = {
        "Recall",   "Precision", "AUC-ROC macro", "AUC-ROC micro", "AUC-ROC weight",
        "F1 sample", "F1 macro",  "F1 micro",      "F1 weight",
    };
    return names;
}

std::vector<std::optional<double>> MetricsReport::field_values() const {
    return {recall,   precision, auc_macro, auc_micro, auc_weight,
            f1_sample, f1_macro,  f1_micro,  f1_weight};
}

double ROCCurve::auc() const {
    double area = 0.0;
    for (size_t i = 1; i < fpr.size(); ++i)
        area += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2.0;
    return area;
}

ROCCurve roc_curve(const std::vector<float>& scores, const std::vector<int>& labels,
                   int target_class) {
    if (scores.size() != labels.size())
        throw ConfigError("roc_curve: scores and labels disagree in length");
    if (target_class != 0 && target_class != 1)
        throw ConfigError("roc_curve: target class must be 0 or 1");
    size_t n_pos = 0;
    for (int l : labels) n_pos += l == target_class ? 1 : 0;
    const size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw ConfigError("roc_curve: both classes must be present in the labels");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    ROCCurve curve;
    curve.target_class = target_class;
    curve.thresholds.push_back(std::numeric_limits<double>::infinity());
    curve.fpr.push_back(0.0);
    curve.tpr.push_back(0.0);
    size_t tp = 0, fp = 0, i = 0;
    while (i < order.size()) {
        const float t = scores[order[i]];
        while (i < order.size() && scores[order[i]] == t) {
            if (labels[order[i]] == target_class)
                ++tp;
            else
                ++fp;
            ++i;
        }
        curve.thresholds.push_back(t);
        curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(n_pos));
        curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(n_neg));
    }
    return curve;
}

MetricsAggregate aggregate_metrics(std::vector<MetricsReport> folds) {
    if (folds.empty()) throw ConfigError("aggregate_metrics: no folds");
    MetricsAggregate agg;
    agg.folds = std::move(folds);
    const size_t nf = agg.folds.size();
    const size_t n_fields = MetricsReport::field_names().size();

    std::vector<std::vector<double>> values(n_fields);
    for (const auto& f : agg.folds) {
        auto vals = f.field_values();
        for (size_t i = 0; i < n_fields; ++i)
            if (vals[i]) values[i].push_back(*vals[i]);
    }
    auto fill = [&](MetricsReport& out, auto&& reducer) {
        std::vector<std::optional<double>> reduced(n_fields);
        for (size_t i = 0; i < n_fields; ++i)
            reduced[i] = values[i].empty() ? std::nullopt
                                           : std::optional<double>(reducer(values[i]));
        out.recall = reduced[0].value_or(0.0);
        out.precision = reduced[1].value_or(0.0);
        out.auc_macro = reduced[2];
        out.auc_micro = reduced[3];
        out.auc_weight = reduced[4];
        out.f1_sample = reduced[5].value_or(0.0);
        out.f1_macro = reduced[6].value_or(0.0);
        out.f1_micro = reduced[7].value_or(0.0);
        out.f1_weight = reduced[8].value_or(0.0);
    };
    fill(agg.mean, [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    });
    fill(agg.stddev, [](const std::vector<double>& v) {
        if (v.size() < 2) return 0.0;
        double m = 0.0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::sqrt(ss / static_cast<double>(v.size() - 1));
    });
    (void)nf;
    return agg;
}

}  // namespace cellattn
