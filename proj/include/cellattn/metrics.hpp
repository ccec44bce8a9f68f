#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cellattn/common.hpp"

namespace cellattn {

// Metric suite for one evaluation. recall/precision are macro (unweighted
// class) averages; the F1 and AUC variants follow the usual macro / micro /
// support-weighted reductions, with "sample" the per-sample average (equal to
// micro for single-label problems). AUC is empty when only one class is
// present in the labels.
struct MetricsReport {
    double recall = 0.0;
    double precision = 0.0;
    double f1_sample = 0.0;
    double f1_macro = 0.0;
    double f1_micro = 0.0;
    double f1_weight = 0.0;
    std::optional<double> auc_macro;
    std::optional<double> auc_micro;
    std::optional<double> auc_weight;

    static const std::vector<std::string>& field_names();  // Table row order
    std::vector<std::optional<double>> field_values() const;
};

// probs: N x 2 row-major class probabilities (rows sum to 1); labels in {0,1}.
MetricsReport compute_metrics(const std::vector<float>& probs, const std::vector<int>& labels);

struct ROCCurve {
    std::vector<double> thresholds;  // descending
    std::vector<double> fpr;         // non-decreasing, starts 0, ends 1
    std::vector<double> tpr;
    int target_class = 0;

    double auc() const;  // trapezoidal
};

// Threshold sweep over the unique scores for `target_class`; both classes
// must be present in the labels.
ROCCurve roc_curve(const std::vector<float>& scores, const std::vector<int>& labels,
                   int target_class);

// Rank-based binary AUC (ties get half credit). Exposed for reuse by the
// metric suite; scores[i] is the score of sample i, positive[i] its label.
double binary_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

struct MetricsAggregate {
    std::vector<MetricsReport> folds;
    MetricsReport mean;
    MetricsReport stddev;  // sample standard deviation over folds
};

MetricsAggregate aggregate_metrics(std::vector<MetricsReport> folds);

}  // namespace cellattn
