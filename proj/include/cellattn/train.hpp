#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellattn/encoder.hpp"
#include "cellattn/manifest.hpp"
#include "cellattn/metrics.hpp"

namespace cellattn {

struct TrainConfig {
    int epochs = 150;
    double lr = 0.001;
    int batch_size = 8;
    uint64_t seed = 0;

    // the paper's two training regimes split at 100 epochs
    std::string epoch_regime() const { return epochs < 100 ? "short" : "long"; }
    void validate() const;
};

struct TrainResult {
    ParamStore params;
    std::vector<double> epoch_loss;  // mean BCE per epoch
};

// SGD on BCE from a fresh seeded init. Aborts with NumericError naming the
// epoch and batch if the loss goes non-finite.
TrainResult train_model(const EncoderConfig& cfg, const TrainConfig& train,
                        const TrainingSet& data);

struct EvalResult {
    std::vector<float> probs;   // N x 2
    std::vector<float> logits;  // N x 2, pre-softmax
};

EvalResult evaluate_model(const EncoderConfig& cfg, ParamStore& ps,
                          const std::vector<Image>& images, int batch_size = 8);

struct FoldOutcome {
    int fold = 0;
    TrainResult train;
    EvalResult eval;
    std::vector<int> test_labels;
    std::vector<std::string> test_ids;
    MetricsReport metrics;
};

struct CvResult {
    std::vector<FoldOutcome> folds;
    MetricsAggregate aggregate;
};

// One model per fold, trained on the other folds plus their augmented
// variants, evaluated on the untouched fold. Per-fold seeds derive from
// train.seed, so results are independent of `jobs` (folds may run on
// separate threads).
CvResult cross_validate(const EncoderConfig& cfg, const TrainConfig& train,
                        const DatasetManifest& manifest, const std::string& data_dir,
                        int augment_factor = 2, int jobs = 1);

// One-hot (N,2) labels tensor.
Tensor one_hot_labels(const std::vector<int>& labels);

}  // namespace cellattn
