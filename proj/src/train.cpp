#include "cellattn/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace cellattn {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (lr < 0.0) throw ConfigError("learning rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
}

Tensor one_hot_labels(const std::vector<int>& labels) {
    std::vector<float> data(labels.size() * 2, 0.0f);
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1)
            throw ConfigError("labels must be 0 or 1, got " + std::to_string(labels[i]));
        data[2 * i + static_cast<size_t>(labels[i])] = 1.0f;
    }
    return Tensor::from_data({static_cast<int64_t>(labels.size()), 2}, std::move(data));
}

namespace {

Tensor stack_images(const std::vector<Image>& images, const std::vector<size_t>& idx, size_t from,
                    size_t to) {
    const Image& first = images[idx[from]];
    const int64_t n = static_cast<int64_t>(to - from);
    std::vector<float> data;
    data.reserve(static_cast<size_t>(n) * first.data.size());
    for (size_t i = from; i < to; ++i) {
        const Image& img = images[idx[i]];
        if (img.channels != first.channels || img.height != first.height ||
            img.width != first.width)
            throw ConfigError("training images disagree in shape");
        data.insert(data.end(), img.data.begin(), img.data.end());
    }
    return Tensor::from_data({n, first.channels, first.height, first.width}, std::move(data));
}

}  // namespace

TrainResult train_model(const EncoderConfig& cfg, const TrainConfig& train,
                        const TrainingSet& data) {
    cfg.validate();
    train.validate();
    if (data.images.empty()) throw ConfigError("train_model: empty training set");
    if (data.images.size() != data.labels.size())
        throw ConfigError("train_model: image/label count mismatch");

    Rng init_rng(mix_seed(train.seed, 0x1417));
    TrainResult result{init_encoder_params(cfg, init_rng), {}};
    std::vector<Tensor> params = result.params.trainable();
    Rng order_rng(mix_seed(train.seed, 0x0DD5));
    Rng dropout_rng(mix_seed(train.seed, 0xD207));

    std::vector<size_t> idx(data.images.size());
    std::iota(idx.begin(), idx.end(), 0);
    const size_t bs = static_cast<size_t>(train.batch_size);

    for (int epoch = 0; epoch < train.epochs; ++epoch) {
        for (size_t i = idx.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(order_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(idx[i - 1], idx[j]);
        }
        double loss_sum = 0.0;
        size_t seen = 0;
        int batch_no = 0;
        for (size_t start = 0; start < idx.size(); start += bs, ++batch_no) {
            const size_t end = std::min(start + bs, idx.size());
            Tensor batch = stack_images(data.images, idx, start, end);
            std::vector<int> batch_labels;
            for (size_t i = start; i < end; ++i) batch_labels.push_back(data.labels[idx[i]]);
            Tensor probs = encoder_forward(batch, cfg, result.params, true, dropout_rng);
            Tensor loss = bce_loss(probs, one_hot_labels(batch_labels));
            const float lv = loss.item();
            if (!std::isfinite(lv))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   " batch " + std::to_string(batch_no));
            loss_sum += static_cast<double>(lv) * static_cast<double>(end - start);
            seen += end - start;
            backward(loss);
            sgd_step(params, static_cast<float>(train.lr));
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
    }
    return result;
}

EvalResult evaluate_model(const EncoderConfig& cfg, ParamStore& ps,
                          const std::vector<Image>& images, int batch_size) {
    if (images.empty()) throw ConfigError("evaluate_model: no images");
    if (batch_size < 1) throw ConfigError("evaluate_model: batch_size must be >= 1");
    EvalResult out;
    out.probs.reserve(images.size() * 2);
    out.logits.reserve(images.size() * 2);
    Rng rng(0);  // inference: dropout inactive
    std::vector<size_t> idx(images.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t start = 0; start < images.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(start + static_cast<size_t>(batch_size), images.size());
        Tensor batch = stack_images(images, idx, start, end);
        ForwardTrace trace;
        Tensor probs = encoder_forward(batch, cfg, ps, false, rng, &trace);
        out.probs.insert(out.probs.end(), probs.data().begin(), probs.data().end());
        out.logits.insert(out.logits.end(), trace.logits.data().begin(),
                          trace.logits.data().end());
    }
    return out;
}

namespace {

FoldOutcome run_fold(const EncoderConfig& cfg, const TrainConfig& train,
                     const DatasetManifest& manifest, const std::string& data_dir,
                     int augment_factor, int fold) {
    TrainConfig fold_cfg = train;
    fold_cfg.seed = mix_seed(train.seed, static_cast<uint64_t>(2 * fold + 1));
    Rng aug_rng(mix_seed(train.seed, static_cast<uint64_t>(2 * fold + 2)));

    TrainingSet training = build_training_set(manifest, fold, augment_factor, aug_rng, data_dir);
    if (!audit_no_leakage(training, manifest, fold))
        throw ConfigError("training set leaks test-fold images for fold " + std::to_string(fold));

    FoldOutcome outcome;
    outcome.fold = fold;
    outcome.train = train_model(cfg, fold_cfg, training);

    std::vector<Image> test_images;
    for (size_t i : manifest.fold_indices(fold)) {
        const auto& e = manifest.entries[i];
        test_images.push_back(read_png(data_dir + "/" + e.path));
        outcome.test_labels.push_back(e.label);
        outcome.test_ids.push_back(e.image_id);
    }
    outcome.eval = evaluate_model(cfg, outcome.train.params, test_images, train.batch_size);
    outcome.metrics = compute_metrics(outcome.eval.probs, outcome.test_labels);
    return outcome;
}

}  // namespace

CvResult cross_validate(const EncoderConfig& cfg, const TrainConfig& train,
                        const DatasetManifest& manifest, const std::string& data_dir,
                        int augment_factor, int jobs) {
    const int folds = manifest.fold_count();
    if (folds < 2) throw ConfigError("cross_validate: manifest has no folds");
    if (jobs < 1) jobs = 1;
    jobs = std::min(jobs, folds);

    CvResult result;
    result.folds.resize(static_cast<size_t>(folds));
    if (jobs == 1) {
        for (int f = 0; f < folds; ++f)
            result.folds[static_cast<size_t>(f)] =
                run_fold(cfg, train, manifest, data_dir, augment_factor, f);
    } else {
        std::vector<std::thread> workers;
        std::atomic<int> next{0};
        std::vector<std::exception_ptr> errors(static_cast<size_t>(folds));
        for (int w = 0; w < jobs; ++w)
            workers.emplace_back([&]() {
                for (int f = next.fetch_add(1); f < folds; f = next.fetch_add(1)) {
                    try {
                        result.folds[static_cast<size_t>(f)] =
                            run_fold(cfg, train, manifest, data_dir, augment_factor, f);
                    } catch (...) {
                        errors[static_cast<size_t>(f)] = std::current_exception();
                    }
                }
            });
        for (auto& t : workers) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    std::vector<MetricsReport> reports;
    for (const auto& f : result.folds) reports.push_back(f.metrics);
    result.aggregate = aggregate_metrics(std::move(reports));
    return result;
}

}  // namespace cellattn
