#include "cellattn/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cellattn/explain.hpp"
#include "cellattn/stats.hpp"
#include "cellattn/synthetic.hpp"
#include "cellattn/train.hpp"

namespace cellattn {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct RunOptions {
    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    int jobs = 1;
    std::vector<std::string> overrides;  // --set key=value
};

void add_global_options(CLI::App* cmd, RunOptions& run) {
    cmd->add_option("--config", run.config_path, "model config file (key=value lines)");
    cmd->add_option("--out", run.out_dir, "output directory");
    cmd->add_option("--seed", run.seed, "run seed");
    cmd->add_option("--jobs", run.jobs, "worker threads where parallelism applies");
    cmd->add_option("--set", run.overrides, "override key=value (repeatable)");
}

struct ResolvedModel {
    EncoderConfig encoder;
    TrainConfig train;
    int augment_factor = 2;
    bool seed_from_config = false;
};

std::pair<std::string, std::string> split_kv(const std::string& s) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got: " + s);
    return {s.substr(0, eq), s.substr(eq + 1)};
}

// run-level keys accepted in config files and --set alongside the model keys
bool apply_run_key(const std::string& key, const std::string& value, RunOptions& run,
                   ResolvedModel& m, bool from_config_file) {
    try {
        if (key == "seed") {
            if (from_config_file) {
                m.seed_from_config = true;
                m.train.seed = std::stoull(value);
            } else {
                run.seed = std::stoull(value);
            }
            return true;
        }
        if (key == "epochs") {
            m.train.epochs = std::stoi(value);
            return true;
        }
        if (key == "lr") {
            m.train.lr = std::stod(value);
            return true;
        }
        if (key == "batch_size") {
            m.train.batch_size = std::stoi(value);
            return true;
        }
        if (key == "augment_factor") {
            m.augment_factor = std::stoi(value);
            return true;
        }
    } catch (const std::exception&) {
        throw ConfigError("bad value for " + key + ": " + value);
    }
    return false;
}

ResolvedModel resolve_model(const RunOptions& run, const std::string& family_flag,
                            const std::string& backbone_flag) {
    ResolvedModel m;
    RunOptions run_copy = run;
    if (!run.config_path.empty()) {
        std::ifstream is(run.config_path);
        if (!is) throw IoError("cannot open model config: " + run.config_path);
        std::string line;
        std::vector<std::pair<std::string, std::string>> kv;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError(run.config_path + ":" + std::to_string(lineno) +
                                  ": expected key=value");
            auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t\r");
                const auto b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
        for (const auto& [k, v] : kv)
            if (!apply_run_key(k, v, run_copy, m, true)) m.encoder.apply_override(k, v);
    }
    if (!family_flag.empty()) m.encoder.apply_override("family", family_flag);
    if (!backbone_flag.empty()) m.encoder.apply_override("backbone.kind", backbone_flag);
    for (const auto& s : run.overrides) {
        const auto [k, v] = split_kv(s);
        if (!apply_run_key(k, v, run_copy, m, false)) m.encoder.apply_override(k, v);
    }
    if (run_copy.seed != run.seed) m.train.seed = run_copy.seed;
    return m;
}

void ensure_out_dir(const std::string& out_dir) {
    if (out_dir.empty()) throw ConfigError("--out is required");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());
}

void write_snapshot(const std::string& out_dir, ordered_json snapshot) {
    std::ofstream os(out_dir + "/config.resolved.json");
    if (!os) throw IoError("cannot write config snapshot in " + out_dir);
    os << snapshot.dump(2) << "\n";
}

ordered_json model_snapshot(const ResolvedModel& m) {
    ordered_json j;
    j["family"] = to_string(m.encoder.family);
    j["backbone"] = {{"kind", to_string(m.encoder.backbone.kind)},
                     {"input_channels", m.encoder.backbone.input_channels},
                     {"blocks", m.encoder.backbone.blocks},
                     {"base_filters", m.encoder.backbone.base_filters},
                     {"downsample_stages", m.encoder.backbone.downsample_stages}};
    j["heads"] = m.encoder.heads;
    j["d_model"] = m.encoder.d_model;
    j["image_side"] = m.encoder.image_side;
    j["mlp_dropout"] = m.encoder.mlp_dropout;
    j["train"] = {{"epochs", m.train.epochs},
                  {"lr", m.train.lr},
                  {"batch_size", m.train.batch_size},
                  {"seed", m.train.seed},
                  {"epoch_regime", m.train.epoch_regime()},
                  {"augment_factor", m.augment_factor}};
    return j;
}

json metrics_to_json(const MetricsReport& r) {
    json j;
    const auto& names = MetricsReport::field_names();
    const auto vals = r.field_values();
    for (size_t i = 0; i < names.size(); ++i) {
        if (vals[i])
            j[names[i]] = *vals[i];
        else
            j[names[i]] = nullptr;
    }
    return j;
}

MetricsReport metrics_from_json(const json& j) {
    MetricsReport r;
    auto opt = [&](const char* name) -> std::optional<double> {
        if (!j.contains(name) || j.at(name).is_null()) return std::nullopt;
        return j.at(name).get<double>();
    };
    r.recall = j.at("Recall").get<double>();
    r.precision = j.at("Precision").get<double>();
    r.auc_macro = opt("AUC-ROC macro");
    r.auc_micro = opt("AUC-ROC micro");
    r.auc_weight = opt("AUC-ROC weight");
    r.f1_sample = j.at("F1 sample").get<double>();
    r.f1_macro = j.at("F1 macro").get<double>();
    r.f1_micro = j.at("F1 micro").get<double>();
    r.f1_weight = j.at("F1 weight").get<double>();
    return r;
}

std::string find_model_config(const std::string& ckpt_path, const std::string& explicit_cfg) {
    if (!explicit_cfg.empty()) return explicit_cfg;
    const fs::path dir = fs::path(ckpt_path).parent_path();
    for (const fs::path& cand : {dir / "model.cfg", dir.parent_path() / "model.cfg"})
        if (fs::exists(cand)) return cand.string();
    throw ConfigError("no model.cfg found next to " + ckpt_path + "; pass --config");
}

void write_loss_trace(const std::string& path, const std::vector<double>& trace) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write loss trace: " + path);
    os << "epoch,mean_bce\n";
    for (size_t i = 0; i < trace.size(); ++i) os << i << "," << trace[i] << "\n";
}

void write_predictions(const std::string& path, const std::vector<std::string>& ids,
                       const std::vector<int>& labels, const EvalResult& eval) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write predictions: " + path);
    os << "image_id,label,prob_normal,prob_metastasizing,logit_normal,logit_metastasizing\n";
    for (size_t i = 0; i < ids.size(); ++i)
        os << ids[i] << "," << label_name(labels[i]) << "," << eval.probs[2 * i] << ","
           << eval.probs[2 * i + 1] << "," << eval.logits[2 * i] << "," << eval.logits[2 * i + 1]
           << "\n";
}

void write_roc_csv(const std::string& path, const ROCCurve& curve) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write ROC curve: " + path);
    os << "fpr,tpr,threshold\n";
    for (size_t i = 0; i < curve.fpr.size(); ++i)
        os << curve.fpr[i] << "," << curve.tpr[i] << "," << curve.thresholds[i] << "\n";
}

// Table-style CSV: metric rows, mean/std plus per-fold columns.
void write_metrics_table(const std::string& path, const MetricsAggregate& agg) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write metrics table: " + path);
    os << "Metric,mean,std";
    for (size_t f = 0; f < agg.folds.size(); ++f) os << ",fold" << f;
    os << "\n";
    const auto& names = MetricsReport::field_names();
    const auto means = agg.mean.field_values();
    const auto stds = agg.stddev.field_values();
    for (size_t i = 0; i < names.size(); ++i) {
        os << names[i] << ",";
        if (means[i]) os << *means[i];
        os << ",";
        if (stds[i]) os << *stds[i];
        for (const auto& fold : agg.folds) {
            const auto v = fold.field_values()[i];
            os << ",";
            if (v) os << *v;
        }
        os << "\n";
    }
}

void print_summary_table(const MetricsAggregate& agg) {
    const auto& names = MetricsReport::field_names();
    const auto means = agg.mean.field_values();
    const auto stds = agg.stddev.field_values();
    std::cout << "Metric (%)        mean +- std\n";
    for (size_t i = 0; i < names.size(); ++i) {
        std::cout << names[i];
        for (size_t pad = names[i].size(); pad < 18; ++pad) std::cout << ' ';
        if (means[i]) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%6.2f +- %5.2f", *means[i] * 100.0,
                          stds[i] ? *stds[i] * 100.0 : 0.0);
            std::cout << buf;
        } else {
            std::cout << "undefined";
        }
        std::cout << "\n";
    }
}

void save_fold_artifacts(const std::string& fold_dir, const FoldOutcome& outcome) {
    std::error_code ec;
    fs::create_directories(fold_dir, ec);
    if (ec) throw IoError("cannot create " + fold_dir);
    outcome.train.params.save(fold_dir + "/checkpoint.ckpt");
    write_loss_trace(fold_dir + "/loss_trace.csv", outcome.train.epoch_loss);
    write_predictions(fold_dir + "/predictions.csv", outcome.test_ids, outcome.test_labels,
                      outcome.eval);
    std::ofstream os(fold_dir + "/metrics.json");
    if (!os) throw IoError("cannot write metrics in " + fold_dir);
    os << metrics_to_json(outcome.metrics).dump(2) << "\n";
}

// ---- commands --------------------------------------------------------------

int cmd_gen(const RunOptions& run, const SyntheticConfig& syn) {
    ensure_out_dir(run.out_dir);
    DatasetManifest manifest = generate_synthetic_dataset(syn, run.seed, run.out_dir);
    ordered_json snap;
    snap["command"] = "gen";
    snap["seed"] = run.seed;
    snap["n_normal"] = syn.n_normal;
    snap["n_meta"] = syn.n_meta;
    snap["image_side"] = syn.image_side;
    snap["noise_sigma"] = syn.noise_sigma;
    write_snapshot(run.out_dir, snap);
    std::cout << "generated " << manifest.entries.size() << " images ("
              << manifest.count_label(kLabelNormal) << " normal, "
              << manifest.count_label(kLabelMetastasizing) << " metastasizing) in " << run.out_dir
              << "\n";
    return 0;
}

int cmd_train(const RunOptions& run, const ResolvedModel& m, const std::string& data_manifest,
              int test_fold) {
    ensure_out_dir(run.out_dir);
    DatasetManifest manifest = DatasetManifest::load(data_manifest);
    const std::string data_dir = fs::path(data_manifest).parent_path().string();
    Rng aug_rng(mix_seed(m.train.seed, 0xA6));
    TrainingSet training =
        build_training_set(manifest, test_fold, m.augment_factor, aug_rng, data_dir);

    TrainResult result = train_model(m.encoder, m.train, training);
    result.params.save(run.out_dir + "/checkpoint.ckpt");
    write_loss_trace(run.out_dir + "/loss_trace.csv", result.epoch_loss);
    {
        std::ofstream os(run.out_dir + "/model.cfg");
        os << m.encoder.to_kv_text();
    }
    ordered_json snap = model_snapshot(m);
    snap["command"] = "train";
    snap["data"] = data_manifest;
    snap["test_fold"] = test_fold;
    write_snapshot(run.out_dir, snap);
    std::cout << "trained " << m.train.epochs << " epochs on " << training.images.size()
              << " images; final mean loss " << result.epoch_loss.back() << "\n";
    return 0;
}

int cmd_cv(const RunOptions& run, const ResolvedModel& m, const std::string& data_manifest) {
    ensure_out_dir(run.out_dir);
    DatasetManifest manifest = DatasetManifest::load(data_manifest);
    const std::string data_dir = fs::path(data_manifest).parent_path().string();
    CvResult cv = cross_validate(m.encoder, m.train, manifest, data_dir, m.augment_factor,
                                 run.jobs);

    for (const auto& fold : cv.folds)
        save_fold_artifacts(run.out_dir + "/fold_" + std::to_string(fold.fold), fold);
    {
        std::ofstream os(run.out_dir + "/model.cfg");
        os << m.encoder.to_kv_text();
    }
    json agg;
    agg["name"] = to_string(m.encoder.family) + "-" + to_string(m.encoder.backbone.kind);
    agg["epoch_regime"] = m.train.epoch_regime();
    agg["mean"] = metrics_to_json(cv.aggregate.mean);
    agg["std"] = metrics_to_json(cv.aggregate.stddev);
    agg["folds"] = json::array();
    for (const auto& fold : cv.folds) agg["folds"].push_back(metrics_to_json(fold.metrics));
    {
        std::ofstream os(run.out_dir + "/metrics_aggregate.json");
        if (!os) throw IoError("cannot write metrics_aggregate.json");
        os << agg.dump(2) << "\n";
    }
    write_metrics_table(run.out_dir + "/metrics_table.csv", cv.aggregate);
    ordered_json snap = model_snapshot(m);
    snap["command"] = "cv";
    snap["data"] = data_manifest;
    snap["jobs"] = run.jobs;
    write_snapshot(run.out_dir, snap);
    print_summary_table(cv.aggregate);
    return 0;
}

int cmd_eval(const RunOptions& run, const std::string& ckpt, const std::string& cfg_path,
             const std::string& data_manifest, int fold) {
    ensure_out_dir(run.out_dir);
    EncoderConfig cfg = EncoderConfig::from_file(find_model_config(ckpt, cfg_path));
    ParamStore ps = ParamStore::load(ckpt);
    DatasetManifest manifest = DatasetManifest::load(data_manifest);
    const std::string data_dir = fs::path(data_manifest).parent_path().string();

    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::string> ids;
    for (size_t i : manifest.fold_indices(fold)) {
        const auto& e = manifest.entries[i];
        images.push_back(read_png(data_dir + "/" + e.path));
        labels.push_back(e.label);
        ids.push_back(e.image_id);
    }
    if (images.empty()) throw ConfigError("fold " + std::to_string(fold) + " holds no images");
    EvalResult eval = evaluate_model(cfg, ps, images);
    MetricsReport report = compute_metrics(eval.probs, labels);
    {
        std::ofstream os(run.out_dir + "/metrics.json");
        if (!os) throw IoError("cannot write metrics.json");
        os << metrics_to_json(report).dump(2) << "\n";
    }
    write_predictions(run.out_dir + "/predictions.csv", ids, labels, eval);
    for (int cls = 0; cls < 2; ++cls) {
        std::vector<float> scores(labels.size());
        for (size_t i = 0; i < labels.size(); ++i)
            scores[i] = eval.probs[2 * i + static_cast<size_t>(cls)];
        write_roc_csv(run.out_dir + "/roc_class" + std::to_string(cls) + ".csv",
                      roc_curve(scores, labels, cls));
    }
    ordered_json snap;
    snap["command"] = "eval";
    snap["checkpoint"] = ckpt;
    snap["data"] = data_manifest;
    snap["fold"] = fold;
    write_snapshot(run.out_dir, snap);
    MetricsAggregate single = aggregate_metrics({report});
    print_summary_table(single);
    return 0;
}

int cmd_explain(const RunOptions& run, const std::string& ckpt, const std::string& cfg_path,
                const std::string& data_manifest, int fold, const std::string& layer,
                int target_class) {
    ensure_out_dir(run.out_dir);
    EncoderConfig cfg = EncoderConfig::from_file(find_model_config(ckpt, cfg_path));
    ParamStore ps = ParamStore::load(ckpt);
    DatasetManifest manifest = DatasetManifest::load(data_manifest);
    const std::string data_dir = fs::path(data_manifest).parent_path().string();

    std::error_code ec;
    fs::create_directories(run.out_dir + "/gradcam", ec);
    if (ec) throw IoError("cannot create gradcam dir");
    int count = 0;
    for (const auto& e : manifest.entries) {
        if (e.augmented) continue;
        if (fold >= 0 && e.fold != fold) continue;
        Image img = read_png(data_dir + "/" + e.path);
        Tensor t = image_to_tensor(img);
        int cls = target_class;
        if (cls < 0) {
            // explain the predicted class
            EvalResult ev = evaluate_model(cfg, ps, {img}, 1);
            cls = ev.probs[1] > ev.probs[0] ? 1 : 0;
        }
        SaliencyMap sal = gradcam(cfg, ps, t, cls, layer, e.image_id);
        const std::string base = run.out_dir + "/gradcam/" + e.image_id;
        save_tnsr_file(base + ".tnsr",
                       Tensor::from_data({sal.height, sal.width}, sal.values));
        write_png(base + ".png", overlay_heatmap(img, sal));
        ++count;
    }
    if (count == 0) throw ConfigError("no images matched the explain selection");
    ordered_json snap;
    snap["command"] = "explain";
    snap["checkpoint"] = ckpt;
    snap["data"] = data_manifest;
    snap["fold"] = fold;
    snap["layer"] = layer;
    snap["target_class"] = target_class;
    write_snapshot(run.out_dir, snap);
    std::cout << "wrote gradcam renders for " << count << " images\n";
    return 0;
}

int cmd_aggregate(const RunOptions& run, const std::string& ckpt, const std::string& cfg_path,
                  const std::string& data_manifest, int fold, const std::string& layer,
                  int halfwidth, double threshold) {
    ensure_out_dir(run.out_dir);
    EncoderConfig cfg = EncoderConfig::from_file(find_model_config(ckpt, cfg_path));
    ParamStore ps = ParamStore::load(ckpt);
    DatasetManifest manifest = DatasetManifest::load(data_manifest);
    const std::string data_dir = fs::path(data_manifest).parent_path().string();

    for (int cls = 0; cls < 2; ++cls) {
        std::vector<std::vector<float>> shape_maps, cam_maps;
        for (const auto& e : manifest.entries) {
            if (e.augmented || e.label != cls) continue;
            if (fold >= 0 && e.fold != fold) continue;
            Image img = read_png(data_dir + "/" + e.path);
            shape_maps.push_back(luminance_map(img));
            SaliencyMap sal = gradcam(cfg, ps, image_to_tensor(img), cls, layer, e.image_id);
            cam_maps.push_back(std::move(sal.values));
        }
        if (shape_maps.empty())
            throw ConfigError("no images for class " + label_name(cls) + " in the selection");
        const std::vector<double> weights(shape_maps.size(), 1.0);  // 1.0 per image
        std::vector<float> gshape = gmean(shape_maps, weights);
        std::vector<float> gcam = gmean(cam_maps, weights);
        const int side = manifest.image_side;
        CorrelationImage corr = correlation_image(gshape, gcam, side, side, halfwidth);
        corr.significance_threshold = static_cast<float>(threshold);
        RatioScores ratios = ratio_scores(corr, threshold);

        const std::string cls_dir = run.out_dir + "/" + label_name(cls);
        std::error_code ec;
        fs::create_directories(cls_dir, ec);
        if (ec) throw IoError("cannot create " + cls_dir);
        save_tnsr_file(cls_dir + "/gmean_shape.tnsr", Tensor::from_data({side, side}, gshape));
        save_tnsr_file(cls_dir + "/gmean_gradcam.tnsr", Tensor::from_data({side, side}, gcam));
        save_tnsr_file(cls_dir + "/correlation.tnsr",
                       Tensor::from_data({side, side}, corr.values));
        auto to_gray = [&](const std::vector<float>& map, float lo, float hi) {
            Image img(3, side, side);
            for (int i = 0; i < side * side; ++i) {
                const float v = (map[static_cast<size_t>(i)] - lo) / (hi - lo);
                img.data[static_cast<size_t>(i)] = v;
                img.data[static_cast<size_t>(side) * side + i] = v;
                img.data[2 * static_cast<size_t>(side) * side + i] = v;
            }
            return img;
        };
        write_png(cls_dir + "/gmean_shape.png", to_gray(gshape, 0.0f, 1.0f));
        write_png(cls_dir + "/gmean_gradcam.png", to_gray(gcam, 0.0f, 1.0f));
        write_png(cls_dir + "/correlation.png", to_gray(corr.values, -1.0f, 1.0f));
        json jr;
        jr["positive"] = ratios.positive_ratio;
        jr["negative"] = ratios.negative_ratio;
        jr["neutral"] = ratios.neutral_ratio;
        jr["threshold"] = ratios.threshold;
        jr["halfwidth"] = halfwidth;
        std::ofstream os(cls_dir + "/ratios.json");
        if (!os) throw IoError("cannot write ratios.json");
        os << jr.dump(2) << "\n";
        std::cout << label_name(cls) << ": positive " << ratios.positive_ratio << ", negative "
                  << ratios.negative_ratio << ", neutral " << ratios.neutral_ratio << "\n";
    }
    ordered_json snap;
    snap["command"] = "aggregate";
    snap["checkpoint"] = ckpt;
    snap["data"] = data_manifest;
    snap["fold"] = fold;
    snap["halfwidth"] = halfwidth;
    snap["threshold"] = threshold;
    write_snapshot(run.out_dir, snap);
    return 0;
}

int cmd_stats(const RunOptions& run, const std::vector<std::string>& inputs, double alpha) {
    if (inputs.size() < 2) throw ConfigError("stats needs at least 2 metrics JSON inputs");
    ensure_out_dir(run.out_dir);

    struct NamedReport {
        std::string name;
        std::vector<MetricsReport> folds;
    };
    std::vector<NamedReport> reports;
    for (const auto& path : inputs) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open metrics input: " + path);
        json j;
        try {
            is >> j;
        } catch (const json::exception& e) {
            throw IoError("bad metrics JSON in " + path + ": " + e.what());
        }
        NamedReport nr;
        nr.name = j.contains("name") ? j.at("name").get<std::string>()
                                     : fs::path(path).stem().string();
        if (!j.contains("folds") || j.at("folds").size() < 2)
            throw ConfigError(path + ": needs per-fold metric arrays for t-tests");
        for (const auto& jf : j.at("folds")) nr.folds.push_back(metrics_from_json(jf));
        reports.push_back(std::move(nr));
    }

    const int m = static_cast<int>(reports.size() * (reports.size() - 1) / 2);
    std::ofstream os(run.out_dir + "/ttest_matrix.csv");
    if (!os) throw IoError("cannot write ttest_matrix.csv");
    os << "metric,a,b,t,df,p,significant_bonferroni\n";
    const auto& names = MetricsReport::field_names();
    for (size_t field = 0; field < names.size(); ++field) {
        for (size_t i = 0; i < reports.size(); ++i)
            for (size_t j2 = i + 1; j2 < reports.size(); ++j2) {
                std::vector<double> a, b;
                for (const auto& f : reports[i].folds) {
                    const auto v = f.field_values()[field];
                    if (v) a.push_back(*v);
                }
                for (const auto& f : reports[j2].folds) {
                    const auto v = f.field_values()[field];
                    if (v) b.push_back(*v);
                }
                os << names[field] << "," << reports[i].name << "," << reports[j2].name << ",";
                try {
                    WelchResult w = welch_ttest(a, b);
                    const bool sig = bonferroni_gate({w.p}, alpha, m)[0];
                    os << w.t << "," << w.df << "," << w.p << "," << (sig ? "yes" : "no") << "\n";
                } catch (const ConfigError&) {
                    os << ",,,degenerate\n";
                }
            }
    }
    ordered_json snap;
    snap["command"] = "stats";
    snap["inputs"] = inputs;
    snap["alpha"] = alpha;
    snap["tests_per_metric"] = m;
    snap["threshold"] = alpha / m;
    write_snapshot(run.out_dir, snap);
    std::cout << "wrote " << run.out_dir << "/ttest_matrix.csv (" << m
              << " tests per metric, significance threshold " << alpha / m << ")\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"multi-attention channel cell classifier"};
    app.require_subcommand(1);

    RunOptions run;
    SyntheticConfig syn;
    std::string data_manifest, family_flag, backbone_flag, ckpt, cfg_path, layer;
    int test_fold = 0, fold = -1, target_class = -1, halfwidth = 2;
    int epochs = -1, batch_size = -1, augment_factor = -1;
    double lr = -1.0, threshold = 0.5, alpha = 0.05;
    std::vector<std::string> stats_inputs;

    CLI::App* gen = app.add_subcommand("gen", "generate the synthetic two-class dataset");
    add_global_options(gen, run);
    gen->add_option("--n-normal", syn.n_normal, "normal cell count");
    gen->add_option("--n-meta", syn.n_meta, "metastasizing cell count");
    gen->add_option("--side", syn.image_side, "image side in pixels");
    gen->add_option("--noise", syn.noise_sigma, "additive noise sigma");

    auto add_model_options = [&](CLI::App* cmd) {
        cmd->add_option("--family", family_flag, "rgb|mhl");
        cmd->add_option("--backbone", backbone_flag, "plain_cnn|residual|dense_concat");
        cmd->add_option("--epochs", epochs, "training epochs");
        cmd->add_option("--lr", lr, "SGD learning rate");
        cmd->add_option("--batch", batch_size, "batch size");
        cmd->add_option("--augment-factor", augment_factor,
                        "augmented copies per raw training image");
    };

    CLI::App* train = app.add_subcommand("train", "train one model");
    add_global_options(train, run);
    add_model_options(train);
    train->add_option("--data", data_manifest, "dataset manifest.json")->required();
    train->add_option("--test-fold", test_fold, "fold held out from training");

    CLI::App* cv = app.add_subcommand("cv", "stratified k-fold cross-validation");
    add_global_options(cv, run);
    add_model_options(cv);
    cv->add_option("--data", data_manifest, "dataset manifest.json")->required();

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a fold");
    add_global_options(eval, run);
    eval->add_option("--data", data_manifest, "dataset manifest.json")->required();
    eval->add_option("--ckpt", ckpt, "checkpoint file")->required();
    eval->add_option("--model-config", cfg_path, "model.cfg for the checkpoint");
    eval->add_option("--fold", fold, "fold to evaluate (default 0)");

    CLI::App* explain = app.add_subcommand("explain", "per-image GradCam maps and renders");
    add_global_options(explain, run);
    explain->add_option("--data", data_manifest, "dataset manifest.json")->required();
    explain->add_option("--ckpt", ckpt, "checkpoint file")->required();
    explain->add_option("--model-config", cfg_path, "model.cfg for the checkpoint");
    explain->add_option("--fold", fold, "restrict to one fold (-1 = all)");
    explain->add_option("--layer", layer, "conv activation selector (default: last conv)");
    explain->add_option("--target-class", target_class,
                        "0=normal, 1=metastasizing (-1 = predicted)");

    CLI::App* aggregate = app.add_subcommand(
        "aggregate", "per-class Gmean maps, correlation image and ratio scores");
    add_global_options(aggregate, run);
    aggregate->add_option("--data", data_manifest, "dataset manifest.json")->required();
    aggregate->add_option("--ckpt", ckpt, "checkpoint file")->required();
    aggregate->add_option("--model-config", cfg_path, "model.cfg for the checkpoint");
    aggregate->add_option("--fold", fold, "restrict to one fold (-1 = all)");
    aggregate->add_option("--layer", layer, "conv activation selector");
    aggregate->add_option("--halfwidth", halfwidth, "correlation window halfwidth");
    aggregate->add_option("--threshold", threshold, "ratio significance threshold");

    CLI::App* stats = app.add_subcommand("stats", "pairwise Welch t-tests across runs");
    add_global_options(stats, run);
    stats->add_option("--inputs", stats_inputs, "metrics_aggregate.json files")->required();
    stats->add_option("--alpha", alpha, "family-wise significance level");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            if (fold >= 0) throw ConfigError("--fold does not apply to gen");
            return cmd_gen(run, syn);
        }
        ResolvedModel model = resolve_model(run, family_flag, backbone_flag);
        if (!model.seed_from_config || run.seed != 0) model.train.seed = run.seed;
        if (epochs >= 0) model.train.epochs = epochs;
        if (lr >= 0.0) model.train.lr = lr;
        if (batch_size >= 1) model.train.batch_size = batch_size;
        if (augment_factor >= 0) model.augment_factor = augment_factor;

        if (train->parsed()) return cmd_train(run, model, data_manifest, test_fold);
        if (cv->parsed()) return cmd_cv(run, model, data_manifest);
        if (eval->parsed())
            return cmd_eval(run, ckpt, cfg_path, data_manifest, fold < 0 ? 0 : fold);
        if (explain->parsed())
            return cmd_explain(run, ckpt, cfg_path, data_manifest, fold, layer, target_class);
        if (aggregate->parsed())
            return cmd_aggregate(run, ckpt, cfg_path, data_manifest, fold, layer, halfwidth,
                                 threshold);
        if (stats->parsed()) return cmd_stats(run, stats_inputs, alpha);
        throw ConfigError("no command selected");
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    }
}

}  // namespace cellattn
