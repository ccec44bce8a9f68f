#include "cellattn/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

#include "cellattn/augment.hpp"

namespace cellattn {

std::string label_name(int label) {
    if (label == kLabelNormal) return "normal";
    if (label == kLabelMetastasizing) return "metastasizing";
    throw ConfigError("invalid label value " + std::to_string(label));
}

int label_from_name(const std::string& name) {
    if (name == "normal") return kLabelNormal;
    if (name == "metastasizing") return kLabelMetastasizing;
    throw ConfigError("invalid label name: " + name);
}

int DatasetManifest::fold_count() const {
    int mx = -1;
    for (const auto& e : entries) mx = std::max(mx, e.fold);
    return mx + 1;
}

std::vector<size_t> DatasetManifest::fold_indices(int fold) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].fold == fold) out.push_back(i);
    return out;
}

int DatasetManifest::count_label(int label) const {
    int n = 0;
    for (const auto& e : entries) n += e.label == label ? 1 : 0;
    return n;
}

void DatasetManifest::save(const std::string& path) const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["image_side"] = image_side;
    j["generator_version"] = generator_version;
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
        nlohmann::ordered_json je;
        je["image_id"] = e.image_id;
        je["path"] = e.path;
        je["label"] = label_name(e.label);
        je["fold"] = e.fold;
        je["augmented"] = e.augmented;
        if (e.augmented)
            je["parent_id"] = e.parent_id;
        else
            je["parent_id"] = nullptr;
        j["entries"].push_back(je);
    }
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest: " + path);
    os << j.dump(2) << "\n";
    if (!os) throw IoError("manifest write failed: " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest JSON in " + path + ": " + e.what());
    }
    DatasetManifest m;
    try {
        m.seed = j.at("seed").get<uint64_t>();
        m.image_side = j.at("image_side").get<int>();
        m.generator_version = j.at("generator_version").get<std::string>();
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.image_id = je.at("image_id").get<std::string>();
            e.path = je.at("path").get<std::string>();
            e.label = label_from_name(je.at("label").get<std::string>());
            e.fold = je.at("fold").get<int>();
            e.augmented = je.at("augmented").get<bool>();
            if (!je.at("parent_id").is_null()) e.parent_id = je.at("parent_id").get<std::string>();
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("manifest field error in " + path + ": " + e.what());
    }
    return m;
}

void stratified_kfold(DatasetManifest& manifest, int k, uint64_t seed) {
    if (k < 2) throw ConfigError("stratified k-fold needs k >= 2, got " + std::to_string(k));
    std::vector<std::vector<size_t>> by_class(2);
    for (size_t i = 0; i < manifest.entries.size(); ++i) {
        if (manifest.entries[i].augmented)
            throw ConfigError("stratified_kfold expects a raw (unaugmented) manifest");
        by_class[static_cast<size_t>(manifest.entries[i].label)].push_back(i);
    }
    for (int label = 0; label < 2; ++label)
        if (static_cast<int>(by_class[static_cast<size_t>(label)].size()) < k)
            throw ConfigError("k=" + std::to_string(k) + " exceeds class count for " +
                              label_name(label));
    Rng rng(mix_seed(seed, 0x5F01D));
    int cursor = 0;
    for (auto& indices : by_class) {
        // Fisher-Yates shuffle, then round-robin starting at the rotating cursor
        for (size_t i = indices.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(indices[i - 1], indices[j]);
        }
        for (size_t pos = 0; pos < indices.size(); ++pos)
            manifest.entries[indices[pos]].fold = static_cast<int>((cursor + pos) % k);
        cursor = static_cast<int>((cursor + indices.size()) % k);
    }
}

TrainingSet build_training_set(const DatasetManifest& manifest, int test_fold, int augment_factor,
                               Rng& rng, const std::string& data_dir) {
    const int folds = manifest.fold_count();
    if (folds < 2) throw ConfigError("manifest has no fold assignment; run stratified_kfold");
    if (test_fold < 0 || test_fold >= folds)
        throw ConfigError("test fold " + std::to_string(test_fold) + " out of range [0," +
                          std::to_string(folds) + ")");
    if (augment_factor < 0) throw ConfigError("augment_factor must be >= 0");

    TrainingSet set;
    std::vector<size_t> raw;
    for (size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        if (e.fold != test_fold && !e.augmented) raw.push_back(i);
    }
    for (size_t i : raw) {
        const auto& e = manifest.entries[i];
        set.images.push_back(read_png(data_dir + "/" + e.path));
        set.labels.push_back(e.label);
        set.entries.push_back(e);
    }

    // augmented variants from per-variant derived seeds, parallelizable and
    // order-independent
    const uint64_t base = rng.next_u64();
    const std::array<AugmentKind, 4> kinds = {AugmentKind::rotate, AugmentKind::width_shift,
                                              AugmentKind::height_shift, AugmentKind::zca};
    for (int round = 0; round < augment_factor; ++round)
        for (size_t idx = 0; idx < raw.size(); ++idx) {
            const auto& parent = manifest.entries[raw[idx]];
            const uint64_t variant = static_cast<uint64_t>(round) * raw.size() + idx;
            Rng arng(mix_seed(base, variant));
            const AugmentKind kind = kinds[static_cast<size_t>(arng.uniform_int(0, 3))];
            ManifestEntry e;
            e.image_id = parent.image_id + "_aug" + std::to_string(round);
            e.label = parent.label;
            e.fold = parent.fold;
            e.augmented = true;
            e.parent_id = parent.image_id;
            set.images.push_back(augment(set.images[idx], kind, arng));
            set.labels.push_back(e.label);
            set.entries.push_back(std::move(e));
        }
    return set;
}

bool audit_no_leakage(const TrainingSet& set, const DatasetManifest& manifest, int test_fold) {
    std::unordered_set<std::string> test_ids;
    for (const auto& e : manifest.entries)
        if (e.fold == test_fold) test_ids.insert(e.image_id);
    for (const auto& e : set.entries) {
        if (test_ids.count(e.image_id)) return false;
        if (e.augmented && test_ids.count(e.parent_id)) return false;
        if (e.fold == test_fold) return false;
    }
    return true;
}

}  // namespace cellattn
