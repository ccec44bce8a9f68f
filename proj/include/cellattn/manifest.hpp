#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellattn/image.hpp"
#include "cellattn/rng.hpp"

namespace cellattn {

inline constexpr int kLabelNormal = 0;
inline constexpr int kLabelMetastasizing = 1;

std::string label_name(int label);
int label_from_name(const std::string& name);

struct ManifestEntry {
    std::string image_id;
    std::string path;  // relative to the manifest's directory
    int label = 0;
    int fold = -1;
    bool augmented = false;
    std::string parent_id;  // set only on augmented entries
};

struct DatasetManifest {
    uint64_t seed = 0;
    int image_side = 64;
    std::string generator_version = "1";
    std::vector<ManifestEntry> entries;

    int fold_count() const;
    std::vector<size_t> fold_indices(int fold) const;
    int count_label(int label) const;

    void save(const std::string& path) const;
    static DatasetManifest load(const std::string& path);
};

// Per-class shuffle then round-robin assignment; the rotation cursor advances
// by each class's remainder so total fold sizes differ by at most one.
void stratified_kfold(DatasetManifest& manifest, int k, uint64_t seed);

// In-memory training pool: the raw images of every fold except test_fold,
// plus augment_factor newly generated augmented variants per raw image. The
// test fold is never read or augmented.
struct TrainingSet {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<ManifestEntry> entries;  // raw entries first, then augmented
};

TrainingSet build_training_set(const DatasetManifest& manifest, int test_fold, int augment_factor,
                               Rng& rng, const std::string& data_dir);

// Leakage audit: true iff no augmented entry's parent sits in the test fold
// and no test image appears in the training pool.
bool audit_no_leakage(const TrainingSet& set, const DatasetManifest& manifest, int test_fold);

}  // namespace cellattn
