#pragma once

// Shared dataset fixtures for the I/O-heavy suites. Each fixture generates
// once per process into /tmp and reuses the directory afterwards.

#include <filesystem>
#include <string>

#include "cellattn/synthetic.hpp"

namespace fixtures {

// Small but class-separable dataset for training tests.
inline const std::string& tiny_dataset() {
    static const std::string dir = [] {
        const std::string path = "/tmp/cellattn_tiny_ds";
        std::filesystem::remove_all(path);
        cellattn::SyntheticConfig cfg;
        cfg.n_normal = 10;
        cfg.n_meta = 10;
        cfg.image_side = 32;
        cellattn::generate_synthetic_dataset(cfg, 11, path);
        return path;
    }();
    return dir;
}

// The paper-scale cohort at desk resolution: 100 + 120 images, side 64.
inline const std::string& cohort_dataset() {
    static const std::string dir = [] {
        const std::string path = "/tmp/cellattn_cohort_ds";
        std::filesystem::remove_all(path);
        cellattn::SyntheticConfig cfg;
        cellattn::generate_synthetic_dataset(cfg, 7, path);
        return path;
    }();
    return dir;
}

}  // namespace fixtures
