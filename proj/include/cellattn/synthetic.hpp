#pragma once

#include <cstdint>
#include <string>

#include "cellattn/image.hpp"
#include "cellattn/manifest.hpp"
#include "cellattn/rng.hpp"

namespace cellattn {

// Two-class fluorescence-style cell images. Blue holds one elliptical
// nucleus, green the cell-boundary filament curves (count drawn from the
// class range), red a perinuclear filament texture whose radial spread
// differs by class. Per-channel energy is normalized so the classes separate
// through structure (curve count, red spread) rather than raw intensity sums.
struct SyntheticConfig {
    int n_normal = 100;
    int n_meta = 120;
    int image_side = 64;
    int curve_count_normal_min = 6;
    int curve_count_normal_max = 9;
    int curve_count_meta_min = 4;
    int curve_count_meta_max = 5;
    // radial placement of the red filament texture, as fractions of the cell
    // radius: metastasizing cells keep a tight perinuclear cage
    float red_spread_normal = 0.65f;
    float red_spread_meta = 0.30f;
    float nucleus_intensity = 0.85f;
    float curve_intensity = 0.9f;
    float red_intensity = 0.75f;
    float noise_sigma = 0.02f;

    void validate() const;
};

// Deterministic per (cfg, seed, index): each image draws from an independent
// stream derived from the dataset seed.
Image render_cell(const SyntheticConfig& cfg, int label, Rng& rng);

// Writes images/<id>.png plus manifest.json under out_dir; entries carry
// stratified fold assignments derived from the same seed.
DatasetManifest generate_synthetic_dataset(const SyntheticConfig& cfg, uint64_t seed,
                                           const std::string& out_dir);

}  // namespace cellattn
