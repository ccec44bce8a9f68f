#include "cellattn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace cellattn {

namespace {

struct Point {
    double x, y;
};

void splat_gaussian(Image& img, int channel, double cx, double cy, double sigma,
                    double amplitude) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    const int x0 = std::max(0, static_cast<int>(cx) - r);
    const int x1 = std::min(img.width - 1, static_cast<int>(cx) + r);
    const int y0 = std::max(0, static_cast<int>(cy) - r);
    const int y1 = std::min(img.height - 1, static_cast<int>(cy) + r);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            float& px = img.at(channel, y, x);
            px = static_cast<float>(std::max(static_cast<double>(px),
                                             amplitude * std::exp(-d2 * inv2s2)));
        }
}

// scale a channel so its total mass hits the target budget
void normalize_channel_energy(Image& img, int channel, double budget) {
    double sum = 0.0;
    const size_t plane = img.plane_size();
    for (size_t p = 0; p < plane; ++p) sum += img.data[channel * plane + p];
    if (sum <= 1e-9) return;
    const float scale = static_cast<float>(budget / sum);
    for (size_t p = 0; p < plane; ++p) img.data[channel * plane + p] *= scale;
}

}  // namespace

void SyntheticConfig::validate() const {
    if (n_normal < 1 || n_meta < 1)
        throw ConfigError("synthetic dataset needs at least one image per class");
    if (image_side < 16) throw ConfigError("synthetic image_side must be >= 16");
    if (curve_count_normal_min < 1 || curve_count_meta_min < 1 ||
        curve_count_normal_max < curve_count_normal_min ||
        curve_count_meta_max < curve_count_meta_min)
        throw ConfigError("invalid curve count ranges");
    for (float v : {nucleus_intensity, curve_intensity, red_intensity})
        if (v <= 0.0f || v > 1.0f)
            throw ConfigError("channel intensities must be in (0,1]");
    if (noise_sigma < 0.0f) throw ConfigError("noise_sigma must be >= 0");
    if (red_spread_normal <= 0.0f || red_spread_meta <= 0.0f)
        throw ConfigError("red spread fractions must be > 0");
}

Image render_cell(const SyntheticConfig& cfg, int label, Rng& rng) {
    cfg.validate();
    const int side = cfg.image_side;
    const double u = side / 64.0;  // size unit relative to the desk-scale default
    Image img(3, side, side);

    const double cx = side / 2.0 + rng.uniform(-side / 16.0, side / 16.0);
    const double cy = side / 2.0 + rng.uniform(-side / 16.0, side / 16.0);
    const double cell_r = side * rng.uniform(0.30, 0.38);

    // blue: one elliptical nucleus
    {
        const double a = side * rng.uniform(0.10, 0.15);
        const double b = a * rng.uniform(0.6, 0.9);
        const double phi = rng.uniform(0.0, M_PI);
        const double amp = cfg.nucleus_intensity * rng.uniform(0.85, 1.1);
        const double cphi = std::cos(phi), sphi = std::sin(phi);
        const int r = static_cast<int>(std::ceil(3.0 * a));
        for (int y = std::max(0, static_cast<int>(cy) - r);
             y <= std::min(side - 1, static_cast<int>(cy) + r); ++y)
            for (int x = std::max(0, static_cast<int>(cx) - r);
                 x <= std::min(side - 1, static_cast<int>(cx) + r); ++x) {
                const double dx = x - cx, dy = y - cy;
                const double ex = (cphi * dx + sphi * dy) / a;
                const double ey = (-sphi * dx + cphi * dy) / b;
                const double d2 = ex * ex + ey * ey;
                img.at(2, y, x) = static_cast<float>(
                    std::max(static_cast<double>(img.at(2, y, x)), amp * std::exp(-d2 * 2.0)));
            }
    }

    // green: boundary filament curves, count drawn from the class range
    {
        const int lo = label == kLabelNormal ? cfg.curve_count_normal_min : cfg.curve_count_meta_min;
        const int hi = label == kLabelNormal ? cfg.curve_count_normal_max : cfg.curve_count_meta_max;
        const int n_curves = static_cast<int>(rng.uniform_int(lo, hi));
        for (int cv = 0; cv < n_curves; ++cv) {
            const double theta0 = rng.uniform(0.0, 2.0 * M_PI);
            const double span = rng.uniform(0.45, 1.1);
            const double wobble = rng.uniform(0.02, 0.08);
            const double wphase = rng.uniform(0.0, 2.0 * M_PI);
            const double amp = cfg.curve_intensity * rng.uniform(0.7, 1.0);
            const double sigma = std::max(0.7, 0.9 * u);
            const int steps = std::max(8, static_cast<int>(span * cell_r));
            for (int t = 0; t <= steps; ++t) {
                const double th = theta0 + span * t / steps;
                const double r = cell_r * (1.0 + wobble * std::sin(3.0 * th + wphase));
                splat_gaussian(img, 1, cx + r * std::cos(th), cy + r * std::sin(th), sigma, amp);
            }
        }
    }

    // red: perinuclear filament texture; metastasizing cells keep it in a
    // tight cage around the nucleus, normal cells spread it out
    {
        const double spread =
            label == kLabelNormal ? cfg.red_spread_normal : cfg.red_spread_meta;
        const double mu_r = spread * cell_r;
        const double sigma_r = (label == kLabelNormal ? 0.20 : 0.10) * cell_r;
        const int n_fil = 60;
        for (int f = 0; f < n_fil; ++f) {
            const double radius = std::fabs(rng.normal(mu_r, sigma_r));
            const double th0 = rng.uniform(0.0, 2.0 * M_PI);
            const double arc = rng.uniform(0.15, 0.45);
            const double amp = cfg.red_intensity * rng.uniform(0.6, 1.0);
            const double sigma = std::max(0.6, 0.8 * u);
            const int steps = std::max(3, static_cast<int>(arc * radius));
            for (int t = 0; t <= steps; ++t) {
                const double th = th0 + arc * t / steps;
                splat_gaussian(img, 0, cx + radius * std::cos(th), cy + radius * std::sin(th),
                               sigma, amp);
            }
        }
    }

    // class-independent energy budgets: structure separates the classes, not
    // raw channel sums
    normalize_channel_energy(img, 1, 0.055 * img.plane_size() * rng.uniform(0.9, 1.1));
    normalize_channel_energy(img, 0, 0.045 * img.plane_size() * rng.uniform(0.9, 1.1));

    // global brightness jitter, also class-independent
    const float gain = static_cast<float>(rng.uniform(0.85, 1.1));
    for (auto& v : img.data) v *= gain;

    if (cfg.noise_sigma > 0.0f)
        for (auto& v : img.data) v += static_cast<float>(rng.normal(0.0, cfg.noise_sigma));
    for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
    return img;
}

DatasetManifest generate_synthetic_dataset(const SyntheticConfig& cfg, uint64_t seed,
                                           const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.image_side = cfg.image_side;

    const int total = cfg.n_normal + cfg.n_meta;
    char idbuf[32];
    for (int i = 0; i < total; ++i) {
        const int label = i < cfg.n_normal ? kLabelNormal : kLabelMetastasizing;
        std::snprintf(idbuf, sizeof(idbuf), "img_%04d", i);
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        Image img = render_cell(cfg, label, rng);
        ManifestEntry e;
        e.image_id = idbuf;
        e.path = std::string("images/") + idbuf + ".png";
        e.label = label;
        write_png(out_dir + "/" + e.path, img);
        manifest.entries.push_back(std::move(e));
    }
    stratified_kfold(manifest, 5, seed);
    manifest.save(out_dir + "/manifest.json");
    return manifest;
}

}  // namespace cellattn
