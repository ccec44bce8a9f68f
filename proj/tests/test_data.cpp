#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cellattn/augment.hpp"
#include "cellattn/manifest.hpp"
#include "cellattn/synthetic.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace cellattn;
namespace fs = std::filesystem;

namespace {

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

// mean radial distance of red mass about the blue-channel centroid,
// normalized by the image side
double red_radial_spread(const Image& img) {
    double bx = 0.0, by = 0.0, bmass = 1e-9;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double w = img.at(2, y, x);
            bx += w * x;
            by += w * y;
            bmass += w;
        }
    bx /= bmass;
    by /= bmass;
    double spread = 0.0, rmass = 1e-9;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const double w = img.at(0, y, x);
            spread += w * std::sqrt((x - bx) * (x - bx) + (y - by) * (y - by));
            rmass += w;
        }
    return spread / rmass / img.width;
}

}  // namespace

TEST_CASE("default generation: 220 images, 100 normal + 120 metastasizing") {
    const std::string& dir = fixtures::cohort_dataset();
    DatasetManifest m = DatasetManifest::load(dir + "/manifest.json");
    CHECK(m.entries.size() == 220);
    CHECK(m.count_label(kLabelNormal) == 100);
    CHECK(m.count_label(kLabelMetastasizing) == 120);
    CHECK(m.image_side == 64);
    int files = 0;
    for (const auto& e : m.entries) {
        CHECK(fs::exists(dir + "/" + e.path));
        ++files;
    }
    CHECK(files == 220);
}

TEST_CASE("generation is deterministic per seed, byte for byte") {
    SyntheticConfig cfg;
    cfg.n_normal = 4;
    cfg.n_meta = 5;
    cfg.image_side = 32;
    const std::string a = "/tmp/cellattn_det_a", b = "/tmp/cellattn_det_b";
    fs::remove_all(a);
    fs::remove_all(b);
    generate_synthetic_dataset(cfg, 99, a);
    generate_synthetic_dataset(cfg, 99, b);
    DatasetManifest ma = DatasetManifest::load(a + "/manifest.json");
    for (const auto& e : ma.entries)
        CHECK(file_bytes(a + "/" + e.path) == file_bytes(b + "/" + e.path));
    CHECK(file_bytes(a + "/manifest.json") == file_bytes(b + "/manifest.json"));
}

TEST_CASE("rendered images stay in [0,1] and the red-spread probe separates the classes") {
    const std::string& dir = fixtures::cohort_dataset();
    DatasetManifest m = DatasetManifest::load(dir + "/manifest.json");
    std::vector<double> spread_normal, spread_meta;
    for (const auto& e : m.entries) {
        Image img = read_png(dir + "/" + e.path);
        for (float v : img.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
        (e.label == kLabelNormal ? spread_normal : spread_meta)
            .push_back(red_radial_spread(img));
    }
    double mn = 0.0, mm = 0.0;
    for (double v : spread_normal) mn += v;
    for (double v : spread_meta) mm += v;
    mn /= static_cast<double>(spread_normal.size());
    mm /= static_cast<double>(spread_meta.size());
    const double threshold = (mn + mm) / 2.0;
    int correct = 0;
    for (double v : spread_normal) correct += v > threshold ? 1 : 0;
    for (double v : spread_meta) correct += v < threshold ? 1 : 0;
    const double accuracy = static_cast<double>(correct) / 220.0;
    CHECK(accuracy >= 0.90);
}

TEST_CASE("resample: identity, constants, and the checkerboard oracle") {
    Rng rng(7);
    Image img(3, 64, 64);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    Image same = resample_image(img, 64);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(same.data[i] == doctest::Approx(img.data[i]).epsilon(1e-6));

    Image flat(3, 20, 20);
    std::fill(flat.data.begin(), flat.data.end(), 0.37f);
    for (int side : {8, 16, 48}) {
        Image rs = resample_image(flat, side);
        for (float v : rs.data) CHECK(v == doctest::Approx(0.37f).epsilon(1e-6));
    }

    // 4x4 checkerboard downsampled to 2x2: every sample point sits between
    // two ones and two zeros, so each output pixel is exactly 0.5
    std::vector<float> board = {1, 0, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0, 1};
    auto out = bilinear_resize(board, 4, 4, 2, 2);
    for (float v : out) CHECK(v == doctest::Approx(0.5f).epsilon(1e-6));

    CHECK_THROWS_AS(resample_image(flat, 4), ConfigError);
}

TEST_CASE("rotation by zero degrees is the identity") {
    Rng rng(13);
    Image img(3, 24, 24);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    Image rot = rotate_image(img, 0.0);
    for (size_t i = 0; i < img.data.size(); ++i)
        CHECK(rot.data[i] == doctest::Approx(img.data[i]).epsilon(1e-6));
}

TEST_CASE("shift of +k then -k restores interior pixels") {
    Rng rng(17);
    Image img(3, 16, 16);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    const int k = 3;
    Image back = shift_image(shift_image(img, k, 0), -k, 0);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = k; x < 16 - k; ++x)
                CHECK(back.at(c, y, x) == img.at(c, y, x));
    CHECK(max_shift_pixels(512) == 20);
    CHECK(max_shift_pixels(64) == 3);  // round(20 * 64 / 512) = round(2.5)
}

TEST_CASE("ZCA on a 100-image batch whitens the channel covariance") {
    Rng rng(19);
    std::vector<Image> batch;
    for (int i = 0; i < 100; ++i) {
        Image img(3, 16, 16);
        // correlated channels so there is something to whiten
        for (int p = 0; p < 256; ++p) {
            const float base = static_cast<float>(rng.uniform(0.0, 1.0));
            img.data[static_cast<size_t>(p)] = base;
            img.data[static_cast<size_t>(256 + p)] =
                0.7f * base + 0.3f * static_cast<float>(rng.uniform(0.0, 1.0));
            img.data[static_cast<size_t>(512 + p)] =
                0.5f * base + 0.5f * static_cast<float>(rng.uniform(0.0, 1.0));
        }
        batch.push_back(std::move(img));
    }
    std::vector<const Image*> ptrs;
    for (const auto& img : batch) ptrs.push_back(&img);
    ZcaWhitener w = ZcaWhitener::fit(ptrs, 1e-2f);

    double mean[3] = {0, 0, 0};
    double cov[3][3] = {};
    size_t count = 0;
    std::vector<Image> white;
    for (const auto& img : batch) white.push_back(w.apply(img));
    for (const auto& img : white)
        for (size_t p = 0; p < img.plane_size(); ++p) {
            for (int c = 0; c < 3; ++c) mean[c] += img.data[c * img.plane_size() + p];
            ++count;
        }
    for (auto& m : mean) m /= static_cast<double>(count);
    for (const auto& img : white)
        for (size_t p = 0; p < img.plane_size(); ++p)
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b)
                    cov[a][b] += (img.data[a * img.plane_size() + p] - mean[a]) *
                                 (img.data[b * img.plane_size() + p] - mean[b]);
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
            cov[a][b] /= static_cast<double>(count);
            if (a == b) {
                CHECK(cov[a][b] > 0.90);
                CHECK(cov[a][b] < 1.10);
            } else {
                CHECK(std::fabs(cov[a][b]) < 0.05);
            }
        }
}

TEST_CASE("augment dispatch covers every kind and validates input") {
    Rng rng(23);
    Image img(3, 32, 32);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    for (AugmentKind kind : {AugmentKind::rotate, AugmentKind::width_shift,
                             AugmentKind::height_shift, AugmentKind::zca}) {
        Image out = augment(img, kind, rng);
        CHECK(out.height == 32);
        CHECK(out.width == 32);
        for (float v : out.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    CHECK_THROWS_AS(augment_kind_from_string("blur"), ConfigError);
    Image noisy = add_noise(img, 0.05f, rng);
    for (float v : noisy.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("stratified 5-fold on 100+120 gives folds of exactly 44 (20/24)") {
    const std::string& dir = fixtures::cohort_dataset();
    DatasetManifest m = DatasetManifest::load(dir + "/manifest.json");
    REQUIRE(m.fold_count() == 5);
    for (int f = 0; f < 5; ++f) {
        int normal = 0, meta = 0;
        for (size_t i : m.fold_indices(f))
            (m.entries[i].label == kLabelNormal ? normal : meta) += 1;
        CHECK(normal == 20);
        CHECK(meta == 24);
    }
}

TEST_CASE("k-fold rejects degenerate k") {
    DatasetManifest m;
    for (int i = 0; i < 6; ++i) {
        ManifestEntry e;
        e.image_id = "x" + std::to_string(i);
        e.label = i % 2;
        m.entries.push_back(e);
    }
    CHECK_THROWS_AS(stratified_kfold(m, 1, 0), ConfigError);
    CHECK_THROWS_AS(stratified_kfold(m, 4, 0), ConfigError);  // k > min class count
}

TEST_CASE("per-class fold counts differ by at most one over small grids") {
    for (int n1 = 5; n1 <= 11; ++n1)
        for (int n2 = 5; n2 <= 11; ++n2)
            for (int k = 2; k <= 5; ++k) {
                DatasetManifest m;
                for (int i = 0; i < n1 + n2; ++i) {
                    ManifestEntry e;
                    e.image_id = "x" + std::to_string(i);
                    e.label = i < n1 ? 0 : 1;
                    m.entries.push_back(e);
                }
                stratified_kfold(m, k, 31);
                std::vector<int> per_class[2] = {std::vector<int>(k, 0), std::vector<int>(k, 0)};
                std::vector<int> totals(k, 0);
                for (const auto& e : m.entries) {
                    per_class[e.label][static_cast<size_t>(e.fold)] += 1;
                    totals[static_cast<size_t>(e.fold)] += 1;
                }
                for (int label = 0; label < 2; ++label) {
                    const auto [mn, mx] = std::minmax_element(per_class[label].begin(),
                                                              per_class[label].end());
                    CHECK(*mx - *mn <= 1);
                }
                const auto [mn, mx] = std::minmax_element(totals.begin(), totals.end());
                CHECK(*mx - *mn <= 1);
            }
}

TEST_CASE("build_training_set: paper-scale counts and leakage audit") {
    const std::string& dir = fixtures::cohort_dataset();
    DatasetManifest m = DatasetManifest::load(dir + "/manifest.json");
    Rng rng(5);
    TrainingSet set = build_training_set(m, 0, 2, rng, dir);
    CHECK(set.images.size() == 176 + 352);
    CHECK(audit_no_leakage(set, m, 0));
    // every augmented parent sits outside the test fold
    for (const auto& e : set.entries)
        if (e.augmented) {
            bool found = false;
            for (const auto& p : m.entries)
                if (p.image_id == e.parent_id) {
                    CHECK(p.fold != 0);
                    found = true;
                }
            CHECK(found);
        }

    Rng rng0(5);
    TrainingSet raw = build_training_set(m, 0, 0, rng0, dir);
    CHECK(raw.images.size() == 176);
    CHECK_THROWS_AS(build_training_set(m, 9, 2, rng, dir), ConfigError);
}

TEST_CASE("build_training_set is deterministic for a fixed seed") {
    const std::string& dir = fixtures::tiny_dataset();
    DatasetManifest m = DatasetManifest::load(dir + "/manifest.json");
    Rng a(77), b(77);
    TrainingSet sa = build_training_set(m, 1, 2, a, dir);
    TrainingSet sb = build_training_set(m, 1, 2, b, dir);
    REQUIRE(sa.images.size() == sb.images.size());
    for (size_t i = 0; i < sa.images.size(); ++i) CHECK(sa.images[i].data == sb.images[i].data);
}

TEST_CASE("manifest JSON round trip") {
    const std::string& dir = fixtures::tiny_dataset();
    DatasetManifest m = DatasetManifest::load(dir + "/manifest.json");
    const std::string copy = "/tmp/cellattn_manifest_copy.json";
    m.save(copy);
    DatasetManifest back = DatasetManifest::load(copy);
    REQUIRE(back.entries.size() == m.entries.size());
    for (size_t i = 0; i < m.entries.size(); ++i) {
        CHECK(back.entries[i].image_id == m.entries[i].image_id);
        CHECK(back.entries[i].label == m.entries[i].label);
        CHECK(back.entries[i].fold == m.entries[i].fold);
    }
    CHECK(back.seed == m.seed);
}
