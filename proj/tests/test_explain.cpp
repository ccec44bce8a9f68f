#include <doctest.h>

#include <cmath>

#include "cellattn/explain.hpp"
#include "oracles.hpp"

using namespace cellattn;

namespace {

EncoderConfig tiny_mhl() {
    EncoderConfig cfg;
    cfg.family = Family::MHL;
    cfg.backbone.kind = BackboneKind::plain_cnn;
    cfg.backbone.input_channels = 3;
    cfg.image_side = 16;  // L = 16
    return cfg;
}

}  // namespace

TEST_CASE("cam weighting by hand: unit alpha keeps ReLU(A)") {
    // A = [[1,-1],[2,0]] with unit gradients -> alpha = 1 -> ReLU(A)
    const std::vector<float> act = {1, -1, 2, 0};
    const std::vector<float> grads = {1, 1, 1, 1};
    auto map = cam_from_activation(act, grads, 1, 2, 2);
    CHECK(map == std::vector<float>{1, 0, 2, 0});
}

TEST_CASE("cam weighting: negative alphas on non-negative maps vanish") {
    const std::vector<float> act = {0.5f, 1.0f, 0.25f, 2.0f};
    const std::vector<float> grads = {-1, -2, -0.5f, -3};
    auto map = cam_from_activation(act, grads, 1, 2, 2);
    for (float v : map) CHECK(v == 0.0f);
}

TEST_CASE("cam weighting matches the hand oracle on random stacks") {
    Rng rng(101);
    for (int it = 0; it < 20; ++it) {
        const int64_t K = 3, h = 4, w = 5;
        std::vector<float> act(static_cast<size_t>(K * h * w)), grads(act.size());
        for (auto& v : act) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        for (auto& v : grads) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        auto map = cam_from_activation(act, grads, K, h, w);
        for (int64_t p = 0; p < h * w; ++p) {
            double expected = 0.0;
            for (int64_t k = 0; k < K; ++k) {
                double alpha = 0.0;
                for (int64_t v = 0; v < h * w; ++v)
                    alpha += grads[static_cast<size_t>(k * h * w + v)];
                alpha /= static_cast<double>(h * w);
                expected += alpha * act[static_cast<size_t>(k * h * w + p)];
            }
            expected = std::max(expected, 0.0);
            CHECK(map[static_cast<size_t>(p)] == doctest::Approx(expected).epsilon(1e-5));
        }
    }
}

TEST_CASE("gradcam: non-negative, normalized, deterministic, resolution-aligned") {
    Rng rng(103);
    EncoderConfig cfg = tiny_mhl();
    ParamStore ps = init_encoder_params(cfg, rng);
    Tensor img = oracles::random_tensor({3, 16, 16}, rng, false, 0.0, 1.0);
    SaliencyMap a = gradcam(cfg, ps, img, 1);
    SaliencyMap b = gradcam(cfg, ps, img, 1);
    CHECK(a.height == 16);
    CHECK(a.width == 16);
    CHECK(a.normalized);
    float mx = 0.0f;
    for (size_t i = 0; i < a.values.size(); ++i) {
        CHECK(a.values[i] >= 0.0f);
        CHECK(a.values[i] == b.values[i]);
        mx = std::max(mx, a.values[i]);
    }
    CHECK((mx == doctest::Approx(1.0f) || mx == 0.0f));

    CHECK_THROWS_AS(gradcam(cfg, ps, img, 5), ConfigError);
    CHECK_THROWS_AS(gradcam(cfg, ps, img, 0, "backbone.nonexistent"), ConfigError);
}

TEST_CASE("gradcam layer listing names the recorded convolutions") {
    Rng rng(107);
    EncoderConfig cfg = tiny_mhl();
    ParamStore ps = init_encoder_params(cfg, rng);
    auto layers = gradcam_layers(cfg, ps);
    REQUIRE(layers.size() == 3);  // plain_cnn records its three convs
    CHECK(layers.back() == "backbone.conv3");
    Rng rng2(103);
    Tensor img = oracles::random_tensor({3, 16, 16}, rng2, false, 0.0, 1.0);
    SaliencyMap named = gradcam(cfg, ps, img, 0, layers[1]);
    CHECK(named.values.size() == 256);
}

TEST_CASE("gmean: idempotence, analytic case, bounds, permutation symmetry") {
    std::vector<float> m1 = {0.5f, 0.25f, 1.0f, 0.125f};
    CHECK(gmean({m1, m1, m1}, {1.0, 2.0, 0.5}) == std::vector<float>(m1));

    auto two = gmean({{1.0f}, {4.0f}}, {1.0, 1.0});
    CHECK(two[0] == doctest::Approx(2.0f).epsilon(1e-6));

    Rng rng(109);
    std::vector<std::vector<float>> maps(3, std::vector<float>(24));
    for (auto& m : maps)
        for (auto& v : m) v = static_cast<float>(rng.uniform(0.05, 1.0));
    auto g = gmean(maps, {1.0, 1.0, 1.0});
    auto g_perm = gmean({maps[2], maps[0], maps[1]}, {1.0, 1.0, 1.0});
    for (size_t i = 0; i < g.size(); ++i) {
        const float lo = std::min({maps[0][i], maps[1][i], maps[2][i]});
        const float hi = std::max({maps[0][i], maps[1][i], maps[2][i]});
        CHECK(g[i] >= lo - 1e-6f);
        CHECK(g[i] <= hi + 1e-6f);
        CHECK(g[i] == doctest::Approx(g_perm[i]).epsilon(1e-7));
    }

    CHECK_THROWS_AS(gmean({}, {}), ConfigError);
    CHECK_THROWS_AS(gmean({m1}, {0.0}), ConfigError);
}

TEST_CASE("gmean with weights (1,2,1) matches the 64-bit loop oracle") {
    Rng rng(113);
    std::vector<std::vector<float>> maps(3, std::vector<float>(30));
    for (auto& m : maps)
        for (auto& v : m) v = static_cast<float>(rng.uniform(0.0, 1.0));
    const std::vector<double> w = {1.0, 2.0, 1.0};
    auto g = gmean(maps, w);
    for (size_t p = 0; p < 30; ++p) {
        double acc = 0.0;
        for (size_t i = 0; i < 3; ++i)
            acc += w[i] * std::log(std::max(static_cast<double>(maps[i][p]), 1e-6));
        const double expected = std::exp(acc / 4.0);
        CHECK(g[p] == doctest::Approx(expected).epsilon(1e-6));
    }
}

TEST_CASE("correlation image: self-correlation is one, anti-correlation minus one") {
    Rng rng(127);
    const int side = 12;
    std::vector<float> a(static_cast<size_t>(side) * side);
    for (auto& v : a) v = static_cast<float>(rng.uniform(0.0, 1.0));
    CorrelationImage self = correlation_image(a, a, side, side, 2);
    for (float v : self.values) CHECK(v == doctest::Approx(1.0f).epsilon(1e-9));

    std::vector<float> inv(a.size());
    for (size_t i = 0; i < a.size(); ++i) inv[i] = 2.0f - a[i];
    CorrelationImage anti = correlation_image(a, inv, side, side, 2);
    for (float v : anti.values) CHECK(v == doctest::Approx(-1.0f).epsilon(1e-9));

    for (float v : self.values) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("correlation at an interior pixel matches textbook Pearson on the 5x5 window") {
    Rng rng(131);
    const int side = 11;
    std::vector<float> a(static_cast<size_t>(side) * side), b(a.size());
    for (auto& v : a) v = static_cast<float>(rng.uniform(0.0, 1.0));
    for (auto& v : b) v = static_cast<float>(rng.uniform(0.0, 1.0));
    CorrelationImage corr = correlation_image(a, b, side, side, 2);
    const int y = 5, x = 6;
    std::vector<double> wa, wb;
    for (int yy = y - 2; yy <= y + 2; ++yy)
        for (int xx = x - 2; xx <= x + 2; ++xx) {
            wa.push_back(a[static_cast<size_t>(yy) * side + xx]);
            wb.push_back(b[static_cast<size_t>(yy) * side + xx]);
        }
    CHECK(corr.values[static_cast<size_t>(y) * side + x] ==
          doctest::Approx(oracles::pearson_ref(wa, wb)).epsilon(1e-9));
}

TEST_CASE("degenerate windows map to zero") {
    const int side = 8;
    std::vector<float> flat(static_cast<size_t>(side) * side, 0.25f);
    std::vector<float> other(flat.size());
    for (size_t i = 0; i < other.size(); ++i) other[i] = static_cast<float>(i % 7) / 7.0f;
    CorrelationImage corr = correlation_image(flat, other, side, side, 2);
    for (float v : corr.values) CHECK(v == 0.0f);
}

TEST_CASE("ratio scores") {
    CorrelationImage ones;
    ones.height = 2;
    ones.width = 2;
    ones.values = {1, 1, 1, 1};
    RatioScores rs = ratio_scores(ones, 0.5);
    CHECK(rs.positive_ratio == doctest::Approx(1.0));
    CHECK(rs.negative_ratio == doctest::Approx(0.0));
    CHECK(rs.neutral_ratio == doctest::Approx(0.0));

    CorrelationImage mixed;
    mixed.height = 2;
    mixed.width = 2;
    mixed.values = {0.6f, -0.6f, 0.0f, 0.2f};
    rs = ratio_scores(mixed, 0.5);
    CHECK(rs.positive_ratio == doctest::Approx(0.25));
    CHECK(rs.negative_ratio == doctest::Approx(0.25));
    CHECK(rs.neutral_ratio == doctest::Approx(0.5));
    CHECK(rs.positive_ratio + rs.negative_ratio + rs.neutral_ratio ==
          doctest::Approx(1.0).epsilon(1e-9));

    CHECK_THROWS_AS(ratio_scores(mixed, 0.0), ConfigError);
}

TEST_CASE("overlay: zero saliency returns the image, saturation the top color") {
    Image img(3, 4, 4);
    for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 48.0f;
    SaliencyMap zero;
    zero.height = 4;
    zero.width = 4;
    zero.values.assign(16, 0.0f);
    Image same = overlay_heatmap(img, zero);
    CHECK(same.data == img.data);

    SaliencyMap sat = zero;
    sat.values[5] = 1.0f;
    Image hot = overlay_heatmap(img, sat);
    // top of the jet ramp is (0.5, 0, 0)
    CHECK(hot.at(0, 1, 1) == doctest::Approx(0.5f));
    CHECK(hot.at(1, 1, 1) == doctest::Approx(0.0f));
    CHECK(hot.at(2, 1, 1) == doctest::Approx(0.0f));
}

TEST_CASE("overlay golden case: fixed 8x8 render") {
    // frozen from the first verified render of this ramp scene
    Image img(3, 8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            img.at(0, y, x) = static_cast<float>(x) / 7.0f;
            img.at(1, y, x) = static_cast<float>(y) / 7.0f;
            img.at(2, y, x) = 0.25f;
        }
    SaliencyMap sal;
    sal.height = 8;
    sal.width = 8;
    sal.values.assign(64, 0.0f);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            sal.values[static_cast<size_t>(y) * 8 + x] = static_cast<float>(y * 8 + x) / 63.0f;
    Image out = overlay_heatmap(img, sal);
    uint64_t checksum = 0;
    for (float v : out.data)
        checksum = checksum * 1000003ULL +
                   static_cast<uint64_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    CHECK(checksum == 4855740115874906047ULL);
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.0f));                  // s=0 keeps the pixel
    CHECK(out.at(0, 7, 7) == doctest::Approx(0.5f).epsilon(1e-6));    // s=1 is jet(1)
}

TEST_CASE("luminance map averages the channels") {
    Image img(3, 1, 2);
    img.at(0, 0, 0) = 0.3f;
    img.at(1, 0, 0) = 0.6f;
    img.at(2, 0, 0) = 0.9f;
    auto lum = luminance_map(img);
    CHECK(lum[0] == doctest::Approx(0.6f));
    CHECK(lum[1] == doctest::Approx(0.0f));
}
