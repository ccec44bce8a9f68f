#include "cellattn/augment.hpp"

#include <algorithm>
#include <cmath>

namespace cellattn {

AugmentKind augment_kind_from_string(const std::string& s) {
    if (s == "rotate") return AugmentKind::rotate;
    if (s == "width_shift") return AugmentKind::width_shift;
    if (s == "height_shift") return AugmentKind::height_shift;
    if (s == "zca") return AugmentKind::zca;
    throw ConfigError("unknown augmentation kind: " + s);
}

std::string to_string(AugmentKind k) {
    switch (k) {
        case AugmentKind::rotate: return "rotate";
        case AugmentKind::width_shift: return "width_shift";
        case AugmentKind::height_shift: return "height_shift";
        case AugmentKind::zca: return "zca";
    }
    throw ConfigError("invalid augmentation kind value");
}

int max_shift_pixels(int side) {
    return std::max(1, static_cast<int>(std::lround(20.0 * side / 512.0)));
}

Image rotate_image(const Image& img, double degrees) {
    const double rad = degrees * M_PI / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
    Image out(img.channels, img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            // inverse mapping around the image centre
            const double dy = y - cy, dx = x - cx;
            const double sx = c * dx + s * dy + cx;
            const double sy = -s * dx + c * dy + cy;
            if (sx < 0.0 || sy < 0.0 || sx > img.width - 1 || sy > img.height - 1) continue;
            const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
            const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
            const double wx = sx - x0, wy = sy - y0;
            for (int ch = 0; ch < img.channels; ++ch) {
                const double v = (1 - wy) * ((1 - wx) * img.at(ch, y0, x0) + wx * img.at(ch, y0, x1)) +
                                 wy * ((1 - wx) * img.at(ch, y1, x0) + wx * img.at(ch, y1, x1));
                out.at(ch, y, x) = static_cast<float>(v);
            }
        }
    return out;
}

Image shift_image(const Image& img, int dx, int dy) {
    Image out(img.channels, img.height, img.width);
    for (int ch = 0; ch < img.channels; ++ch)
        for (int y = 0; y < img.height; ++y) {
            const int sy = y - dy;
            if (sy < 0 || sy >= img.height) continue;
            for (int x = 0; x < img.width; ++x) {
                const int sx = x - dx;
                if (sx < 0 || sx >= img.width) continue;
                out.at(ch, y, x) = img.at(ch, sy, sx);
            }
        }
    return out;
}

Image add_noise(const Image& img, float sigma, Rng& rng) {
    Image out = img;
    for (auto& v : out.data)
        v = std::clamp(v + static_cast<float>(rng.normal(0.0, sigma)), 0.0f, 1.0f);
    return out;
}

namespace {

// Jacobi eigendecomposition of a symmetric 3x3 matrix.
void eigen_sym3(const std::array<double, 9>& m, std::array<double, 3>& eigvals,
                std::array<double, 9>& eigvecs) {
    double a[3][3] = {{m[0], m[1], m[2]}, {m[3], m[4], m[5]}, {m[6], m[7], m[8]}};
    double v[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = std::fabs(a[0][1]) + std::fabs(a[0][2]) + std::fabs(a[1][2]);
        if (off < 1e-15) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (std::fabs(a[p][q]) < 1e-18) continue;
                const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int i = 0; i < 3; ++i) {
                    const double aip = a[i][p], aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for (int i = 0; i < 3; ++i) {
                    const double api = a[p][i], aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for (int i = 0; i < 3; ++i) {
                    const double vip = v[i][p], viq = v[i][q];
                    v[i][p] = c * vip - s * viq;
                    v[i][q] = s * vip + c * viq;
                }
            }
    }
    for (int i = 0; i < 3; ++i) eigvals[i] = a[i][i];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) eigvecs[i * 3 + j] = v[i][j];
}

}  // namespace

ZcaWhitener ZcaWhitener::fit(const std::vector<const Image*>& batch, float eps) {
    if (batch.empty()) throw ConfigError("ZcaWhitener: empty batch");
    std::array<double, 3> mean{};
    size_t count = 0;
    for (const Image* img : batch) {
        if (img->channels != 3) throw ConfigError("ZcaWhitener expects 3-channel images");
        for (int c = 0; c < 3; ++c)
            for (size_t p = 0; p < img->plane_size(); ++p)
                mean[c] += img->data[c * img->plane_size() + p];
        count += img->plane_size();
    }
    for (auto& m : mean) m /= static_cast<double>(count);

    std::array<double, 9> cov{};
    for (const Image* img : batch)
        for (size_t p = 0; p < img->plane_size(); ++p) {
            const double d0 = img->data[p] - mean[0];
            const double d1 = img->data[img->plane_size() + p] - mean[1];
            const double d2 = img->data[2 * img->plane_size() + p] - mean[2];
            cov[0] += d0 * d0;
            cov[1] += d0 * d1;
            cov[2] += d0 * d2;
            cov[4] += d1 * d1;
            cov[5] += d1 * d2;
            cov[8] += d2 * d2;
        }
    for (auto& c : cov) c /= static_cast<double>(count);
    cov[3] = cov[1];
    cov[6] = cov[2];
    cov[7] = cov[5];

    std::array<double, 3> eigvals;
    std::array<double, 9> u;
    eigen_sym3(cov, eigvals, u);

    // W = U diag(1/sqrt(l + eps)) U^T
    ZcaWhitener w;
    w.mean_ = mean;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k)
                acc += u[i * 3 + k] * u[j * 3 + k] /
                       std::sqrt(std::max(eigvals[k], 0.0) + static_cast<double>(eps));
            w.w_[i * 3 + j] = acc;
        }
    return w;
}

ZcaWhitener ZcaWhitener::fit(const Image& img, float eps) {
    return fit(std::vector<const Image*>{&img}, eps);
}

Image ZcaWhitener::apply(const Image& img) const {
    if (img.channels != 3) throw ConfigError("ZcaWhitener expects 3-channel images");
    Image out(3, img.height, img.width);
    const size_t plane = img.plane_size();
    for (size_t p = 0; p < plane; ++p) {
        const double d0 = img.data[p] - mean_[0];
        const double d1 = img.data[plane + p] - mean_[1];
        const double d2 = img.data[2 * plane + p] - mean_[2];
        for (int i = 0; i < 3; ++i)
            out.data[i * plane + p] =
                static_cast<float>(w_[i * 3] * d0 + w_[i * 3 + 1] * d1 + w_[i * 3 + 2] * d2);
    }
    return out;
}

Image ZcaWhitener::apply_rescaled(const Image& img) const {
    Image white = apply(img);
    // whitened channels are roughly unit variance; recentre into [0,1]
    for (auto& v : white.data) v = std::clamp(0.5f + 0.15f * v, 0.0f, 1.0f);
    return white;
}

Image augment(const Image& img, AugmentKind kind, Rng& rng) {
    switch (kind) {
        case AugmentKind::rotate:
            return rotate_image(img, rng.uniform(-15.0, 15.0));
        case AugmentKind::width_shift: {
            const int m = max_shift_pixels(img.width);
            return shift_image(img, static_cast<int>(rng.uniform_int(-m, m)), 0);
        }
        case AugmentKind::height_shift: {
            const int m = max_shift_pixels(img.height);
            return shift_image(img, 0, static_cast<int>(rng.uniform_int(-m, m)));
        }
        case AugmentKind::zca:
            return ZcaWhitener::fit(img).apply_rescaled(img);
    }
    throw ConfigError("invalid augmentation kind value");
}

}  // namespace cellattn
