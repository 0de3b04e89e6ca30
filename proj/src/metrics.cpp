#include "uvforge/metrics.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace uvforge {

double psnr(const Image& a, const Image& b, double max_value) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
    if (a.data.empty()) throw std::invalid_argument("psnr: empty image");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        sum += d * d;
    }
    const double mse = sum / static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_value * max_value / mse);
}

double psnr_masked(const Image& a, const Image& b, const std::vector<std::uint8_t>& mask,
                   double max_value) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr_masked: shape mismatch");
    if (mask.size() != static_cast<std::size_t>(a.width) * a.height)
        throw std::invalid_argument("psnr_masked: mask size mismatch");
    double sum = 0.0;
    std::size_t count = 0;
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            if (!mask[static_cast<std::size_t>(y) * a.width + x]) continue;
            for (int c = 0; c < a.channels; ++c) {
                const double d = a.at(y, x, c) - b.at(y, x, c);
                sum += d * d;
            }
            count += static_cast<std::size_t>(a.channels);
        }
    if (count == 0) throw std::invalid_argument("psnr_masked: mask selects no pixels");
    const double mse = sum / static_cast<double>(count);
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(max_value * max_value / mse);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWindow> gaussian_taps() {
    std::array<double, kWindow> taps{};
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
        const double d = i - (kWindow - 1) / 2.0;
        taps[static_cast<std::size_t>(i)] = std::exp(-0.5 * d * d / (kSigma * kSigma));
        sum += taps[static_cast<std::size_t>(i)];
    }
    for (auto& t : taps) t /= sum;
    return taps;
}

// Valid-mode separable Gaussian filter of one channel plane.
std::vector<double> filter_valid(const std::vector<double>& plane, int w, int h) {
    const auto taps = gaussian_taps();
    const int vw = w - kWindow + 1, vh = h - kWindow + 1;
    std::vector<double> rows(static_cast<std::size_t>(h) * vw);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < vw; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWindow; ++k)
                s += taps[static_cast<std::size_t>(k)] * plane[static_cast<std::size_t>(y) * w + x + k];
            rows[static_cast<std::size_t>(y) * vw + x] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(vh) * vw);
    for (int y = 0; y < vh; ++y)
        for (int x = 0; x < vw; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWindow; ++k)
                s += taps[static_cast<std::size_t>(k)] * rows[static_cast<std::size_t>(y + k) * vw + x];
            out[static_cast<std::size_t>(y) * vw + x] = s;
        }
    return out;
}

} // namespace

double ssim(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
    if (a.width < kWindow || a.height < kWindow)
        throw std::invalid_argument("ssim: image smaller than the filter window");

    const int w = a.width, h = a.height;
    const std::size_t plane_size = static_cast<std::size_t>(w) * h;
    std::vector<double> pa(plane_size), pb(plane_size), paa(plane_size), pbb(plane_size),
        pab(plane_size);

    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double va = a.at(y, x, c), vb = b.at(y, x, c);
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                pa[i] = va;
                pb[i] = vb;
                paa[i] = va * va;
                pbb[i] = vb * vb;
                pab[i] = va * vb;
            }
        const auto mu_a = filter_valid(pa, w, h);
        const auto mu_b = filter_valid(pb, w, h);
        const auto e_aa = filter_valid(paa, w, h);
        const auto e_bb = filter_valid(pbb, w, h);
        const auto e_ab = filter_valid(pab, w, h);

        double sum = 0.0;
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
            const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
            const double cov = e_ab[i] - mu_a[i] * mu_b[i];
            const double num = (2.0 * (mu_a[i] * mu_b[i]) + kC1) * (2.0 * cov + kC2);
            const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) *
                               (var_a + var_b + kC2);
            sum += num / den;
        }
        total += sum / static_cast<double>(mu_a.size());
    }
    return total / a.channels;
}

} // namespace uvforge
