#include "doctest.h"

#include "uvforge/metrics.hpp"
#include "uvforge/rng.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

using namespace uvforge;

namespace {

Image random_image(int w, int h, int c, std::uint64_t seed) {
    Image im(w, h, c);
    Rng rng(seed);
    for (auto& v : im.data)
        v = rng.uniform();
    return im;
}

double psnr_oracle(const Image& a, const Image& b, double max_value) {
    long double sum = 0.0L;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const long double d = static_cast<long double>(a.data[i]) - b.data[i];
        sum += d * d;
    }
    const long double mse = sum / static_cast<long double>(a.data.size());
    return static_cast<double>(10.0L * std::log10(static_cast<long double>(max_value) * max_value / mse));
}

// Direct 2D-window SSIM: explicit nested loops with a normalized 2D Gaussian,
// no separable shortcut, no shared code with the library path.
double ssim_oracle(const Image& a, const Image& b) {
    const int win = 11;
    const double sigma = 1.5;
    double w2[11][11];
    double wsum = 0.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            const double di = i - 5.0, dj = j - 5.0;
            w2[i][j] = std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
            wsum += w2[i][j];
        }
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j)
            w2[i][j] /= wsum;

    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        double sum = 0.0;
        int count = 0;
        for (int y = 0; y + win <= a.height; ++y)
            for (int x = 0; x + win <= a.width; ++x) {
                double ma = 0.0, mb = 0.0, maa = 0.0, mbb = 0.0, mab = 0.0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double va = a.at(y + i, x + j, c);
                        const double vb = b.at(y + i, x + j, c);
                        ma += w2[i][j] * va;
                        mb += w2[i][j] * vb;
                        maa += w2[i][j] * va * va;
                        mbb += w2[i][j] * vb * vb;
                        mab += w2[i][j] * va * vb;
                    }
                const double va_ = maa - ma * ma;
                const double vb_ = mbb - mb * mb;
                const double cov = mab - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va_ + vb_ + c2));
                ++count;
            }
        total += sum / count;
    }
    return total / a.channels;
}

} // namespace

TEST_CASE("psnr hand-checked values") {
    Image a(8, 8, 3), b(8, 8, 3);
    for (auto& v : a.data) v = 0.75;
    for (auto& v : b.data) v = 0.25;
    // MSE 0.25 at peak 1 gives 10*log10(4).
    CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-12));
    CHECK(psnr(a, b) == doctest::Approx(6.0205999132796239).epsilon(1e-12));

    for (auto& v : b.data) v = 1.75;
    CHECK(psnr(a, b) == doctest::Approx(0.0).epsilon(1e-12)); // MSE exactly 1

    CHECK(psnr(a, a) == std::numeric_limits<double>::infinity());

    Image c(4, 4, 3);
    CHECK_THROWS_AS(psnr(a, c), std::invalid_argument);

    // Doubling the peak with fixed error adds 20*log10(2) dB.
    for (auto& v : b.data) v = 0.25;
    CHECK(psnr(a, b, 2.0) == doctest::Approx(psnr(a, b, 1.0) + 20.0 * std::log10(2.0)).epsilon(1e-12));
}

TEST_CASE("psnr matches the direct-formula oracle on random pairs") {
    for (std::uint64_t s = 0; s < 100; ++s) {
        const Image a = random_image(17, 13, 3, 1000 + s);
        const Image b = random_image(17, 13, 3, 2000 + s);
        const double got = psnr(a, b);
        const double want = psnr_oracle(a, b, 1.0);
        CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("psnr_masked restricts the comparison") {
    Image a(6, 4, 3), b(6, 4, 3);
    Rng rng(7);
    for (auto& v : a.data) v = rng.uniform();
    b = a;
    // Corrupt two pixels; masking them out restores equality.
    b.at(1, 2, 0) += 0.5;
    b.at(3, 5, 1) -= 0.25;
    std::vector<std::uint8_t> all(6 * 4, 1);
    CHECK(psnr_masked(a, b, all) == doctest::Approx(psnr(a, b)).epsilon(1e-12));

    std::vector<std::uint8_t> mask = all;
    mask[1 * 6 + 2] = 0;
    mask[3 * 6 + 5] = 0;
    CHECK(psnr_masked(a, b, mask) == std::numeric_limits<double>::infinity());

    // Only the corrupted pixels: MSE = (0.5^2 + 0.25^2) / 6.
    std::vector<std::uint8_t> only(6 * 4, 0);
    only[1 * 6 + 2] = 1;
    only[3 * 6 + 5] = 1;
    const double mse = (0.25 + 0.0625) / 6.0;
    CHECK(psnr_masked(a, b, only) == doctest::Approx(10.0 * std::log10(1.0 / mse)).epsilon(1e-12));

    std::vector<std::uint8_t> none(6 * 4, 0);
    CHECK_THROWS_AS(psnr_masked(a, b, none), std::invalid_argument);
    std::vector<std::uint8_t> wrong(5, 1);
    CHECK_THROWS_AS(psnr_masked(a, b, wrong), std::invalid_argument);
}

TEST_CASE("ssim of an image with itself is exactly one") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const Image a = random_image(24, 16, 3, 300 + s);
        CHECK(ssim(a, a) == 1.0);
    }
}

TEST_CASE("ssim of flat black versus flat white") {
    Image black(16, 16, 1), white(16, 16, 1);
    for (auto& v : white.data) v = 1.0;
    // Zero variance and zero mean product leave C1 / (1 + C1).
    const double want = 1e-4 / (1.0 + 1e-4);
    CHECK(ssim(black, white) == doctest::Approx(want).epsilon(1e-8));
}

TEST_CASE("ssim matches the direct 2D-window oracle") {
    for (std::uint64_t s = 0; s < 12; ++s) {
        const Image a = random_image(21, 15, 3, 500 + s);
        const Image b = random_image(21, 15, 3, 600 + s);
        CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-6));
    }
    // Structured content, not just noise.
    Image grad(32, 32, 1), shifted(32, 32, 1);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            grad.at(y, x, 0) = (x + y) / 62.0;
            shifted.at(y, x, 0) = std::min(1.0, (x + y) / 62.0 + 0.1);
        }
    CHECK(ssim(grad, shifted) == doctest::Approx(ssim_oracle(grad, shifted)).epsilon(1e-6));
    CHECK(ssim(grad, shifted) > 0.5);
    CHECK(ssim(grad, shifted) < 1.0);
}

TEST_CASE("ssim is symmetric and bounded") {
    const Image a = random_image(20, 20, 3, 42);
    const Image b = random_image(20, 20, 3, 43);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(ssim(a, b) <= 1.0);
    CHECK(ssim(a, b) >= -1.0);
}

TEST_CASE("ssim rejects images smaller than the window") {
    Image small(10, 32, 1), ok(11, 32, 1);
    CHECK_THROWS_AS(ssim(small, small), std::invalid_argument);
    CHECK(ssim(ok, ok) == 1.0);
    Image other(32, 11, 1);
    CHECK_THROWS_AS(ssim(ok, other), std::invalid_argument);
}
