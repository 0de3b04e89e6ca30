#pragma once

#include "uvforge/image.hpp"

#include <cstdint>
#include <vector>

namespace uvforge {

/// 10 * log10(max^2 / MSE) over all elements; +inf when the images are equal.
double psnr(const Image& a, const Image& b, double max_value = 1.0);

/// PSNR restricted to pixels with a nonzero mask entry (all channels of each
/// such pixel count). The mask is row-major width * height; throws when it
/// selects nothing.
double psnr_masked(const Image& a, const Image& b, const std::vector<std::uint8_t>& mask,
                   double max_value = 1.0);

/// Mean local structural similarity: 11x11 Gaussian window, sigma 1.5,
/// C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 1, valid windows only,
/// averaged over channels. Throws if either dimension is under 11.
double ssim(const Image& a, const Image& b);

} // namespace uvforge
