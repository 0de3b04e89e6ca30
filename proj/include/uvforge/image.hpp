#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace uvforge {

/// Dense row-major image, interleaved channels, values nominally in [0, 1].
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          data(static_cast<std::size_t>(w) * h * c, fill) {}

    double& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

/// Bilinear sample of all channels at continuous (x, y); integer coordinates
/// address pixel centers. Caller guarantees 0 <= x <= w-1, 0 <= y <= h-1.
void bilinear_sample(const Image& img, double x, double y, double* out);

/// Derivative of the bilinear interpolant with respect to x and y for each
/// channel. Piecewise constant across pixel cell boundaries in the derivative
/// direction; the cell containing (x, y) is used.
void bilinear_gradient(const Image& img, double x, double y, double* dx, double* dy);

/// Nearest-neighbour aware bilinear resize to (new_w, new_h).
Image resize_bilinear(const Image& img, int new_w, int new_h);

/// 8-bit quantization used by all raster file output: round half up, clamped.
inline std::uint8_t quantize8(double v) {
    double scaled = v * 255.0 + 0.5;
    if (scaled < 0.0) scaled = 0.0;
    if (scaled > 255.0) scaled = 255.0;
    return static_cast<std::uint8_t>(scaled);
}

// Raster formats. 3-channel images as binary PPM (P6), single-channel as
// binary PGM (P5), both 8-bit with round-half-up quantization.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray, int width, int height);
std::vector<std::uint8_t> read_pgm(const std::string& path, int* width, int* height);

// Flat little-endian float64 blocks, for exact round trips.
void write_f64(const std::string& path, const double* data, std::size_t count);
std::vector<double> read_f64(const std::string& path);

} // namespace uvforge
