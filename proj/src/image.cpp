#include "uvforge/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace uvforge {

void bilinear_sample(const Image& img, double x, double y, double* out) {
    const int w = img.width, h = img.height, cn = img.channels;
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    x0 = std::clamp(x0, 0, w - 2 >= 0 ? w - 2 : 0);
    y0 = std::clamp(y0, 0, h - 2 >= 0 ? h - 2 : 0);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = std::clamp(x - x0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    for (int c = 0; c < cn; ++c) {
        const double v00 = img.at(y0, x0, c), v01 = img.at(y0, x1, c);
        const double v10 = img.at(y1, x0, c), v11 = img.at(y1, x1, c);
        out[c] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
    }
}

void bilinear_gradient(const Image& img, double x, double y, double* dx, double* dy) {
    const int w = img.width, h = img.height, cn = img.channels;
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    x0 = std::clamp(x0, 0, w - 2 >= 0 ? w - 2 : 0);
    y0 = std::clamp(y0, 0, h - 2 >= 0 ? h - 2 : 0);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = std::clamp(x - x0, 0.0, 1.0);
    const double fy = std::clamp(y - y0, 0.0, 1.0);
    for (int c = 0; c < cn; ++c) {
        const double v00 = img.at(y0, x0, c), v01 = img.at(y0, x1, c);
        const double v10 = img.at(y1, x0, c), v11 = img.at(y1, x1, c);
        dx[c] = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
        dy[c] = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
    }
}

Image resize_bilinear(const Image& img, int new_w, int new_h) {
    if (new_w <= 0 || new_h <= 0) throw std::invalid_argument("resize_bilinear: bad size");
    Image out(new_w, new_h, img.channels);
    std::vector<double> px(img.channels);
    const double sx = new_w > 1 ? double(img.width - 1) / (new_w - 1) : 0.0;
    const double sy = new_h > 1 ? double(img.height - 1) / (new_h - 1) : 0.0;
    for (int y = 0; y < new_h; ++y) {
        for (int x = 0; x < new_w; ++x) {
            bilinear_sample(img, x * sx, y * sy, px.data());
            for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = px[c];
        }
    }
    return out;
}

void write_ppm(const std::string& path, const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("write_ppm: image must have 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + c] = quantize8(img.at(y, x, c));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw std::runtime_error("write_ppm: short write to " + path);
}

namespace {

int read_pnm_int(std::istream& in) {
    // Skips whitespace and '#' comments, per the PNM grammar.
    int c = in.get();
    while (c == '#' || std::isspace(c)) {
        if (c == '#')
            while (c != '\n' && c != EOF) c = in.get();
        c = in.get();
    }
    int value = 0;
    bool any = false;
    while (std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw std::runtime_error("malformed PNM header");
    return value;
}

} // namespace

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    char magic[2];
    f.read(magic, 2);
    if (!f || magic[0] != 'P' || magic[1] != '6') throw std::runtime_error("read_ppm: not a P6 file: " + path);
    const int w = read_pnm_int(f);
    const int h = read_pnm_int(f);
    const int maxval = read_pnm_int(f);
    if (maxval != 255) throw std::runtime_error("read_ppm: only maxval 255 supported");
    Image img(w, h, 3);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        if (!f) throw std::runtime_error("read_ppm: truncated file: " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
    }
    return img;
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& gray, int width, int height) {
    if (gray.size() != static_cast<std::size_t>(width) * height)
        throw std::invalid_argument("write_pgm: size mismatch");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
    f << "P5\n" << width << " " << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    if (!f) throw std::runtime_error("write_pgm: short write to " + path);
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int* width, int* height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_pgm: cannot open " + path);
    char magic[2];
    f.read(magic, 2);
    if (!f || magic[0] != 'P' || magic[1] != '5') throw std::runtime_error("read_pgm: not a P5 file: " + path);
    const int w = read_pnm_int(f);
    const int h = read_pnm_int(f);
    const int maxval = read_pnm_int(f);
    if (maxval != 255) throw std::runtime_error("read_pgm: only maxval 255 supported");
    std::vector<std::uint8_t> gray(static_cast<std::size_t>(w) * h);
    f.read(reinterpret_cast<char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    if (!f) throw std::runtime_error("read_pgm: truncated file: " + path);
    if (width) *width = w;
    if (height) *height = h;
    return gray;
}

void write_f64(const std::string& path, const double* data, std::size_t count) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_f64: cannot open " + path);
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
    if (!f) throw std::runtime_error("write_f64: short write to " + path);
}

std::vector<double> read_f64(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw std::runtime_error("read_f64: cannot open " + path);
    const auto bytes = static_cast<std::size_t>(f.tellg());
    if (bytes % sizeof(double) != 0) throw std::runtime_error("read_f64: size not a multiple of 8: " + path);
    f.seekg(0);
    std::vector<double> out(bytes / sizeof(double));
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw std::runtime_error("read_f64: truncated file: " + path);
    return out;
}

} // namespace uvforge
