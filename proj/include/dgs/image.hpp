#pragma once

#include "dgs/math.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgs {

/// Dense row-major H x W x C scalar image. C is 3 for color maps and 1 for
/// transmittance / single-channel maps.
template <typename T>
struct Image {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<T> data;

    Image() = default;
    Image(int w, int h, int c, T fill = T(0))
        : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

    T& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    const T& at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    Vec3<T> rgb(int y, int x) const {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * channels;
        return {data[i], data[i + 1], data[i + 2]};
    }
    void set_rgb(int y, int x, const Vec3<T>& v) {
        const std::size_t i = (static_cast<std::size_t>(y) * width + x) * channels;
        data[i] = v[0];
        data[i + 1] = v[1];
        data[i + 2] = v[2];
    }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }

    template <typename U>
    Image<U> cast() const {
        Image<U> out(width, height, channels);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::uint8_t to_byte(double v) {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

/// Write a 3-channel [0,1] image as binary PPM (P6). Values are clamped and
/// quantized to 8 bits.
template <typename T>
void write_ppm(const Image<T>& img, const std::string& path) {
    if (img.channels != 3) throw std::invalid_argument("write_ppm: need 3 channels");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[x * 3 + c] = to_byte(static_cast<double>(img.at(y, x, c)));
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

/// Read an 8-bit PPM (P6 or P3) into a [0,1] image.
template <typename T>
Image<T> read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6" && magic != "P3") throw std::runtime_error("read_ppm: unsupported magic " + magic);
    auto next_token = [&f]() -> long {
        // Skip whitespace and '#' comment lines between header tokens.
        for (;;) {
            int ch = f.peek();
            if (ch == '#') {
                std::string line;
                std::getline(f, line);
            } else if (std::isspace(ch)) {
                f.get();
            } else {
                break;
            }
        }
        long v = -1;
        f >> v;
        return v;
    };
    const long w = next_token(), h = next_token(), maxval = next_token();
    if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("read_ppm: bad header in " + path);
    Image<T> img(static_cast<int>(w), static_cast<int>(h), 3);
    if (magic == "P6") {
        f.get();  // single whitespace after maxval
        std::vector<std::uint8_t> buf(img.size());
        f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!f) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
        for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<T>(buf[i]) / T(255);
    } else {
        for (std::size_t i = 0; i < img.size(); ++i) {
            long v = -1;
            f >> v;
            if (!f || v < 0 || v > 255) throw std::runtime_error("read_ppm: bad P3 sample in " + path);
            img.data[i] = static_cast<T>(v) / T(255);
        }
    }
    return img;
}

}  // namespace dgs
