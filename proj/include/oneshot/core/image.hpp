#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "oneshot/core/error.hpp"

namespace oneshot {

/// Dense row-major 2-D grid. Pixel (x, y) has its center at integer coordinates.
template <typename T>
class Image {
public:
    using value_type = T;

    Image() = default;
    Image(int width, int height, T fill = T{})
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(std::max(width, 0)) * static_cast<std::size_t>(std::max(height, 0)), fill) {
        if (width < 0 || height < 0) throw ConfigError("image dimensions must be non-negative");
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    bool contains(int x, int y) const noexcept { return x >= 0 && y >= 0 && x < width_ && y < height_; }

    T& operator()(int x, int y) noexcept { return data_[index(x, y)]; }
    const T& operator()(int x, int y) const noexcept { return data_[index(x, y)]; }

    T* row(int y) noexcept { return data_.data() + index(0, y); }
    const T* row(int y) const noexcept { return data_.data() + index(0, y); }

    std::span<T> pixels() noexcept { return data_; }
    std::span<const T> pixels() const noexcept { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    bool same_shape(const Image<U>& other) const noexcept {
        return width_ == other.width() && height_ == other.height();
    }

    friend bool operator==(const Image& a, const Image& b) {
        return a.width_ == b.width_ && a.height_ == b.height_ && a.data_ == b.data_;
    }

private:
    std::size_t index(int x, int y) const noexcept {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

using ImageU8 = Image<std::uint8_t>;
using ImageF = Image<float>;
using ImageD = Image<double>;
using ImageI32 = Image<std::int32_t>;

template <typename To, typename From>
Image<To> convert(const Image<From>& src) {
    Image<To> out(src.width(), src.height());
    auto in = src.pixels();
    auto dst = out.pixels();
    for (std::size_t i = 0; i < in.size(); ++i) dst[i] = static_cast<To>(in[i]);
    return out;
}

/// Round and clamp to the 8-bit range.
template <typename From>
ImageU8 quantize(const Image<From>& src) {
    ImageU8 out(src.width(), src.height());
    auto in = src.pixels();
    auto dst = out.pixels();
    for (std::size_t i = 0; i < in.size(); ++i) {
        const double v = std::round(static_cast<double>(in[i]));
        dst[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
    }
    return out;
}

/// Bilinear sample; samples outside the pixel-center hull return `outside`.
template <typename T>
double sample_bilinear(const Image<T>& img, double x, double y, double outside = 0.0) {
    if (!(x >= 0.0 && y >= 0.0 && x <= img.width() - 1 && y <= img.height() - 1)) return outside;
    const int x0 = std::min(static_cast<int>(x), img.width() - 1);
    const int y0 = std::min(static_cast<int>(y), img.height() - 1);
    const int x1 = std::min(x0 + 1, img.width() - 1);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double top = (1.0 - fx) * img(x0, y0) + fx * img(x1, y0);
    const double bot = (1.0 - fx) * img(x0, y1) + fx * img(x1, y1);
    return (1.0 - fy) * top + fy * bot;
}

// --- PGM (P5, 8-bit) -------------------------------------------------------

inline void write_pgm(const ImageU8& img, const std::string& path, const std::string& comment = "") {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os << "P5\n";
    if (!comment.empty()) os << "# " << comment << '\n';
    os << img.width() << ' ' << img.height() << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels().data()), static_cast<std::streamsize>(img.size()));
    if (!os) throw std::runtime_error("write failed: " + path);
}

namespace detail {
inline void skip_pnm_space(std::istream& is) {
    while (true) {
        int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
            is.get();
        } else {
            return;
        }
    }
}
}  // namespace detail

inline ImageU8 read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open image: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw FormatError(path + ": only binary PGM (P5) is supported");
    int w = 0, h = 0, maxval = 0;
    detail::skip_pnm_space(is);
    is >> w;
    detail::skip_pnm_space(is);
    is >> h;
    detail::skip_pnm_space(is);
    is >> maxval;
    is.get();
    if (!is || w <= 0 || h <= 0 || maxval != 255) throw FormatError(path + ": bad PGM header");
    ImageU8 img(w, h);
    is.read(reinterpret_cast<char*>(img.pixels().data()), static_cast<std::streamsize>(img.size()));
    if (!is) throw FormatError(path + ": truncated PGM data");
    return img;
}

}  // namespace oneshot
