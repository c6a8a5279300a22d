#pragma once

// Binary grid container shared by every stage that exchanges dense maps.
//
// Layout (little-endian):
//   bytes 0..7   magic "OSGRID1\n"
//   bytes 8..11  uint32 header length N
//   next N bytes UTF-8 JSON header: {"width", "height", "dtype", ...user keys}
//   payload      width*height samples, row-major, dtype in {"float32","int32","uint8"}

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "oneshot/core/error.hpp"
#include "oneshot/core/image.hpp"

namespace oneshot {

static_assert(std::endian::native == std::endian::little, "grid I/O assumes a little-endian host");

inline constexpr char kGridMagic[8] = {'O', 'S', 'G', 'R', 'I', 'D', '1', '\n'};

template <typename T>
constexpr const char* grid_dtype() {
    if constexpr (std::is_same_v<T, float>) return "float32";
    else if constexpr (std::is_same_v<T, std::int32_t>) return "int32";
    else if constexpr (std::is_same_v<T, std::uint8_t>) return "uint8";
    else static_assert(sizeof(T) == 0, "unsupported grid dtype");
}

template <typename T>
void write_grid(const std::string& path, const Image<T>& img, const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header = meta.is_object() ? meta : nlohmann::json::object();
    header["width"] = img.width();
    header["height"] = img.height();
    header["dtype"] = grid_dtype<T>();
    const std::string text = header.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kGridMagic, sizeof(kGridMagic));
    const std::uint32_t n = static_cast<std::uint32_t>(text.size());
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    os.write(reinterpret_cast<const char*>(img.pixels().data()), static_cast<std::streamsize>(img.size() * sizeof(T)));
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline nlohmann::json read_grid_header(std::istream& is, const std::string& path) {
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kGridMagic, sizeof(magic)) != 0) throw FormatError(path + ": not a grid file (bad magic)");
    std::uint32_t n = 0;
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (!is || n > (1u << 24)) throw FormatError(path + ": bad header length");
    std::string text(n, '\0');
    is.read(text.data(), n);
    if (!is) throw FormatError(path + ": truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": header is not valid JSON (" + e.what() + ")");
    }
    if (!header.is_object() || !header.contains("width") || !header.contains("height") || !header.contains("dtype"))
        throw FormatError(path + ": header lacks width/height/dtype");
    return header;
}

template <typename T>
struct GridFile {
    Image<T> image;
    nlohmann::json header;
};

template <typename T>
GridFile<T> read_grid(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open grid: " + path);
    auto header = read_grid_header(is, path);
    if (header["dtype"] != grid_dtype<T>())
        throw FormatError(path + ": expected dtype " + grid_dtype<T>() + ", found " + header["dtype"].dump());
    const int w = header["width"].get<int>();
    const int h = header["height"].get<int>();
    if (w < 0 || h < 0) throw FormatError(path + ": negative dimensions");
    Image<T> img(w, h);
    is.read(reinterpret_cast<char*>(img.pixels().data()), static_cast<std::streamsize>(img.size() * sizeof(T)));
    if (!is) throw FormatError(path + ": truncated payload");
    return {std::move(img), std::move(header)};
}

}  // namespace oneshot
