#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "refonce/tensor.hpp"

namespace refonce {

/// 8-bit raster, interleaved channels, row-major.
struct Image8 {
    std::size_t channels = 0;  // 1 (P5) or 3 (P6)
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> bytes;
};

inline std::vector<std::uint8_t> encode_pnm(const Image8& img) {
    if (img.channels != 1 && img.channels != 3) throw ValueError("PNM images have 1 or 3 channels");
    if (img.bytes.size() != img.channels * img.height * img.width) throw ShapeError("PNM byte count mismatch");
    const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) + " " +
                               std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.bytes.begin(), img.bytes.end());
    return out;
}

inline Image8 decode_pnm(const std::vector<std::uint8_t>& data, const std::string& what = "PNM data") {
    std::size_t pos = 0;
    auto fail = [&](const std::string& msg) -> Error { return Error(what + ": " + msg); };
    if (data.size() < 2 || data[0] != 'P') throw fail("bad magic, expected P5 or P6");
    if (data[1] == '2' || data[1] == '3') throw fail("ASCII PNM (P2/P3) is not supported; use binary P5/P6");
    if (data[1] != '5' && data[1] != '6') throw fail("bad magic, expected P5 or P6");
    Image8 img;
    img.channels = data[1] == '6' ? 3 : 1;
    pos = 2;
    auto next_int = [&]() -> std::size_t {
        for (;;) {
            while (pos < data.size() && std::isspace(data[pos])) ++pos;
            if (pos < data.size() && data[pos] == '#') {
                while (pos < data.size() && data[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        if (pos >= data.size() || !std::isdigit(data[pos])) throw fail("malformed header");
        std::size_t v = 0;
        while (pos < data.size() && std::isdigit(data[pos])) {
            v = v * 10 + static_cast<std::size_t>(data[pos] - '0');
            if (v > (1u << 24)) throw fail("header value too large");
            ++pos;
        }
        return v;
    };
    img.width = next_int();
    img.height = next_int();
    const std::size_t maxval = next_int();
    if (maxval != 255) throw fail("maxval " + std::to_string(maxval) + " unsupported, expected 255");
    if (img.width == 0 || img.height == 0) throw fail("zero-sized image");
    if (pos >= data.size() || !std::isspace(data[pos])) throw fail("malformed header");
    ++pos;
    const std::size_t n = img.channels * img.width * img.height;
    if (data.size() - pos < n) throw fail("truncated pixel data");
    if (data.size() - pos > n) throw fail("trailing bytes after pixel data");
    img.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(pos), data.end());
    return img;
}

inline void write_pnm(const std::string& path, const Image8& img) {
    const auto bytes = encode_pnm(img);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("failed writing '" + path + "'");
}

inline Image8 read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_pnm(bytes, path);
}

/// C x H x W tensor with values byte / 255.
template <typename T = float>
TensorT<T> image_to_tensor(const Image8& img) {
    const std::size_t c = img.channels, hw = img.height * img.width;
    std::vector<T> v(c * hw);
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) v[ch * hw + p] = static_cast<T>(img.bytes[p * c + ch]) / T(255);
    return TensorT<T>::from({c, img.height, img.width}, std::move(v));
}

/// Quantizes a C x H x W tensor in [0, 1] (clamped) to bytes.
template <typename T>
Image8 tensor_to_image(const TensorT<T>& t) {
    if (t.rank() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) throw ShapeError("expected a 1xHxW or 3xHxW tensor, got " + shape_str(t.shape()));
    Image8 img;
    img.channels = t.dim(0);
    img.height = t.dim(1);
    img.width = t.dim(2);
    const std::size_t hw = img.height * img.width;
    img.bytes.resize(img.channels * hw);
    for (std::size_t ch = 0; ch < img.channels; ++ch) {
        for (std::size_t p = 0; p < hw; ++p) {
            double v = std::clamp(static_cast<double>(t[ch * hw + p]), 0.0, 1.0);
            img.bytes[p * img.channels + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    return img;
}

}  // namespace refonce
