#pragma once

// RGB images with values in [0,1], stored height x width x 3 row-major.
// File formats: 8-bit RGB PNG, and the raw "MDIM" container
// (magic, u32 H, u32 W, H*W*3 bytes).

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdrg {

struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<float> values;  // (y * width + x) * 3 + channel

    ImageTensor() = default;
    ImageTensor(int h, int w, float fill = 0.0f)
        : height(h), width(w), values(static_cast<std::size_t>(h) * w * 3, fill) {}

    float& at(int y, int x, int c) { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    bool valid() const {
        if (values.size() != static_cast<std::size_t>(height) * width * 3) return false;
        return std::all_of(values.begin(), values.end(),
                           [](float v) { return std::isfinite(v) && v >= 0.0f && v <= 1.0f; });
    }

    friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

inline double mean_squared_error(const ImageTensor& a, const ImageTensor& b) {
    if (a.height != b.height || a.width != b.width) {
        throw std::invalid_argument("mean_squared_error: image shapes differ");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const double d = static_cast<double>(a.values[i]) - b.values[i];
        acc += d * d;
    }
    return a.values.empty() ? 0.0 : acc / static_cast<double>(a.values.size());
}

inline std::vector<std::uint8_t> to_rgb8(const ImageTensor& img) {
    std::vector<std::uint8_t> bytes(img.values.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        const float v = std::clamp(img.values[i], 0.0f, 1.0f);
        bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
    return bytes;
}

inline ImageTensor from_rgb8(int h, int w, const std::uint8_t* bytes) {
    ImageTensor img(h, w);
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        img.values[i] = static_cast<float>(bytes[i]) / 255.0f;
    }
    return img;
}

inline std::vector<std::uint8_t> encode_png(const ImageTensor& img) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    const auto rgb = to_rgb8(img);
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, rgb.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png encode failed: ") + image.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, rgb.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png encode failed: ") + image.message);
    }
    out.resize(size);
    return out;
}

inline ImageTensor decode_png(const std::vector<std::uint8_t>& data) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, data.data(), data.size())) {
        throw std::runtime_error(std::string("png decode failed: ") + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png decode failed: ") + image.message);
    }
    return from_rgb8(static_cast<int>(image.height), static_cast<int>(image.width), rgb.data());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_png(const std::string& path, const ImageTensor& img) { write_file_bytes(path, encode_png(img)); }
inline ImageTensor read_png(const std::string& path) { return decode_png(read_file_bytes(path)); }

inline std::vector<std::uint8_t> encode_mdim(const ImageTensor& img) {
    std::vector<std::uint8_t> out = {'M', 'D', 'I', 'M'};
    auto put_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    };
    put_u32(static_cast<std::uint32_t>(img.height));
    put_u32(static_cast<std::uint32_t>(img.width));
    const auto rgb = to_rgb8(img);
    out.insert(out.end(), rgb.begin(), rgb.end());
    return out;
}

inline ImageTensor decode_mdim(const std::vector<std::uint8_t>& data) {
    if (data.size() < 12 || std::memcmp(data.data(), "MDIM", 4) != 0) {
        throw std::runtime_error("mdim: bad magic");
    }
    auto get_u32 = [&](std::size_t off) {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[off + i]) << (8 * i);
        return v;
    };
    const auto h = get_u32(4);
    const auto w = get_u32(8);
    if (data.size() != 12 + static_cast<std::size_t>(h) * w * 3) {
        throw std::runtime_error("mdim: payload size does not match header");
    }
    return from_rgb8(static_cast<int>(h), static_cast<int>(w), data.data() + 12);
}

/// Reads PNG or MDIM, chosen by magic bytes.
inline ImageTensor read_image(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), "MDIM", 4) == 0) {
        return decode_mdim(bytes);
    }
    return decode_png(bytes);
}

/// Block-averaged pixels as one row vector (HWC order), each cell the mean
/// over a (height/out_h) x (width/out_w) block.
inline std::vector<float> pool_image(const ImageTensor& img, int out_h, int out_w) {
    if (out_h <= 0 || out_w <= 0 || img.height % out_h != 0 || img.width % out_w != 0) {
        throw std::invalid_argument("pool_image: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                    " is not divisible into " + std::to_string(out_h) + "x" + std::to_string(out_w));
    }
    const int bh = img.height / out_h;
    const int bw = img.width / out_w;
    std::vector<float> out(static_cast<std::size_t>(out_h * out_w * 3), 0.0f);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                out[static_cast<std::size_t>(((y / bh) * out_w + x / bw) * 3 + c)] += img.at(y, x, c);
    const float inv = 1.0f / static_cast<float>(bh * bw);
    for (auto& v : out) v *= inv;
    return out;
}

}  // namespace mdrg
