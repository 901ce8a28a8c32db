#pragma once

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "nfaseg/error.hpp"
#include "nfaseg/tensor.hpp"

namespace nfaseg {

/// Decoded grayscale raster before normalization: integer samples in
/// [0, maxval], row-major.
struct GrayImage {
    long h = 0;
    long w = 0;
    long maxval = 255;
    std::vector<std::uint16_t> pixels;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw_io("cannot open file: " + path);
    return f;
}

// PGM "plain" whitespace: blanks, newlines, and #-comments to end of line.
inline int pgm_token(std::FILE* f, const std::string& path) {
    int c = std::fgetc(f);
    while (c == '#' || std::isspace(c)) {
        if (c == '#')
            while (c != '\n' && c != EOF) c = std::fgetc(f);
        c = std::fgetc(f);
    }
    long value = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
        value = value * 10 + (c - '0');
        if (value > 1 << 30) throw_format("PGM header value out of range in " + path);
        any = true;
        c = std::fgetc(f);
    }
    if (!any) throw_format("malformed PGM header in " + path);
    return static_cast<int>(value);
}

inline GrayImage read_pgm(const std::string& path) {
    auto f = open_file(path, "rb");
    char magic[2];
    if (std::fread(magic, 1, 2, f.get()) != 2 || magic[0] != 'P' || magic[1] != '5')
        throw_format("not a binary PGM (P5) file: " + path);
    GrayImage img;
    img.w = pgm_token(f.get(), path);
    img.h = pgm_token(f.get(), path);
    img.maxval = pgm_token(f.get(), path);
    if (img.w < 1 || img.h < 1) throw_format("PGM has empty dimensions: " + path);
    if (img.maxval < 1 || img.maxval > 65535)
        throw_format("PGM maxval out of range: " + path);
    const size_t n = static_cast<size_t>(img.w) * static_cast<size_t>(img.h);
    img.pixels.resize(n);
    if (img.maxval <= 255) {
        std::vector<unsigned char> raw(n);
        if (std::fread(raw.data(), 1, n, f.get()) != n)
            throw_format("PGM pixel data truncated: " + path);
        for (size_t i = 0; i < n; ++i) img.pixels[i] = raw[i];
    } else {
        std::vector<unsigned char> raw(2 * n);
        if (std::fread(raw.data(), 1, 2 * n, f.get()) != 2 * n)
            throw_format("PGM pixel data truncated: " + path);
        for (size_t i = 0; i < n; ++i)  // 16-bit PGM samples are big-endian
            img.pixels[i] =
                static_cast<std::uint16_t>(raw[2 * i] << 8 | raw[2 * i + 1]);
    }
    return img;
}

inline void write_pgm(const std::string& path, const GrayImage& img) {
    auto f = open_file(path, "wb");
    std::fprintf(f.get(), "P5\n%ld %ld\n%ld\n", img.w, img.h, img.maxval);
    const size_t n = img.pixels.size();
    if (img.maxval <= 255) {
        std::vector<unsigned char> raw(n);
        for (size_t i = 0; i < n; ++i) raw[i] = static_cast<unsigned char>(img.pixels[i]);
        if (std::fwrite(raw.data(), 1, n, f.get()) != n)
            throw_io("failed writing PGM data: " + path);
    } else {
        std::vector<unsigned char> raw(2 * n);
        for (size_t i = 0; i < n; ++i) {
            raw[2 * i] = static_cast<unsigned char>(img.pixels[i] >> 8);
            raw[2 * i + 1] = static_cast<unsigned char>(img.pixels[i] & 0xff);
        }
        if (std::fwrite(raw.data(), 1, 2 * n, f.get()) != 2 * n)
            throw_io("failed writing PGM data: " + path);
    }
}

inline GrayImage read_png(const std::string& path) {
    auto f = open_file(path, "rb");
    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw_numerical("libpng allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw_numerical("libpng allocation failed");
    }
    std::vector<png_bytep> rows;
    GrayImage img;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw_format("PNG decode failed: " + path);
    }
    png_init_io(png, f.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw_format("PNG must be 8- or 16-bit grayscale: " + path);
    }
    img.w = static_cast<long>(png_get_image_width(png, info));
    img.h = static_cast<long>(png_get_image_height(png, info));
    img.maxval = depth == 8 ? 255 : 65535;
    const size_t stride = png_get_rowbytes(png, info);
    std::vector<unsigned char> raw(stride * static_cast<size_t>(img.h));
    rows.resize(img.h);
    for (long y = 0; y < img.h; ++y) rows[y] = raw.data() + stride * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    img.pixels.resize(static_cast<size_t>(img.w) * img.h);
    for (long y = 0; y < img.h; ++y) {
        const unsigned char* row = raw.data() + stride * y;
        for (long x = 0; x < img.w; ++x)
            img.pixels[y * img.w + x] =
                depth == 8 ? row[x]
                           : static_cast<std::uint16_t>(row[2 * x] << 8 | row[2 * x + 1]);
    }
    return img;
}

inline void write_png(const std::string& path, const GrayImage& img) {
    if (img.maxval != 255 && img.maxval != 65535)
        throw_parameter("PNG output supports maxval 255 or 65535 only");
    auto f = open_file(path, "wb");
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw_numerical("libpng allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw_numerical("libpng allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw_io("PNG encode failed: " + path);
    }
    png_init_io(png, f.get());
    const int depth = img.maxval == 255 ? 8 : 16;
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.w),
                 static_cast<png_uint_32>(img.h), depth, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(static_cast<size_t>(img.w) * (depth / 8));
    for (long y = 0; y < img.h; ++y) {
        for (long x = 0; x < img.w; ++x) {
            const std::uint16_t v = img.pixels[y * img.w + x];
            if (depth == 8) {
                row[x] = static_cast<unsigned char>(v);
            } else {
                row[2 * x] = static_cast<unsigned char>(v >> 8);
                row[2 * x + 1] = static_cast<unsigned char>(v & 0xff);
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline bool has_suffix(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

/// Reads a PGM (P5) or grayscale PNG, dispatching on the file's magic bytes.
inline GrayImage read_gray(const std::string& path) {
    auto f = detail::open_file(path, "rb");
    unsigned char magic[2] = {0, 0};
    const size_t got = std::fread(magic, 1, 2, f.get());
    f.reset();
    if (got == 2 && magic[0] == 'P' && magic[1] == '5') return detail::read_pgm(path);
    if (got == 2 && magic[0] == 0x89 && magic[1] == 'P') return detail::read_png(path);
    throw_format("unrecognized image format (expected PGM P5 or PNG): " + path);
}

/// Writes by extension: .pgm or .png.
inline void write_gray(const std::string& path, const GrayImage& img) {
    if (detail::has_suffix(path, ".pgm"))
        detail::write_pgm(path, img);
    else if (detail::has_suffix(path, ".png"))
        detail::write_png(path, img);
    else
        throw_parameter("image output path must end in .pgm or .png: " + path);
}

/// Image as (1,1,h,w) tensor with samples normalized to [0,1] by maxval.
inline TensorPtr load_image(const std::string& path) {
    const GrayImage img = read_gray(path);
    auto t = Tensor::create(Shape{1, 1, img.h, img.w}, 0.0, false);
    const double scale = 1.0 / static_cast<double>(img.maxval);
    for (size_t i = 0; i < img.pixels.size(); ++i)
        t->data[i] = static_cast<double>(img.pixels[i]) * scale;
    return t;
}

/// Mask as (1,1,h,w) tensor with values in {0,1}; any sample that is neither
/// 0 nor maxval is a format error naming the file and the offending value.
inline TensorPtr load_mask(const std::string& path) {
    const GrayImage img = read_gray(path);
    auto t = Tensor::create(Shape{1, 1, img.h, img.w}, 0.0, false);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        const long v = img.pixels[i];
        if (v != 0 && v != img.maxval)
            throw_format("mask is not binary: " + path + " has value " +
                         std::to_string(v) + " at pixel " + std::to_string(i) +
                         " (expected 0 or " + std::to_string(img.maxval) + ")");
        t->data[i] = v == 0 ? 0.0 : 1.0;
    }
    return t;
}

/// Score map in [0,1] quantized to a 16-bit grayscale image (x65535).
inline void save_scores(const std::string& path, const TensorPtr& scores) {
    const auto [n, c, h, w] = scores->shape;
    if (n != 1 || c != 1) throw_parameter("score image must have shape (1,1,h,w)");
    GrayImage img;
    img.h = h;
    img.w = w;
    img.maxval = 65535;
    img.pixels.resize(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, scores->data[i]));
        img.pixels[i] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    }
    write_gray(path, img);
}

/// Binary mask written as an 8-bit image with values {0, 255}.
inline void save_mask(const std::string& path, const TensorPtr& mask) {
    const auto [n, c, h, w] = mask->shape;
    if (n != 1 || c != 1) throw_parameter("mask image must have shape (1,1,h,w)");
    GrayImage img;
    img.h = h;
    img.w = w;
    img.maxval = 255;
    img.pixels.resize(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        const double v = mask->data[i];
        if (v != 0.0 && v != 1.0)
            throw_parameter("mask tensor is not binary at element " + std::to_string(i));
        img.pixels[i] = v == 0.0 ? 0 : 255;
    }
    write_gray(path, img);
}

/// Raw map dump for unquantized values (significance can be far outside
/// [0,1]): u32 height, u32 width, then h*w float32 samples, all row-major
/// little-endian.
inline void write_raw_map(const std::string& path, const TensorPtr& map) {
    const auto [n, c, h, w] = map->shape;
    if (n != 1 || c != 1) throw_parameter("raw map must have shape (1,1,h,w)");
    std::string buf;
    buf.reserve(8 + map->data.size() * 4);
    auto put_u32 = [&buf](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    put_u32(static_cast<std::uint32_t>(h));
    put_u32(static_cast<std::uint32_t>(w));
    for (double v : map->data) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(bits);
    }
    detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw_io("cannot open file for writing: " + path);
    if (std::fwrite(buf.data(), 1, buf.size(), fp.get()) != buf.size())
        throw_io("short write: " + path);
}

inline TensorPtr read_raw_map(const std::string& path) {
    detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw_io("cannot open file: " + path);
    auto get_u32 = [&fp, &path]() {
        unsigned char b[4];
        if (std::fread(b, 1, 4, fp.get()) != 4) throw_format("raw map truncated: " + path);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
    };
    const long h = static_cast<long>(get_u32());
    const long w = static_cast<long>(get_u32());
    if (h < 1 || w < 1 || h > 1 << 20 || w > 1 << 20)
        throw_format("raw map has implausible dims " + std::to_string(h) + "x" +
                     std::to_string(w) + ": " + path);
    auto t = Tensor::create(Shape{1, 1, h, w}, 0.0, false);
    for (auto& v : t->data) {
        const std::uint32_t bits = get_u32();
        float f;
        std::memcpy(&f, &bits, 4);
        v = static_cast<double>(f);
    }
    return t;
}

}  // namespace nfaseg
