#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <png.h>

#include "tensor.hpp"

namespace latent_relight {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// H x W x 3 interleaved RGB, nominally in [0,1]. Buffers produced by noise
// injection may leave the range and carry noisy = true.
struct ImageBuffer {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;
    bool noisy = false;

    ImageBuffer() = default;
    ImageBuffer(int h, int w, float fill = 0.0f)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {
        if (h < 0 || w < 0) throw std::invalid_argument("negative image size");
    }

    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::size_t size() const { return pixels.size(); }
    bool same_size(const ImageBuffer& o) const { return height == o.height && width == o.width; }

    bool all_finite() const {
        return std::all_of(pixels.begin(), pixels.end(), [](float v) { return std::isfinite(v); });
    }
    bool in_unit_range() const {
        return std::all_of(pixels.begin(), pixels.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
    }
};

inline void require_same_size(const ImageBuffer& a, const ImageBuffer& b, const char* what) {
    if (!a.same_size(b))
        throw std::invalid_argument(std::string(what) + ": image size mismatch " + std::to_string(a.height) + "x" +
                                    std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                    std::to_string(b.width));
}

inline ImageBuffer clamp01(ImageBuffer img) {
    for (float& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
    img.noisy = false;
    return img;
}

// Bilinear resampling with half-pixel centers.
inline ImageBuffer resize_bilinear(const ImageBuffer& src, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize target must be at least 1x1");
    if (src.height < 1 || src.width < 1) throw std::invalid_argument("cannot resize an empty image");
    ImageBuffer dst(out_h, out_w);
    dst.noisy = src.noisy;
    if (out_h == src.height && out_w == src.width) {
        dst.pixels = src.pixels;
        return dst;
    }
    const double sy = static_cast<double>(src.height) / out_h;
    const double sx = static_cast<double>(src.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const float wx = static_cast<float>(fx - x0);
            for (int c = 0; c < 3; ++c) {
                const float top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
                const float bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
                dst.at(y, x, c) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return dst;
}

inline ImageBuffer crop(const ImageBuffer& src, int top, int left, int h, int w) {
    if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > src.height || left + w > src.width)
        throw std::invalid_argument("crop window outside image");
    ImageBuffer dst(h, w);
    dst.noisy = src.noisy;
    for (int y = 0; y < h; ++y)
        std::copy_n(&src.pixels[(static_cast<std::size_t>(top + y) * src.width + left) * 3], static_cast<std::size_t>(w) * 3,
                    &dst.pixels[static_cast<std::size_t>(y) * w * 3]);
    return dst;
}

// Channel mean, H x W.
inline std::vector<double> lightness(const ImageBuffer& img) {
    std::vector<double> out(static_cast<std::size_t>(img.height) * img.width);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = (static_cast<double>(img.pixels[3 * i]) + img.pixels[3 * i + 1] + img.pixels[3 * i + 2]) / 3.0;
    return out;
}

// NCHW batch from a list of equally sized images.
template <typename T = float>
Tensor<T> images_to_tensor(const std::vector<ImageBuffer>& images) {
    if (images.empty()) throw std::invalid_argument("empty image batch");
    const int h = images.front().height, w = images.front().width;
    Tensor<T> t({static_cast<int>(images.size()), 3, h, w});
    for (int n = 0; n < static_cast<int>(images.size()); ++n) {
        const auto& img = images[n];
        if (img.height != h || img.width != w) throw std::invalid_argument("batch images differ in size");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) t.at(n, c, y, x) = static_cast<T>(img.at(y, x, c));
    }
    return t;
}

template <typename T>
ImageBuffer tensor_to_image(const Tensor<T>& t, int n) {
    if (t.rank() != 4 || t.dim(1) != 3) throw std::invalid_argument("expected N x 3 x H x W tensor");
    ImageBuffer img(t.dim(2), t.dim(3));
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(t.at(n, c, y, x));
    return img;
}

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
    auto* what = static_cast<std::string*>(png_get_error_ptr(png));
    if (what) *what = msg;
    png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

} // namespace detail

struct PngInfo {
    int height = 0;
    int width = 0;
};

// Header-only read of dimensions; throws IoError naming the file.
inline PngInfo read_png_info(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open image file: " + path.string());
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed for " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unreadable image file: " + path.string() + " (" + err + ")");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    PngInfo out{static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info))};
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

// Decodes any PNG to 8-bit RGB and maps to [0,1].
inline ImageBuffer read_png(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open image file: " + path.string());
    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("libpng init failed for " + path.string());
    }
    std::vector<png_byte> rows;
    std::vector<png_bytep> row_ptrs;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("unreadable image file: " + path.string() + " (" + err + ")");
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int w = static_cast<int>(png_get_image_width(png, info));
    const std::size_t stride = png_get_rowbytes(png, info);
    rows.resize(stride * h);
    row_ptrs.resize(h);
    for (int y = 0; y < h; ++y) row_ptrs[y] = rows.data() + stride * y;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    ImageBuffer img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w * 3; ++x) img.pixels[static_cast<std::size_t>(y) * w * 3 + x] = rows[stride * y + x] / 255.0f;
    return img;
}

inline std::uint8_t quantize8(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Writes 8-bit RGB; values are clamped to [0,1] and rounded.
inline void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
    if (img.height < 1 || img.width < 1) throw std::invalid_argument("cannot write empty image " + path.string());
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng init failed for " + path.string());
    }
    std::vector<png_byte> row(static_cast<std::size_t>(img.width) * 3);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("failed writing image " + path.string() + " (" + err + ")");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width * 3; ++x) row[x] = quantize8(img.pixels[static_cast<std::size_t>(y) * img.width * 3 + x]);
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(fp.get()) != 0) throw IoError("failed flushing image " + path.string());
}

} // namespace latent_relight
