#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <stdexcept>
#include <string>
#include <vector>

#include "image.hpp"

namespace latent_relight {

namespace grid_detail {

struct Glyph {
    char ch;
    std::array<unsigned char, 7> rows; // 5 bits per row, MSB is the leftmost column
};

inline const std::vector<Glyph>& font() {
    static const std::vector<Glyph> f = {
        {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
        {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
        {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
        {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
        {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
        {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
        {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
        {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
        {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
        {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
        {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
        {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
        {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
        {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
        {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
        {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
        {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
        {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
        {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
        {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}}, {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
        {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}}, {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
        {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
        {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}}, {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}},
        {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}},
    };
    return f;
}

inline const Glyph& glyph(char c) {
    const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    for (const auto& g : font())
        if (g.ch == up) return g;
    static const Glyph unknown{'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04}};
    return unknown;
}

constexpr int kGlyphW = 5;
constexpr int kGlyphH = 7;
constexpr int kAdvance = kGlyphW + 1;
constexpr int kPad = 2;

// Draws white text clipped to [x0, x0 + max_w).
inline void draw_text(ImageBuffer& img, const std::string& text, int x0, int y0, int max_w) {
    int x = x0;
    for (char c : text) {
        if (x + kGlyphW > x0 + max_w) break;
        const Glyph& g = glyph(c);
        for (int r = 0; r < kGlyphH; ++r)
            for (int col = 0; col < kGlyphW; ++col)
                if (g.rows[r] & (0x10 >> col))
                    for (int ch = 0; ch < 3; ++ch) img.at(y0 + r, x + col, ch) = 1.0f;
        x += kAdvance;
    }
}

} // namespace grid_detail

constexpr int kGridSeparator = 2;
constexpr int kGridLabelBand = grid_detail::kGlyphH + 2 * grid_detail::kPad;

// Row-major tiling; each tile gets a black label band above it and tiles are
// separated by 2-pixel white gaps.
inline ImageBuffer compose_grid(const std::vector<ImageBuffer>& images, const std::vector<std::string>& labels, int columns = 0) {
    if (images.empty()) throw std::invalid_argument("render_grid: at least one image is required");
    if (!labels.empty() && labels.size() != images.size())
        throw std::invalid_argument("render_grid: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(images.size()) + " images");
    const int h = images[0].height, w = images[0].width;
    for (const auto& img : images) require_same_size(img, images[0], "render_grid");
    const int n = static_cast<int>(images.size());
    const int cols = columns > 0 ? std::min(columns, n) : n;
    const int rows = (n + cols - 1) / cols;
    const int tile_h = kGridLabelBand + h;
    ImageBuffer out(rows * tile_h + (rows - 1) * kGridSeparator, cols * w + (cols - 1) * kGridSeparator);
    std::fill(out.pixels.begin(), out.pixels.end(), 1.0f);
    for (int i = 0; i < n; ++i) {
        const int oy = (i / cols) * (tile_h + kGridSeparator);
        const int ox = (i % cols) * (w + kGridSeparator);
        for (int y = 0; y < kGridLabelBand; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) out.at(oy + y, ox + x, c) = 0.0f;
        if (!labels.empty())
            grid_detail::draw_text(out, labels[i], ox + grid_detail::kPad, oy + grid_detail::kPad, w - 2 * grid_detail::kPad);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) out.at(oy + kGridLabelBand + y, ox + x, c) = std::clamp(images[i].at(y, x, c), 0.0f, 1.0f);
    }
    return out;
}

inline ImageBuffer render_grid(const std::vector<ImageBuffer>& images, const std::vector<std::string>& labels,
                               const std::filesystem::path& out_path, int columns = 0) {
    ImageBuffer grid = compose_grid(images, labels, columns);
    write_png(out_path, grid);
    return grid;
}

} // namespace latent_relight
