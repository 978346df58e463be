#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfssm/common.hpp"

namespace dfssm {

// 8-bit RGB image, row-major, 3 bytes per pixel.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    static Image make(int w, int h) {
        Image img;
        img.width = w;
        img.height = h;
        img.rgb.assign(static_cast<std::size_t>(w) * h * 3, 0);
        return img;
    }

    std::uint8_t& at(int y, int x, int ch) {
        return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
    }
    std::uint8_t at(int y, int x, int ch) const {
        return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + ch];
    }
    bool same_size(const Image& o) const { return width == o.width && height == o.height; }
};

// 8-bit RGB(A)/grayscale/palette PNGs; alpha dropped, grayscale expanded to
// three channels, 16-bit rejected with FormatError.
Image load_png(const std::string& path);
void save_png(const Image& img, const std::string& path);

// Single-channel 8-bit grayscale writer (spectrum renderings).
void save_png_gray(const std::vector<std::uint8_t>& gray, int w, int h, const std::string& path);

}  // namespace dfssm
