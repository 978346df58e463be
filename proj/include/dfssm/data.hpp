#pragma once

#include <cmath>
#include <vector>

#include "dfssm/image.hpp"
#include "dfssm/rng.hpp"
#include "dfssm/tensor.hpp"

namespace dfssm {

// Synthetic rain generation parameters. The seed fully determines the rain
// layer; theta is measured in degrees from vertical.
struct RainParams {
    double theta = 0.0;
    int length = 12;
    double rho = 0.02;
    double intensity = 0.3;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ImagePair {
    Image rainy;
    Image clean;
    RainParams meta;
};

// Bernoulli impulse field convolved with an oriented line kernel, scaled,
// added to the clean image in [0,1] linear space, clipped, quantized.
ImagePair synth_rain(const Image& clean, const RainParams& p);

// Procedural clean content (gradients, shapes, texture) for desk-scale runs.
Image synthetic_clean_image(int index, int w, int h, std::uint64_t seed);

// BT.601 studio-range luminance, Y in [16,235].
std::vector<double> rgb_to_y(const Image& img);

// 10*log10(255^2 / MSE_Y); +inf for identical inputs.
double psnr_y(const Image& a, const Image& b);

// Mean local SSIM on Y: 11x11 Gaussian window sigma 1.5, K1=0.01, K2=0.03,
// L=255, valid-window convolution.
double ssim_y(const Image& a, const Image& b);

// Spectral energy of a streak layer at angle theta peaks along the
// perpendicular orientation.
inline double perpendicular_spectrum_angle(double theta_deg) {
    return std::fmod(180.0 - theta_deg, 180.0);
}

// Dataset layout: root/rainy/NNNN.png, root/clean/NNNN.png, plus a manifest
// of `NNNN.png theta=<f> len=<i> rho=<f> intensity=<f> seed=<u64>` lines.
void write_dataset(const std::string& root, const std::vector<ImagePair>& pairs);
std::vector<ImagePair> load_dataset(const std::string& root);

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
    Tensor<T> t = Tensor<T>::zeros({1, 3, img.height, img.width});
    const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                t.data()[c * plane + y * img.width + x] =
                    static_cast<T>(img.at(y, x, c) / 255.0);
    return t;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
    const Shape s = t.shape();
    check(s.n == 1 && s.c == 3, "tensor_to_image expects (1,3,h,w), got " + s.str());
    Image img = Image::make(s.w, s.h);
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = static_cast<double>(t.data()[c * plane + y * s.w + x]);
                v = std::min(1.0, std::max(0.0, v));
                img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

}  // namespace dfssm
