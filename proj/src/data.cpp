#include "dfssm/data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace dfssm {

namespace fs = std::filesystem;

void RainParams::validate() const {
    if (length < 1) throw ConfigError("rain length must be >= 1");
    if (rho <= 0.0 || rho >= 1.0) throw ConfigError("rain density rho must lie in (0,1)");
    if (intensity < 0.0) throw ConfigError("rain intensity must be >= 0");
}

ImagePair synth_rain(const Image& clean, const RainParams& p) {
    p.validate();
    const int w = clean.width, h = clean.height;

    // oriented line kernel, bilinear splat, normalized to unit sum
    const int ksize = p.length | 1;  // odd support
    const int kc = ksize / 2;
    std::vector<double> kernel(static_cast<std::size_t>(ksize) * ksize, 0.0);
    const double th = p.theta * 3.14159265358979323846 / 180.0;
    const double dx = std::sin(th), dy = std::cos(th);
    for (int s = 0; s < p.length; ++s) {
        const double t = s - (p.length - 1) / 2.0;
        const double px = kc + dx * t, py = kc + dy * t;
        const int ix = static_cast<int>(std::floor(px)), iy = static_cast<int>(std::floor(py));
        const double fx = px - ix, fy = py - iy;
        for (int oy = 0; oy <= 1; ++oy)
            for (int ox = 0; ox <= 1; ++ox) {
                const int xx = ix + ox, yy = iy + oy;
                if (xx < 0 || xx >= ksize || yy < 0 || yy >= ksize) continue;
                kernel[static_cast<std::size_t>(yy) * ksize + xx] +=
                    (ox ? fx : 1 - fx) * (oy ? fy : 1 - fy);
            }
    }
    double ksum = 0.0;
    for (double v : kernel) ksum += v;
    for (double& v : kernel) v /= ksum;

    Rng rng = named_stream(p.seed, "synth-rain");
    std::vector<double> field(static_cast<std::size_t>(w) * h, 0.0);
    for (auto& v : field)
        if (rng.bernoulli(p.rho)) v = rng.uniform(0.5, 1.0);

    std::vector<double> rain(static_cast<std::size_t>(w) * h, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double f = field[static_cast<std::size_t>(y) * w + x];
            if (f == 0.0) continue;
            for (int ky = 0; ky < ksize; ++ky) {
                const int yy = y + ky - kc;
                if (yy < 0 || yy >= h) continue;
                for (int kx = 0; kx < ksize; ++kx) {
                    const int xx = x + kx - kc;
                    if (xx < 0 || xx >= w) continue;
                    rain[static_cast<std::size_t>(yy) * w + xx] +=
                        f * kernel[static_cast<std::size_t>(ky) * ksize + kx];
                }
            }
        }

    ImagePair pair;
    pair.clean = clean;
    pair.meta = p;
    pair.rainy = Image::make(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double r = p.intensity * rain[static_cast<std::size_t>(y) * w + x];
            for (int c = 0; c < 3; ++c) {
                double v = clean.at(y, x, c) / 255.0 + r;
                v = std::min(1.0, std::max(0.0, v));
                pair.rainy.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    return pair;
}

Image synthetic_clean_image(int index, int w, int h, std::uint64_t seed) {
    Rng rng = named_stream(seed, "clean-" + std::to_string(index));
    Image img = Image::make(w, h);

    const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
    const double base_r = rng.uniform(0.15, 0.7), base_g = rng.uniform(0.15, 0.7),
                 base_b = rng.uniform(0.15, 0.7);
    const double fx = rng.uniform(1.0, 4.0), fy = rng.uniform(1.0, 4.0);
    std::vector<double> plane(static_cast<std::size_t>(w) * h * 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double u = static_cast<double>(x) / w, v = static_cast<double>(y) / h;
            const double grad = 0.2 * (gx * u + gy * v);
            const double tex = 0.06 * std::sin(6.28318 * fx * u) * std::cos(6.28318 * fy * v);
            const std::size_t o = (static_cast<std::size_t>(y) * w + x) * 3;
            plane[o + 0] = base_r + grad + tex;
            plane[o + 1] = base_g + grad - tex;
            plane[o + 2] = base_b - grad + tex;
        }
    const int shapes = 4 + static_cast<int>(rng.range(0, 4));
    for (int s = 0; s < shapes; ++s) {
        const bool circle = rng.bernoulli(0.5);
        const double cx = rng.uniform(0.1, 0.9) * w, cy = rng.uniform(0.1, 0.9) * h;
        const double rad = rng.uniform(0.05, 0.22) * std::min(w, h);
        const double cr = rng.uniform(0.1, 0.9), cg = rng.uniform(0.1, 0.9),
                     cb = rng.uniform(0.1, 0.9);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                bool inside;
                if (circle) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    inside = d2 <= rad * rad;
                } else {
                    inside = std::abs(x - cx) <= rad && std::abs(y - cy) <= rad * 0.7;
                }
                if (!inside) continue;
                const std::size_t o = (static_cast<std::size_t>(y) * w + x) * 3;
                plane[o + 0] = 0.65 * plane[o + 0] + 0.35 * cr;
                plane[o + 1] = 0.65 * plane[o + 1] + 0.35 * cg;
                plane[o + 2] = 0.65 * plane[o + 2] + 0.35 * cb;
            }
    }
    for (std::size_t i = 0; i < plane.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, plane[i]));
        img.rgb[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return img;
}

std::vector<double> rgb_to_y(const Image& img) {
    std::vector<double> y(static_cast<std::size_t>(img.width) * img.height);
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = img.rgb[i * 3 + 0] / 255.0;
        const double g = img.rgb[i * 3 + 1] / 255.0;
        const double b = img.rgb[i * 3 + 2] / 255.0;
        y[i] = 65.481 * r + 128.553 * g + 24.966 * b + 16.0;
    }
    return y;
}

double psnr_y(const Image& a, const Image& b) {
    if (!a.same_size(b)) throw ShapeError("psnr_y: image sizes differ");
    const auto ya = rgb_to_y(a), yb = rgb_to_y(b);
    double mse = 0.0;
    for (std::size_t i = 0; i < ya.size(); ++i) mse += (ya[i] - yb[i]) * (ya[i] - yb[i]);
    mse /= static_cast<double>(ya.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

namespace {

// separable valid-window filtering with an 11-tap Gaussian
constexpr int kWin = 11;

std::vector<double> gaussian11() {
    std::vector<double> g(kWin);
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - (kWin - 1) / 2.0;
        g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        sum += g[i];
    }
    for (double& v : g) v /= sum;
    return g;
}

std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                 const std::vector<double>& g) {
    const int oh = h - kWin + 1, ow = w - kWin + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k) acc += g[k] * src[static_cast<std::size_t>(y) * w + x + k];
            tmp[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int k = 0; k < kWin; ++k) acc += g[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = acc;
        }
    return out;
}

}  // namespace

double ssim_y(const Image& a, const Image& b) {
    if (!a.same_size(b)) throw ShapeError("ssim_y: image sizes differ");
    if (a.width < kWin || a.height < kWin)
        throw ShapeError("ssim_y: image smaller than the 11x11 window");
    const auto ya = rgb_to_y(a), yb = rgb_to_y(b);
    const int h = a.height, w = a.width;
    const auto g = gaussian11();

    std::vector<double> aa(ya.size()), bb(ya.size()), ab(ya.size());
    for (std::size_t i = 0; i < ya.size(); ++i) {
        aa[i] = ya[i] * ya[i];
        bb[i] = yb[i] * yb[i];
        ab[i] = ya[i] * yb[i];
    }
    const auto mu1 = filter_valid(ya, h, w, g);
    const auto mu2 = filter_valid(yb, h, w, g);
    const auto m11 = filter_valid(aa, h, w, g);
    const auto m22 = filter_valid(bb, h, w, g);
    const auto m12 = filter_valid(ab, h, w, g);

    const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
    double total = 0.0;
    for (std::size_t i = 0; i < mu1.size(); ++i) {
        const double s1 = m11[i] - mu1[i] * mu1[i];
        const double s2 = m22[i] - mu2[i] * mu2[i];
        const double s12 = m12[i] - mu1[i] * mu2[i];
        total += ((2.0 * mu1[i] * mu2[i] + c1) * (2.0 * s12 + c2)) /
                 ((mu1[i] * mu1[i] + mu2[i] * mu2[i] + c1) * (s1 + s2 + c2));
    }
    return total / static_cast<double>(mu1.size());
}

// ---------------------------------------------------------------------------

namespace {
std::string pair_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d.png", index);
    return buf;
}
}  // namespace

void write_dataset(const std::string& root, const std::vector<ImagePair>& pairs) {
    fs::create_directories(fs::path(root) / "rainy");
    fs::create_directories(fs::path(root) / "clean");
    std::ofstream manifest(fs::path(root) / "manifest.txt");
    if (!manifest) throw IoError("cannot write manifest under " + root);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const std::string name = pair_name(static_cast<int>(i));
        save_png(pairs[i].rainy, (fs::path(root) / "rainy" / name).string());
        save_png(pairs[i].clean, (fs::path(root) / "clean" / name).string());
        const auto& m = pairs[i].meta;
        char line[160];
        std::snprintf(line, sizeof(line), "%s theta=%g len=%d rho=%g intensity=%g seed=%llu\n",
                      name.c_str(), m.theta, m.length, m.rho, m.intensity,
                      static_cast<unsigned long long>(m.seed));
        manifest << line;
    }
}

std::vector<ImagePair> load_dataset(const std::string& root) {
    const fs::path rainy_dir = fs::path(root) / "rainy";
    const fs::path clean_dir = fs::path(root) / "clean";
    if (!fs::is_directory(rainy_dir) || !fs::is_directory(clean_dir))
        throw IoError("dataset root must contain rainy/ and clean/: " + root);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(clean_dir))
        if (e.path().extension() == ".png") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty()) throw IoError("no PNG pairs under " + root);
    std::vector<ImagePair> pairs;
    for (const auto& name : names) {
        ImagePair p;
        p.clean = load_png((clean_dir / name).string());
        p.rainy = load_png((rainy_dir / name).string());
        if (!p.clean.same_size(p.rainy))
            throw FormatError("pair size mismatch for " + name);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

}  // namespace dfssm
