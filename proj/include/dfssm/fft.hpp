#pragma once

#include <complex>
#include <memory>
#include <unordered_map>
#include <vector>

#include "dfssm/ops.hpp"

namespace dfssm {

// Real-input 2D FFT with the unnormalized-forward / (1/hw)-inverse
// convention. Kernels run in double internally regardless of the tensor
// scalar type. Power-of-two lengths use iterative radix-2; everything else
// goes through Bluestein's chirp-z resampled onto a power-of-two convolution.

namespace fftk {

using cplx = std::complex<double>;

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

struct Pow2Plan {
    int n = 0;
    std::vector<cplx> roots;  // e^{-2*pi*i*k/n}, k < n/2
    std::vector<int> bitrev;

    explicit Pow2Plan(int n_) : n(n_) {
        roots.resize(n / 2);
        const double step = -6.283185307179586476925286766559 / n;
        for (int k = 0; k < n / 2; ++k) roots[k] = std::polar(1.0, step * k);
        bitrev.resize(n);
        int logn = 0;
        while ((1 << logn) < n) ++logn;
        for (int i = 0; i < n; ++i) {
            int r = 0;
            for (int b = 0; b < logn; ++b) r |= ((i >> b) & 1) << (logn - 1 - b);
            bitrev[i] = r;
        }
    }

    void run(cplx* a, bool inverse) const {
        for (int i = 0; i < n; ++i) {
            if (bitrev[i] > i) std::swap(a[i], a[bitrev[i]]);
        }
        for (int len = 2; len <= n; len <<= 1) {
            const int half = len / 2;
            const int step = n / len;
            for (int i = 0; i < n; i += len) {
                for (int j = 0; j < half; ++j) {
                    cplx w = roots[j * step];
                    if (inverse) w = std::conj(w);
                    cplx u = a[i + j];
                    cplx v = a[i + j + half] * w;
                    a[i + j] = u + v;
                    a[i + j + half] = u - v;
                }
            }
        }
    }
};

struct BluesteinPlan {
    int n = 0, m = 0;
    std::vector<cplx> chirp;    // e^{-i*pi*k^2/n}
    std::vector<cplx> kernel;   // FFT of the circular conjugate chirp
    std::shared_ptr<Pow2Plan> pow2;

    explicit BluesteinPlan(int n_, std::shared_ptr<Pow2Plan> plan, int m_)
        : n(n_), m(m_), pow2(std::move(plan)) {
        chirp.resize(n);
        const double pi_over_n = 3.141592653589793238462643383280 / n;
        for (int k = 0; k < n; ++k) {
            // k^2 mod 2n keeps the phase argument small for large k
            long long q = (static_cast<long long>(k) * k) % (2LL * n);
            chirp[k] = std::polar(1.0, -pi_over_n * static_cast<double>(q));
        }
        std::vector<cplx> b(m, cplx(0.0, 0.0));
        for (int k = 0; k < n; ++k) {
            cplx v = std::conj(chirp[k]);
            b[k] = v;
            if (k > 0) b[m - k] = v;
        }
        pow2->run(b.data(), false);
        kernel = std::move(b);
    }

    // forward unnormalized DFT of length n
    void run(cplx* a) const {
        std::vector<cplx> t(m, cplx(0.0, 0.0));
        for (int k = 0; k < n; ++k) t[k] = a[k] * chirp[k];
        pow2->run(t.data(), false);
        for (int k = 0; k < m; ++k) t[k] *= kernel[k];
        pow2->run(t.data(), true);
        const double inv_m = 1.0 / m;
        for (int k = 0; k < n; ++k) a[k] = t[k] * inv_m * chirp[k];
    }
};

struct PlanCache {
    std::unordered_map<int, std::shared_ptr<Pow2Plan>> pow2;
    std::unordered_map<int, std::shared_ptr<BluesteinPlan>> bluestein;

    const Pow2Plan& pow2_plan(int n) {
        auto it = pow2.find(n);
        if (it == pow2.end()) it = pow2.emplace(n, std::make_shared<Pow2Plan>(n)).first;
        return *it->second;
    }
    const BluesteinPlan& bluestein_plan(int n) {
        auto it = bluestein.find(n);
        if (it == bluestein.end()) {
            int m = 1;
            while (m < 2 * n - 1) m <<= 1;
            auto p2 = pow2.find(m);
            if (p2 == pow2.end()) p2 = pow2.emplace(m, std::make_shared<Pow2Plan>(m)).first;
            it = bluestein.emplace(n, std::make_shared<BluesteinPlan>(n, p2->second, m)).first;
        }
        return *it->second;
    }
};

inline PlanCache& cache() {
    thread_local PlanCache c;
    return c;
}

// Unnormalized transform; inverse flips the twiddle sign only.
inline void fft1d(cplx* a, int n, bool inverse) {
    if (n == 1) return;
    if (is_pow2(n)) {
        cache().pow2_plan(n).run(a, inverse);
        return;
    }
    if (inverse) {
        for (int i = 0; i < n; ++i) a[i] = std::conj(a[i]);
        cache().bluestein_plan(n).run(a);
        for (int i = 0; i < n; ++i) a[i] = std::conj(a[i]);
    } else {
        cache().bluestein_plan(n).run(a);
    }
}

// Forward half-plane DFT of one real h*w plane into (h, w/2+1) complex bins.
template <typename T>
void rfft2_plane(const T* src, int h, int w, cplx* out) {
    const int w2 = w / 2 + 1;
    std::vector<cplx> row(w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) row[x] = cplx(static_cast<double>(src[y * w + x]), 0.0);
        fft1d(row.data(), w, false);
        for (int l = 0; l < w2; ++l) out[y * w2 + l] = row[l];
    }
    std::vector<cplx> col(h);
    for (int l = 0; l < w2; ++l) {
        for (int y = 0; y < h; ++y) col[y] = out[y * w2 + l];
        fft1d(col.data(), h, false);
        for (int y = 0; y < h; ++y) out[y * w2 + l] = col[y];
    }
}

// Inverse of the above; Hermitian-extends rows and keeps the real part.
// Output is scaled by 1/(h*w).
template <typename T>
void irfft2_plane(const cplx* spec, int h, int w, T* dst) {
    const int w2 = w / 2 + 1;
    std::vector<cplx> work(static_cast<std::size_t>(h) * w2);
    std::vector<cplx> col(h);
    for (int l = 0; l < w2; ++l) {
        for (int y = 0; y < h; ++y) col[y] = spec[y * w2 + l];
        fft1d(col.data(), h, true);
        for (int y = 0; y < h; ++y) work[y * w2 + l] = col[y];
    }
    const double inv_hw = 1.0 / (static_cast<double>(h) * w);
    std::vector<cplx> row(w);
    for (int y = 0; y < h; ++y) {
        for (int l = 0; l < w2; ++l) row[l] = work[y * w2 + l];
        for (int l = w2; l < w; ++l) row[l] = std::conj(work[y * w2 + (w - l)]);
        fft1d(row.data(), w, true);
        for (int x = 0; x < w; ++x) dst[y * w + x] = static_cast<T>(row[x].real() * inv_hw);
    }
}

// Adjoint of rfft2_plane: half-plane cotangent -> spatial plane, i.e. the
// real part of the unnormalized inverse DFT of the zero-extended half plane.
template <typename T>
void rfft2_adjoint_plane(const cplx* gspec, int h, int w, T* dst) {
    const int w2 = w / 2 + 1;
    std::vector<cplx> work(static_cast<std::size_t>(h) * w2);
    std::vector<cplx> col(h);
    for (int l = 0; l < w2; ++l) {
        for (int y = 0; y < h; ++y) col[y] = gspec[y * w2 + l];
        fft1d(col.data(), h, true);
        for (int y = 0; y < h; ++y) work[y * w2 + l] = col[y];
    }
    std::vector<cplx> row(w);
    for (int y = 0; y < h; ++y) {
        for (int l = 0; l < w2; ++l) row[l] = work[y * w2 + l];
        for (int l = w2; l < w; ++l) row[l] = cplx(0.0, 0.0);
        fft1d(row.data(), w, true);
        for (int x = 0; x < w; ++x) dst[y * w + x] += static_cast<T>(row[x].real());
    }
}

}  // namespace fftk

// Half-plane complex frequency representation: a (n, 2c, h, w/2+1) tensor
// with the first c channels holding real parts and the next c imaginary
// parts, plus the spatial origin shape needed to invert odd widths.
template <typename T>
struct ComplexSpectrum {
    Tensor<T> planes;
    int src_h = 0, src_w = 0;

    int channels() const { return planes.shape().c / 2; }
    T re(int n, int c, int k, int l) const { return planes.at(n, c, k, l); }
    T im(int n, int c, int k, int l) const { return planes.at(n, channels() + c, k, l); }
};

template <typename T>
ComplexSpectrum<T> rfft2(const Tensor<T>& x) {
    const Shape s = x.shape();
    check(s.h >= 1 && s.w >= 1, "rfft2: empty spatial extent " + s.str());
    const int w2 = s.w / 2 + 1;
    const Shape os{s.n, 2 * s.c, s.h, w2};
    Tensor<T> planes = make_output<T>(os, {x});

    const std::size_t spat = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t bins = static_cast<std::size_t>(s.h) * w2;
    const T* px = x.data().data();
    T* po = planes.data().data();
    const int nc = s.n * s.c;
    const double fft_work = static_cast<double>(nc) * 5.0 * spat * 16.0;
    parallel_for(static_cast<std::size_t>(nc), [&](std::size_t lo, std::size_t hi) {
        std::vector<fftk::cplx> spec(bins);
        for (std::size_t p = lo; p < hi; ++p) {
            const int n = static_cast<int>(p) / s.c;
            const int c = static_cast<int>(p) % s.c;
            fftk::rfft2_plane(px + p * spat, s.h, s.w, spec.data());
            T* re = po + ((static_cast<std::size_t>(n) * os.c + c) * bins);
            T* im = po + ((static_cast<std::size_t>(n) * os.c + s.c + c) * bins);
            for (std::size_t k = 0; k < bins; ++k) {
                re[k] = static_cast<T>(spec[k].real());
                im[k] = static_cast<T>(spec[k].imag());
            }
        }
    }, fft_work);

    if (recording(planes)) {
        auto xn = x.node();
        planes.node()->backward = [xn, s, os, bins, spat](Node<T>& self) {
            const T* g = self.grad.data();
            T* dx = xn->grad.data();
            const int nc = s.n * s.c;
            const double fft_work = static_cast<double>(nc) * 5.0 * spat * 16.0;
            parallel_for(static_cast<std::size_t>(nc), [&](std::size_t lo, std::size_t hi) {
                std::vector<fftk::cplx> gs(bins);
                for (std::size_t p = lo; p < hi; ++p) {
                    const int n = static_cast<int>(p) / s.c;
                    const int c = static_cast<int>(p) % s.c;
                    const T* gre = g + ((static_cast<std::size_t>(n) * os.c + c) * bins);
                    const T* gim = g + ((static_cast<std::size_t>(n) * os.c + s.c + c) * bins);
                    for (std::size_t k = 0; k < bins; ++k)
                        gs[k] = fftk::cplx(static_cast<double>(gre[k]), static_cast<double>(gim[k]));
                    fftk::rfft2_adjoint_plane(gs.data(), s.h, s.w, dx + p * spat);
                }
            }, fft_work);
        };
    }
    check_finite(*planes.node(), "rfft2");
    return ComplexSpectrum<T>{planes, s.h, s.w};
}

template <typename T>
Tensor<T> irfft2(const ComplexSpectrum<T>& spec) {
    const Shape ss = spec.planes.shape();
    check(ss.c % 2 == 0, "irfft2: spectrum channels must stack re||im");
    check(spec.src_h == ss.h && spec.src_w / 2 + 1 == ss.w,
          "irfft2: origin shape inconsistent with bin count");
    const int c = ss.c / 2, h = spec.src_h, w = spec.src_w;
    const Shape os{ss.n, c, h, w};
    Tensor<T> out = make_output<T>(os, {spec.planes});

    const std::size_t bins = static_cast<std::size_t>(ss.h) * ss.w;
    const std::size_t spat = static_cast<std::size_t>(h) * w;
    const T* ps = spec.planes.data().data();
    T* po = out.data().data();
    const double ifft_work = static_cast<double>(ss.n) * c * 5.0 * spat * 16.0;
    parallel_for(static_cast<std::size_t>(ss.n) * c, [&](std::size_t lo, std::size_t hi) {
        std::vector<fftk::cplx> buf(bins);
        for (std::size_t p = lo; p < hi; ++p) {
            const int n = static_cast<int>(p) / c;
            const int ch = static_cast<int>(p) % c;
            const T* re = ps + ((static_cast<std::size_t>(n) * ss.c + ch) * bins);
            const T* im = ps + ((static_cast<std::size_t>(n) * ss.c + c + ch) * bins);
            for (std::size_t k = 0; k < bins; ++k)
                buf[k] = fftk::cplx(static_cast<double>(re[k]), static_cast<double>(im[k]));
            fftk::irfft2_plane(buf.data(), h, w, po + p * spat);
        }
    }, ifft_work);

    if (recording(out)) {
        auto sn = spec.planes.node();
        const int sc = ss.c;
        out.node()->backward = [sn, sc, c, h, w, bins, spat](Node<T>& self) {
            const T* g = self.grad.data();
            T* ds = sn->grad.data();
            const int w2 = w / 2 + 1;
            const double inv_hw = 1.0 / (static_cast<double>(h) * w);
            const int planes_n = static_cast<int>(self.value.size() / spat);
            const double ifft_work = static_cast<double>(planes_n) * 5.0 * spat * 16.0;
            parallel_for(static_cast<std::size_t>(planes_n), [&](std::size_t lo, std::size_t hi) {
                std::vector<fftk::cplx> F(bins);
                for (std::size_t p = lo; p < hi; ++p) {
                    const int n = static_cast<int>(p) / c;
                    const int ch = static_cast<int>(p) % c;
                    fftk::rfft2_plane(g + p * spat, h, w, F.data());
                    T* dre = ds + ((static_cast<std::size_t>(n) * sc + ch) * bins);
                    T* dim = ds + ((static_cast<std::size_t>(n) * sc + c + ch) * bins);
                    for (int k = 0; k < h; ++k)
                        for (int l = 0; l < w2; ++l) {
                            const bool edge = (l == 0) || (w % 2 == 0 && l == w / 2);
                            const double wgt = (edge ? 1.0 : 2.0) * inv_hw;
                            dre[k * w2 + l] += static_cast<T>(wgt * F[k * w2 + l].real());
                            dim[k * w2 + l] += static_cast<T>(wgt * F[k * w2 + l].imag());
                        }
                }
            }, ifft_work);
        };
    }
    check_finite(*out.node(), "irfft2");
    return out;
}

// ---------------------------------------------------------------------------
// Spectrum rendering / analysis (non-differentiable utilities)

// Full-plane amplitude |F(x)| of a single plane, Hermitian-expanded.
template <typename T>
std::vector<double> full_amplitude(const T* src, int h, int w) {
    const int w2 = w / 2 + 1;
    std::vector<fftk::cplx> spec(static_cast<std::size_t>(h) * w2);
    fftk::rfft2_plane(src, h, w, spec.data());
    std::vector<double> amp(static_cast<std::size_t>(h) * w);
    for (int k = 0; k < h; ++k)
        for (int l = 0; l < w; ++l) {
            if (l < w2) {
                amp[k * w + l] = std::abs(spec[k * w2 + l]);
            } else {
                amp[k * w + l] = std::abs(spec[((h - k) % h) * w2 + (w - l)]);
            }
        }
    return amp;
}

namespace detail {
// BT.601 studio-range luminance of a (1,3,h,w) tensor in [0,1]; single plane
// passes through unchanged.
template <typename T>
std::vector<double> to_luma_plane(const Tensor<T>& x) {
    const Shape s = x.shape();
    check(s.n == 1, "spectrum: expected a single image, got " + s.str());
    check(s.c == 1 || s.c == 3, "spectrum: expected 1 or 3 channels");
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    std::vector<double> out(plane);
    const T* p = x.data().data();
    if (s.c == 1) {
        for (std::size_t i = 0; i < plane; ++i) out[i] = static_cast<double>(p[i]);
    } else {
        for (std::size_t i = 0; i < plane; ++i)
            out[i] = (65.481 * p[i] + 128.553 * p[plane + i] + 24.966 * p[2 * plane + i] + 16.0) /
                     255.0;
    }
    return out;
}
}  // namespace detail

// log(1+|F|) amplitude map, optionally center-shifted, min-max normalized to
// [0,1] for rendering.
template <typename T>
Tensor<T> spectrum_image(const Tensor<T>& x, bool shift) {
    const Shape s = x.shape();
    std::vector<double> luma = detail::to_luma_plane(x);
    std::vector<double> amp = full_amplitude(luma.data(), s.h, s.w);
    std::vector<double> img(amp.size());
    for (std::size_t k = 0; k < amp.size(); ++k) amp[k] = std::log1p(amp[k]);
    if (shift) {
        const int oy = s.h / 2, ox = s.w / 2;
        for (int k = 0; k < s.h; ++k)
            for (int l = 0; l < s.w; ++l)
                img[((k + oy) % s.h) * s.w + (l + ox) % s.w] = amp[k * s.w + l];
    } else {
        img = amp;
    }
    double lo = img[0], hi = img[0];
    for (double v : img) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi > lo ? hi - lo : 1.0;
    Tensor<T> out = Tensor<T>::zeros({1, 1, s.h, s.w});
    for (std::size_t k = 0; k < img.size(); ++k)
        out.data()[k] = static_cast<T>((img[k] - lo) / span);
    return out;
}

// Angular distribution of spectral energy |F|^2 over line orientations in
// [0, 180) degrees, DC neighborhood excluded. Frequencies are normalized per
// axis so non-square images keep their geometry.
template <typename T>
std::vector<double> angular_energy_histogram(const Tensor<T>& x, int nbins = 180) {
    const Shape s = x.shape();
    std::vector<double> luma = detail::to_luma_plane(x);
    std::vector<double> amp = full_amplitude(luma.data(), s.h, s.w);
    std::vector<double> hist(nbins, 0.0);
    for (int k = 0; k < s.h; ++k)
        for (int l = 0; l < s.w; ++l) {
            const int sk = (k <= s.h / 2) ? k : k - s.h;
            const int sl = (l <= s.w / 2) ? l : l - s.w;
            if (sk * sk + sl * sl <= 2) continue;  // skip the DC neighborhood
            const double fy = static_cast<double>(sk) / s.h;
            const double fx = static_cast<double>(sl) / s.w;
            double deg = std::atan2(fy, fx) * (180.0 / 3.141592653589793238462643383280);
            deg = std::fmod(deg + 360.0, 180.0);
            int bin = static_cast<int>(deg / (180.0 / nbins));
            if (bin >= nbins) bin = nbins - 1;
            const double a = amp[k * s.w + l];
            hist[bin] += a * a;
        }
    return hist;
}

inline double histogram_peak_angle(const std::vector<double>& hist) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < hist.size(); ++i)
        if (hist[i] > hist[best]) best = i;
    const double width = 180.0 / static_cast<double>(hist.size());
    return (static_cast<double>(best) + 0.5) * width;
}

inline double angle_distance_deg(double a, double b) {
    double d = std::fmod(std::abs(a - b), 180.0);
    return std::min(d, 180.0 - d);
}

}  // namespace dfssm
