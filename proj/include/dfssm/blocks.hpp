#pragma once

#include <cmath>
#include <variant>

#include "dfssm/fft.hpp"
#include "dfssm/ssm.hpp"

namespace dfssm {

// ---------------------------------------------------------------------------
// Squeeze-excitation style channel attention.

template <typename T>
struct ChannelAttention {
    Conv2dLayer<T> fc1;  // c -> bottleneck
    Conv2dLayer<T> fc2;  // bottleneck -> c

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> w = global_avg_pool(x);
        w = sigmoid(fc2.forward(relu(fc1.forward(w))));
        return mul(x, w);
    }
};

template <typename T>
ChannelAttention<T> make_channel_attention(ParamRegistry<T>& reg, const std::string& path, int c) {
    const int r = std::min(16, c);
    const int b = std::max(c / r, 1);
    ChannelAttention<T> ca;
    ca.fc1 = make_conv(reg, path + ".fc1", c, b, 1, true);
    ca.fc2 = make_conv(reg, path + ".fc2", b, c, 1, true);
    return ca;
}

// ---------------------------------------------------------------------------
// FFTM: halve channels, filter in the frequency domain with a 1x1 conv on the
// stacked re||im representation, invert, expand back.

template <typename T>
struct Fftm {
    Conv2dLayer<T> conv_in;    // c -> c/2
    Conv2dLayer<T> conv_freq;  // c (stacked 2 * c/2) -> c
    Conv2dLayer<T> conv_out;   // c/2 -> c

    Tensor<T> forward(const Tensor<T>& x) const {
        const Shape s = x.shape();
        Tensor<T> z = silu(conv_in.forward(x));
        ComplexSpectrum<T> spec = rfft2(z);
        Tensor<T> f = silu(conv_freq.forward(spec.planes));
        Tensor<T> zf = irfft2(ComplexSpectrum<T>{f, s.h, s.w});
        return conv_out.forward(zf);
    }
};

template <typename T>
Fftm<T> make_fftm(ParamRegistry<T>& reg, const std::string& path, int c) {
    if (c % 2 != 0)
        throw ConfigError("FFTM requires an even channel count, got " + std::to_string(c));
    Fftm<T> f;
    f.conv_in = make_conv(reg, path + ".conv_in", c, c / 2, 1, true);
    f.conv_freq = make_conv(reg, path + ".conv_freq", c, c, 1, true);
    f.conv_out = make_conv(reg, path + ".conv_out", c / 2, c, 1, true);
    return f;
}

// ---------------------------------------------------------------------------
// State space block: VSSM(LN(x)) + s .* x

template <typename T>
struct Ssb {
    LayerNormLayer<T> ln;
    Vssm<T> vssm;
    Tensor<T> scale;

    Tensor<T> forward(const Tensor<T>& x) const {
        return add(vssm.forward(ln.forward(x)), mul(x, scale));
    }
};

template <typename T>
Ssb<T> make_ssb(ParamRegistry<T>& reg, const std::string& path, int c, int expand, int state_dim) {
    Ssb<T> b;
    b.ln = make_layer_norm(reg, path + ".ln", c);
    b.vssm = make_vssm(reg, path + ".vssm", c, expand, state_dim);
    b.scale = make_skip_scale(reg, path + ".scale", c);
    return b;
}

// Frequency-enhanced variant: both branches consume the same normalized input.
template <typename T>
struct Fssb {
    LayerNormLayer<T> ln;
    Vssm<T> vssm;
    Fftm<T> fftm;
    Tensor<T> scale;

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> xn = ln.forward(x);
        return add(add(vssm.forward(xn), fftm.forward(xn)), mul(x, scale));
    }
};

template <typename T>
Fssb<T> make_fssb(ParamRegistry<T>& reg, const std::string& path, int c, int expand,
                  int state_dim) {
    Fssb<T> b;
    b.ln = make_layer_norm(reg, path + ".ln", c);
    b.vssm = make_vssm(reg, path + ".vssm", c, expand, state_dim);
    b.fftm = make_fftm(reg, path + ".fftm", c);
    b.scale = make_skip_scale(reg, path + ".scale", c);
    return b;
}

// ---------------------------------------------------------------------------
// Mixed-scale gated-convolutional block. Branches consume a shared LN(x);
// the 3x3/5x5 depthwise branches are concatenated, gated by the GELU branch,
// fused back to c channels, then channel attention and the scaled skip.

template <typename T>
struct Mgcb {
    LayerNormLayer<T> ln;
    Conv2dLayer<T> gate_proj;  // c -> g
    DwConv2dLayer<T> gate_dw;  // 3x3
    Conv2dLayer<T> b3_proj;    // c -> g/2
    DwConv2dLayer<T> b3_dw;    // 3x3
    Conv2dLayer<T> b5_proj;    // c -> g/2
    DwConv2dLayer<T> b5_dw;    // 5x5
    Conv2dLayer<T> fuse;       // g -> c
    ChannelAttention<T> ca;
    Tensor<T> scale;

    // gated product at width g, before fuse/CA; bilinear in (gate, branches)
    Tensor<T> gated_product(const Tensor<T>& x) const {
        Tensor<T> xn = ln.forward(x);
        Tensor<T> gate = gelu(gate_dw.forward(gate_proj.forward(xn)));
        Tensor<T> x3 = b3_dw.forward(b3_proj.forward(xn));
        Tensor<T> x5 = b5_dw.forward(b5_proj.forward(xn));
        return mul(gate, concat_channels<T>({x3, x5}));
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> fused = ca.forward(fuse.forward(gated_product(x)));
        return add(fused, mul(x, scale));
    }
};

inline int gated_width(int c, double gamma) {
    const double gcd = gamma * c;
    const long long gc = std::llround(gcd);
    if (std::abs(gcd - static_cast<double>(gc)) > 1e-9 || gc < 2 || gc % 2 != 0)
        throw ConfigError("MGCB expansion gamma*C must be a positive even integer, got gamma=" +
                          std::to_string(gamma) + " C=" + std::to_string(c));
    return static_cast<int>(gc);
}

template <typename T>
Mgcb<T> make_mgcb(ParamRegistry<T>& reg, const std::string& path, int c, double gamma) {
    const int g = gated_width(c, gamma);
    Mgcb<T> b;
    b.ln = make_layer_norm(reg, path + ".ln", c);
    b.gate_proj = make_conv(reg, path + ".gate_proj", c, g, 1, true);
    b.gate_dw = make_dwconv(reg, path + ".gate_dw", g, 3, true);
    b.b3_proj = make_conv(reg, path + ".b3_proj", c, g / 2, 1, true);
    b.b3_dw = make_dwconv(reg, path + ".b3_dw", g / 2, 3, true);
    b.b5_proj = make_conv(reg, path + ".b5_proj", c, g / 2, 1, true);
    b.b5_dw = make_dwconv(reg, path + ".b5_dw", g / 2, 5, true);
    b.fuse = make_conv(reg, path + ".fuse", g, c, 1, true);
    b.ca = make_channel_attention(reg, path + ".ca", c);
    b.scale = make_skip_scale(reg, path + ".scale", c);
    return b;
}

// ---------------------------------------------------------------------------
// Plain convolutional baseline for the MGCB slot: two 3x3 convs with a GELU
// between, channel attention, scaled skip.

template <typename T>
struct ConvLayerBlock {
    LayerNormLayer<T> ln;
    Conv2dLayer<T> conv1;
    Conv2dLayer<T> conv2;
    ChannelAttention<T> ca;
    Tensor<T> scale;

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = conv2.forward(gelu(conv1.forward(ln.forward(x))));
        return add(ca.forward(h), mul(x, scale));
    }
};

template <typename T>
ConvLayerBlock<T> make_conv_layer(ParamRegistry<T>& reg, const std::string& path, int c) {
    ConvLayerBlock<T> b;
    b.ln = make_layer_norm(reg, path + ".ln", c);
    b.conv1 = make_conv(reg, path + ".conv1", c, c, 3, true, Pad{Pad::kZero, 1, 1});
    b.conv2 = make_conv(reg, path + ".conv2", c, c, 3, true, Pad{Pad::kZero, 1, 1});
    b.ca = make_channel_attention(reg, path + ".ca", c);
    b.scale = make_skip_scale(reg, path + ".scale", c);
    return b;
}

// Either conv block, selected by config for the ablation axis.
template <typename T>
using ConvBlock = std::variant<Mgcb<T>, ConvLayerBlock<T>>;

template <typename T>
Tensor<T> conv_block_forward(const ConvBlock<T>& block, const Tensor<T>& x) {
    return std::visit([&](const auto& b) { return b.forward(x); }, block);
}

}  // namespace dfssm
