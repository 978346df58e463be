#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>

#include "dfssm/blocks.hpp"
#include "dfssm/config.hpp"

namespace dfssm {

// U-Net over four resolution levels with channel widths C, 2C, 4C, 8C.
// Downsampling is pixel-unshuffle followed by a 1x1 conv to the target
// width; upsampling is a 1x1 conv followed by pixel-shuffle. Skip
// concatenations at levels 2..levels-1 are halved back by a 1x1 conv; the
// level-1 concatenation keeps width 2C through the last decoder stage and
// the refinement stage. A global additive skip runs from input to output.

template <typename T>
struct Group {
    std::variant<Ssb<T>, Fssb<T>> block;
    ConvBlock<T> conv;

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = std::visit([&](const auto& b) { return b.forward(x); }, block);
        return conv_block_forward(conv, h);
    }
};

template <typename T>
struct Stage {
    int level = 1;
    int width = 0;
    std::vector<Group<T>> groups;  // n_s SSGs then n_f FSSGs

    Tensor<T> forward(Tensor<T> x) const {
        for (const auto& g : groups) x = g.forward(x);
        return x;
    }
};

struct StageInfo {
    std::string name;
    int level = 1;
    int width = 0;
};

inline std::vector<StageInfo> stage_plan(const ModelConfig& cfg) {
    std::vector<StageInfo> plan;
    for (int l = 0; l < cfg.levels; ++l)
        plan.push_back({"enc." + std::to_string(l), l + 1, cfg.c << l});
    for (int l = cfg.levels - 2; l >= 0; --l) {
        const int width = (l == 0 && cfg.levels >= 2) ? 2 * cfg.c : cfg.c << l;
        plan.push_back({"dec." + std::to_string(cfg.levels - 2 - l), l + 1, width});
    }
    plan.push_back({"refine", 1, cfg.levels >= 2 ? 2 * cfg.c : cfg.c});
    return plan;
}

template <typename T>
struct Model {
    ModelConfig cfg;
    ParamRegistry<T> params;
    Conv2dLayer<T> head;
    std::vector<Stage<T>> enc;
    std::vector<Conv2dLayer<T>> down;
    std::vector<Conv2dLayer<T>> up;
    std::vector<Conv2dLayer<T>> fuse;  // skip halving, decoder levels >= 2
    std::vector<Stage<T>> dec;
    Stage<T> refine;
    Conv2dLayer<T> tail;

    explicit Model(std::uint64_t seed = 0) : params(seed) {}

    int pad_multiple() const { return 1 << (cfg.levels - 1); }

    Tensor<T> forward(const Tensor<T>& image) const {
        const Shape s = image.shape();
        check(s.c == 3, "model forward expects 3-channel input, got " + s.str());
        check(s.h >= 1 && s.w >= 1, "model forward: empty image " + s.str());
        const int m = pad_multiple();
        const int ph = (m - s.h % m) % m;
        const int pw = (m - s.w % m) % m;
        Tensor<T> x = (ph || pw) ? reflect_pad2d(image, 0, ph, 0, pw) : image;

        Tensor<T> e = head.forward(x);
        std::vector<Tensor<T>> skips;
        for (int l = 0; l < cfg.levels; ++l) {
            e = enc[l].forward(e);
            if (l + 1 < cfg.levels) {
                skips.push_back(e);
                e = down[l].forward(pixel_unshuffle(e, 2));
            }
        }
        Tensor<T> cur = e;
        for (int j = 0; j < cfg.levels - 1; ++j) {
            cur = pixel_shuffle(up[j].forward(cur), 2);
            const int level = cfg.levels - 1 - j;  // 1-based target level
            cur = concat_channels<T>({cur, skips[level - 1]});
            if (level >= 2) cur = fuse[j].forward(cur);
            cur = dec[j].forward(cur);
        }
        cur = refine.forward(cur);
        Tensor<T> out = add(tail.forward(cur), x);
        if (ph || pw) out = crop2d(out, 0, 0, s.h, s.w);
        return out;
    }
};

namespace detail {

template <typename T>
Group<T> make_group(ParamRegistry<T>& reg, const std::string& path, bool freq,
                    const ModelConfig& cfg, int width) {
    Group<T> g;
    if (freq) {
        g.block = make_fssb(reg, path + ".fssb", width, cfg.expand, cfg.state_dim);
    } else {
        g.block = make_ssb(reg, path + ".ssb", width, cfg.expand, cfg.state_dim);
    }
    if (cfg.conv_block == ConvBlockKind::kMgcb) {
        g.conv = make_mgcb(reg, path + ".mgcb", width, cfg.gamma);
    } else {
        g.conv = make_conv_layer(reg, path + ".convlayer", width);
    }
    return g;
}

template <typename T>
Stage<T> make_stage(ParamRegistry<T>& reg, const StageInfo& info, const ModelConfig& cfg) {
    Stage<T> st;
    st.level = info.level;
    st.width = info.width;
    for (int i = 0; i < cfg.n_s; ++i)
        st.groups.push_back(
            make_group(reg, info.name + ".ssg." + std::to_string(i), false, cfg, info.width));
    for (int i = 0; i < cfg.n_f; ++i)
        st.groups.push_back(
            make_group(reg, info.name + ".fssg." + std::to_string(i), true, cfg, info.width));
    return st;
}

}  // namespace detail

template <typename T>
Model<T> build_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Model<T> m(seed);
    m.cfg = cfg;
    auto plan = stage_plan(cfg);
    m.head = make_conv(m.params, "head", 3, cfg.c, 3, true, Pad{Pad::kZero, 1, 1});
    std::size_t pi = 0;
    for (int l = 0; l < cfg.levels; ++l, ++pi)
        m.enc.push_back(detail::make_stage<T>(m.params, plan[pi], cfg));
    for (int l = 0; l + 1 < cfg.levels; ++l) {
        const int w = cfg.c << l;
        m.down.push_back(
            make_conv(m.params, "down." + std::to_string(l), 4 * w, 2 * w, 1, false));
    }
    for (int j = 0; j + 1 < cfg.levels; ++j) {
        const int src = cfg.c << (cfg.levels - 1 - j);  // width entering the upsample
        m.up.push_back(make_conv(m.params, "up." + std::to_string(j), src, 2 * src, 1, false));
        const int level = cfg.levels - 1 - j;
        if (level >= 2) {
            const int w = cfg.c << (level - 1);
            m.fuse.push_back(
                make_conv(m.params, "fuse." + std::to_string(j), 2 * w, w, 1, false));
        }
        m.dec.push_back(detail::make_stage<T>(m.params, plan[pi++], cfg));
    }
    m.refine = detail::make_stage<T>(m.params, plan[pi], cfg);
    const int tail_in = cfg.levels >= 2 ? 2 * cfg.c : cfg.c;
    m.tail = make_conv(m.params, "tail", tail_in, 3, 3, true, Pad{Pad::kZero, 1, 1});
    return m;
}

template <typename T>
std::int64_t count_params(const Model<T>& m) {
    return m.params.count_scalars();
}

// ---------------------------------------------------------------------------
// FLOP accounting (multiply-accumulate convention, n = 1):
//   conv            co*oh*ow*ci*kh*kw
//   depthwise conv  c*h*w*k*k
//   layer norm      7 per element (mean, var, normalize, affine)
//   activations     1 per element
//   selective scan  per direction L*D*(6N + 2): state decay, input mix,
//                   readout, feedthrough
//   FFT             5*HW*log2(HW) per plane and transform
//   channel attn    bottleneck convs + 2 elementwise passes

struct FlopBreakdown {
    std::vector<std::pair<std::string, double>> per_stage;
    double total = 0.0;
};

namespace detail {

inline double conv_flops(int ci, int co, int k, int h, int w) {
    return static_cast<double>(co) * h * w * ci * k * k;
}

inline double fft_flops(int h, int w) {
    const double hw = static_cast<double>(h) * w;
    return 5.0 * hw * std::log2(std::max(2.0, hw));
}

inline double vssm_flops(const ModelConfig& cfg, int width, int h, int w) {
    const int d = cfg.expand * width, n = cfg.state_dim;
    const double hw = static_cast<double>(h) * w;
    double f = conv_flops(width, 2 * d, 1, h, w);  // in_proj
    f += static_cast<double>(d) * hw * 9 + d * hw; // dwconv + silu
    for (int k = 0; k < 4; ++k) {
        f += conv_flops(d, d + 2 * n, 1, h, w);    // x_proj
        f += hw * d * (6.0 * n + 2.0);             // scan cells
        f += hw * d;                               // softplus
    }
    f += 7.0 * d * hw;                             // out layer norm
    f += 2.0 * d * hw;                             // gate silu + product
    f += conv_flops(d, width, 1, h, w);            // out_proj
    return f;
}

inline double fftm_flops(const ModelConfig& cfg, int width, int h, int w) {
    (void)cfg;
    const int half = width / 2;
    const double hw = static_cast<double>(h) * w;
    double f = conv_flops(width, half, 1, h, w) + half * hw;
    f += 2.0 * half * fft_flops(h, w);                     // forward + inverse
    const double bins = static_cast<double>(h) * (w / 2 + 1);
    f += static_cast<double>(width) * bins * width + width * bins;  // freq conv + silu
    f += conv_flops(half, width, 1, h, w);
    return f;
}

inline double ca_flops(int width, int h, int w) {
    const int b = std::max(width / std::min(16, width), 1);
    return static_cast<double>(width) * h * w +  // pool
           static_cast<double>(width) * b * 2 +  // bottleneck convs
           2.0 * width * h * w;                  // sigmoid broadcast + product
}

inline double conv_block_flops(const ModelConfig& cfg, int width, int h, int w) {
    const double hw = static_cast<double>(h) * w;
    if (cfg.conv_block == ConvBlockKind::kConvLayer) {
        return 7.0 * width * hw + 2 * conv_flops(width, width, 3, h, w) + width * hw +
               ca_flops(width, h, w) + 2.0 * width * hw;
    }
    const int g = gated_width(width, cfg.gamma);
    double f = 7.0 * width * hw;                              // ln
    f += conv_flops(width, g, 1, h, w) + g * hw * 9 + g * hw; // gate branch
    f += conv_flops(width, g / 2, 1, h, w) + (g / 2) * hw * 9;
    f += conv_flops(width, g / 2, 1, h, w) + (g / 2) * hw * 25;
    f += g * hw;                                              // gating product
    f += conv_flops(g, width, 1, h, w);
    f += ca_flops(width, h, w) + 2.0 * width * hw;            // CA + skip
    return f;
}

inline double block_flops(const ModelConfig& cfg, bool freq, int width, int h, int w) {
    const double hw = static_cast<double>(h) * w;
    double f = 7.0 * width * hw;  // shared ln
    f += vssm_flops(cfg, width, h, w);
    if (freq) f += fftm_flops(cfg, width, h, w);
    f += 2.0 * width * hw;  // scaled skip
    f += conv_block_flops(cfg, width, h, w);
    return f;
}

}  // namespace detail

inline FlopBreakdown estimate_flops(const ModelConfig& cfg, int h, int w) {
    cfg.validate();
    const int m = 1 << (cfg.levels - 1);
    h += (m - h % m) % m;
    w += (m - w % m) % m;
    FlopBreakdown out;
    auto add_entry = [&](const std::string& name, double f) {
        out.per_stage.emplace_back(name, f);
        out.total += f;
    };
    add_entry("head", detail::conv_flops(3, cfg.c, 3, h, w));
    for (const auto& st : stage_plan(cfg)) {
        const int sh = h >> (st.level - 1), sw = w >> (st.level - 1);
        double f = 0.0;
        for (int i = 0; i < cfg.n_s; ++i) f += detail::block_flops(cfg, false, st.width, sh, sw);
        for (int i = 0; i < cfg.n_f; ++i) f += detail::block_flops(cfg, true, st.width, sh, sw);
        add_entry(st.name, f);
    }
    for (int l = 0; l + 1 < cfg.levels; ++l) {
        const int wth = cfg.c << l;
        add_entry("down." + std::to_string(l),
                  detail::conv_flops(4 * wth, 2 * wth, 1, h >> (l + 1), w >> (l + 1)));
    }
    for (int j = 0; j + 1 < cfg.levels; ++j) {
        const int level = cfg.levels - 1 - j;
        const int src = cfg.c << (cfg.levels - 1 - j);
        add_entry("up." + std::to_string(j),
                  detail::conv_flops(src, 2 * src, 1, h >> level, w >> level));
        if (level >= 2) {
            const int wth = cfg.c << (level - 1);
            add_entry("fuse." + std::to_string(j),
                      detail::conv_flops(2 * wth, wth, 1, h >> (level - 1), w >> (level - 1)));
        }
    }
    const int tail_in = cfg.levels >= 2 ? 2 * cfg.c : cfg.c;
    add_entry("tail", detail::conv_flops(tail_in, 3, 3, h, w));
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic "DFSM", u32 LE version, u32 LE entry count,
// then per entry u32 LE name length, name bytes, u32 LE rank, u32 LE dims,
// raw little-endian float32 payload.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw FormatError("checkpoint truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ParamRegistry<T>& reg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write("DFSM", 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(reg.entries().size()));
    for (const auto& e : reg.entries()) {
        detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::put_u32(out, 4);
        const Shape s = e.tensor.shape();
        for (int d : {s.n, s.c, s.h, s.w}) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (T v : e.tensor.data()) {
            float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            detail::put_u32(out, bits);
        }
    }
    if (!out) throw IoError("short write on checkpoint: " + path);
}

template <typename T>
void load_checkpoint(ParamRegistry<T>& reg, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "DFSM", 4) != 0)
        throw FormatError("not a DFSM checkpoint: " + path);
    const std::uint32_t version = detail::get_u32(in);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t count = detail::get_u32(in);

    std::size_t matched = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const std::uint32_t rank = detail::get_u32(in);
        if (!in || rank != 4) throw FormatError("checkpoint entry with rank != 4: " + name);
        Shape s{};
        s.n = static_cast<int>(detail::get_u32(in));
        s.c = static_cast<int>(detail::get_u32(in));
        s.h = static_cast<int>(detail::get_u32(in));
        s.w = static_cast<int>(detail::get_u32(in));
        std::vector<float> payload(static_cast<std::size_t>(s.numel()));
        for (auto& f : payload) {
            std::uint32_t bits = detail::get_u32(in);
            std::memcpy(&f, &bits, 4);
        }
        const ParamEntry<T>* entry = reg.find(name);
        if (!entry)
            throw StateError("checkpoint parameter '" + name + "' does not exist in the model");
        if (!(entry->tensor.shape() == s))
            throw StateError("checkpoint/config mismatch at parameter '" + name + "': file has " +
                             s.str() + ", model expects " + entry->tensor.shape().str());
        auto& dst = const_cast<ParamEntry<T>*>(entry)->tensor.data();
        for (std::size_t k = 0; k < payload.size(); ++k) dst[k] = static_cast<T>(payload[k]);
        ++matched;
    }
    if (matched != reg.entries().size()) {
        // identify the first missing parameter for the error message
        std::ifstream again(path, std::ios::binary);
        again.seekg(12);
        std::vector<std::string> names;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint32_t name_len = detail::get_u32(again);
            std::string name(name_len, '\0');
            again.read(name.data(), name_len);
            detail::get_u32(again);  // rank
            std::int64_t numel = 1;
            for (int d = 0; d < 4; ++d) numel *= detail::get_u32(again);
            again.seekg(numel * 4, std::ios::cur);
            names.push_back(name);
        }
        for (const auto& e : reg.entries()) {
            if (std::find(names.begin(), names.end(), e.name) == names.end())
                throw StateError("checkpoint is missing parameter '" + e.name + "'");
        }
    }
}

}  // namespace dfssm
