#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "dfssm/ops.hpp"
#include "dfssm/rng.hpp"

namespace dfssm {

// Named, ordered parameter store. Names encode the module path
// ("enc.0.ssg.0.ssb.scale") and are the checkpoint key space. Each parameter
// is initialized from a stream derived from (seed, name), so initialization
// is independent of construction order.
template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    bool decay = true;  // weight decay applies only to true entries
};

template <typename T>
class ParamRegistry {
public:
    explicit ParamRegistry(std::uint64_t seed = 0) : seed_(seed) {}

    Tensor<T> add(const std::string& name, Tensor<T> tensor, bool decay) {
        if (by_name_.count(name))
            throw ConfigError("duplicate parameter name: " + name);
        tensor.node()->requires_grad = true;
        by_name_[name] = entries_.size();
        entries_.push_back(ParamEntry<T>{name, tensor, decay});
        return tensor;
    }

    Rng stream(const std::string& name) const { return named_stream(seed_, "init." + name); }

    const std::vector<ParamEntry<T>>& entries() const { return entries_; }
    std::vector<ParamEntry<T>>& entries() { return entries_; }

    const ParamEntry<T>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : &entries_[it->second];
    }

    std::int64_t count_scalars() const {
        std::int64_t total = 0;
        for (const auto& e : entries_) total += e.tensor.numel();
        return total;
    }

    void zero_grads() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_ = 0;
    std::vector<ParamEntry<T>> entries_;
    std::unordered_map<std::string, std::size_t> by_name_;
};

// ---------------------------------------------------------------------------
// Layer building blocks shared by every module.

template <typename T>
struct Conv2dLayer {
    Tensor<T> w;
    Tensor<T> b;
    bool has_bias = false;
    int stride = 1;
    Pad pad;

    Tensor<T> forward(const Tensor<T>& x) const {
        return conv2d<T>(x, w, has_bias ? &b : nullptr, stride, pad);
    }
};

// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero bias.
template <typename T>
Conv2dLayer<T> make_conv(ParamRegistry<T>& reg, const std::string& path, int ci, int co, int k,
                         bool bias, Pad pad = {}) {
    Conv2dLayer<T> layer;
    layer.stride = 1;
    layer.pad = pad;
    layer.has_bias = bias;
    Rng rng = reg.stream(path + ".weight");
    const double bound = 1.0 / std::sqrt(static_cast<double>(ci) * k * k);
    Tensor<T> w = Tensor<T>::zeros({co, ci, k, k});
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    layer.w = reg.add(path + ".weight", w, true);
    if (bias) layer.b = reg.add(path + ".bias", Tensor<T>::zeros({1, 1, 1, co}), false);
    return layer;
}

template <typename T>
struct DwConv2dLayer {
    Tensor<T> w;
    Tensor<T> b;
    bool has_bias = false;

    Tensor<T> forward(const Tensor<T>& x) const {
        return dwconv2d<T>(x, w, has_bias ? &b : nullptr);
    }
};

template <typename T>
DwConv2dLayer<T> make_dwconv(ParamRegistry<T>& reg, const std::string& path, int c, int k,
                             bool bias) {
    DwConv2dLayer<T> layer;
    layer.has_bias = bias;
    Rng rng = reg.stream(path + ".weight");
    const double bound = 1.0 / std::sqrt(static_cast<double>(k) * k);
    Tensor<T> w = Tensor<T>::zeros({c, 1, k, k});
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    layer.w = reg.add(path + ".weight", w, true);
    if (bias) layer.b = reg.add(path + ".bias", Tensor<T>::zeros({1, 1, 1, c}), false);
    return layer;
}

template <typename T>
struct LayerNormLayer {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps = static_cast<T>(1e-6);

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm<T>(x, gamma, beta, eps); }
};

template <typename T>
LayerNormLayer<T> make_layer_norm(ParamRegistry<T>& reg, const std::string& path, int c) {
    LayerNormLayer<T> ln;
    ln.gamma = reg.add(path + ".gamma", Tensor<T>::full({1, c, 1, 1}, T(1)), false);
    ln.beta = reg.add(path + ".beta", Tensor<T>::zeros({1, c, 1, 1}), false);
    return ln;
}

// Per-channel learnable skip scale, init 1.
template <typename T>
Tensor<T> make_skip_scale(ParamRegistry<T>& reg, const std::string& path, int c) {
    return reg.add(path, Tensor<T>::full({1, c, 1, 1}, T(1)), false);
}

}  // namespace dfssm
