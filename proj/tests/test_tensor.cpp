#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "dfssm/gradcheck.hpp"
#include "dfssm/ops.hpp"

using namespace dfssm;

namespace {

template <typename T>
Tensor<T> make_filled(Shape s, std::vector<T> v, bool rg = false) {
    return Tensor<T>::from(s, std::move(v), rg);
}

}  // namespace

TEST_CASE("conv2d box sum of ones") {
    auto x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    auto y = conv2d<float>(x, w, nullptr, 1, Pad{Pad::kZero, 1, 1});
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.at(0, 0, 1, 1) == doctest::Approx(9.0f));
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(4.0f));
    CHECK(y.at(0, 0, 2, 2) == doctest::Approx(4.0f));
    CHECK(y.at(0, 0, 0, 2) == doctest::Approx(4.0f));
}

TEST_CASE("conv2d identity kernel") {
    Rng rng(11);
    auto x = random_tensor<float>({2, 3, 5, 7}, rng);
    auto w = Tensor<float>::zeros({3, 3, 3, 3});
    for (int c = 0; c < 3; ++c) w.data()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0f;
    auto y = conv2d<float>(x, w, nullptr, 1, Pad{Pad::kZero, 1, 1});
    for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));
}

TEST_CASE("conv2d gradients vs finite differences") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        // 64-bit
        {
            Rng rng(seed);
            auto x = random_tensor<double>({2, 4, 8, 8}, rng, 1.0, true);
            auto w = random_tensor<double>({8, 4, 3, 3}, rng, 0.3, true);
            auto b = random_tensor<double>({1, 1, 1, 8}, rng, 0.1, true);
            auto f = [&] {
                return weighted_probe(conv2d<double>(x, w, &b, 1, Pad{Pad::kZero, 1, 1}), seed);
            };
            auto res = gradcheck<double>(f, {x, w, b}, 1e-6, 1e-6);
            INFO("seed ", seed, " worst ", res.worst_rel, " at ", res.where);
            CHECK(res.worst_rel <= 1e-6);
        }
        // 32-bit
        {
            Rng rng(seed);
            auto x = random_tensor<float>({2, 4, 8, 8}, rng, 1.0, true);
            auto w = random_tensor<float>({8, 4, 3, 3}, rng, 0.3, true);
            auto b = random_tensor<float>({1, 1, 1, 8}, rng, 0.1, true);
            auto f = [&] {
                return weighted_probe(conv2d<float>(x, w, &b, 1, Pad{Pad::kZero, 1, 1}), seed);
            };
            auto res = gradcheck<float>(f, {x, w, b}, 1e-3, 1e-3);
            INFO("seed ", seed, " worst ", res.worst_rel, " at ", res.where);
            CHECK(res.worst_rel <= 1e-3);
        }
    }
}

TEST_CASE("conv2d strided and reflect-padded gradcheck") {
    Rng rng(5);
    auto x = random_tensor<double>({1, 2, 7, 7}, rng, 1.0, true);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng, 0.3, true);
    auto f1 = [&] { return weighted_probe(conv2d<double>(x, w, nullptr, 2, Pad{Pad::kZero, 1, 1}), 7); };
    CHECK(gradcheck<double>(f1, {x, w}, 1e-6, 1e-6).worst_rel <= 1e-6);
    auto f2 = [&] {
        return weighted_probe(conv2d<double>(x, w, nullptr, 1, Pad{Pad::kReflect, 1, 1}), 9);
    };
    CHECK(gradcheck<double>(f2, {x, w}, 1e-6, 1e-6).worst_rel <= 1e-6);
}

TEST_CASE("conv2d shape error") {
    auto x = Tensor<float>::zeros({1, 2, 4, 4});
    auto w = Tensor<float>::zeros({1, 3, 3, 3});
    CHECK_THROWS_AS(conv2d<float>(x, w, nullptr, 1, Pad{Pad::kZero, 1, 1}), ShapeError);
}

TEST_CASE("dwconv2d identity and zero-channel kernels") {
    Rng rng(3);
    auto x = random_tensor<float>({1, 3, 6, 6}, rng);
    auto w = Tensor<float>::zeros({3, 1, 3, 3});
    for (int c = 1; c < 3; ++c) w.data()[(c * 9) + 4] = 1.0f;  // channel 0 stays all-zero
    auto y = dwconv2d<float>(x, w, nullptr);
    for (int p = 0; p < 36; ++p) CHECK(y.data()[p] == 0.0f);
    for (int c = 1; c < 3; ++c)
        for (int p = 0; p < 36; ++p)
            CHECK(y.data()[c * 36 + p] == doctest::Approx(x.data()[c * 36 + p]));
}

TEST_CASE("dwconv2d equals grouped conv2d") {
    Rng rng(17);
    auto x = random_tensor<float>({1, 3, 6, 6}, rng);
    auto w = random_tensor<float>({3, 1, 3, 3}, rng);
    auto b = random_tensor<float>({1, 1, 1, 3}, rng);
    auto y = dwconv2d<float>(x, w, &b);
    // block-diagonal full kernel
    auto wf = Tensor<float>::zeros({3, 3, 3, 3});
    for (int c = 0; c < 3; ++c)
        for (int k = 0; k < 9; ++k) wf.data()[((c * 3 + c) * 9) + k] = w.data()[c * 9 + k];
    auto yf = conv2d<float>(x, wf, &b, 1, Pad{Pad::kZero, 1, 1});
    for (std::size_t i = 0; i < y.data().size(); ++i)
        CHECK(std::abs(y.data()[i] - yf.data()[i]) < 1e-6f);
}

TEST_CASE("dwconv2d gradcheck") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        auto x = random_tensor<double>({2, 3, 5, 5}, rng, 1.0, true);
        auto w = random_tensor<double>({3, 1, 5, 5}, rng, 0.3, true);
        auto b = random_tensor<double>({1, 1, 1, 3}, rng, 0.1, true);
        auto f = [&] { return weighted_probe(dwconv2d<double>(x, w, &b), seed); };
        CHECK(gradcheck<double>(f, {x, w, b}, 1e-6, 1e-6).worst_rel <= 1e-6);
    }
}

TEST_CASE("layer_norm basic values") {
    auto g1 = Tensor<float>::full({1, 2, 1, 1}, 1.0f);
    auto b0 = Tensor<float>::zeros({1, 2, 1, 1});
    auto x = make_filled<float>({1, 2, 1, 1}, {1.0f, 3.0f});
    auto y = layer_norm<float>(x, g1, b0, 1e-6f);
    CHECK(y.data()[0] == doctest::Approx(-1.0f).epsilon(1e-4));
    CHECK(y.data()[1] == doctest::Approx(1.0f).epsilon(1e-4));

    auto xc = Tensor<float>::full({2, 4, 3, 3}, 2.5f);
    auto g4 = Tensor<float>::full({1, 4, 1, 1}, 1.0f);
    auto b4 = Tensor<float>::zeros({1, 4, 1, 1});
    auto yc = layer_norm<float>(xc, g4, b4, 1e-6f);
    for (float v : yc.data()) CHECK(v == 0.0f);
}

TEST_CASE("layer_norm gradcheck") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        auto x = random_tensor<float>({2, 8, 4, 4}, rng, 1.0, true);
        auto g = uniform_tensor<float>({1, 8, 1, 1}, rng, 0.5, 1.5, true);
        auto b = random_tensor<float>({1, 8, 1, 1}, rng, 0.2, true);
        auto f = [&] { return weighted_probe(layer_norm<float>(x, g, b, 1e-6f), seed); };
        auto res = gradcheck<float>(f, {x, g, b}, 1e-3, 1e-3);
        INFO("worst ", res.worst_rel, " at ", res.where);
        CHECK(res.worst_rel <= 1e-3);

        Rng rng2(seed);
        auto xd = random_tensor<double>({2, 8, 4, 4}, rng2, 1.0, true);
        auto gd = uniform_tensor<double>({1, 8, 1, 1}, rng2, 0.5, 1.5, true);
        auto bd = random_tensor<double>({1, 8, 1, 1}, rng2, 0.2, true);
        auto fd = [&] { return weighted_probe(layer_norm<double>(xd, gd, bd, 1e-6), seed); };
        CHECK(gradcheck<double>(fd, {xd, gd, bd}, 1e-6, 1e-6).worst_rel <= 1e-5);
    }
}

TEST_CASE("layer_norm zero channels rejected") {
    auto x = Tensor<float>::zeros({1, 0, 2, 2});
    auto g = Tensor<float>::zeros({1, 1, 1, 1});
    CHECK_THROWS_AS(layer_norm<float>(x, g, g, 1e-6f), ShapeError);
}

TEST_CASE("activation fixed points and silu identity") {
    auto x0 = Tensor<float>::zeros({1, 1, 1, 1});
    CHECK(silu(x0).item() == 0.0f);
    CHECK(sigmoid(x0).item() == doctest::Approx(0.5f));
    CHECK(gelu(x0).item() == 0.0f);
    CHECK(relu(x0).item() == 0.0f);

    Rng rng(23);
    auto x = random_tensor<float>({2, 3, 4, 4}, rng, 2.0);
    auto a = silu(x);
    auto b = mul(x, sigmoid(x));
    for (std::size_t i = 0; i < a.data().size(); ++i)
        CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-7f);
}

TEST_CASE("activation gradchecks") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        for (Act kind : {Act::kSilu, Act::kGelu, Act::kSigmoid, Act::kRelu}) {
            Rng rng(seed);
            auto x = random_tensor<double>({1, 2, 4, 4}, rng, 1.5, true);
            // keep ReLU probes away from the kink
            if (kind == Act::kRelu)
                for (auto& v : x.data())
                    if (std::abs(v) < 1e-2) v += 0.05;
            auto f = [&] { return weighted_probe(activation(x, kind), seed); };
            auto res = gradcheck<double>(f, {x}, 1e-6, 1e-6);
            INFO("kind ", static_cast<int>(kind), " worst ", res.worst_rel);
            CHECK(res.worst_rel <= 1e-6);
        }
    }
}

TEST_CASE("softplus exp abs gradchecks") {
    Rng rng(31);
    auto x = random_tensor<double>({1, 2, 3, 3}, rng, 1.0, true);
    for (auto& v : x.data())
        if (std::abs(v) < 1e-2) v += 0.05;
    auto f1 = [&] { return weighted_probe(softplus(x), 1); };
    CHECK(gradcheck<double>(f1, {x}, 1e-6, 1e-6).worst_rel <= 1e-6);
    auto f2 = [&] { return weighted_probe(dfssm::exp(x), 2); };
    CHECK(gradcheck<double>(f2, {x}, 1e-6, 1e-6).worst_rel <= 1e-6);
    auto f3 = [&] { return weighted_probe(dfssm::abs(x), 3); };
    CHECK(gradcheck<double>(f3, {x}, 1e-6, 1e-6).worst_rel <= 1e-6);
}

TEST_CASE("broadcast mul/add gradcheck") {
    Rng rng(41);
    auto x = random_tensor<double>({2, 3, 4, 4}, rng, 1.0, true);
    auto s = random_tensor<double>({1, 3, 1, 1}, rng, 1.0, true);
    auto g = random_tensor<double>({2, 3, 1, 1}, rng, 1.0, true);
    auto f1 = [&] { return weighted_probe(mul(x, s), 1); };
    CHECK(gradcheck<double>(f1, {x, s}, 1e-6, 1e-6).worst_rel <= 1e-6);
    auto f2 = [&] { return weighted_probe(add(x, g), 2); };
    CHECK(gradcheck<double>(f2, {x, g}, 1e-6, 1e-6).worst_rel <= 1e-6);
    auto f3 = [&] { return weighted_probe(sub(x, s), 3); };
    CHECK(gradcheck<double>(f3, {x, s}, 1e-6, 1e-6).worst_rel <= 1e-6);
}

TEST_CASE("pixel unshuffle ordering and inverse pair") {
    auto x = make_filled<float>({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = pixel_unshuffle(x, 2);
    CHECK(y.shape() == Shape{1, 4, 1, 1});
    CHECK(y.data()[0] == 1.0f);
    CHECK(y.data()[1] == 2.0f);
    CHECK(y.data()[2] == 3.0f);
    CHECK(y.data()[3] == 4.0f);

    Rng rng(51);
    auto z = random_tensor<float>({2, 3, 8, 8}, rng);
    auto u = pixel_unshuffle(z, 2);
    CHECK(u.shape() == Shape{2, 12, 4, 4});
    auto back = pixel_shuffle(u, 2);
    CHECK(std::memcmp(back.data().data(), z.data().data(), z.data().size() * sizeof(float)) == 0);

    auto odd = Tensor<float>::zeros({1, 1, 3, 4});
    CHECK_THROWS_AS(pixel_unshuffle(odd, 2), ShapeError);
}

TEST_CASE("pixel shuffle gradcheck") {
    Rng rng(52);
    auto x = random_tensor<double>({1, 8, 3, 3}, rng, 1.0, true);
    auto f = [&] { return weighted_probe(pixel_shuffle(x, 2), 4); };
    CHECK(gradcheck<double>(f, {x}, 1e-6, 1e-6).worst_rel <= 1e-6);
    auto g = [&] { return weighted_probe(pixel_unshuffle(x, 3), 5); };
    CHECK(gradcheck<double>(g, {x}, 1e-6, 1e-6).worst_rel <= 1e-6);
}

TEST_CASE("global_avg_pool values and gradient") {
    auto c = Tensor<float>::full({1, 2, 3, 3}, 7.5f);
    auto y = global_avg_pool(c);
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(7.5f));
    CHECK(y.at(0, 1, 0, 0) == doctest::Approx(7.5f));

    auto x = make_filled<float>({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(global_avg_pool(x).item() == doctest::Approx(2.5f));

    auto xd = make_filled<double>({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    auto loss = sum_all(global_avg_pool(xd));
    backward(loss);
    for (double v : xd.grad()) CHECK(v == doctest::Approx(0.25));

    Rng rng(61);
    auto xr = random_tensor<double>({2, 3, 4, 5}, rng, 1.0, true);
    auto f = [&] { return weighted_probe(global_avg_pool(xr), 6); };
    CHECK(gradcheck<double>(f, {xr}, 1e-6, 1e-6).worst_rel <= 1e-6);
}

TEST_CASE("backward populates gradients and accumulates") {
    Rng rng(71);
    auto x = random_tensor<float>({1, 2, 3, 3}, rng, 1.0, true);
    auto loss = sum_all(x);
    backward(loss);
    for (float v : x.grad()) CHECK(v == 1.0f);

    x.zero_grad();
    auto loss2 = sum_all(mul(x, x));
    backward(loss2);
    for (std::size_t i = 0; i < x.data().size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(2.0f * x.data()[i]));

    // repeated calls accumulate
    backward(loss2);
    for (std::size_t i = 0; i < x.data().size(); ++i)
        CHECK(x.grad()[i] == doctest::Approx(4.0f * x.data()[i]));

    auto vec = Tensor<float>::zeros({1, 1, 1, 3}, true);
    CHECK_THROWS_AS(backward(vec), UsageError);
}

TEST_CASE("small composite gradcheck") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        auto x = random_tensor<double>({1, 3, 6, 6}, rng, 1.0, true);
        auto w = random_tensor<double>({4, 3, 3, 3}, rng, 0.3, true);
        auto g = uniform_tensor<double>({1, 4, 1, 1}, rng, 0.5, 1.5, true);
        auto b = random_tensor<double>({1, 4, 1, 1}, rng, 0.2, true);
        auto sc = uniform_tensor<double>({1, 4, 1, 1}, rng, 0.5, 1.5, true);
        auto f = [&] {
            auto h = conv2d<double>(x, w, nullptr, 1, Pad{Pad::kZero, 1, 1});
            h = layer_norm<double>(h, g, b, 1e-6);
            h = silu(h);
            auto gated = mul(h, sigmoid(global_avg_pool(h)));
            return weighted_probe(add(gated, mul(h, sc)), seed);
        };
        auto res = gradcheck<double>(f, {x, w, g, b, sc}, 1e-6, 1e-6);
        INFO("worst ", res.worst_rel, " at ", res.where);
        CHECK(res.worst_rel <= 1e-5);
    }
}

TEST_CASE("reflect pad and crop") {
    auto x = make_filled<float>({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
    auto y = reflect_pad2d(x, 1, 1, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 4, 5});
    // top-left corner reflects row 1 / col 1
    CHECK(y.at(0, 0, 0, 0) == 5.0f);
    CHECK(y.at(0, 0, 1, 1) == 1.0f);
    auto back = crop2d(y, 1, 1, 2, 3);
    for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(back.data()[i] == x.data()[i]);

    Rng rng(81);
    auto xr = random_tensor<double>({1, 2, 4, 4}, rng, 1.0, true);
    auto f = [&] { return weighted_probe(crop2d(reflect_pad2d(xr, 2, 1, 1, 2), 1, 0, 4, 5), 8); };
    CHECK(gradcheck<double>(f, {xr}, 1e-6, 1e-6).worst_rel <= 1e-6);
}

TEST_CASE("concat slice modulus gradcheck") {
    Rng rng(91);
    auto a = random_tensor<double>({1, 2, 3, 3}, rng, 1.0, true);
    auto b = random_tensor<double>({1, 3, 3, 3}, rng, 1.0, true);
    auto f = [&] {
        auto cat = concat_channels<double>({a, b});
        return weighted_probe(slice_channels(cat, 1, 4), 9);
    };
    CHECK(gradcheck<double>(f, {a, b}, 1e-6, 1e-6).worst_rel <= 1e-6);

    auto z = random_tensor<double>({1, 4, 3, 3}, rng, 1.0, true);
    auto fm = [&] { return weighted_probe(complex_modulus(z), 10); };
    CHECK(gradcheck<double>(fm, {z}, 1e-6, 1e-6).worst_rel <= 1e-6);
}

TEST_CASE("determinism of op outputs") {
    auto run = [] {
        Rng rng(123);
        auto x = random_tensor<float>({2, 4, 9, 9}, rng);
        auto w = random_tensor<float>({6, 4, 3, 3}, rng);
        auto y = conv2d<float>(x, w, nullptr, 1, Pad{Pad::kZero, 1, 1});
        auto z = silu(layer_norm<float>(y, Tensor<float>::full({1, 6, 1, 1}, 1.0f),
                                        Tensor<float>::zeros({1, 6, 1, 1}), 1e-6f));
        return z.data();
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(float)) == 0);
}

TEST_CASE("checked mode flags non-finite values") {
    CheckedGuard guard;
    auto x = Tensor<float>::full({1, 1, 1, 1}, 1e30f);
    auto y = Tensor<float>::full({1, 1, 1, 1}, 1e30f);
    CHECK_THROWS_AS(mul(mul(x, y), mul(x, y)), NumericError);
}

TEST_CASE("shape algebra over random valid shapes") {
    Rng rng(555);
    for (int trial = 0; trial < 40; ++trial) {
        int n = static_cast<int>(rng.range(1, 3));
        int c = static_cast<int>(rng.range(1, 6));
        int h = static_cast<int>(rng.range(3, 14));
        int w = static_cast<int>(rng.range(3, 14));
        int co = static_cast<int>(rng.range(1, 6));
        int k = 2 * static_cast<int>(rng.range(0, 2)) + 1;  // 1,3,5
        int stride = static_cast<int>(rng.range(1, 2));
        int p = static_cast<int>(rng.range(0, 2));
        if (h + 2 * p < k || w + 2 * p < k) continue;
        auto x = Tensor<float>::zeros({n, c, h, w});
        auto wk = Tensor<float>::zeros({co, c, k, k});
        auto y = conv2d<float>(x, wk, nullptr, stride, Pad{Pad::kZero, p, p});
        CHECK(y.shape().h == (h + 2 * p - k) / stride + 1);
        CHECK(y.shape().w == (w + 2 * p - k) / stride + 1);
        CHECK(y.shape().c == co);
        CHECK(y.shape().n == n);

        int r = static_cast<int>(rng.range(1, 3));
        auto xs = Tensor<float>::zeros({n, c, h * r, w * r});
        auto us = pixel_unshuffle(xs, r);
        CHECK(us.shape() == Shape{n, c * r * r, h, w});
        CHECK(pixel_shuffle(us, r).shape() == xs.shape());

        CHECK(global_avg_pool(x).shape() == Shape{n, c, 1, 1});
    }
}
