#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "dfssm/blocks.hpp"
#include "dfssm/gradcheck.hpp"

using namespace dfssm;

namespace {

template <typename T>
void zero_all(Tensor<T>& t) {
    std::fill(t.data().begin(), t.data().end(), T(0));
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(T)) == 0;
}

template <typename T>
std::vector<Tensor<T>> all_params(ParamRegistry<T>& reg) {
    std::vector<Tensor<T>> out;
    for (auto& e : reg.entries()) out.push_back(e.tensor);
    return out;
}

}  // namespace

TEST_CASE("ssb residual identity and scale ablation") {
    ParamRegistry<float> reg(3);
    auto ssb = make_ssb(reg, "ssb", 8, 2, 4);
    Rng rng(4);
    auto x = random_tensor<float>({1, 8, 6, 6}, rng);

    zero_all(ssb.vssm.out_proj.w);
    auto y = ssb.forward(x);
    CHECK(bitwise_equal(y, x));  // zero VSSM projection, s = 1

    // s = 0 leaves exactly the VSSM branch
    ParamRegistry<float> reg2(3);
    auto ssb2 = make_ssb(reg2, "ssb", 8, 2, 4);
    zero_all(ssb2.scale);
    auto direct = ssb2.vssm.forward(ssb2.ln.forward(x));
    auto y2 = ssb2.forward(x);
    CHECK(bitwise_equal(y2, direct));
}

TEST_CASE("ssb shape preservation") {
    ParamRegistry<float> reg(5);
    auto ssb = make_ssb(reg, "ssb", 16, 2, 4);
    Rng rng(6);
    auto x = random_tensor<float>({1, 16, 8, 8}, rng);
    CHECK(ssb.forward(x).shape() == Shape{1, 16, 8, 8});
}

TEST_CASE("fftm channel arithmetic") {
    ParamRegistry<float> reg(7);
    auto f = make_fftm(reg, "fftm", 32);
    CHECK(f.conv_in.w.shape() == Shape{16, 32, 1, 1});
    CHECK(f.conv_freq.w.shape() == Shape{32, 32, 1, 1});
    CHECK(f.conv_out.w.shape() == Shape{32, 16, 1, 1});
    Rng rng(8);
    auto x = random_tensor<float>({1, 32, 8, 8}, rng);
    CHECK(f.forward(x).shape() == Shape{1, 32, 8, 8});

    CHECK_THROWS_AS(make_fftm(reg, "fftm_odd", 7), ConfigError);
}

TEST_CASE("fftm zero input with zero biases") {
    ParamRegistry<float> reg(9);
    auto f = make_fftm(reg, "fftm", 8);
    auto y = f.forward(Tensor<float>::zeros({1, 8, 6, 6}));
    for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("fftm gradcheck through the FFT round trip") {
    ParamRegistry<double> reg(10);
    auto f = make_fftm(reg, "fftm", 4);
    Rng rng(11);
    auto x = random_tensor<double>({1, 4, 8, 8}, rng, 1.0, true);
    auto inputs = all_params(reg);
    inputs.push_back(x);
    auto fn = [&] { return weighted_probe(f.forward(x), 5); };
    auto res = gradcheck<double>(fn, inputs, 1e-6, 1e-6);
    INFO("worst ", res.worst_rel, " at ", res.where);
    CHECK(res.worst_rel <= 1e-4);
}

TEST_CASE("fssb with zeroed FFTM equals ssb bitwise") {
    ParamRegistry<float> reg(12);
    auto fssb = make_fssb(reg, "b", 8, 2, 4);
    zero_all(fssb.fftm.conv_out.w);
    zero_all(fssb.fftm.conv_out.b);

    // independent SSB carrying identical ln/vssm/scale weights
    ParamRegistry<float> reg2(99);
    auto ssb = make_ssb(reg2, "s", 8, 2, 4);
    for (auto& e : reg2.entries()) {
        std::string tail = e.name.substr(2);  // drop "s."
        const auto* src = reg.find("b." + tail);
        REQUIRE(src != nullptr);
        e.tensor.data() = src->tensor.data();
    }

    Rng rng(13);
    auto x = random_tensor<float>({1, 8, 6, 6}, rng);
    CHECK(bitwise_equal(fssb.forward(x), ssb.forward(x)));
}

TEST_CASE("fssb with zeroed VSSM and scale leaves the FFTM branch") {
    ParamRegistry<float> reg(14);
    auto fssb = make_fssb(reg, "b", 8, 2, 4);
    zero_all(fssb.vssm.out_proj.w);
    zero_all(fssb.scale);
    Rng rng(15);
    auto x = random_tensor<float>({2, 8, 16, 16}, rng);
    auto direct = fssb.fftm.forward(fssb.ln.forward(x));
    auto y = fssb.forward(x);
    CHECK(y.shape() == Shape{2, 8, 16, 16});
    for (std::size_t i = 0; i < y.data().size(); ++i)
        CHECK(y.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-6));
}

TEST_CASE("channel attention basics") {
    ParamRegistry<float> reg(16);
    auto ca = make_channel_attention(reg, "ca", 8);
    auto zero = ca.forward(Tensor<float>::zeros({1, 8, 4, 4}));
    for (float v : zero.data()) CHECK(v == 0.0f);

    // attention weights lie in (0,1): positive input maps to (0, x)
    Rng rng(17);
    auto x = uniform_tensor<float>({1, 8, 4, 4}, rng, 0.5, 1.5);
    auto y = ca.forward(x);
    for (std::size_t i = 0; i < y.data().size(); ++i) {
        CHECK(y.data()[i] > 0.0f);
        CHECK(y.data()[i] < x.data()[i]);
    }

    ParamRegistry<double> regd(16);
    auto cad = make_channel_attention(regd, "ca", 8);
    auto xd = random_tensor<double>({1, 8, 4, 4}, rng, 1.0, true);
    auto inputs = all_params(regd);
    inputs.push_back(xd);
    auto fn = [&] { return weighted_probe(cad.forward(xd), 6); };
    CHECK(gradcheck<double>(fn, inputs, 1e-6, 1e-6).worst_rel <= 1e-5);
}

TEST_CASE("mgcb channel arithmetic") {
    ParamRegistry<float> reg(18);
    auto b = make_mgcb(reg, "m", 32, 2.0);
    CHECK(b.gate_proj.w.shape() == Shape{64, 32, 1, 1});
    CHECK(b.b3_proj.w.shape() == Shape{32, 32, 1, 1});
    CHECK(b.b5_proj.w.shape() == Shape{32, 32, 1, 1});
    CHECK(b.fuse.w.shape() == Shape{32, 64, 1, 1});
    Rng rng(19);
    auto x = random_tensor<float>({1, 32, 8, 8}, rng);
    CHECK(b.forward(x).shape() == Shape{1, 32, 8, 8});

    CHECK_THROWS_AS(gated_width(5, 1.5), ConfigError);
}

TEST_CASE("mgcb zeroed gate leaves the scaled skip") {
    ParamRegistry<float> reg(20);
    auto b = make_mgcb(reg, "m", 8, 2.0);
    zero_all(b.gate_proj.w);
    zero_all(b.gate_proj.b);
    zero_all(b.gate_dw.b);
    Rng rng(21);
    auto x = random_tensor<float>({1, 8, 6, 6}, rng);
    auto expected = mul(x, b.scale);
    CHECK(bitwise_equal(b.forward(x), expected));
}

TEST_CASE("mgcb gating bilinearity witness") {
    ParamRegistry<float> reg(22);
    auto b = make_mgcb(reg, "m", 8, 2.0);
    Rng rng(23);
    auto x = random_tensor<float>({1, 8, 6, 6}, rng);
    auto p1 = b.gated_product(x);

    // alpha = 0 annihilates the product
    auto saved3w = b.b3_proj.w.data();
    auto saved3b = b.b3_proj.b.data();
    auto saved5w = b.b5_proj.w.data();
    auto saved5b = b.b5_proj.b.data();
    zero_all(b.b3_proj.w);
    zero_all(b.b3_proj.b);
    zero_all(b.b3_dw.b);
    zero_all(b.b5_proj.w);
    zero_all(b.b5_proj.b);
    zero_all(b.b5_dw.b);
    auto p0 = b.gated_product(x);
    for (float v : p0.data()) CHECK(v == 0.0f);

    // alpha = 2: doubling the branch outputs doubles the product bitwise
    b.b3_proj.w.data() = saved3w;
    b.b3_proj.b.data() = saved3b;
    b.b5_proj.w.data() = saved5w;
    b.b5_proj.b.data() = saved5b;
    for (auto* t : {&b.b3_proj.w, &b.b3_proj.b, &b.b5_proj.w, &b.b5_proj.b})
        for (auto& v : t->data()) v *= 2.0f;
    auto p2 = b.gated_product(x);
    for (std::size_t i = 0; i < p1.data().size(); ++i)
        CHECK(p2.data()[i] == 2.0f * p1.data()[i]);
}

TEST_CASE("mgcb gradcheck at 64-bit") {
    ParamRegistry<double> reg(24);
    auto b = make_mgcb(reg, "m", 4, 2.0);
    Rng rng(25);
    auto x = random_tensor<double>({1, 4, 6, 6}, rng, 1.0, true);
    auto inputs = all_params(reg);
    inputs.push_back(x);
    auto fn = [&] { return weighted_probe(b.forward(x), 7); };
    auto res = gradcheck<double>(fn, inputs, 1e-6, 1e-6);
    INFO("worst ", res.worst_rel, " at ", res.where);
    CHECK(res.worst_rel <= 1e-4);
}

TEST_CASE("conv layer baseline") {
    ParamRegistry<float> reg(26);
    auto b = make_conv_layer(reg, "cl", 8);
    Rng rng(27);
    auto x = random_tensor<float>({2, 8, 8, 8}, rng);
    CHECK(b.forward(x).shape() == Shape{2, 8, 8, 8});

    zero_all(b.conv1.w);
    zero_all(b.conv1.b);
    zero_all(b.conv2.w);
    zero_all(b.conv2.b);
    auto expected = mul(x, b.scale);
    CHECK(bitwise_equal(b.forward(x), expected));

    ParamRegistry<double> regd(28);
    auto bd = make_conv_layer(regd, "cl", 4);
    auto xd = random_tensor<double>({1, 4, 5, 5}, rng, 1.0, true);
    auto inputs = all_params(regd);
    inputs.push_back(xd);
    auto fn = [&] { return weighted_probe(bd.forward(xd), 8); };
    CHECK(gradcheck<double>(fn, inputs, 1e-6, 1e-6).worst_rel <= 1e-4);
}

TEST_CASE("ssb fssb gradchecks at 64-bit") {
    {
        ParamRegistry<double> reg(30);
        auto ssb = make_ssb(reg, "ssb", 4, 2, 2);
        Rng rng(31);
        auto x = random_tensor<double>({1, 4, 4, 4}, rng, 1.0, true);
        auto inputs = all_params(reg);
        inputs.push_back(x);
        auto fn = [&] { return weighted_probe(ssb.forward(x), 9); };
        auto res = gradcheck<double>(fn, inputs, 1e-6, 1e-6);
        INFO("ssb worst ", res.worst_rel, " at ", res.where);
        CHECK(res.worst_rel <= 1e-4);
    }
    {
        ParamRegistry<double> reg(32);
        auto fssb = make_fssb(reg, "fssb", 4, 2, 2);
        Rng rng(33);
        auto x = random_tensor<double>({1, 4, 4, 4}, rng, 1.0, true);
        auto inputs = all_params(reg);
        inputs.push_back(x);
        auto fn = [&] { return weighted_probe(fssb.forward(x), 10); };
        auto res = gradcheck<double>(fn, inputs, 1e-6, 1e-6);
        INFO("fssb worst ", res.worst_rel, " at ", res.where);
        CHECK(res.worst_rel <= 1e-4);
    }
}
