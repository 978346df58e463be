#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "dfssm/gradcheck.hpp"
#include "dfssm/ssm.hpp"

using namespace dfssm;

namespace {

// Independent step-by-step recurrence in plain double; also records the
// cumulative input-energy bound for the stability property.
struct ScanOracle {
    std::vector<double> y;       // (n,D,L)
    std::vector<double> h_last;  // (n,D,N)
    bool bound_held = true;
};

template <typename T>
ScanOracle scan_oracle(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A,
                       const Tensor<T>& B, const Tensor<T>& C, const Tensor<T>& D_skip) {
    const int n = u.shape().n, D = u.shape().c, L = u.shape().w, N = A.shape().w;
    ScanOracle out;
    out.y.assign(static_cast<std::size_t>(n) * D * L, 0.0);
    out.h_last.assign(static_cast<std::size_t>(n) * D * N, 0.0);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < D; ++d) {
            std::vector<double> h(N, 0.0), bound(N, 0.0);
            for (int t = 0; t < L; ++t) {
                const double dt = delta.at(i, d, 0, t);
                const double x = u.at(i, d, 0, t);
                double acc = 0.0;
                for (int nn = 0; nn < N; ++nn) {
                    const double a = A.at(0, 0, d, nn);
                    const double bx = dt * B.at(i, nn, 0, t) * x;
                    h[nn] = std::exp(dt * a) * h[nn] + bx;
                    bound[nn] += std::abs(bx);
                    if (std::abs(h[nn]) > bound[nn] + 1e-9) out.bound_held = false;
                    acc += C.at(i, nn, 0, t) * h[nn];
                }
                out.y[(static_cast<std::size_t>(i) * D + d) * L + t] =
                    acc + D_skip.at(0, 0, 0, d) * x;
            }
            for (int nn = 0; nn < N; ++nn)
                out.h_last[(static_cast<std::size_t>(i) * D + d) * N + nn] = h[nn];
        }
    return out;
}

template <typename T>
struct ScanInputs {
    Tensor<T> u, delta, A, B, C, D_skip;
};

template <typename T>
ScanInputs<T> random_scan_inputs(int n, int D, int N, int L, Rng& rng, bool rg) {
    ScanInputs<T> s;
    s.u = random_tensor<T>({n, D, 1, L}, rng, 1.0, rg);
    s.delta = uniform_tensor<T>({n, D, 1, L}, rng, 0.02, 0.6, rg);
    s.A = Tensor<T>::zeros({1, 1, D, N}, rg);
    for (auto& v : s.A.data()) v = static_cast<T>(-std::exp(rng.uniform(-1.0, 1.5)));
    s.B = random_tensor<T>({n, N, 1, L}, rng, 0.8, rg);
    s.C = random_tensor<T>({n, N, 1, L}, rng, 0.8, rg);
    s.D_skip = uniform_tensor<T>({1, 1, 1, D}, rng, 0.5, 1.5, rg);
    return s;
}

}  // namespace

TEST_CASE("selective_scan zero input stays zero") {
    Rng rng(1);
    auto s = random_scan_inputs<float>(2, 3, 4, 10, rng, false);
    auto u0 = Tensor<float>::zeros({2, 3, 1, 10});
    auto y = selective_scan(u0, s.delta, s.A, s.B, s.C, s.D_skip);
    for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("selective_scan single-step recurrence") {
    auto u = Tensor<float>::full({1, 1, 1, 1}, 2.0f);
    auto delta = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
    auto A = Tensor<float>::full({1, 1, 1, 1}, -1.0f);
    auto B = Tensor<float>::full({1, 1, 1, 1}, 0.5f);
    auto C = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
    auto D = Tensor<float>::zeros({1, 1, 1, 1});
    auto y = selective_scan(u, delta, A, B, C, D);
    CHECK(y.item() == doctest::Approx(1.0f));
}

TEST_CASE("selective_scan matches recurrence oracle") {
    int checked = 0;
    for (auto [n, D, N, L] : {std::tuple{1, 4, 8, 16}, std::tuple{2, 3, 4, 33},
                              std::tuple{1, 2, 2, 130}}) {
        for (std::uint64_t seed = 1; seed <= 10; ++seed) {
            Rng rng(seed * 31 + n);
            auto s = random_scan_inputs<float>(n, D, N, L, rng, false);
            auto y = selective_scan(s.u, s.delta, s.A, s.B, s.C, s.D_skip);
            auto oracle = scan_oracle(s.u, s.delta, s.A, s.B, s.C, s.D_skip);
            double worst = 0.0;
            for (std::size_t i = 0; i < y.data().size(); ++i)
                worst = std::max(worst, std::abs(static_cast<double>(y.data()[i]) - oracle.y[i]));
            CHECK(worst < 1e-5);
            ++checked;
        }
    }
    CHECK(checked >= 30);
}

TEST_CASE("selective_scan gradcheck vs finite differences") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        auto s = random_scan_inputs<double>(1, 3, 4, 12, rng, true);
        auto f = [&] {
            return weighted_probe(selective_scan(s.u, s.delta, s.A, s.B, s.C, s.D_skip), seed);
        };
        auto res = gradcheck<double>(f, {s.u, s.delta, s.A, s.B, s.C, s.D_skip}, 1e-6, 1e-6);
        INFO("worst ", res.worst_rel, " at ", res.where);
        CHECK(res.worst_rel <= 1e-6);
    }
    // sequence long enough to span several checkpoint segments
    Rng rng(9);
    auto s = random_scan_inputs<double>(1, 1, 2, 150, rng, true);
    auto f = [&] {
        return weighted_probe(selective_scan(s.u, s.delta, s.A, s.B, s.C, s.D_skip), 4);
    };
    auto res = gradcheck<double>(f, {s.u, s.delta, s.A, s.B, s.C, s.D_skip}, 1e-6, 1e-6);
    INFO("worst ", res.worst_rel, " at ", res.where);
    CHECK(res.worst_rel <= 1e-6);
}

TEST_CASE("selective_scan stability on long sequences") {
    Rng rng(77);
    auto s = random_scan_inputs<float>(1, 4, 8, 1024, rng, false);
    auto y = selective_scan(s.u, s.delta, s.A, s.B, s.C, s.D_skip);
    for (float v : y.data()) CHECK(std::isfinite(v));
    auto oracle = scan_oracle(s.u, s.delta, s.A, s.B, s.C, s.D_skip);
    CHECK(oracle.bound_held);
    double worst = 0.0;
    for (std::size_t i = 0; i < y.data().size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(y.data()[i]) - oracle.y[i]));
    CHECK(worst < 1e-4);
}

TEST_CASE("direction orders are bijections") {
    Rng rng(21);
    auto x = random_tensor<float>({2, 3, 5, 7}, rng);
    for (int k = 0; k < 4; ++k) {
        auto order = direction_order(5, 7, static_cast<ScanDir>(k));
        std::vector<bool> seen(35, false);
        for (int v : *order) {
            CHECK(!seen[v]);
            seen[v] = true;
        }
        auto back = scatter_positions(gather_positions(x, order), order, 5, 7);
        CHECK(std::memcmp(back.data().data(), x.data().data(),
                          x.data().size() * sizeof(float)) == 0);
    }
}

namespace {

// Index-bookkeeping oracle for ss2d: own coordinate formulas per direction,
// own 1x1 projection, own double recurrence.
template <typename T>
std::vector<double> ss2d_oracle(const Tensor<T>& x,
                                const std::array<SelectiveScanParams<T>, 4>& dirs) {
    const int n = x.shape().n, D = x.shape().c, h = x.shape().h, w = x.shape().w;
    const int L = h * w;
    std::vector<double> out(static_cast<std::size_t>(n) * D * L, 0.0);
    for (int k = 0; k < 4; ++k) {
        const auto& p = dirs[k];
        const int N = p.state_dim;
        const int CO = D + 2 * N;
        auto coord = [&](int j, int& py, int& px) {
            int jj = (k == 1 || k == 3) ? L - 1 - j : j;
            if (k < 2) {
                py = jj / w;
                px = jj % w;
            } else {
                px = jj / h;
                py = jj % h;
            }
        };
        for (int i = 0; i < n; ++i) {
            // projections per sequence position
            std::vector<double> xs(static_cast<std::size_t>(D) * L);
            std::vector<double> dlt(static_cast<std::size_t>(D) * L);
            std::vector<double> Bs(static_cast<std::size_t>(N) * L), Cs(static_cast<std::size_t>(N) * L);
            for (int j = 0; j < L; ++j) {
                int py, px;
                coord(j, py, px);
                std::vector<double> dbc(CO, 0.0);
                for (int co = 0; co < CO; ++co)
                    for (int ci = 0; ci < D; ++ci)
                        dbc[co] += static_cast<double>(p.x_proj.w.at(co, ci, 0, 0)) *
                                   x.at(i, ci, py, px);
                for (int d = 0; d < D; ++d) {
                    xs[static_cast<std::size_t>(d) * L + j] = x.at(i, d, py, px);
                    const double logit = dbc[d] + static_cast<double>(p.dt_bias.at(0, d, 0, 0));
                    dlt[static_cast<std::size_t>(d) * L + j] =
                        logit > 30.0 ? logit : std::log1p(std::exp(logit));
                }
                for (int nn = 0; nn < N; ++nn) {
                    Bs[static_cast<std::size_t>(nn) * L + j] = dbc[D + nn];
                    Cs[static_cast<std::size_t>(nn) * L + j] = dbc[D + N + nn];
                }
            }
            for (int d = 0; d < D; ++d) {
                std::vector<double> hstate(N, 0.0);
                for (int j = 0; j < L; ++j) {
                    const double dt = dlt[static_cast<std::size_t>(d) * L + j];
                    const double xv = xs[static_cast<std::size_t>(d) * L + j];
                    double acc = 0.0;
                    for (int nn = 0; nn < N; ++nn) {
                        const double a = -std::exp(static_cast<double>(p.A_log.at(0, 0, d, nn)));
                        hstate[nn] = std::exp(dt * a) * hstate[nn] +
                                     dt * Bs[static_cast<std::size_t>(nn) * L + j] * xv;
                        acc += Cs[static_cast<std::size_t>(nn) * L + j] * hstate[nn];
                    }
                    acc += static_cast<double>(p.D_skip.at(0, 0, 0, d)) * xv;
                    int py, px;
                    coord(j, py, px);
                    out[(static_cast<std::size_t>(i) * D + d) * L + py * w + px] += acc;
                }
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("ss2d matches index-mapping oracle") {
    ParamRegistry<double> reg(5);
    std::array<SelectiveScanParams<double>, 4> dirs;
    for (int k = 0; k < 4; ++k)
        dirs[k] = make_scan_params(reg, "t.dir." + std::to_string(k), 2, 3);
    Rng rng(6);
    auto x = random_tensor<double>({1, 2, 4, 4}, rng);
    auto y = ss2d(x, dirs);
    auto oracle = ss2d_oracle(x, dirs);
    double worst = 0.0;
    for (std::size_t i = 0; i < y.data().size(); ++i)
        worst = std::max(worst, std::abs(y.data()[i] - oracle[i]));
    CHECK(worst < 1e-5);

    // degenerate 1x1 spatial map: four single-step scans summed
    auto x1 = random_tensor<double>({1, 2, 1, 1}, rng);
    auto y1 = ss2d(x1, dirs);
    auto o1 = ss2d_oracle(x1, dirs);
    for (std::size_t i = 0; i < y1.data().size(); ++i)
        CHECK(std::abs(y1.data()[i] - o1[i]) < 1e-9);

    auto zero = Tensor<double>::zeros({1, 2, 4, 4});
    auto yz = ss2d(zero, dirs);
    for (double v : yz.data()) CHECK(v == 0.0);
}

TEST_CASE("ss2d is sensitive to spatial permutation") {
    ParamRegistry<float> reg(8);
    std::array<SelectiveScanParams<float>, 4> dirs;
    for (int k = 0; k < 4; ++k)
        dirs[k] = make_scan_params(reg, "t.dir." + std::to_string(k), 2, 4);
    Rng rng(9);
    auto x = random_tensor<float>({1, 2, 4, 4}, rng);
    auto xt = Tensor<float>::zeros({1, 2, 4, 4});
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 4; ++y)
            for (int xx = 0; xx < 4; ++xx) xt.data()[(c * 4 + xx) * 4 + y] = x.at(0, c, y, xx);
    auto a = ss2d(x, dirs);
    auto b = ss2d(xt, dirs);
    double diff = 0.0;
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 4; ++y)
            for (int xx = 0; xx < 4; ++xx)
                diff = std::max(diff, std::abs(static_cast<double>(a.at(0, c, y, xx)) -
                                               b.at(0, c, xx, y)));
    CHECK(diff > 1e-4);
}

TEST_CASE("vssm shape contract and zero behavior") {
    ParamRegistry<float> reg(10);
    auto v = make_vssm(reg, "vssm", 8, 2, 4);
    Rng rng(11);
    auto x = random_tensor<float>({2, 8, 12, 12}, rng);
    auto y = v.forward(x);
    CHECK(y.shape() == Shape{2, 8, 12, 12});

    // zero input with zero biases -> zero output
    std::fill(v.dwconv.b.data().begin(), v.dwconv.b.data().end(), 0.0f);
    auto z = v.forward(Tensor<float>::zeros({1, 8, 6, 6}));
    for (float val : z.data()) CHECK(val == 0.0f);
}

TEST_CASE("vssm end-to-end gradcheck at 64-bit") {
    ParamRegistry<double> reg(12);
    auto v = make_vssm(reg, "vssm", 4, 2, 4);
    Rng rng(13);
    auto x = random_tensor<double>({1, 4, 4, 4}, rng, 1.0, true);
    std::vector<Tensor<double>> inputs{x};
    for (auto& e : reg.entries()) inputs.push_back(e.tensor);
    auto f = [&] { return weighted_probe(v.forward(x), 3); };
    auto res = gradcheck<double>(f, inputs, 1e-6, 1e-6);
    INFO("worst ", res.worst_rel, " at ", res.where);
    CHECK(res.worst_rel <= 1e-4);
}
