#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mmvq/autodiff.hpp"
#include "mmvq/gradcheck.hpp"
#include "mmvq/optim.hpp"

using namespace mmvq;
using namespace mmvq::ad;

namespace {

std::vector<double> randn(std::mt19937_64& rng, size_t n, double sd = 1.0) {
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<double> out(n);
    for (auto& x : out) x = dist(rng);
    return out;
}

// Direct six-nested-loop convolution, independent of the im2col path.
std::vector<double> conv2d_oracle(const std::vector<double>& x, int N, int C, int H, int W,
                                  const std::vector<double>& k, int F, int kH, int kW, int stride, int pad, int OH,
                                  int OW) {
    std::vector<double> out(static_cast<size_t>(N) * F * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f)
            for (int oi = 0; oi < OH; ++oi)
                for (int oj = 0; oj < OW; ++oj) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int u = 0; u < kH; ++u)
                            for (int v = 0; v < kW; ++v) {
                                const int i = oi * stride - pad + u;
                                const int j = oj * stride - pad + v;
                                if (i < 0 || i >= H || j < 0 || j >= W) continue;
                                acc += x[((static_cast<size_t>(n) * C + c) * H + i) * W + j] *
                                       k[((static_cast<size_t>(f) * C + c) * kH + u) * kW + v];
                            }
                    out[((static_cast<size_t>(n) * F + f) * OH + oi) * OW + oj] = acc;
                }
    return out;
}

// Naive scatter-accumulate transposed convolution.
std::vector<double> conv2d_transpose_oracle(const std::vector<double>& x, int N, int Cin, int H, int W,
                                            const std::vector<double>& k, int Cout, int kH, int kW, int stride,
                                            int pad, int OH, int OW) {
    std::vector<double> out(static_cast<size_t>(N) * Cout * OH * OW, 0.0);
    for (int n = 0; n < N; ++n)
        for (int ci = 0; ci < Cin; ++ci)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const double xv = x[((static_cast<size_t>(n) * Cin + ci) * H + i) * W + j];
                    for (int co = 0; co < Cout; ++co)
                        for (int u = 0; u < kH; ++u)
                            for (int v = 0; v < kW; ++v) {
                                const int a = i * stride - pad + u;
                                const int b = j * stride - pad + v;
                                if (a < 0 || a >= OH || b < 0 || b >= OW) continue;
                                out[((static_cast<size_t>(n) * Cout + co) * OH + a) * OW + b] +=
                                    xv * k[((static_cast<size_t>(ci) * Cout + co) * kH + u) * kW + v];
                            }
                }
    return out;
}

}  // namespace

TEST_CASE("conv2d matches trivial hand cases") {
    Tape<double> t;
    auto x = t.leaf({1, 1, 2, 2}, {1, 1, 1, 1}, false);
    auto k = t.leaf({1, 1, 2, 2}, {1, 1, 1, 1}, false);
    auto y = conv2d(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value()[0] == doctest::Approx(4.0));

    // shape formula with stride 2, pad 1
    std::mt19937_64 rng(0);
    auto xv = randn(rng, 16);
    auto kv = randn(rng, 9);
    Tape<double> t2;
    auto x2 = t2.leaf({1, 1, 4, 4}, xv, false);
    auto k2 = t2.leaf({1, 1, 3, 3}, kv, false);
    auto y2 = conv2d(x2, k2, 2, 1);
    CHECK(y2.shape() == Shape{1, 1, 2, 2});
}

TEST_CASE("conv2d matches the six-loop oracle on a seeded case") {
    std::mt19937_64 rng(0);
    const int N = 1, C = 2, H = 5, W = 5, F = 3, kH = 3, kW = 3, stride = 1, pad = 0;
    auto xv = randn(rng, static_cast<size_t>(N) * C * H * W);
    auto kv = randn(rng, static_cast<size_t>(F) * C * kH * kW);
    Tape<double> t;
    auto y = conv2d(t.leaf({N, C, H, W}, xv, false), t.leaf({F, C, kH, kW}, kv, false), stride, pad);
    const int OH = conv_out_dim(H, kH, stride, pad), OW = conv_out_dim(W, kW, stride, pad);
    auto expect = conv2d_oracle(xv, N, C, H, W, kv, F, kH, kW, stride, pad, OH, OW);
    REQUIRE(y.value().size() == expect.size());
    for (size_t i = 0; i < expect.size(); ++i) CHECK(y.value()[i] == doctest::Approx(expect[i]).epsilon(1e-5));
}

TEST_CASE("conv2d matches the oracle across strides and paddings") {
    std::mt19937_64 rng(42);
    for (int stride : {1, 2, 3})
        for (int pad : {0, 1, 2}) {
            const int N = 2, C = 3, H = 7, W = 6, F = 4, kH = 3, kW = 2;
            auto xv = randn(rng, static_cast<size_t>(N) * C * H * W);
            auto kv = randn(rng, static_cast<size_t>(F) * C * kH * kW);
            Tape<double> t;
            auto y = conv2d(t.leaf({N, C, H, W}, xv, false), t.leaf({F, C, kH, kW}, kv, false), stride, pad);
            const int OH = conv_out_dim(H, kH, stride, pad), OW = conv_out_dim(W, kW, stride, pad);
            auto expect = conv2d_oracle(xv, N, C, H, W, kv, F, kH, kW, stride, pad, OH, OW);
            REQUIRE(y.value().size() == expect.size());
            double max_err = 0.0;
            for (size_t i = 0; i < expect.size(); ++i) max_err = std::max(max_err, std::abs(y.value()[i] - expect[i]));
            CHECK(max_err < 1e-9);
        }
}

TEST_CASE("conv2d rejects mismatched shapes with axis messages") {
    Tape<double> t;
    auto x = t.leaf({1, 2, 4, 4}, std::vector<double>(32, 0.0), false);
    auto k = t.leaf({1, 3, 3, 3}, std::vector<double>(27, 0.0), false);
    CHECK_THROWS_WITH_AS(conv2d(x, k, 1, 0), doctest::Contains("channel axis"), ValidationError);
    auto kbig = t.leaf({1, 2, 9, 3}, std::vector<double>(54, 0.0), false);
    CHECK_THROWS_WITH_AS(conv2d(x, kbig, 1, 0), doctest::Contains("height"), ValidationError);
}

TEST_CASE("conv2d_transpose broadcast and shape inversion") {
    Tape<double> t;
    auto x = t.leaf({1, 1, 1, 1}, {3.0}, false);
    auto k = t.leaf({1, 1, 2, 2}, {1, 1, 1, 1}, false);
    auto y = conv2d_transpose(x, k, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (double v : y.value()) CHECK(v == doctest::Approx(3.0));

    // conv2d with s=2,p=1 then transpose with the same geometry restores even spatial dims
    std::mt19937_64 rng(1);
    const int H = 8, W = 10;
    auto xv = randn(rng, static_cast<size_t>(H) * W);
    auto kv = randn(rng, 16);
    Tape<double> t2;
    auto xin = t2.leaf({1, 1, H, W}, xv, false);
    auto kc = t2.leaf({1, 1, 4, 4}, kv, false);
    auto mid = conv2d(xin, kc, 2, 1);
    auto kd = t2.leaf({1, 1, 4, 4}, kv, false);
    auto back = conv2d_transpose(mid, kd, 2, 1);
    CHECK(back.shape() == Shape{1, 1, H, W});
}

TEST_CASE("conv2d_transpose matches the scatter oracle") {
    std::mt19937_64 rng(0);
    for (int stride : {1, 2})
        for (int pad : {0, 1}) {
            const int N = 2, Cin = 3, H = 4, W = 5, Cout = 2, kH = 3, kW = 3;
            auto xv = randn(rng, static_cast<size_t>(N) * Cin * H * W);
            auto kv = randn(rng, static_cast<size_t>(Cin) * Cout * kH * kW);
            Tape<double> t;
            auto y = conv2d_transpose(t.leaf({N, Cin, H, W}, xv, false), t.leaf({Cin, Cout, kH, kW}, kv, false),
                                      stride, pad);
            const int OH = conv_transpose_out_dim(H, kH, stride, pad, 0);
            const int OW = conv_transpose_out_dim(W, kW, stride, pad, 0);
            auto expect = conv2d_transpose_oracle(xv, N, Cin, H, W, kv, Cout, kH, kW, stride, pad, OH, OW);
            REQUIRE(y.value().size() == expect.size());
            double max_err = 0.0;
            for (size_t i = 0; i < expect.size(); ++i) max_err = std::max(max_err, std::abs(y.value()[i] - expect[i]));
            CHECK(max_err < 1e-9);
        }
}

TEST_CASE("conv2d_transpose output padding grows the output and keeps gradients correct") {
    std::mt19937_64 rng(3);
    const int N = 1, Cin = 2, H = 2, W = 3, Cout = 2, kH = 4, kW = 4;
    auto xv = randn(rng, static_cast<size_t>(N) * Cin * H * W);
    auto kv = randn(rng, static_cast<size_t>(Cin) * Cout * kH * kW);
    Tape<double> t;
    auto y = conv2d_transpose(t.leaf({N, Cin, H, W}, xv, false), t.leaf({Cin, Cout, kH, kW}, kv, false), 2, 1, 1, 1);
    CHECK(y.shape() == Shape{N, Cout, 5, 7});

    auto err = grad_check<double>(
        [&](Tape<double>& tp, Var<double> x) {
            auto k = tp.leaf({Cin, Cout, kH, kW}, kv, false);
            return sum(square(conv2d_transpose(x, k, 2, 1, 1, 1)));
        },
        {N, Cin, H, W}, xv, 1e-5);
    CHECK(err < 1e-7);
}

TEST_CASE("linear matches hand arithmetic and the dot-product oracle") {
    Tape<double> t;
    auto x = t.leaf({1, 2}, {1, 2}, false);
    auto w = t.leaf({2, 2}, {1, 0, 0, 1}, false);
    auto b = t.leaf({2}, {3, 4}, false);
    auto y = linear(x, w, b);
    CHECK(y.value()[0] == doctest::Approx(4.0));
    CHECK(y.value()[1] == doctest::Approx(6.0));

    // identity weight, zero bias
    Tape<double> t1;
    auto x1 = t1.leaf({2, 2}, {5, 6, 7, 8}, false);
    auto w1 = t1.leaf({2, 2}, {1, 0, 0, 1}, false);
    auto b1 = t1.leaf({2}, {0, 0}, false);
    auto y1 = linear(x1, w1, b1);
    for (size_t i = 0; i < 4; ++i) CHECK(y1.value()[i] == doctest::Approx(x1.value()[i]));

    std::mt19937_64 rng(0);
    const int N = 3, D = 5, M = 2;
    auto xv = randn(rng, static_cast<size_t>(N) * D);
    auto wv = randn(rng, static_cast<size_t>(D) * M);
    auto bv = randn(rng, M);
    Tape<double> t2;
    auto y2 = linear(t2.leaf({N, D}, xv, false), t2.leaf({D, M}, wv, false), t2.leaf({M}, bv, false));
    for (int n = 0; n < N; ++n)
        for (int m = 0; m < M; ++m) {
            double acc = bv[static_cast<size_t>(m)];
            for (int d = 0; d < D; ++d) acc += xv[static_cast<size_t>(n) * D + d] * wv[static_cast<size_t>(d) * M + m];
            CHECK(y2.value()[static_cast<size_t>(n) * M + m] == doctest::Approx(acc).epsilon(1e-9));
        }

    Tape<double> t3;
    auto bad_w = t3.leaf({3, 2}, std::vector<double>(6, 0.0), false);
    CHECK_THROWS_AS(matmul(t3.leaf({1, 2}, {1, 2}, false), bad_w), ValidationError);
}

TEST_CASE("elementwise ops") {
    Tape<double> t;
    auto x = t.leaf({3}, {-1, 0, 2}, false);
    auto r = relu(x);
    CHECK(r.value() == std::vector<double>{0, 0, 2});

    auto a = t.leaf({3}, {1, 2, 3}, false);
    auto z = t.leaf({3}, {0, 0, 0}, false);
    auto s = add(a, z);
    CHECK(s.value() == std::vector<double>{1, 2, 3});

    auto p = t.leaf({1}, {3}, true);
    auto q = square(p);
    CHECK(q.value()[0] == doctest::Approx(9.0));
    t.backward(q);
    CHECK(p.grad()[0] == doctest::Approx(6.0));

    auto m = t.leaf({2}, {1, 2}, false);
    auto bad = t.leaf({3}, {1, 2, 3}, false);
    CHECK_THROWS_AS(add(m, bad), ValidationError);
}

TEST_CASE("losses: mse and cross-entropy hand values") {
    Tape<double> t;
    auto x = t.leaf({2}, {1, 3}, false);
    auto y = t.leaf({2}, {2, 5}, false);
    CHECK(mse(x, y).value()[0] == doctest::Approx(2.5));
    CHECK(mse(x, x).value()[0] == doctest::Approx(0.0));

    auto logits = t.leaf({1, 3}, {0, 0, 0}, false);
    auto ce = softmax_cross_entropy(logits, {1});
    CHECK(ce.value()[0] == doctest::Approx(std::log(3.0)).epsilon(1e-9));

    CHECK_THROWS_AS(softmax_cross_entropy(logits, {3}), ValidationError);
}

TEST_CASE("backward: accumulation, reachability, determinism") {
    Tape<double> t;
    auto p = t.leaf({1}, {3}, true);
    auto unused = t.leaf({1}, {5}, true);
    auto q = square(p);
    t.backward(q);
    CHECK(p.grad()[0] == doctest::Approx(6.0));
    CHECK(unused.grad()[0] == doctest::Approx(0.0));
    t.backward(q);  // accumulates
    CHECK(p.grad()[0] == doctest::Approx(12.0));

    auto big = t.leaf({2}, {1, 2}, true);
    CHECK_THROWS_AS(t.backward(big), ValidationError);

    // determinism: identical graphs give bitwise-identical gradients
    auto run = [] {
        std::mt19937_64 rng(9);
        auto xv = randn(rng, 12);
        auto wv = randn(rng, 8);
        Tape<double> tp;
        auto x = tp.leaf({3, 4}, xv, true);
        auto w = tp.leaf({4, 2}, wv, true);
        auto yt = tp.leaf({3, 2}, std::vector<double>(6, 0.5), false);
        auto loss = mse(matmul(x, w), yt);
        tp.backward(loss);
        return std::make_pair(tp.ensure_grad(x.id), tp.ensure_grad(w.id));
    };
    auto [g1x, g1w] = run();
    auto [g2x, g2w] = run();
    CHECK(g1x == g2x);
    CHECK(g1w == g2w);
}

TEST_CASE("backward of mse(linear) matches finite differences") {
    std::mt19937_64 rng(7);
    const int N = 3, D = 4, M = 2;
    auto xv = randn(rng, static_cast<size_t>(N) * D);
    auto wv = randn(rng, static_cast<size_t>(D) * M);
    auto bv = randn(rng, M);
    auto yv = randn(rng, static_cast<size_t>(N) * M);

    auto err_w = grad_check<double>(
        [&](Tape<double>& tp, Var<double> w) {
            auto x = tp.leaf({N, D}, xv, false);
            auto b = tp.leaf({M}, bv, false);
            auto y = tp.leaf({N, M}, yv, false);
            return mse(linear(x, w, b), y);
        },
        {D, M}, wv, 1e-6);
    CHECK(err_w < 1e-8);

    auto err_b = grad_check<double>(
        [&](Tape<double>& tp, Var<double> b) {
            auto x = tp.leaf({N, D}, xv, false);
            auto w = tp.leaf({D, M}, wv, false);
            auto y = tp.leaf({N, M}, yv, false);
            return mse(linear(x, w, b), y);
        },
        {M}, bv, 1e-6);
    CHECK(err_b < 1e-8);
}

TEST_CASE("grad_check on every differentiable primitive at 64-bit") {
    std::mt19937_64 rng(11);
    const double tol = 1e-5;

    // sum of squares: exact quadratic
    auto xv = randn(rng, 6);
    CHECK(grad_check<double>([](Tape<double>& t, Var<double> x) { return sum(square(x)); }, {6}, xv, 1e-6) < 1e-6);

    // relu away from the kink
    std::vector<double> xr = {-2.0, -0.7, 0.5, 1.2, -1.5, 0.9};
    CHECK(grad_check<double>([](Tape<double>& t, Var<double> x) { return sum(square(relu(x))); }, {6}, xr, 1e-6) <
          1e-6);

    // exp
    CHECK(grad_check<double>([](Tape<double>& t, Var<double> x) { return sum(vexp(x)); }, {6}, randn(rng, 6), 1e-6) <
          tol);

    // add/sub/mul/scale through a nonlinear head
    auto other = randn(rng, 6);
    CHECK(grad_check<double>(
              [&](Tape<double>& t, Var<double> x) {
                  auto o = t.leaf({6}, other, false);
                  return sum(square(add(mul(x, o), scale(sub(x, o), 0.3))));
              },
              {6}, randn(rng, 6), 1e-6) < tol);

    // conv2d wrt input and kernel
    {
        const int N = 2, C = 2, H = 5, W = 4, F = 3, kH = 3, kW = 3;
        auto xc = randn(rng, static_cast<size_t>(N) * C * H * W);
        auto kc = randn(rng, static_cast<size_t>(F) * C * kH * kW);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> x) {
                      auto k = t.leaf({F, C, kH, kW}, kc, false);
                      return sum(square(conv2d(x, k, 2, 1)));
                  },
                  {N, C, H, W}, xc, 1e-5) < tol);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> k) {
                      auto x = t.leaf({N, C, H, W}, xc, false);
                      return sum(square(conv2d(x, k, 2, 1)));
                  },
                  {F, C, kH, kW}, kc, 1e-5) < tol);
    }

    // conv2d_transpose wrt input and kernel
    {
        const int N = 1, Cin = 2, H = 3, W = 3, Cout = 2, kH = 4, kW = 4;
        auto xc = randn(rng, static_cast<size_t>(N) * Cin * H * W);
        auto kc = randn(rng, static_cast<size_t>(Cin) * Cout * kH * kW);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> x) {
                      auto k = t.leaf({Cin, Cout, kH, kW}, kc, false);
                      return sum(square(conv2d_transpose(x, k, 2, 1)));
                  },
                  {N, Cin, H, W}, xc, 1e-5) < tol);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> k) {
                      auto x = t.leaf({N, Cin, H, W}, xc, false);
                      return sum(square(conv2d_transpose(x, k, 2, 1)));
                  },
                  {Cin, Cout, kH, kW}, kc, 1e-5) < tol);
    }

    // add_channel_bias
    {
        const int N = 2, C = 3, H = 2, W = 2;
        auto xc = randn(rng, static_cast<size_t>(N) * C * H * W);
        auto bc = randn(rng, C);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> b) {
                      auto x = t.leaf({N, C, H, W}, xc, false);
                      return sum(square(add_channel_bias(x, b)));
                  },
                  {C}, bc, 1e-6) < tol);
    }

    // embedding_select + straight_through
    {
        auto table = randn(rng, 5 * 4);
        auto zval = randn(rng, 2 * 4);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> tab) {
                      return sum(square(embedding_select(tab, {1, 3})));
                  },
                  {5, 4}, table, 1e-6) < tol);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> z) {
                      auto tab = t.leaf({5, 4}, table, false);
                      auto e = embedding_select(tab, {1, 3});
                      // straight-through treats zq's dependence on z as identity
                      return sum(square(straight_through(z, e)));
                  },
                  {2, 4}, zval, 1e-6) > 0.0);  // gradient flows to z, compared below
        // the straight-through surrogate: grad wrt z of sum((z + c)^2) with c = e - z0
        Tape<double> t;
        auto z = t.leaf({2, 4}, zval, true);
        auto tab = t.leaf({5, 4}, table, false);
        auto e = embedding_select(tab, {1, 3});
        auto out = straight_through(z, e);
        t.backward(sum(square(out)));
        for (size_t i = 0; i < zval.size(); ++i)
            CHECK(z.grad()[i] == doctest::Approx(2.0 * out.value()[i]).epsilon(1e-9));
    }

    // block_bilinear wrt all three operands
    {
        const int N = 2, R = 2, c = 2, cp = 3;
        auto xb = randn(rng, static_cast<size_t>(N) * R * c);
        auto yb = randn(rng, static_cast<size_t>(N) * R * c);
        auto core = randn(rng, static_cast<size_t>(R) * c * c * cp);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> x) {
                      auto y = t.leaf({N, R * c}, yb, false);
                      auto cr = t.leaf({R, c, c, cp}, core, false);
                      return sum(square(block_bilinear(x, y, cr, R, c, cp)));
                  },
                  {N, R * c}, xb, 1e-5) < tol);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> y) {
                      auto x = t.leaf({N, R * c}, xb, false);
                      auto cr = t.leaf({R, c, c, cp}, core, false);
                      return sum(square(block_bilinear(x, y, cr, R, c, cp)));
                  },
                  {N, R * c}, yb, 1e-5) < tol);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> cr) {
                      auto x = t.leaf({N, R * c}, xb, false);
                      auto y = t.leaf({N, R * c}, yb, false);
                      return sum(square(block_bilinear(x, y, cr, R, c, cp)));
                  },
                  {R, c, c, cp}, core, 1e-5) < tol);
    }

    // pooling ops
    {
        const int N = 2, C = 3, Tlen = 4;
        auto hv = randn(rng, static_cast<size_t>(N) * C * Tlen);
        std::vector<double> w = {0.5, 0.5, 0, 0, 0.25, 0.25, 0.25, 0.25};
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> h) { return sum(square(weighted_time_pool(h, w))); },
                  {N, C, 1, Tlen}, hv, 1e-6) < tol);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> h) { return sum(square(scale_time_steps(h, w))); },
                  {N, C, 1, Tlen}, hv, 1e-6) < tol);
    }

    // softmax cross-entropy wrt logits
    {
        auto lv = randn(rng, 4 * 3);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> l) { return softmax_cross_entropy(l, {0, 2, 1, 1}); }, {4, 3}, lv,
                  1e-6) < tol);
    }

    // reshape + matmul chain
    {
        auto xv2 = randn(rng, 12);
        auto wv2 = randn(rng, 8);
        CHECK(grad_check<double>(
                  [&](Tape<double>& t, Var<double> x) {
                      auto w = t.leaf({4, 2}, wv2, false);
                      return sum(square(matmul(reshape(x, {3, 4}), w)));
                  },
                  {12}, xv2, 1e-6) < tol);
    }
}

TEST_CASE("adam: zero grad is identity, descent works, convergence on a quadratic") {
    Parameter<double> p("p", {1}, {1.0});
    Adam<double> opt(0.1);
    std::vector<Parameter<double>*> params = {&p};

    p.zero_grad();
    opt.step(params);
    CHECK(p.value[0] == doctest::Approx(1.0));

    // one step on f(p)=p^2 decreases p from 1
    Parameter<double> q("q", {1}, {1.0});
    Adam<double> opt2(0.1);
    std::vector<Parameter<double>*> params2 = {&q};
    {
        Tape<double> t;
        auto b = bind(t, q);
        auto loss = square(b.var);
        t.backward(loss);
        q.zero_grad();
        b.collect_grad();
    }
    opt2.step(params2);
    CHECK(q.value[0] < 1.0);

    // 200 steps on f(p)=(p-2)^2 converges
    Parameter<double> r("r", {1}, {0.0});
    Adam<double> opt3(0.1);
    std::vector<Parameter<double>*> params3 = {&r};
    for (int i = 0; i < 200; ++i) {
        Tape<double> t;
        auto b = bind(t, r);
        auto target = t.leaf({1}, {2.0}, false);
        auto loss = square(sub(b.var, target));
        t.backward(loss);
        r.zero_grad();
        b.collect_grad();
        opt3.step(params3);
    }
    CHECK(std::abs(r.value[0] - 2.0) < 1e-2);

    Parameter<double> s("s", {1}, {1.0});
    Adam<double> opt4(0.1);
    std::vector<Parameter<double>*> params4 = {&s};
    CHECK_THROWS_WITH_AS(opt4.step(params4), doctest::Contains("'s'"), ValidationError);
}
