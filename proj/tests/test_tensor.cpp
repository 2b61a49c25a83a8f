#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mrt/rng.hpp"
#include "mrt/tensor.hpp"
#include "support/testutil.hpp"

using namespace mrt;

namespace {

// independent triple-loop oracle
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
    Tensor c({a.rows(), b.cols()});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
            c.at(i, j) = s;
        }
    return c;
}

}  // namespace

TEST_CASE("matmul identity and column selection") {
    Var I = constant(Tensor({2, 2}, {1, 0, 0, 1}));
    Var x = constant(Tensor({2, 1}, {3, 5}));
    CHECK(matmul(I, x).value().data == std::vector<double>{3, 5});

    Var a = constant(Tensor({2, 2}, {1, 2, 3, 4}));
    Var e = constant(Tensor({2, 1}, {0, 1}));
    CHECK(matmul(a, e).value().data == std::vector<double>{2, 4});
}

TEST_CASE("matmul matches triple-loop oracle on random 3x3") {
    Rng rng(42);
    Tensor a({3, 3}), b({3, 3});
    for (double& v : a.data) v = rng.normal();
    for (double& v : b.data) v = rng.normal();
    Tensor got = matmul(constant(a), constant(b)).value();
    Tensor want = matmul_oracle(a, b);
    CHECK(test::max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("matmul rejects mismatched inner dims") {
    Var a = constant(Tensor::zeros({2, 3}));
    Var b = constant(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("softmax symmetry, stabilization, closed form") {
    Tensor z = softmax(constant(Tensor({1, 2}, {0, 0})), 1).value();
    CHECK(z.data[0] == doctest::Approx(0.5).epsilon(1e-12));

    Tensor big = softmax(constant(Tensor({1, 2}, {1000, 1000})), 1).value();
    CHECK(big.all_finite());
    CHECK(big.data[0] == doctest::Approx(0.5).epsilon(1e-12));

    Tensor r = softmax(constant(Tensor({1, 2}, {0.0, std::log(3.0)})), 1).value();
    CHECK(r.data[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r.data[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one on random input") {
    Rng rng(7);
    Tensor x({5, 9});
    for (double& v : x.data) v = rng.normal() * 10.0;
    Tensor y = softmax(constant(x), 1).value();
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < 9; ++j) {
            CHECK(y.at(i, j) >= 0.0);
            s += y.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("layernorm constant vector, unit case, gain annihilation") {
    Var gain = constant(Tensor::full({1, 4}, 1.0));
    Var bias = constant(Tensor::zeros({1, 4}));
    Tensor y = layernorm(constant(Tensor::full({1, 4}, 3.7)), gain, bias, 1e-5).value();
    for (double v : y.data) CHECK(std::fabs(v) < 1e-9);

    Var g2 = constant(Tensor::full({1, 2}, 1.0));
    Var b2 = constant(Tensor::zeros({1, 2}));
    Tensor u = layernorm(constant(Tensor({1, 2}, {1, -1})), g2, b2, 1e-5).value();
    CHECK(u.data[0] == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(u.data[1] == doctest::Approx(-1.0).epsilon(1e-4));

    Var g0 = constant(Tensor::zeros({1, 4}));
    Var b0 = constant(Tensor({1, 4}, {1, 2, 3, 4}));
    Tensor w = layernorm(constant(Tensor({1, 4}, {0.3, -2, 5, 1})), g0, b0, 1e-5).value();
    CHECK(w.data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("cross entropy uniform, confident, hand oracle") {
    const int V = 4;
    Tensor logits = Tensor::zeros({1, V});
    Var l = cross_entropy(constant(logits), {2}, {1});
    CHECK(l.value().data[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Tensor conf = Tensor::zeros({1, V});
    conf.at(0, 2) = 200.0;
    CHECK(cross_entropy(constant(conf), {2}, {1}).value().data[0] < 1e-12);

    // 2-position scalar hand oracle
    Tensor x({2, 3}, {0.2, -0.4, 1.1, 2.0, 0.0, -1.0});
    auto lse = [&](int row) {
        double s = 0.0;
        for (int j = 0; j < 3; ++j) s += std::exp(x.at(row, j));
        return std::log(s);
    };
    const double want = 0.5 * ((lse(0) - x.at(0, 2)) + (lse(1) - x.at(1, 0)));
    Var got = cross_entropy(constant(x), {2, 0}, {1, 1});
    CHECK(got.value().data[0] == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("cross entropy rejects empty mask") {
    CHECK_THROWS_AS(cross_entropy(constant(Tensor::zeros({2, 4})), {0, 0}, {0, 0}),
                    std::invalid_argument);
}

TEST_CASE("backward on quadratic") {
    Var x = Var::leaf(Tensor::scalar(3.0), true);
    Var y = mul(x, x);
    backward(y);
    CHECK(x.grad().data[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar root") {
    Var x = Var::leaf(Tensor::zeros({2, 2}), true);
    Var y = add(x, x);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);
}

TEST_CASE("frozen leaf receives no gradient") {
    Var x = Var::leaf(Tensor::scalar(3.0), true);
    Var f = Var::leaf(Tensor::scalar(2.0), false);
    Var y = mul(x, f);
    backward(y);
    CHECK(x.grad().data[0] == doctest::Approx(2.0));
    CHECK_FALSE(f.raw()->has_grad());
}

TEST_CASE("matmul+softmax+cross_entropy chain matches finite differences") {
    Rng rng(3);
    Tensor wt({2, 2}), xt({2, 2});
    for (double& v : wt.data) v = rng.normal();
    for (double& v : xt.data) v = rng.normal();
    Var w = Var::leaf(wt, true);
    Var x = constant(xt);

    auto loss_fn = [&] {
        NoGradGuard ng;
        Var z = matmul(x, transpose(w));
        Var sm = softmax(z, 1);
        return cross_entropy(scale(sm, 3.0), {1, 0}, {1, 1}).value().data[0];
    };
    {
        Var z = matmul(x, transpose(w));
        Var sm = softmax(z, 1);
        Var l = cross_entropy(scale(sm, 3.0), {1, 0}, {1, 1});
        backward(l);
    }
    CHECK(test::finite_diff_check(loss_fn, w) < 1e-4);
}

TEST_CASE("primitive gradients match finite differences") {
    Rng rng(11);
    Tensor at({3, 4});
    for (double& v : at.data) v = rng.normal();
    Var a = Var::leaf(at, true);
    Var gain = Var::leaf(Tensor::full({1, 4}, 1.2), true);
    Var bias = Var::leaf(Tensor({1, 4}, {0.1, -0.2, 0.3, 0.0}), true);

    auto build = [&] {
        Var h = layernorm(a, gain, bias, 1e-5);
        Var g = gelu(h);
        Var s = softmax(g, 1);
        Var t = mul(s, transpose(transpose(h)));
        return cross_entropy(t, {1, 3, 0}, {1, 1, 1});
    };
    auto loss_fn = [&] {
        NoGradGuard ng;
        return build().value().data[0];
    };
    backward(build());
    CHECK(test::finite_diff_check(loss_fn, a) < 1e-4);
    CHECK(test::finite_diff_check(loss_fn, gain) < 1e-4);
    CHECK(test::finite_diff_check(loss_fn, bias) < 1e-4);
}

TEST_CASE("slice/concat/gather gradients flow correctly") {
    Tensor et({4, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    Var e = Var::leaf(et, true);
    Var g = gather_rows(e, {2, 0, 2});
    Var s = slice_cols(g, 1, 3);
    Var c = concat_rows({s, slice_cols(g, 0, 2)});
    Var l = cross_entropy(c, {0, 1, 0, 1, 0, 1}, {1, 1, 1, 1, 1, 1});
    backward(l);

    auto loss_fn = [&] {
        NoGradGuard ng;
        Var g2 = gather_rows(e, {2, 0, 2});
        Var s2 = slice_cols(g2, 1, 3);
        Var c2 = concat_rows({s2, slice_cols(g2, 0, 2)});
        return cross_entropy(c2, {0, 1, 0, 1, 0, 1}, {1, 1, 1, 1, 1, 1}).value().data[0];
    };
    CHECK(test::finite_diff_check(loss_fn, e) < 1e-4);
}

TEST_CASE("graph reuse accumulates exactly once per backward") {
    Var x = Var::leaf(Tensor::scalar(2.0), true);
    Var y = add(mul(x, x), mul(x, x));  // 2x^2, dy/dx = 8
    backward(y);
    CHECK(x.grad().data[0] == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("no-grad mode produces detached results") {
    Var x = Var::leaf(Tensor::scalar(2.0), true);
    NoGradGuard ng;
    Var y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}
