#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hmcface/autodiff.hpp"
#include "hmcface/gradcheck.hpp"
#include "hmcface/rng.hpp"
#include "hmcface/tensor.hpp"

using namespace hmc;
namespace ad = hmc::ad;

TEST_CASE("grad_check accepts an exact quadratic gradient") {
    auto f = [](const std::vector<double>& x) { return x[0] * x[0]; };
    auto r = grad_check(f, {6.0}, {3.0}, 1e-4, 1e-5);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("grad_check on exp(sin(x)) is tight") {
    auto f = [](const std::vector<double>& x) { return std::exp(std::sin(x[0])); };
    const double x0 = 0.5;
    const double g = std::cos(x0) * std::exp(std::sin(x0));
    auto r = grad_check(f, {g}, {x0}, 1e-4, 1e-5);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("grad_check flags a deliberately wrong gradient") {
    auto f = [](const std::vector<double>& x) { return x[0] * x[0]; };
    // claimed gradient 2x + 1 at x = 3: analytic 7 vs numeric 6
    auto r = grad_check(f, {7.0}, {3.0}, 1e-4, 1e-5);
    CHECK(!r.passed);
    CHECK(r.max_rel_error == doctest::Approx(1.0 / 7.0).epsilon(1e-6));
    CHECK(r.worst_index == 0);
}

TEST_CASE("grad_check reports non-finite values with the component named") {
    auto f = [](const std::vector<double>& x) { return std::log(x[0]); };
    auto r = grad_check(f, {1.0, 0.0}, {-0.5, 1.0}, 1e-4, 1e-5);
    CHECK(!r.passed);
    CHECK(std::isinf(r.max_rel_error));
    CHECK(!r.note.empty());
}

TEST_CASE("reverse pass matches finite differences on a composed scalar") {
    Rng rng(11);
    Tensor x = Tensor::randn({6}, rng);
    auto f = [](const ad::Var& v) {
        ad::Var a = ad::tanh(v);
        ad::Var b = ad::exp(ad::mul_scalar(v, 0.3));
        return ad::mean_all(ad::mul(a, b));
    };
    auto r = grad_check(f, x, 1e-6);
    CHECK(r.passed);
}

TEST_CASE("matmul and softmax gradients") {
    Rng rng(5);
    Tensor w = Tensor::randn({4, 3}, rng);
    auto f = [&](const ad::Var& v) {
        ad::Var x = ad::reshape(v, {2, 4});
        ad::Var y = ad::matmul(x, ad::constant(w));
        ad::Var p = ad::softmax_rows(y);
        return ad::sum_all(ad::square(p));
    };
    Tensor x0 = Tensor::randn({8}, rng);
    auto r = grad_check(f, x0, 1e-6);
    CHECK(r.passed);
}

TEST_CASE("conv and resize gradients") {
    Rng rng(7);
    Tensor w = Tensor::randn({2, 1, 3, 3}, rng, 0.5);
    Tensor b = Tensor::randn({2}, rng, 0.1);
    auto f = [&](const ad::Var& v) {
        ad::Var x = ad::reshape(v, {1, 1, 6, 6});
        ad::Var y = ad::conv2d(x, ad::constant(w), ad::constant(b), 2, 1);
        ad::Var up = ad::bilinear_resize(y, 5, 5);
        return ad::mean_all(ad::square(up));
    };
    Tensor x0 = Tensor::randn({36}, rng);
    auto r = grad_check(f, x0, 1e-6);
    CHECK(r.passed);

    auto fw = [&](const ad::Var& wv) {
        ad::Var x = ad::constant(x0.reshaped({1, 1, 6, 6}));
        ad::Var y = ad::conv2d(x, ad::reshape(wv, {2, 1, 3, 3}), ad::constant(b), 1, 1);
        return ad::mean_all(ad::abs_smoothless(y));
    };
    auto rw = grad_check(fw, w.reshaped({18}), 1e-5);
    CHECK(rw.passed);
}

TEST_CASE("second derivative through the smooth op set") {
    // d/dx of (dy/dx) for y = sum(tanh(x)^2): first grad 2 tanh x (1-tanh^2 x).
    Tensor x0({3}, {0.3, -0.7, 1.2});
    auto grad_component_sum = [](const ad::Var& v) {
        ad::Var y = ad::sum_all(ad::square(ad::tanh(v)));
        auto g = ad::gradients(y, {v});
        return ad::sum_all(g[0]);
    };
    auto r = grad_check(grad_component_sum, x0, 1e-6);
    CHECK(r.passed);
}

TEST_CASE("second derivative through a first-order kernel throws") {
    Rng rng(3);
    Tensor w = Tensor::randn({1, 1, 3, 3}, rng);
    Tensor x = Tensor::randn({1, 1, 4, 4}, rng);
    ad::Var xv = ad::leaf(x);
    ad::Var y =
        ad::mean_all(ad::square(ad::conv2d(xv, ad::constant(w), ad::constant(Tensor({0})), 1, 1)));
    auto g = ad::gradients(y, {xv});
    ad::Var gsum = ad::sum_all(g[0]);
    CHECK_THROWS_AS((void)ad::gradients(gsum, {xv}), HmcError);

    // A second derivative that is genuinely zero (linear op) stays zero
    // without touching the kernel's backward.
    ad::Var ylin =
        ad::mean_all(ad::conv2d(xv, ad::constant(w), ad::constant(Tensor({0})), 1, 1));
    auto g2 = ad::gradients(ylin, {xv});
    auto gg = ad::gradients(ad::sum_all(g2[0]), {xv});
    CHECK(gg[0]->value.max_abs() == 0.0);
}

TEST_CASE("gradient of an unused leaf is zero") {
    ad::Var a = ad::leaf(Tensor::scalar(2.0));
    ad::Var b = ad::leaf(Tensor::scalar(5.0));
    ad::Var y = ad::mul(a, a);
    auto g = ad::gradients(y, {a, b});
    CHECK(g[0]->value[0] == doctest::Approx(4.0));
    CHECK(g[1]->value[0] == 0.0);
}

TEST_CASE("repeated use of one node accumulates both paths") {
    ad::Var a = ad::leaf(Tensor::scalar(3.0));
    ad::Var y = ad::add(ad::mul(a, a), ad::mul_scalar(a, 2.0));  // x^2 + 2x
    auto g = ad::gradients(y, {a});
    CHECK(g[0]->value[0] == doctest::Approx(8.0));
}

TEST_CASE("axis-angle rotation round trip and gradient") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor w({3},
                 {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)});
        Tensor R = ad::rotation_from_axis_angle(w);
        Tensor w2 = ad::axis_angle_from_rotation(R);
        CHECK(w.max_abs_diff(w2) < 1e-9);
    }
    // Rotation applied to fixed points, checked against finite differences.
    Tensor pts = Tensor::randn({5, 3}, rng);
    auto f = [&](const ad::Var& w) {
        ad::Var R = ad::rotation_from_axis_angle(w);
        ad::Var moved = ad::matmul(ad::constant(pts), ad::transpose2d(R));
        return ad::sum_all(ad::square(moved - ad::constant(pts)));
    };
    auto r1 = grad_check(f, Tensor({3}, {0.4, -0.2, 0.9}), 1e-6);
    CHECK(r1.passed);
    auto r2 = grad_check(f, Tensor({3}, {1e-6, 2e-6, -1e-6}), 1e-6);
    CHECK(r2.passed);
}

TEST_CASE("splat render gradient in vertices and colors") {
    Rng rng(23);
    ad::PinholeIntrinsics K{20.0, 20.0, 7.5, 7.5};
    ad::SplatOptions opts;
    opts.width = 16;
    opts.height = 16;
    opts.radius_px = 1.4;

    Tensor verts({12, 3});
    Tensor cols({12, 3});
    for (int i = 0; i < 12; ++i) {
        verts.at2(i, 0) = rng.uniform(-4.0, 4.0);
        verts.at2(i, 1) = rng.uniform(-4.0, 4.0);
        verts.at2(i, 2) = rng.uniform(9.0, 12.0);
        for (int c = 0; c < 3; ++c) cols.at2(i, c) = rng.uniform(0.1, 0.9);
    }

    auto fv = [&](const ad::Var& v) {
        ad::Var img = ad::splat_render(v, ad::constant(cols), K, opts);
        return ad::mean_all(img);
    };
    auto rv = grad_check(fv, verts, 1e-5);
    CHECK(rv.passed);

    auto fc = [&](const ad::Var& c) {
        ad::Var img = ad::splat_render(ad::constant(verts), c, K, opts);
        return ad::mean_all(ad::square(img));
    };
    auto rc = grad_check(fc, cols, 1e-6);
    CHECK(rc.passed);
}

TEST_CASE("projection gradient") {
    Tensor verts({4, 3}, {1.0, 2.0, 10.0, -1.5, 0.5, 8.0, 0.2, -0.7, 12.0, 3.0, 1.0, 9.0});
    ad::PinholeIntrinsics K{30.0, 28.0, 8.0, 8.0};
    auto f = [&](const ad::Var& v) {
        return ad::sum_all(ad::square(ad::project_points(v, K)));
    };
    auto r = grad_check(f, verts, 1e-6);
    CHECK(r.passed);
}

TEST_CASE("rng streams are deterministic and forks are independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng base(9);
    Rng f1 = base.fork("alpha");
    Rng base2(9);
    Rng f2 = base2.fork("alpha");
    CHECK(f1.next_u64() == f2.next_u64());

    Rng base3(9);
    Rng g1 = base3.fork("beta");
    Rng base4(9);
    base4.fork("alpha");
    CHECK(g1.next_u64() != f1.next_u64());

    // Normal draws stay in a sane range and have roughly unit variance.
    Rng n(77);
    double s = 0, s2 = 0;
    const int N = 20000;
    for (int i = 0; i < N; ++i) {
        double v = n.normal();
        s += v;
        s2 += v * v;
    }
    CHECK(std::fabs(s / N) < 0.03);
    CHECK(std::fabs(s2 / N - 1.0) < 0.05);
}

TEST_CASE("tensor digests are order sensitive and stable") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 2}, {1, 2, 4, 3});
    CHECK(a.digest() != b.digest());
    CHECK(a.digest() == Tensor({2, 2}, {1, 2, 3, 4}).digest());
    CHECK(a.digest() != a.reshaped({4, 1}).digest());
}
