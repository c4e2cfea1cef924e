#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "tracenas/parallel.hpp"
#include "tracenas/rng.hpp"
#include "tracenas/tape.hpp"

using namespace tracenas;
using tracenas::testing::fd_check;
using tracenas::testing::random_tensor;
using tracenas::testing::random_tensor_margin;

TEST_CASE("tensor basics and shape errors") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), ShapeError);
    Tensor a({2}, {1.0, 2.0}), b({2}, {3.0, 5.0});
    CHECK(a.dot(b) == doctest::Approx(13.0));
}

TEST_CASE("rng streams are deterministic") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    Rng c(43);
    CHECK(Rng(42).uniform() != c.uniform());
}

TEST_CASE("dense identity case: params=[[1]], x=[3] -> [3]") {
    Tape T;
    const int w = T.leaf(Tensor({1, 1}, {1.0}));
    const int x = T.leaf(Tensor({1}, {3.0}));
    const int y = T.dense(w, x);
    CHECK(T.value(y)[0] == doctest::Approx(3.0));  // fan_in 1: scale 1
}

TEST_CASE("dense applies the 1/sqrt(fan_in) scaling") {
    Tape T;
    const int w = T.leaf(Tensor({1, 4}, {1.0, 1.0, 1.0, 1.0}));
    const int x = T.leaf(Tensor({4}, {1.0, 1.0, 1.0, 1.0}));
    const int y = T.dense(w, x);
    CHECK(T.value(y)[0] == doctest::Approx(4.0 / 2.0));
}

TEST_CASE("relu on [-1, 0, 2] -> [0, 0, 2]") {
    Tape T;
    const int x = T.leaf(Tensor({3}, {-1.0, 0.0, 2.0}));
    const int y = T.relu(x);
    CHECK(T.value(y)[0] == 0.0);
    CHECK(T.value(y)[1] == 0.0);
    CHECK(T.value(y)[2] == 2.0);
}

TEST_CASE("zero kind returns zeros of the input shape") {
    Tape T;
    const int x = T.leaf(Tensor({2, 3, 3}, std::vector<double>(18, 7.0)));
    const int y = T.zero_fn(x);
    CHECK(T.value(y).shape() == std::vector<int>{2, 3, 3});
    for (std::size_t i = 0; i < 18; ++i) CHECK(T.value(y)[i] == 0.0);
}

TEST_CASE("backward of a linear map returns the input") {
    Tape T;
    const int w = T.leaf(Tensor({1, 2}, {0.5, -0.25}));
    const int x = T.constant(Tensor({2}, {1.0, 2.0}));
    const int y = T.matvec(w, x);  // unscaled: plain w.x
    const auto g = T.backward(y, Tensor::scalar(1.0));
    CHECK(g[static_cast<size_t>(w)][0] == doctest::Approx(1.0));
    CHECK(g[static_cast<size_t>(w)][1] == doctest::Approx(2.0));
}

TEST_CASE("backward through an inactive relu is zero") {
    Tape T;
    const int w = T.leaf(Tensor({1}, {-3.0}));
    const int y = T.relu(w);
    const auto g = T.backward(y, Tensor::scalar(1.0));
    CHECK(g[static_cast<size_t>(w)][0] == 0.0);
}

TEST_CASE("seed shape mismatch is a usage error") {
    Tape T;
    const int x = T.leaf(Tensor({3}));
    CHECK_THROWS_AS(T.backward(x, Tensor::scalar(1.0)), UsageError);
}

TEST_CASE("non-finite op output raises a numeric error") {
    Tape T;
    const int x = T.leaf(Tensor({1}, {1e308}));
    CHECK_THROWS_AS(T.mul(x, x), NumericError);
}

TEST_CASE("finite differences validate every catalog op") {
    Rng rng(7);
    auto scalarize = [](Tape& T, int out, Rng& r) {
        Tensor probe = random_tensor(T.value(out).shape(), r);
        return T.dot(out, T.constant(probe));
    };

    SUBCASE("dense") {
        Tape T;
        const int w = T.leaf(random_tensor({3, 4}, rng));
        const int x = T.leaf(random_tensor({4}, rng));
        const int s = scalarize(T, T.dense(w, x), rng);
        CHECK(fd_check(T, s, {w, x}).max_rel_err < 1e-5);
    }
    SUBCASE("conv2d-3x3") {
        Tape T;
        const int k = T.leaf(random_tensor({2, 3, 3, 3}, rng));
        const int x = T.leaf(random_tensor({3, 4, 5}, rng));
        const int s = scalarize(T, T.conv3(k, x), rng);
        CHECK(fd_check(T, s, {k, x}).max_rel_err < 1e-5);
    }
    SUBCASE("conv2d-1x1") {
        Tape T;
        const int k = T.leaf(random_tensor({2, 3, 1, 1}, rng));
        const int x = T.leaf(random_tensor({3, 4, 4}, rng));
        const int s = scalarize(T, T.conv1(k, x), rng);
        CHECK(fd_check(T, s, {k, x}).max_rel_err < 1e-5);
    }
    SUBCASE("relu") {
        Tape T;
        const int x = T.leaf(random_tensor_margin({6}, rng));
        const int s = scalarize(T, T.relu(x), rng);
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-5);
    }
    SUBCASE("tanh") {
        Tape T;
        const int x = T.leaf(random_tensor({6}, rng));
        const int s = scalarize(T, T.tanh_fn(x), rng);
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-5);
    }
    SUBCASE("add") {
        Tape T;
        const int a = T.leaf(random_tensor({5}, rng));
        const int b = T.leaf(random_tensor({5}, rng));
        const int s = scalarize(T, T.add(a, b), rng);
        CHECK(fd_check(T, s, {a, b}).max_rel_err < 1e-5);
    }
    SUBCASE("concat-channels") {
        Tape T;
        const int a = T.leaf(random_tensor({2, 3, 3}, rng));
        const int b = T.leaf(random_tensor({4, 3, 3}, rng));
        const int s = scalarize(T, T.concat_ch(a, b), rng);
        CHECK(fd_check(T, s, {a, b}).max_rel_err < 1e-5);
    }
    SUBCASE("mean-pool") {
        Tape T;
        const int x = T.leaf(random_tensor({2, 4, 4}, rng));
        const int s = scalarize(T, T.mean_pool(x), rng);
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-5);
    }
    SUBCASE("max-pool") {
        Tape T;
        const int x = T.leaf(random_tensor_margin({2, 4, 4}, rng, 5e-2));
        const int s = scalarize(T, T.max_pool(x), rng);
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-4);
    }
    SUBCASE("scale-by-constant") {
        Tape T;
        const int x = T.leaf(random_tensor({5}, rng));
        const int s = scalarize(T, T.scale(x, -2.5), rng);
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-5);
    }
    SUBCASE("softmax") {
        Tape T;
        const int x = T.leaf(random_tensor({5}, rng));
        const int s = scalarize(T, T.softmax(x), rng);
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-5);
    }
    SUBCASE("identity") {
        Tape T;
        const int x = T.leaf(random_tensor({5}, rng));
        const int s = scalarize(T, T.identity(x), rng);
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-5);
    }
    SUBCASE("ce_softmax") {
        Tape T;
        const int x = T.leaf(random_tensor({4}, rng));
        Tensor y({4});
        y[1] = 1.0;
        const int s = T.ce_softmax(x, T.constant(y));
        CHECK(fd_check(T, s, {x}).max_rel_err < 1e-5);
    }
    SUBCASE("internal closure ops") {
        Tape T;
        const int u = T.leaf(random_tensor({3}, rng));
        const int v = T.leaf(random_tensor({4}, rng));
        const int w = T.leaf(random_tensor({3, 4}, rng));
        const int o1 = T.outer(u, v, 0.7);
        const int o2 = T.matvec_t(w, u, 1.3);
        const int s = T.add(T.sumall(T.mul(o1, T.constant(random_tensor({3, 4}, rng)))),
                            T.dot(o2, T.constant(random_tensor({4}, rng))));
        CHECK(fd_check(T, s, {u, v, w}).max_rel_err < 1e-5);
    }
    SUBCASE("gap and smul and slices") {
        Tape T;
        const int x = T.leaf(random_tensor({3, 4, 4}, rng));
        const int sc = T.leaf(Tensor::scalar(0.8));
        const int g = T.gap(T.smul(sc, x));
        const int sl = T.slice_ch(T.pad_ch(g, 1, 6), 0, 5);
        const int s = T.dot(sl, T.constant(random_tensor({5}, rng)));
        CHECK(fd_check(T, s, {x, sc}).max_rel_err < 1e-5);
    }
}

TEST_CASE("random 2-layer MLP backward matches finite differences at 1e-5") {
    Rng rng(11);
    Tape T;
    const int w1 = T.leaf(random_tensor({8, 5}, rng));
    const int w2 = T.leaf(random_tensor({3, 8}, rng));
    const int x = T.constant(random_tensor({5}, rng));
    const int h = T.relu(T.dense(w1, x));
    const int f = T.dense(w2, h);
    const int s = T.dot(f, T.constant(random_tensor({3}, rng)));  // random seed-grad direction
    CHECK(fd_check(T, s, {w1, w2}).max_rel_err < 1e-5);
}

TEST_CASE("backward is linear in the seed") {
    Rng rng(13);
    Tape T;
    const int w = T.leaf(random_tensor({4, 4}, rng));
    const int x = T.constant(random_tensor({4}, rng));
    const int f = T.tanh_fn(T.dense(w, x));
    const Tensor s1 = random_tensor({4}, rng), s2 = random_tensor({4}, rng);
    const double a = 1.7, b = -0.3;
    Tensor mix({4});
    for (std::size_t i = 0; i < 4; ++i) mix[i] = a * s1[i] + b * s2[i];
    const auto g1 = T.backward(f, s1);
    const auto g2 = T.backward(f, s2);
    const auto gm = T.backward(f, mix);
    for (std::size_t q = 0; q < 16; ++q)
        CHECK(gm[static_cast<size_t>(w)][q] ==
              doctest::Approx(a * g1[static_cast<size_t>(w)][q] + b * g2[static_cast<size_t>(w)][q])
                  .epsilon(1e-12));
}

TEST_CASE("replay reproduces recorded values bit-identically") {
    Rng rng(17);
    Tape T;
    const int w = T.leaf(random_tensor({4, 4}, rng));
    const int x = T.leaf(random_tensor({4}, rng));
    const int f = T.softmax(T.relu(T.dense(w, x)));
    const Tensor before = T.value(f);
    T.replay();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(T.value(f)[i] == before[i]);
}

TEST_CASE("recorded backward agrees with the plain backward") {
    Rng rng(19);
    Tape T;
    const int w1 = T.leaf(random_tensor({6, 4}, rng));
    const int w2 = T.leaf(random_tensor({2, 6}, rng));
    const int x = T.constant(random_tensor({4}, rng));
    const int f = T.dense(w2, T.tanh_fn(T.dense(w1, x)));
    Tensor y({2});
    y[0] = 1.0;
    const int loss = T.ce_softmax(f, T.constant(y));

    const auto plain = T.backward(loss, Tensor::scalar(1.0));
    const auto rec = T.backward_graph(loss, T.constant(Tensor::scalar(1.0)));
    for (int leaf : {w1, w2}) {
        REQUIRE(rec[static_cast<size_t>(leaf)] >= 0);
        const Tensor& a = plain[static_cast<size_t>(leaf)];
        const Tensor& b = T.value(rec[static_cast<size_t>(leaf)]);
        for (std::size_t q = 0; q < a.size(); ++q) CHECK(a[q] == doctest::Approx(b[q]).epsilon(1e-12));
    }
}

TEST_CASE("gradients of gradient norms check against finite differences") {
    // s(w) = || d loss / d theta ||^2 must be differentiable in w
    Rng rng(23);
    auto build = [&](const Tensor& wv, const Tensor& thv, double* s_out, Tensor* ds_dw) {
        Tape T;
        Rng xrng(5);
        const int w = T.leaf(wv);    // mixing-style scalar path
        const int th = T.leaf(thv);  // parameters
        const int x = T.constant(random_tensor({3}, xrng));
        const int f = T.tanh_fn(T.dense(th, T.smul(w, x)));
        Tensor y({2});
        y[1] = 1.0;
        const int loss = T.ce_softmax(f, T.constant(y));
        const auto g = T.backward_graph(loss, T.constant(Tensor::scalar(1.0)));
        const int gth = g[static_cast<size_t>(th)];
        REQUIRE(gth >= 0);
        const int s = T.dot(gth, gth);
        *s_out = T.value(s)[0];
        if (ds_dw) {
            const auto g2 = T.backward(s, Tensor::scalar(1.0));
            *ds_dw = g2[static_cast<size_t>(w)];
        }
    };
    const Tensor w0 = Tensor::scalar(0.9);
    const Tensor th = random_tensor({2, 3}, rng);
    double s0 = 0.0;
    Tensor dw;
    build(w0, th, &s0, &dw);
    const double step = 1e-5;
    double sp = 0.0, sm = 0.0;
    build(Tensor::scalar(0.9 + step), th, &sp, nullptr);
    build(Tensor::scalar(0.9 - step), th, &sm, nullptr);
    const double fd = (sp - sm) / (2 * step);
    CHECK(std::abs(dw[0] - fd) / std::max(std::abs(fd), 1e-8) < 1e-4);
}

TEST_CASE("pairwise sums are mode independent") {
    Rng rng(29);
    std::vector<double> v(1023);
    for (auto& x : v) x = rng.normal() * std::pow(10.0, rng.uniform(-3, 3));
    const double serial = pairwise_sum(v);
    set_exec_mode(ExecMode::openmp);
    std::vector<double> out(8, 0.0);
    parallel_for(8, [&](std::size_t i) { out[i] = pairwise_sum(v); });
    for (double x : out) CHECK(x == serial);
    set_exec_mode(ExecMode::serial);
    CHECK(pairwise_sum(v) == serial);
    set_exec_mode(ExecMode::openmp);
}

TEST_CASE("forward_op dispatches the public catalog") {
    Rng rng(31);
    Tape T;
    const int x = T.leaf(random_tensor({4}, rng));
    const int w = T.leaf(random_tensor({4, 4}, rng));
    CHECK_NOTHROW(forward_op(T, OpKind::dense, {x}, {w}));
    CHECK_NOTHROW(forward_op(T, OpKind::softmax, {x}, {}));
    CHECK_THROWS_AS(forward_op(T, OpKind::dense, {x}, {}), ShapeError);
    CHECK(parse_op_kind("conv2d-3x3") == OpKind::conv2d_3x3);
    CHECK_THROWS_AS(parse_op_kind("conv9x9"), UsageError);
}
