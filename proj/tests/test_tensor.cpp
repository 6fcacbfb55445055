#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cfsl/rng.hpp"
#include "cfsl/tensor.hpp"

using namespace cfsl;

namespace {

std::vector<double> random_values(size_t n, uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

double l2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("elementwise ops compute expected values") {
    Graph g;
    Tensor a = Tensor::from_values({3}, {1.0, -2.0, 3.0});
    Tensor b = Tensor::from_values({3}, {0.5, 4.0, -1.0});

    REQUIRE(g.add(a, b).values() == std::vector<double>{1.5, 2.0, 2.0});
    REQUIRE(g.mul(a, b).values() == std::vector<double>{0.5, -8.0, -3.0});
    REQUIRE(g.scale(a, -2.0).values() == std::vector<double>{-2.0, 4.0, -6.0});
    REQUIRE(g.abs(a).values() == std::vector<double>{1.0, 2.0, 3.0});
    REQUIRE(g.relu(Tensor::from_values({3}, {-1.0, 0.0, 2.0})).values() == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("shape and finiteness violations are rejected") {
    Graph g;
    Tensor a = Tensor::from_values({2}, {1.0, 2.0});
    Tensor b = Tensor::from_values({3}, {1.0, 2.0, 3.0});
    REQUIRE_THROWS_AS(g.add(a, b), std::invalid_argument);
    REQUIRE_THROWS_AS(g.mul(a, b), std::invalid_argument);

    Tensor bad = Tensor::from_values({2}, {1.0, std::nan("")});
    REQUIRE_THROWS_AS(g.add(a, bad), std::invalid_argument);
    Tensor inf = Tensor::from_values({2}, {1.0, HUGE_VAL});
    REQUIRE_THROWS_AS(g.relu(inf), std::invalid_argument);
    REQUIRE_THROWS_AS(g.scale(a, std::nan("")), std::invalid_argument);
}

TEST_CASE("matmul matches a hand-computed product and handles rank-1 promotion") {
    Graph g;
    Tensor A = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor B = Tensor::from_values({3, 2}, {7, 8, 9, 10, 11, 12});
    Tensor C = g.matmul(A, B);
    REQUIRE(C.shape() == std::vector<int>{2, 2});
    REQUIRE(C.values() == std::vector<double>{58, 64, 139, 154});

    Tensor v = Tensor::from_values({3}, {1, 0, -1});
    Tensor r = g.matmul(v, B);
    REQUIRE(r.shape() == std::vector<int>{2});
    REQUIRE(r.values() == std::vector<double>{-4, -4});

    Tensor w = Tensor::from_values({3}, {1, 2, 3});
    Tensor c = g.matmul(A, w);
    REQUIRE(c.shape() == std::vector<int>{2});
    REQUIRE(c.values() == std::vector<double>{14, 32});

    Tensor u = Tensor::from_values({2}, {1, 2});
    Tensor dot = g.matmul(u, Tensor::from_values({2}, {3, 4}));
    REQUIRE(dot.rank() == 0);
    REQUIRE(dot.item() == 11.0);

    REQUIRE_THROWS_AS(g.matmul(A, Tensor::from_values({2, 2}, {1, 2, 3, 4})), std::invalid_argument);
}

TEST_CASE("l2_normalize matches the 3-4-5 triangle and preserves unit norm") {
    Graph g;
    Tensor x = Tensor::from_values({2}, {3.0, 4.0});
    Tensor y = g.l2_normalize(x);
    REQUIRE(y.values()[0] == Catch::Approx(0.6).margin(1e-9));
    REQUIRE(y.values()[1] == Catch::Approx(0.8).margin(1e-9));

    for (uint64_t seed = 1; seed <= 20; ++seed) {
        Tensor v = Tensor::from_values({16}, random_values(16, seed, -2.0, 2.0));
        Tensor n = g.l2_normalize(v);
        REQUIRE(std::fabs(l2(n.values()) - 1.0) < 1e-10);
    }

    Tensor z = g.l2_normalize(Tensor::from_values({4}, {0, 0, 0, 0}));
    REQUIRE(z.values() == std::vector<double>{0, 0, 0, 0});

    Tensor m = Tensor::from_values({2, 2}, {3.0, 0.0, 4.0, 2.0});
    Tensor mn = g.l2_normalize(m);
    REQUIRE(mn.values()[0] == Catch::Approx(0.6).margin(1e-9));
    REQUIRE(mn.values()[2] == Catch::Approx(0.8).margin(1e-9));
    REQUIRE(mn.values()[1] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(mn.values()[3] == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("softmax cross entropy on uniform logits equals log of the class count") {
    Graph g;
    Tensor logits = Tensor::zeros({24});
    Tensor loss = g.softmax_cross_entropy(logits, 7);
    REQUIRE(loss.item() == Catch::Approx(std::log(24.0)).margin(1e-12));

    REQUIRE_THROWS_AS(g.softmax_cross_entropy(logits, 24), std::invalid_argument);
    REQUIRE_THROWS_AS(g.softmax_cross_entropy(logits, -1), std::invalid_argument);
}

TEST_CASE("conv2d computes same-padded convolutions") {
    Graph g;

    SECTION("1x1 identity kernel reproduces the input") {
        Tensor x = Tensor::from_values({2, 2, 1}, {1, 2, 3, 4});
        Tensor k = Tensor::from_values({1, 1, 1, 1}, {1.0});
        REQUIRE(g.conv2d(x, k).values() == x.values());
    }

    SECTION("3x3 centered delta kernel reproduces the input") {
        Tensor x = Tensor::from_values({4, 4, 1}, random_values(16, 3));
        std::vector<double> kv(9, 0.0);
        kv[4] = 1.0;
        Tensor k = Tensor::from_values({3, 3, 1, 1}, kv);
        REQUIRE(g.conv2d(x, k).values() == x.values());
    }

    SECTION("all-ones kernel on a constant image shows zero padding at the border") {
        Tensor x = Tensor::from_values({3, 3, 1}, std::vector<double>(9, 2.0));
        Tensor k = Tensor::from_values({3, 3, 1, 1}, std::vector<double>(9, 1.0));
        Tensor y = g.conv2d(x, k);
        REQUIRE(y.values()[4] == 18.0);  // center: 9 taps
        REQUIRE(y.values()[0] == 8.0);   // corner: 4 taps
        REQUIRE(y.values()[1] == 12.0);  // edge: 6 taps
    }

    SECTION("channel mixing sums over input channels") {
        Tensor x = Tensor::from_values({1, 1, 2}, {3.0, 5.0});
        Tensor k = Tensor::from_values({1, 1, 2, 1}, {10.0, 100.0});
        REQUIRE(g.conv2d(x, k).values() == std::vector<double>{530.0});
    }

    SECTION("even kernel sizes and channel mismatches are rejected") {
        Tensor x = Tensor::from_values({2, 2, 1}, {1, 2, 3, 4});
        REQUIRE_THROWS_AS(g.conv2d(x, Tensor::zeros({2, 2, 1, 1})), std::invalid_argument);
        REQUIRE_THROWS_AS(g.conv2d(x, Tensor::zeros({3, 3, 2, 1})), std::invalid_argument);
    }
}

TEST_CASE("pooling ops") {
    Graph g;
    Tensor x = Tensor::from_values({2, 2, 1}, {1, 2, 3, 4});
    REQUIRE(g.avg_pool2(x).values() == std::vector<double>{2.5});
    REQUIRE(g.global_avg_pool(x).values() == std::vector<double>{2.5});
    REQUIRE_THROWS_AS(g.avg_pool2(Tensor::zeros({3, 2, 1})), std::invalid_argument);

    Tensor x2 = Tensor::from_values({2, 2, 2}, {1, 10, 2, 20, 3, 30, 4, 40});
    REQUIRE(g.global_avg_pool(x2).values() == std::vector<double>{2.5, 25.0});
}

TEST_CASE("masked_sum validates its index set") {
    Graph g;
    Tensor x = Tensor::from_values({4}, {1, 2, 3, 4});
    REQUIRE(g.masked_sum(x, {0, 2}).item() == 4.0);
    REQUIRE(g.masked_sum(x, {}).item() == 0.0);
    REQUIRE_THROWS_AS(g.masked_sum(x, {0, 0}), std::invalid_argument);
    REQUIRE_THROWS_AS(g.masked_sum(x, {4}), std::invalid_argument);
    REQUIRE_THROWS_AS(g.masked_sum(x, {-1}), std::invalid_argument);
}

TEST_CASE("backward requires a scalar loss and accumulates across calls") {
    Graph g;
    Tensor x = Tensor::from_values({2}, {1.0, 2.0});
    x.set_grad_enabled(true);
    Tensor y = g.add(x, x);
    REQUIRE_THROWS_AS(g.backward(y), std::invalid_argument);

    Tensor loss = g.sum(y);
    g.backward(loss);
    REQUIRE(x.grad() == std::vector<double>{2.0, 2.0});
    g.backward(loss);
    REQUIRE(x.grad() == std::vector<double>{4.0, 4.0});
}

TEST_CASE("check_gradient on sum returns the ones vector with tiny error") {
    Tensor x = Tensor::from_values({3}, {1.5, -2.0, 3.0});
    auto rep = check_gradient([&](Graph& g) { return g.sum(x); }, x);
    REQUIRE(rep.pass);
    REQUIRE(rep.max_rel_error <= 1e-6);
    REQUIRE(rep.n_checked == 3);
    REQUIRE(rep.excluded.empty());
    REQUIRE(x.grad() == std::vector<double>{1.0, 1.0, 1.0});
}

TEST_CASE("check_gradient on x*x yields the doubling gradient") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0});
    auto rep = check_gradient([&](Graph& g) { return g.sum(g.mul(x, x)); }, x);
    REQUIRE(rep.pass);
    REQUIRE(x.grad()[0] == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(x.grad()[1] == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("check_gradient validates a cosine-classifier style loss") {
    Tensor x = Tensor::from_values({8}, random_values(8, 11, 0.1, 1.0));
    Tensor W = Tensor::from_values({8, 3}, random_values(24, 12, -0.5, 0.5));

    auto build = [&](Graph& g) {
        Tensor logits = g.scale(g.matmul(g.l2_normalize(x), g.l2_normalize(g.abs(W))), 30.0);
        return g.softmax_cross_entropy(logits, 1);
    };

    auto rep_x = check_gradient(build, x);
    INFO("feature max_rel_error=" << rep_x.max_rel_error);
    REQUIRE(rep_x.pass);
    REQUIRE(rep_x.n_checked > 0);

    auto rep_w = check_gradient(build, W);
    INFO("weight max_rel_error=" << rep_w.max_rel_error);
    REQUIRE(rep_w.pass);
    REQUIRE(rep_w.n_checked > 0);
}

TEST_CASE("check_gradient validates conv, pooling and relu composites") {
    Tensor x = Tensor::from_values({4, 4, 2}, random_values(32, 21, -1.0, 1.0));
    Tensor k = Tensor::from_values({3, 3, 2, 3}, random_values(54, 22, -0.5, 0.5));

    auto build = [&](Graph& g) { return g.sum(g.global_avg_pool(g.avg_pool2(g.relu(g.conv2d(x, k))))); };

    auto rep_x = check_gradient(build, x);
    INFO("input max_rel_error=" << rep_x.max_rel_error);
    REQUIRE(rep_x.pass);
    auto rep_k = check_gradient(build, k);
    INFO("kernel max_rel_error=" << rep_k.max_rel_error);
    REQUIRE(rep_k.pass);
}

TEST_CASE("check_gradient validates concat and rank-2 normalization") {
    Tensor a = Tensor::from_values({3}, random_values(3, 31, 0.2, 1.0));
    Tensor b = Tensor::from_values({2}, random_values(2, 32, 0.2, 1.0));
    auto rep = check_gradient(
        [&](Graph& g) {
            Tensor cat = g.concat({a, b, a});
            return g.softmax_cross_entropy(g.scale(cat, 3.0), 2);
        },
        a);
    REQUIRE(rep.pass);

    Tensor m = Tensor::from_values({4, 3}, random_values(12, 33, -1.0, 1.0));
    auto rep_m = check_gradient([&](Graph& g) { return g.masked_sum(g.matmul(g.l2_normalize(m), Tensor::from_values({3}, {1.0, 2.0, 3.0})), {0, 2, 3}); }, m);
    REQUIRE(rep_m.pass);
}

TEST_CASE("check_gradient excludes coordinates whose discrete selection flips") {
    // x0 and x1 are separated by less than the probe step, so perturbing either
    // one flips the externally noted top-1 selection; x2 is safely the maximum.
    Tensor x = Tensor::from_values({3}, {1.0, 1.0 + 1e-7, 5.0});
    auto build = [&](Graph& g) {
        int top = 0;
        for (int i = 1; i < 3; ++i)
            if (x.values()[i] > x.values()[top]) top = i;
        g.note_discrete_indices({top});
        int second = top == 0 ? 1 : 0;
        for (int i = 0; i < 3; ++i)
            if (i != top && x.values()[i] > x.values()[second]) second = i;
        g.note_discrete_indices({second});
        return g.masked_sum(x, {top, second});
    };
    auto rep = check_gradient(build, x, 1e-5, 1e-4);
    REQUIRE(rep.excluded == std::vector<int>{0, 1});
    REQUIRE(rep.n_checked == 1);
    REQUIRE(rep.pass);
}

TEST_CASE("check_gradient rejects nondeterministic loss functions") {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0});
    Rng rng(5);
    auto build = [&](Graph& g) { return g.scale(g.sum(x), 1.0 + rng.uniform01()); };
    REQUIRE_THROWS_AS(check_gradient(build, x), std::runtime_error);
}

TEST_CASE("Nesterov SGD follows the hand-derived two-step recursion") {
    SECTION("without weight decay") {
        Tensor p = Tensor::from_values({1}, {1.0});
        p.set_grad_enabled(true);
        std::vector<Tensor> params{p};
        SgdNesterov opt(0.1, 0.9, 0.0);

        p.grad()[0] = 1.0;
        opt.step(params);
        REQUIRE(p.values()[0] == Catch::Approx(0.81).margin(1e-15));

        p.grad()[0] = 1.0;
        opt.step(params);
        REQUIRE(p.values()[0] == Catch::Approx(0.539).margin(1e-15));
    }

    SECTION("with weight decay folded into the gradient") {
        Tensor p = Tensor::from_values({1}, {1.0});
        p.set_grad_enabled(true);
        std::vector<Tensor> params{p};
        SgdNesterov opt(0.1, 0.9, 0.1);

        p.grad()[0] = 0.5;
        opt.step(params);
        REQUIRE(p.values()[0] == Catch::Approx(0.886).margin(1e-15));

        p.grad()[0] = 0.5;
        opt.step(params);
        REQUIRE(p.values()[0] == Catch::Approx(0.725566).margin(1e-12));
    }

    SECTION("invalid hyperparameters are rejected") {
        REQUIRE_THROWS_AS(SgdNesterov(0.0, 0.9, 0.0), std::invalid_argument);
        REQUIRE_THROWS_AS(SgdNesterov(-0.1, 0.9, 0.0), std::invalid_argument);
        REQUIRE_THROWS_AS(SgdNesterov(0.1, 1.0, 0.0), std::invalid_argument);
        SgdNesterov opt(0.1, 0.9, 0.0);
        REQUIRE_THROWS_AS(opt.set_lr(0.0), std::invalid_argument);
    }
}

TEST_CASE("deterministic Rng produces identical streams per seed") {
    Rng a(123), b(123), c(124);
    bool all_equal = true, any_diff = false;
    for (int i = 0; i < 100; ++i) {
        const double va = a.uniform01(), vb = b.uniform01(), vc = c.uniform01();
        all_equal = all_equal && (va == vb);
        any_diff = any_diff || (va != vc);
        REQUIRE(va >= 0.0);
        REQUIRE(va < 1.0);
    }
    REQUIRE(all_equal);
    REQUIRE(any_diff);

    Rng d(7);
    for (int i = 0; i < 200; ++i) {
        const auto v = d.uniform_int(13);
        REQUIRE(v < 13);
    }

    Rng e(9);
    double mean = 0.0, m2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = e.normal();
        mean += x;
        m2 += x * x;
    }
    mean /= n;
    m2 /= n;
    REQUIRE(std::fabs(mean) < 0.03);
    REQUIRE(std::fabs(m2 - 1.0) < 0.05);
}
