// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <catch_amalgamated.hpp>

#include "mckd/error.hpp"
#include "mckd/gradcheck.hpp"
#include "mckd/tensor.hpp"
#include "support.hpp"

using namespace mckd;
using Catch::Approx;

using test::random_tensor;

TEST_CASE("tensor construction and shape contract") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.numel() == 6);
    CHECK(numel(t.shape()) == t.numel());
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), Error);
    const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(m.at(1, 0) == 3);
    CHECK_THROWS_AS(Tensor::scalar(1).reshaped({2}), Error);
}

TEST_CASE("matmul values") {
    Tape tape;
    Var eye = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
    Var x = tape.constant(Tensor::matrix({{4}, {-7}}));
    CHECK(matmul(eye, x).value().values() == std::vector<double>{4, -7});

    Var a = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
    Var ones = tape.constant(Tensor::matrix({{1}, {1}}));
    Var r = matmul(a, ones);
    CHECK(r.shape() == Shape{2, 1});
    CHECK(r.value().values() == std::vector<double>{3, 7});
}

TEST_CASE("matmul shape mismatch is a dimension error") {
    Tape tape;
    Var a = tape.constant(Tensor({2, 3}));
    Var b = tape.constant(Tensor({2, 3}));
    try {
        (void)matmul(a, b);
        FAIL("no throw");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Dimension);
    }
}

TEST_CASE("matmul gradient of sum is ones times b transposed") {
    std::mt19937_64 rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    {
        Tape tape;
        tape.backward(sum(matmul(tape.param(a), tape.constant(b))));
    }
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 4; ++k) CHECK(a.grad()[i * 4 + k] == Approx(b.at(k, 0) + b.at(k, 1)).epsilon(1e-14));

    // independent check by central differences
    std::vector<double> numeric(12);
    for (std::size_t e = 0; e < 12; ++e) {
        auto f = [&](double delta) {
            Tensor p = a;
            p[e] += delta;
            double s = 0;
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 2; ++j)
                    for (std::size_t k = 0; k < 4; ++k) s += p.at(i, k) * b.at(k, j);
            return s;
        };
        numeric[e] = (f(1e-5) - f(-1e-5)) / 2e-5;
        CHECK(a.grad()[e] == Approx(numeric[e]).epsilon(1e-8));
    }
}

TEST_CASE("elementwise values") {
    Tape tape;
    CHECK(relu(tape.constant(Tensor::vector({-1, 0, 2}))).value().values() == std::vector<double>{0, 0, 2});
    CHECK(abs(tape.constant(Tensor::vector({-3, 3}))).value().values() == std::vector<double>{3, 3});
    const auto s = sigmoid(tape.constant(Tensor::vector({0}))).value();
    CHECK(s[0] == 0.5);
    CHECK((tape.constant(Tensor::vector({1, 2})) * tape.constant(2.0)).value().values() == std::vector<double>{2, 4});
    CHECK_THROWS_AS(tape.constant(Tensor::vector({1, 2})) + tape.constant(Tensor::vector({1, 2, 3})), Error);
}

TEST_CASE("log of non-positive is a domain error") {
    Tape tape;
    for (double v : {0.0, -1.0}) {
        try {
            (void)log(tape.constant(Tensor::vector({1.0, v})));
            FAIL("no throw");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Domain);
        }
    }
}

TEST_CASE("relu and abs subgradient at zero is zero") {
    Tensor x = Tensor::vector({0.0, 0.0});
    Tape tape;
    Var v = tape.param(x);
    tape.backward(sum(relu(v) + abs(v)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
    CHECK(tape.min_kink_distance() == 0.0);
}

TEST_CASE("gradient of sum exp at [0,1] is [1,e]") {
    Tensor x = Tensor::vector({0.0, 1.0});
    Tape tape;
    tape.backward(sum(exp(tape.param(x))));
    CHECK(x.grad()[0] == Approx(1.0).epsilon(1e-15));
    CHECK(x.grad()[1] == Approx(std::exp(1.0)).epsilon(1e-15));
    const double h = 1e-5;
    CHECK(x.grad()[1] == Approx((std::exp(1 + h) - std::exp(1 - h)) / (2 * h)).epsilon(1e-9));
}

TEST_CASE("concat values, identity, errors and gradient routing") {
    Tensor a = Tensor::matrix({{1, 2}});
    Tensor b = Tensor::matrix({{3, 4}});
    Tape tape;
    Var parts[] = {tape.param(a), tape.param(b)};
    Var c = concat(parts, 1);
    CHECK(c.shape() == Shape{1, 4});
    CHECK(c.value().values() == std::vector<double>{1, 2, 3, 4});
    Var single[] = {parts[0]};
    CHECK(concat(single, 1).value().values() == a.values());
    CHECK(concat(single, 1).shape() == a.shape());

    Tensor w = Tensor::vector({1.0, -2.0, 0.5, 3.0});
    tape.backward(sum(mul(c, tape.constant(w.reshaped({1, 4})))));
    CHECK(a.grad()[0] == 1.0);
    CHECK(a.grad()[1] == -2.0);
    CHECK(b.grad()[0] == 0.5);
    CHECK(b.grad()[1] == 3.0);

    Var bad[] = {tape.constant(Tensor({1, 2})), tape.constant(Tensor({2, 2}))};
    CHECK_THROWS_AS(concat(bad, 1), Error);
}

TEST_CASE("sum of concat routes ones to each part (finite differences)") {
    std::mt19937_64 rng(3);
    Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 1}, rng);
    std::vector<Tensor*> ps{&a, &b};
    LossFn f = [&](Tape& t) {
        Var parts[] = {t.param(a), t.param(b)};
        return sum(concat(parts, 1));
    };
    CHECK(grad_check(f, ps).max_rel_error < 1e-7);
    for (double g : a.grad()) CHECK(g == 1.0);
    for (double g : b.grad()) CHECK(g == 1.0);
}

TEST_CASE("softmax examples") {
    Tape tape;
    for (double v : softmax(tape.constant(Tensor::vector({0, 0, 0, 0}))).value().values()) CHECK(v == 0.25);

    const double c = 5.0, d = 1.0;
    const auto s = softmax(tape.constant(Tensor::vector({c, c + d}))).value();
    CHECK(s[0] == Approx(1.0 / (1.0 + std::exp(d))).epsilon(1e-14));
    CHECK(s[1] == Approx(std::exp(d) / (1.0 + std::exp(d))).epsilon(1e-14));

    // stable for large inputs
    const auto big = softmax(tape.constant(Tensor::vector({1000, 1001}))).value();
    CHECK(big[1] == Approx(s[1]).epsilon(1e-12));
}

TEST_CASE("softmax preserves argmax on random vectors") {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 100; ++t) {
        const Tensor x = random_tensor({7}, rng, 3.0);
        const auto s = softmax_values(x.data());
        CHECK(std::max_element(s.begin(), s.end()) - s.begin() ==
              std::max_element(x.data().begin(), x.data().end()) - x.data().begin());
    }
}

TEST_CASE("softmax properties over random instances") {
    std::mt19937_64 rng(17);
    std::uniform_int_distribution<std::size_t> len(1, 9);
    std::normal_distribution<double> nd(0.0, 4.0);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = len(rng);
        std::vector<double> x(n);
        for (auto& v : x) v = nd(rng);
        const auto s = softmax_values(x);
        CHECK(std::abs(std::accumulate(s.begin(), s.end(), 0.0) - 1.0) <= 1e-12);
        for (double v : s) CHECK(v > 0.0);

        const double c = nd(rng) * 10;
        std::vector<double> shifted(x);
        for (auto& v : shifted) v += c;
        const auto s2 = softmax_values(shifted);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(s[i] - s2[i]) <= 1e-12);

        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<double> px(n);
        for (std::size_t i = 0; i < n; ++i) px[i] = x[perm[i]];
        const auto sp = softmax_values(px);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(sp[i] - s[perm[i]]) <= 1e-15);

        // the taped op agrees with the plain one
        Tape tape;
        const auto taped = softmax(tape.constant(Tensor({n}, x))).value();
        for (std::size_t i = 0; i < n; ++i) CHECK(taped[i] == s[i]);
    }
}

TEST_CASE("backward: linearity, zero gradient, accumulation, non-scalar") {
    Tensor w = Tensor::vector({0.3, -1.2, 2.0});
    const Tensor x = Tensor::vector({4.0, 5.0, -6.0});
    {
        Tape tape;
        tape.backward(sum(tape.param(w) * tape.constant(x)));
    }
    CHECK(std::vector<double>(w.grad().begin(), w.grad().end()) == x.values());
    {
        Tape tape;
        tape.backward(sum(tape.param(w) * tape.constant(x)));
    }
    for (std::size_t i = 0; i < 3; ++i) CHECK(w.grad()[i] == 2 * x[i]);

    Tensor u = Tensor::vector({1.0, 2.0});
    {
        Tape tape;
        Var uu = tape.param(u);
        (void)uu;
        tape.backward(sum(tape.constant(x)));
    }
    for (double g : u.grad()) CHECK(g == 0.0);

    Tape tape;
    Var v = tape.param(w);
    CHECK_THROWS_AS(tape.backward(v), Error);
}

TEST_CASE("full MLP gradients match finite differences") {
    std::mt19937_64 rng(23);
    Tensor w1 = random_tensor({5, 7}, rng), b1 = random_tensor({7}, rng, 0.2);
    Tensor w2 = random_tensor({7, 3}, rng), b2 = random_tensor({3}, rng, 0.2);
    const Tensor x = random_tensor({6, 5}, rng);
    std::vector<Tensor*> ps{&w1, &b1, &w2, &b2};
    LossFn f = [&](Tape& t) {
        Var h = relu(add_bias(matmul(t.constant(x), t.param(w1)), t.param(b1)));
        Var y = add_bias(matmul(h, t.param(w2)), t.param(b2));
        return mean(mul(y, y));
    };
    const auto r = grad_check(f, ps);
    CHECK(r.min_kink_distance > 1e-3);
    CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("grad_check examples") {
    Tensor x = Tensor::vector({1.0, 2.0});
    std::vector<Tensor*> ps{&x};
    LossFn quad = [&](Tape& t) {
        Var v = t.param(x);
        return sum(v * v);
    };
    CHECK(grad_check(quad, ps).max_rel_error < 1e-7);
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);

    LossFn constant = [&](Tape& t) {
        (void)t.param(x);
        return t.constant(3.0);
    };
    CHECK(grad_check(constant, ps).max_rel_error == 0.0);
}

TEST_CASE("grad_check detects a corrupted backward rule") {
    std::mt19937_64 rng(2);
    Tensor x = random_tensor({4}, rng);
    std::vector<Tensor*> ps{&x};
    LossFn f = [&](Tape& t) { return sum(exp(t.param(x))); };
    CHECK(grad_check(f, ps).max_rel_error < 1e-8);
    auto corrupt = [](Tape& t) { t.corrupt(OpKind::Exp, 1.5); };
    CHECK(grad_check(f, ps, 1e-5, corrupt).max_rel_error > 0.1);
}

TEST_CASE("backward is bit-deterministic") {
    auto run = [] {
        std::mt19937_64 rng(99);
        Tensor w = random_tensor({8, 8}, rng);
        const Tensor x = random_tensor({16, 8}, rng);
        Tape tape;
        Var y = relu(matmul(tape.constant(x), tape.param(w)));
        tape.backward(sum(mul(y, y)));
        return std::vector<double>(w.grad().begin(), w.grad().end());
    };
    CHECK(run() == run());
}

TEST_CASE("impute_mean fills missing slots with the mean of present ones") {
    Tape tape;
    Var f1 = tape.constant(Tensor::matrix({{1, 2}}));
    Var f2 = tape.constant(Tensor::matrix({{3, 4}}));
    Var f3 = tape.constant(Tensor::matrix({{100, 100}}));
    Var parts[] = {f1, f2, f3};
    const std::uint8_t present[] = {1, 1, 0};
    const auto out = impute_mean(parts, present).value();
    CHECK(out.shape() == Shape{1, 3, 2});
    CHECK(out.values() == std::vector<double>{1, 2, 3, 4, 2, 3});
    const std::uint8_t none[] = {0, 0, 0};
    CHECK_THROWS_AS(impute_mean(parts, none), Error);
}

TEST_CASE("row-wise ops are differentiable") {
    std::mt19937_64 rng(8);
    Tensor x = random_tensor({4, 5}, rng);
    std::vector<Tensor*> ps{&x};
    const Tensor w = random_tensor({4, 5}, rng);
    LossFn f = [&](Tape& t) {
        Var v = t.param(x);
        return sum(log_softmax_rows(v) * t.constant(w)) + sum(softmax_rows(v) * t.constant(w)) + sum(row_norm2(v)) +
               sum(sum(v, 0)) * 0.5 + sum(sum(v, 1) * sum(v, 1));
    };
    CHECK(grad_check(f, ps).max_rel_error < 1e-6);
}

TEST_CASE("scale_blocks and block") {
    std::mt19937_64 rng(4);
    Tensor feats = random_tensor({3, 2, 4}, rng);
    Tensor w = Tensor::vector({0.7, -1.3});
    std::vector<Tensor*> ps{&feats, &w};
    LossFn f = [&](Tape& t) {
        Var s = scale_blocks(t.param(feats), t.param(w));
        return sum(mul(block(s, 0), block(s, 1)));
    };
    CHECK(grad_check(f, ps).max_rel_error < 1e-7);
    Tape tape;
    const auto s = scale_blocks(tape.constant(feats), tape.constant(w)).value();
    CHECK(s[4] == feats[4] * -1.3);
    CHECK(block(tape.constant(feats), 1).value()[0] == feats[4]);
}

TEST_CASE("op names are distinct") {
    CHECK(std::string(to_string(OpKind::Relu)) == "relu");
    CHECK(std::string(to_string(OpKind::MatMul)) == "matmul");
}
