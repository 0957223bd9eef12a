#include <cmath>

#include "doctest.h"
#include "padapter/errors.hpp"
#include "padapter/rng.hpp"
#include "padapter/tensor.hpp"
#include "support.hpp"

using namespace padapter;

TEST_CASE("matmul identity and hand product") {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(matmul(Tensor::identity(2), a) == a);
    CHECK(matmul(a, Tensor::matrix({{5, 6}, {7, 8}})) == Tensor::matrix({{19, 22}, {43, 50}}));
}

TEST_CASE("matmul matches naive triple loop on random shapes up to 32x32") {
    Rng rng(11);
    {
        const Tensor a = Tensor::randn({7, 5}, rng), b = Tensor::randn({5, 3}, rng);
        CHECK(max_abs_diff(matmul(a, b), testutil::naive_matmul(a, b)) < 1e-12);
    }
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t m = 1 + rng.below(32), k = 1 + rng.below(32), n = 1 + rng.below(32);
        const Tensor a = Tensor::randn({m, k}, rng), b = Tensor::randn({k, n}, rng);
        const Tensor want = testutil::naive_matmul(a, b);
        CHECK(max_abs_diff(matmul(a, b), want) < 1e-12);
    }
}

TEST_CASE("matmul transposed variants agree with explicit transposes") {
    Rng rng(5);
    const Tensor a = Tensor::randn({4, 6}, rng), b = Tensor::randn({3, 6}, rng), c = Tensor::randn({4, 2}, rng);
    Tensor bt({6, 3}), at({6, 4});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 6; ++j) bt.at(j, i) = b.at(i, j);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) at.at(j, i) = a.at(i, j);
    CHECK(max_abs_diff(matmul_bt(a, b), testutil::naive_matmul(a, bt)) < 1e-12);
    CHECK(max_abs_diff(matmul_at(a, c), testutil::naive_matmul(at, c)) < 1e-12);
}

TEST_CASE("matmul shape error names both shapes") {
    try {
        matmul(Tensor({2, 3}), Tensor({4, 2}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("softmax symmetric cases") {
    const Tensor a = softmax_rows(Tensor({2}, 0.0));
    CHECK(a[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(0.5).epsilon(1e-15));
    const Tensor b = softmax_rows(Tensor({1, 3}, 4.2));
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(b[i] - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("softmax of [1,2,3] matches extended-precision evaluation") {
    const Tensor s = softmax_rows(Tensor({3}, std::vector<double>{1, 2, 3}));
    long double z = 0;
    for (int i = 1; i <= 3; ++i) z += std::exp(static_cast<long double>(i));
    for (int i = 1; i <= 3; ++i) CHECK(std::abs(s[i - 1] - static_cast<double>(std::exp((long double)i) / z)) < 1e-15);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t r = 1 + rng.below(8), c = 1 + rng.below(12);
        const Tensor x = Tensor::randn({r, c}, rng, 10.0);
        const Tensor s = softmax_rows(x);
        Tensor shifted = x;
        const double k = rng.uniform(-50, 50);
        for (auto& v : shifted.storage()) v += k;
        CHECK(max_abs_diff(s, softmax_rows(shifted)) < 1e-12);
        for (std::size_t i = 0; i < r; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j < c; ++j) {
                CHECK(s.at(i, j) >= 0.0);
                sum += s.at(i, j);
            }
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
    const Tensor big = softmax_rows(Tensor::matrix({{1000, 1000, -1000}}));
    CHECK(big.all_finite());
    CHECK(std::abs(big[0] - 0.5) < 1e-15);
}

TEST_CASE("tensor construction contracts") {
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 3}).reshaped({4, 2}), ShapeError);
    CHECK(Tensor({2, 3}).reshaped({3, 2}).shape() == Shape{3, 2});
    CHECK_THROWS_AS(add(Tensor({2}), Tensor({3})), ShapeError);
    CHECK_THROWS_AS(mul(Tensor({2}), Tensor({3})), ShapeError);
    Tensor bad({2}, std::vector<double>{1.0, std::nan("")});
    CHECK_FALSE(bad.all_finite());
}

TEST_CASE("elementwise kernels") {
    const Tensor a({3}, std::vector<double>{1, 2, 3}), b({3}, std::vector<double>{4, 5, 6});
    CHECK(add(a, b) == Tensor({3}, std::vector<double>{5, 7, 9}));
    CHECK(sub(b, a) == Tensor({3}, std::vector<double>{3, 3, 3}));
    CHECK(mul(a, b) == Tensor({3}, std::vector<double>{4, 10, 18}));
    CHECK(scale(a, 2) == Tensor({3}, std::vector<double>{2, 4, 6}));
    Tensor y = b;
    axpy(-1.0, a, y);
    CHECK(y == sub(b, a));
}

TEST_CASE("rng streams are deterministic and decorrelated") {
    Rng a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto va = a.next_u64();
        CHECK(va == b.next_u64());
        differs |= va != c.next_u64();
    }
    CHECK(differs);
    CHECK(derive_seed({1, 2}) != derive_seed({2, 1}));
    CHECK(derive_seed({1, 2}) == derive_seed({1, 2}));

    Rng n(7);
    double s = 0, s2 = 0;
    const int N = 200000;
    for (int i = 0; i < N; ++i) {
        const double v = n.normal();
        s += v;
        s2 += v * v;
    }
    CHECK(std::abs(s / N) < 0.01);
    CHECK(std::abs(s2 / N - 1.0) < 0.02);

    Rng u(9);
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 50000; ++i) ++counts[u.below(5)];
    for (int k : counts) CHECK(std::abs(k - 10000) < 500);
}
