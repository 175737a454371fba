#include <cmath>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "eco/numerics.hpp"
#include "support.hpp"

using namespace eco;

TEST_SUITE("numerics") {

TEST_CASE("matmul small cases") {
  const Tensor<double> a({2, 2}, {1, 2, 3, 4});
  const Tensor<double> b({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(Tensor<double>::identity(2), b) == b);
  CHECK(matmul(a, b) == Tensor<double>({2, 2}, {19, 22, 43, 50}));
}

TEST_CASE("matmul agrees with a naive triple loop") {
  SeededRng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = testing::random_tensor<double>({8, 8}, rng);
    const auto b = testing::random_tensor<double>({8, 8}, rng);
    const auto c = matmul(a, b);
    const auto bt = matmul_nt(a, Tensor<double>({8, 8}, [&] {
      std::vector<double> t(64);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) t[j * 8 + i] = b(i, j);
      return t;
    }()));
    for (int i = 0; i < 8; ++i) {
      for (int j = 0; j < 8; ++j) {
        double ref = 0;
        for (int k = 0; k < 8; ++k) ref += a(i, k) * b(k, j);
        CHECK(c(i, j) == doctest::Approx(ref).epsilon(1e-6));
        CHECK(bt(i, j) == doctest::Approx(ref).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor<float> a({2, 3}), b({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax rows") {
  const auto y = softmax_rows(Tensor<double>({3, 3}, {0, 0, 0, 1, 2, 3, 1000, 1000, 999}));
  for (int j = 0; j < 3; ++j) CHECK(y(0, j) == doctest::Approx(1.0 / 3.0));
  CHECK(y(1, 0) == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(y(1, 1) == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(y(1, 2) == doctest::Approx(0.66524096).epsilon(1e-7));
  CHECK(y.all_finite());
  const auto big = softmax_rows(Tensor<float>({1, 2}, {1000.f, 1000.f}));
  CHECK(big(0, 0) == 0.5f);
  CHECK(big(0, 1) == 0.5f);
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int j = 0; j < 3; ++j) s += y(i, j);
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("layer norm cases") {
  const Tensor<double> ones({2}, {1, 1}), zeros({2});
  const auto y = layer_norm(Tensor<double>({2}, {1, -1}), ones, zeros, 1e-5);
  CHECK(y[0] == doctest::Approx(0.999995).epsilon(1e-9));
  CHECK(y[1] == doctest::Approx(-0.999995).epsilon(1e-9));

  const Tensor<double> c({4}, {3, 3, 3, 3}), g4({4}, {1, 1, 1, 1}), b4({4});
  const auto flat = layer_norm(c, g4, b4, 1e-5);
  for (double v : flat.values()) CHECK(v == 0.0);

  const Tensor<double> x({3}, {0.3, -2, 5}), g0({3}), b3({3}, {0.5, -1, 2});
  CHECK(layer_norm(x, g0, b3, 1e-5) == b3);

  CHECK_THROWS_AS(layer_norm(x, g4, b4, 1e-5), DimensionError);
  CHECK_THROWS_AS(layer_norm(x, b3, b3, 0.0), ConfigError);
}

TEST_CASE("layer norm backward matches finite differences") {
  SeededRng rng(3);
  const auto x = testing::random_tensor<double>({6}, rng);
  const auto g = testing::random_tensor<double>({6}, rng);
  const auto b = testing::random_tensor<double>({6}, rng);
  const auto dy = testing::random_tensor<double>({6}, rng);
  Tensor<double> y({6}), dx({6});
  const auto stats = layer_norm_into<double>(x.values(), g.values(), b.values(), 1e-5, y.values());
  layer_norm_backward<double>(x.values(), g.values(), stats, dy.values(), dx.values());
  const auto num = finite_difference_grad(
      [&](const Tensor<double>& p) {
        const auto out = layer_norm(p, g, b, 1e-5);
        double s = 0;
        for (int i = 0; i < 6; ++i) s += out[i] * dy[i];
        return s;
      },
      x, 1e-5);
  CHECK(max_relative_error(dx.values(), num.values(), 1e-8) < 1e-6);
}

TEST_CASE("quick_gelu values") {
  CHECK(quick_gelu(0.0) == 0.0);
  CHECK(quick_gelu(1.0) == doctest::Approx(0.84579577).epsilon(1e-8));
  CHECK(quick_gelu(30.0) == doctest::Approx(30.0).epsilon(1e-12));
  CHECK(std::abs(quick_gelu(-30.0)) < 1e-20);
  const auto t = quick_gelu(Tensor<double>({2}, {0.0, 1.0}));
  CHECK(t[1] == doctest::Approx(0.84579577).epsilon(1e-8));
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double num = (quick_gelu(x + 1e-6) - quick_gelu(x - 1e-6)) / 2e-6;
    CHECK(quick_gelu_derivative(x) == doctest::Approx(num).epsilon(1e-7));
  }
}

TEST_CASE("finite differences") {
  const Tensor<double> x({2}, {1, 2});
  const auto g = finite_difference_grad(
      [](const Tensor<double>& p) { return p[0] * p[0] + p[1] * p[1]; }, x, 1e-3);
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-9));
  const auto z = finite_difference_grad([](const Tensor<double>&) { return 3.5; }, x, 1e-3);
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
  CHECK_THROWS_AS(finite_difference_grad(
                      [](const Tensor<double>& p) { return p[0] > 1.0 ? NAN : 0.0; }, x, 1e-3),
                  OracleError);
  CHECK_THROWS_AS(finite_difference_grad([](const Tensor<double>&) { return 0.0; }, x, 0.0),
                  ConfigError);
}

TEST_CASE("max relative error") {
  const std::vector<double> a{1.0, 0.0, -2.0}, n{1.0, 1e-12, -2.002};
  CHECK(max_relative_error(a, n, 1e-3) == doctest::Approx(0.002 / 2.002));
  CHECK(max_relative_error(a, a) == 0.0);
}

TEST_CASE("seeded rng is a pure function of seed and draw index") {
  SeededRng a(42), b(42), c(43);
  std::vector<std::uint64_t> da, db;
  for (int i = 0; i < 100; ++i) {
    da.push_back(a.next_u64());
    db.push_back(b.next_u64());
    CHECK(c.next_u64() != da.back());
  }
  CHECK(da == db);
  CHECK(a.counter() == 100);
  // Streams from derive() do not collide with the parent or each other.
  SeededRng p(42);
  auto s1 = p.derive(1), s2 = p.derive(2);
  std::set<std::uint64_t> seen(da.begin(), da.end());
  for (int i = 0; i < 100; ++i) {
    CHECK(seen.insert(s1.next_u64()).second);
    CHECK(seen.insert(s2.next_u64()).second);
  }
}

TEST_CASE("uniform draws") {
  SeededRng rng(5);
  double sum = 0, sq = 0;
  std::vector<int> counts(7, 0);
  const int n = 70000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    ++counts[rng.uniform_index(7)];
    const double gv = rng.gaussian(1.0, 2.0);
    sum += gv;
    sq += gv * gv;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.03));
  CHECK(var == doctest::Approx(4.0).epsilon(0.03));
  // Chi-square with 6 dof; 22.46 is the 0.999 quantile.
  double chi = 0;
  for (int c : counts) chi += (c - n / 7.0) * (c - n / 7.0) / (n / 7.0);
  CHECK(chi < 22.46);
  CHECK_THROWS_AS(rng.uniform_index(0), ConfigError);
}

TEST_CASE("hasher and hex round trip") {
  Hasher h;
  h.update("a", 1);
  CHECK(h.digest() == 0xaf63dc4c8601ec8cULL);  // FNV-1a 64 of "a"
  for (std::uint64_t v : {0ULL, 1ULL, 0xdeadbeefcafef00dULL, ~0ULL}) {
    CHECK(hash_from_hex(hash_to_hex(v)) == v);
  }
  CHECK(hash_to_hex(0xabcULL).size() == 16);
  CHECK_THROWS(hash_from_hex("xyz"));
}

TEST_CASE("parallel_for covers every index and rethrows") {
  for (std::size_t threads : {1u, 2u, 5u}) {
    std::vector<int> hit(37, 0);
    parallel_for(hit.size(), threads, [&](std::size_t i) { hit[i] += 1; });
    for (int h : hit) CHECK(h == 1);
  }
  CHECK_THROWS_AS(parallel_for(10, 3,
                               [](std::size_t i) {
                                 if (i == 7) throw std::runtime_error("boom");
                               }),
                  std::runtime_error);
}

TEST_CASE("tensor basics") {
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}), DimensionError);
  Tensor<float> t({2, 3, 4});
  t(1, 2, 3) = 5.f;
  CHECK(t[23] == 5.f);
  CHECK(t.row(1).size() == 12);
  CHECK(t.cast<double>().cast<float>() == t);
  t[0] = NAN;
  CHECK_FALSE(t.all_finite());
}

}  // TEST_SUITE
