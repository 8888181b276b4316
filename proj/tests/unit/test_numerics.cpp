#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "ctxseg/autodiff.hpp"
#include "ctxseg/error.hpp"
#include "ctxseg/numerics.hpp"
#include "ctxseg/rng.hpp"
#include "ctxseg/training.hpp"

using namespace ctxseg;
using doctest::Approx;

namespace {

std::vector<double> sm(std::vector<double> u, double tau) { return softmax_temp<double>(u, tau); }

}  // namespace

TEST_CASE("softmax_temp examples") {
  auto a = sm({0.0, 0.0}, 1.0);
  CHECK(a[0] == 0.5);
  CHECK(a[1] == 0.5);

  auto b = sm({0.0, std::log(3.0)}, 1.0);
  CHECK(std::abs(b[0] - 0.25) < 1e-12);
  CHECK(std::abs(b[1] - 0.75) < 1e-12);

  // e / (e + 1)
  const double e = std::exp(1.0);
  auto c = sm({2.0, 0.0}, 2.0);
  CHECK(std::abs(c[0] - e / (e + 1.0)) < 1e-12);
  CHECK(c[0] == Approx(0.7311).epsilon(1e-4));
  CHECK(c[1] == Approx(0.2689).epsilon(1e-4));

  CHECK_THROWS_AS(sm({1.0}, 0.0), DomainError);
  CHECK_THROWS_AS(sm({1.0}, -1.0), DomainError);
}

TEST_CASE("softmax_temp is positive, normalised and shift invariant") {
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    std::vector<double> u(n);
    for (auto& v : u) v = rng.uniform(-30.0, 30.0);
    const double tau = rng.uniform(0.05, 5.0);
    const double shift = rng.uniform(-100.0, 100.0);
    const auto p = sm(u, tau);
    std::vector<double> us(u);
    for (auto& v : us) v += shift;
    const auto q = sm(us, tau);
    CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-12);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(p[i] > 0.0);
      CHECK(std::abs(p[i] - q[i]) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm examples") {
  std::vector<double> x{1.0, 3.0}, one{1.0, 1.0}, zero{0.0, 0.0};
  auto y = layer_norm<double>(x, one, zero, 0.0);
  CHECK(y[0] == Approx(-1.0));
  CHECK(y[1] == Approx(1.0));

  std::vector<double> c{4.0, 4.0, 4.0}, g3{2.0, 2.0, 2.0}, b3{0.5, -1.0, 3.0};
  auto yc = layer_norm<double>(c, g3, b3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(yc[i] == b3[i]);

  std::vector<double> g0{0.0, 0.0, 0.0}, x3{1.0, -7.0, 2.5};
  auto y0 = layer_norm<double>(x3, g0, b3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(y0[i] == b3[i]);

  std::vector<double> short_g{1.0};
  CHECK_THROWS_AS(layer_norm<double>(x, short_g, zero), ShapeError);
}

TEST_CASE("layer_norm standardises with unit gamma and zero beta") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    std::vector<double> x(n), g(n, 1.0), b(n, 0.0);
    for (auto& v : x) v = rng.uniform(-10.0, 10.0);
    auto y = layer_norm<double>(x, g, b);
    double mean = 0.0, var = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(n);
    for (double v : y) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    CHECK(std::abs(mean) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("grad_check on a quadratic") {
  ParamStore<double> params;
  params["theta"] = Tensor<double>({1}, 3.0);
  const auto report = grad_check(
      [](ad::Tape<double>&, const ParamVars<double>& p) {
        auto t = p.at("theta");
        return ad::sum(ad::mul(t, t));
      },
      params);
  REQUIRE(report.entries.size() == 1);
  CHECK(report.entries[0].analytic[0] == Approx(6.0));
  CHECK(std::abs(report.entries[0].numeric[0] - 6.0) < 1e-8);
  CHECK(report.passed(1e-5));
}

TEST_CASE("grad_check of a parameter the loss ignores") {
  ParamStore<double> params;
  params["used"] = Tensor<double>({2}, 1.5);
  params["unused"] = Tensor<double>({3}, -2.0);
  const auto report = grad_check(
      [](ad::Tape<double>&, const ParamVars<double>& p) { return ad::sum(ad::exp(p.at("used"))); }, params);
  for (const auto& e : report.entries) {
    if (e.name != "unused") continue;
    for (double v : e.analytic) CHECK(v == 0.0);
    for (double v : e.numeric) CHECK(v == 0.0);
  }
}

TEST_CASE("grad_check rejects a non-finite loss") {
  ParamStore<double> params;
  params["x"] = Tensor<double>({1}, 1.0);
  CHECK_THROWS_AS(grad_check(
                      [](ad::Tape<double>&, const ParamVars<double>& p) {
                        return ad::scale(ad::sum(p.at("x")), std::numeric_limits<double>::infinity());
                      },
                      params),
                  EvaluationError);
}

TEST_CASE("cross-entropy through a two-layer net passes grad_check") {
  Rng rng(9);
  ParamStore<double> params;
  auto rnd = [&](Shape s) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
    return t;
  };
  params["w1"] = rnd({3, 5});
  params["w2"] = rnd({5, 4});
  const Tensor<double> x = rnd({6, 3});
  const std::vector<std::uint8_t> targets{0, 3, 1, 2, 2, 0};
  const auto report = grad_check(
      [&](ad::Tape<double>& tape, const ParamVars<double>& p) {
        auto h = ad::relu(ad::matmul(tape.constant(x), p.at("w1")));
        auto logits = ad::reshape(ad::matmul(h, p.at("w2")), {6, 4, 1, 1});
        return ad::cross_entropy(logits, std::span<const std::uint8_t>(targets));
      },
      params);
  CHECK(report.max_rel_error() < 1e-5);
}

TEST_CASE("relative error uses the documented floor") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == Approx(0.5));
  CHECK(relative_error(0.0, 1e-9) == Approx(1e-9 / kGradCheckFloor));
}

TEST_CASE("autodiff matmul gradient matches the closed form") {
  ad::Tape<double> tape;
  auto a = tape.parameter(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = tape.parameter(Tensor<double>({3, 2}, {1, 0, 0, 1, 1, 1}));
  auto loss = ad::sum(ad::matmul(a, b));
  tape.backward(loss);
  // d/dA sum(AB) = 1 B^T, d/dB = A^T 1
  const auto ga = tape.grad(a), gb = tape.grad(b);
  const std::vector<double> ea{1, 1, 2, 1, 1, 2}, eb{5, 5, 7, 7, 9, 9};
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(ga[i] == ea[i]);
    CHECK(gb[i] == eb[i]);
  }
}

TEST_CASE("tensor shape contract") {
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor<double> t({2, 3}, 1.0);
  CHECK(t.size() == 6);
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}
