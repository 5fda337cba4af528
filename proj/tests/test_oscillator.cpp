#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "shapesig/oscillator.hpp"
#include "shapesig/rng.hpp"
#include "test_util.hpp"

using namespace shapesig;
using testutil::fd_gradient;
using testutil::fd_jacobian;
using testutil::rel_err;

TEST_CASE("eval: constant and undamped cases") {
  ShapeSignature constant{0, 0, 0, 5, 0, 0, 0};
  CHECK(eval(constant, 3.0) == doctest::Approx(5.0).epsilon(1e-15));

  ShapeSignature flat_cos{0, 2, 0, 0, 0, 0, 0};
  for (double t : {-1.0, 0.0, 0.7, 42.0})
    CHECK(eval(flat_cos, t) == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("eval: matches an independent scalar evaluation") {
  const ShapeSignature s{0.2, 1.0, 1.0, 10.0, 0.3, 0.05, 2.0};
  // Direct expression: exp(-0.2) cos(1.7) + 0.1 + 10 at t = 4.
  const double expected =
      std::exp(-0.2) * std::cos(2.0 - 0.3) + 0.05 * 2.0 + 10.0;
  CHECK(eval(s, 4.0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(eval(s, 4.0) == doctest::Approx(9.9945).epsilon(1e-4));
}

TEST_CASE("eval: rejects non-finite input") {
  ShapeSignature s;
  CHECK_THROWS_AS(eval(s, std::numeric_limits<double>::quiet_NaN()),
                  std::domain_error);
  s.R = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(eval(s, 0.0), std::domain_error);
}

TEST_CASE("eval_vec: singleton, constants, and loop oracle") {
  Rng rng(11);
  const ShapeSignature s = testutil::random_signature(rng, 2.0);
  CHECK(eval_vec(s, {1.5})[0] == eval(s, 1.5));

  ShapeSignature constant{0, 0, 0, 7.5, 0, 0, 0};
  const auto vals = eval_vec(constant, {0.0, 1.0, 2.0});
  for (double v : vals) CHECK(v == doctest::Approx(7.5).epsilon(1e-15));

  std::vector<double> times;
  for (int i = 0; i < 100; ++i) times.push_back(-3.0 + 0.11 * i);
  const auto vec = eval_vec(s, times);
  for (std::size_t i = 0; i < times.size(); ++i)
    CHECK(vec[i] == eval(s, times[i]));

  CHECK_THROWS_AS(eval_vec(s, {}), std::domain_error);
}

TEST_CASE("grad_params: linear components are exact") {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const ShapeSignature s = testutil::random_signature(rng);
    const double t = rng.uniform(-5.0, 5.0);
    const Vec7 g = grad_params(s, t);
    CHECK(g[3] == 1.0);          // d/dy
    CHECK(g[5] == t - s.x);      // d/dc
  }
}

TEST_CASE("grad_params and hess_params match finite differences") {
  Rng rng(17);
  for (int rep = 0; rep < 120; ++rep) {
    const ShapeSignature s = testutil::random_signature(rng);
    const double t = rng.uniform(-5.0, 5.0);

    const auto f = [&](const Vec7& v) {
      return eval(ShapeSignature::from_vec(v), t);
    };
    const Vec7 g = grad_params(s, t);
    CHECK(rel_err(fd_gradient(f, s.to_vec()), g) < 1e-5);

    const auto gfun = [&](const Vec7& v) {
      return grad_params(ShapeSignature::from_vec(v), t);
    };
    const Mat7 h = hess_params(s, t);
    CHECK((h - h.transpose()).norm() == 0.0);  // symmetric by construction
    CHECK(rel_err(fd_jacobian(gfun, s.to_vec()), h) < 1e-5);
  }
}

TEST_CASE("hess_params: second partials of linear parameters vanish") {
  Rng rng(23);
  const ShapeSignature s = testutil::random_signature(rng);
  const Mat7 h = hess_params(s, 1.3);
  for (int d = 0; d < 7; ++d) {
    CHECK(h(3, d) == 0.0);  // y row
    if (d != 6) CHECK(h(5, d) == 0.0);  // c row except the c-x coupling
  }
  CHECK(h(5, 6) == -1.0);
}

TEST_CASE("special cases: the reduced motions agree with closed forms") {
  Rng rng(29);
  for (int rep = 0; rep < 100; ++rep) {
    ShapeSignature s = testutil::random_signature(rng, 2.0);
    const double t = rng.uniform(-4.0, 4.0);

    // Constantly driven: c = 0.
    s.c = 0.0;
    const double tau = t - s.x;
    const double dcd = s.R * std::exp(-0.5 * s.gamma * tau) *
                           std::cos(s.omega * tau - s.phi) +
                       s.y;
    CHECK(eval(s, t) == doctest::Approx(dcd).epsilon(1e-12));

    // Exponential: c = 0, omega = 0, phi = 0.
    ShapeSignature e = s;
    e.omega = 0.0;
    e.phi = 0.0;
    const double expm = e.R * std::exp(-0.5 * e.gamma * tau) + e.y;
    CHECK(eval(e, t) == doctest::Approx(expm).epsilon(1e-12));

    // Constant: R = 0, c = 0.
    ShapeSignature k = s;
    k.R = 0.0;
    CHECK(eval(k, t) == doctest::Approx(k.y).epsilon(1e-12));
  }
}

TEST_CASE("time/shift invariance: eval(t + d, x + d) == eval(t, x)") {
  Rng rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    ShapeSignature s = testutil::random_signature(rng, 2.0);
    const double t = rng.uniform(-5.0, 5.0);
    const double delta = rng.uniform(-10.0, 10.0);
    ShapeSignature shifted = s;
    shifted.x += delta;
    CHECK(eval(shifted, t + delta) ==
          doctest::Approx(eval(s, t)).epsilon(1e-12));
  }
}

TEST_CASE("ssr: exact fits, unit residual, and summation oracle") {
  Rng rng(37);
  const ShapeSignature s = testutil::random_signature(rng, 2.0);
  const auto times = testutil::linspace(0.0, 10.0, 60);
  auto tr = testutil::make_trace(times, eval_vec(s, times));
  CHECK(ssr(s, tr) == 0.0);

  auto one = testutil::make_trace({1.0}, {eval(s, 1.0) + 1.0});
  CHECK(ssr(s, one) == doctest::Approx(1.0).epsilon(1e-12));

  // Noisy trace against a direct summation.
  auto noisy = tr;
  double expected = 0.0;
  for (std::size_t i = 0; i < noisy.values.size(); ++i) {
    noisy.values[i] += rng.uniform(-0.5, 0.5);
    const double r = noisy.values[i] - eval(s, noisy.times[i]);
    expected += r * r;
  }
  CHECK(ssr(s, noisy) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ssr is zero iff the trace equals the model exactly") {
  Rng rng(41);
  for (int rep = 0; rep < 30; ++rep) {
    const ShapeSignature s = testutil::random_signature(rng, 2.0);
    const auto times = testutil::linspace(0.0, 5.0, 20);
    auto tr = testutil::make_trace(times, eval_vec(s, times));
    CHECK(ssr(s, tr) == 0.0);
    tr.values[rep % tr.values.size()] += 1e-7;
    CHECK(ssr(s, tr) > 0.0);
  }
}

TEST_CASE("validation: type invariants") {
  ShapeSignature s;
  s.omega = -0.5;
  CHECK_THROWS_AS(s.validate(), std::domain_error);
  s.omega = 0.0;
  s.phi = 2.0;
  CHECK_THROWS_AS(s.validate(), std::domain_error);
  s.phi = std::numbers::pi / 2;
  CHECK_NOTHROW(s.validate());

  TraceSeries tr = testutil::make_trace({0.0, 1.0, 1.0}, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(tr.validate(), std::domain_error);
  tr = testutil::make_trace({}, {});
  CHECK_THROWS_AS(tr.validate(), std::domain_error);
  tr = testutil::make_trace({0.0, 1.0}, {1.0});
  CHECK_THROWS_AS(tr.validate(), std::domain_error);
}
