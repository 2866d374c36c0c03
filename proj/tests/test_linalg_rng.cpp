#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "ssmkit/linalg.hpp"
#include "ssmkit/rng.hpp"

using ssmkit::Mat;
using ssmkit::Vec;

TEST_CASE("symmetrize averages off-diagonal pairs", "[linalg]") {
  Mat m(2, 2);
  m << 1.0, 0.4, 0.2, 2.0;
  const Mat s = ssmkit::symmetrize(m);
  REQUIRE(s(0, 1) == Catch::Approx(0.3).epsilon(1e-15));
  REQUIRE(s(1, 0) == s(0, 1));
  REQUIRE(s(0, 0) == 1.0);
  REQUIRE((ssmkit::symmetrize(s) - s).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("jittered cholesky reconstructs SPD matrices without jitter", "[linalg]") {
  Mat l0(3, 3);
  l0 << 2.0, 0.0, 0.0, 0.5, 1.5, 0.0, -0.3, 0.2, 1.0;
  const Mat p = l0 * l0.transpose();
  const Mat l = ssmkit::jittered_cholesky(p, "test");
  REQUIRE((l * l.transpose() - p).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(l(0, 1) == 0.0);  // lower triangular
}

TEST_CASE("jittered cholesky maps the zero matrix to a zero factor", "[linalg]") {
  const Mat l = ssmkit::jittered_cholesky(Mat::Zero(4, 4), "test");
  REQUIRE(l.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("jittered cholesky repairs a slightly indefinite matrix", "[linalg]") {
  Mat p(2, 2);
  p << 1.0, 1.0, 1.0, 1.0;          // rank one
  p(1, 1) -= 1e-13;                 // tiny negative eigenvalue
  const Mat l = ssmkit::jittered_cholesky(p, "test");
  REQUIRE((l * l.transpose() - p).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("jittered cholesky reports hopeless input with context", "[linalg]") {
  const Mat p = -Mat::Identity(2, 2);
  REQUIRE_THROWS_MATCHES(ssmkit::jittered_cholesky(p, "covariance at step 7"),
                         ssmkit::NumericalBreakdown,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("covariance at step 7")));
}

TEST_CASE("cholesky factor derivative matches finite differences", "[linalg]") {
  Mat l0(3, 3);
  l0 << 1.2, 0.0, 0.0, -0.4, 0.9, 0.0, 0.3, 0.1, 1.4;
  const Mat p = l0 * l0.transpose();
  Mat dp(3, 3);
  dp << 0.3, 0.1, -0.2, 0.1, 0.5, 0.05, -0.2, 0.05, 0.4;

  const Mat l = ssmkit::jittered_cholesky(p, "test");
  const Mat dl = ssmkit::cholesky_derivative(l, dp);

  const double h = 1e-7;
  const Mat l_plus = ssmkit::jittered_cholesky(p + h * dp, "test");
  const Mat l_minus = ssmkit::jittered_cholesky(p - h * dp, "test");
  const Mat fd = (l_plus - l_minus) / (2.0 * h);
  REQUIRE((dl - fd).cwiseAbs().maxCoeff() < 1e-6);
  // product rule consistency: dP = dL L' + L dL'
  const Mat rebuilt = dl * l.transpose() + l * dl.transpose();
  REQUIRE((rebuilt - dp).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gaussian log density matches the direct formula", "[linalg]") {
  Mat s(2, 2);
  s << 2.0, 0.3, 0.3, 1.0;
  Vec x(2), mu(2);
  x << 0.7, -0.2;
  mu << 0.1, 0.4;
  const Vec v = x - mu;
  const double expected =
      -0.5 * (2.0 * std::log(2.0 * std::numbers::pi) + std::log(s.determinant()) +
              v.dot(s.inverse() * v));
  REQUIRE(ssmkit::gaussian_log_density(x, mu, s, "test") ==
          Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("wrap_angle maps into the half-open interval (-pi, pi]", "[linalg]") {
  constexpr double pi = std::numbers::pi;
  REQUIRE(ssmkit::wrap_angle(0.0) == 0.0);
  REQUIRE(ssmkit::wrap_angle(pi) == Catch::Approx(pi));
  REQUIRE(ssmkit::wrap_angle(-pi) == Catch::Approx(pi));
  REQUIRE(ssmkit::wrap_angle(3.0 * pi) == Catch::Approx(pi));
  REQUIRE(ssmkit::wrap_angle(0.1 - 2.0 * pi) == Catch::Approx(0.1).margin(1e-12));
  REQUIRE(ssmkit::wrap_angle(-0.1 + 6.0 * pi) == Catch::Approx(-0.1).margin(1e-12));
  for (double a : {-9.7, -3.2, 0.5, 2.9, 14.1}) {
    const double w = ssmkit::wrap_angle(a);
    REQUIRE(w > -pi);
    REQUIRE(w <= pi);
    REQUIRE(std::abs(std::remainder(w - a, 2.0 * pi)) < 1e-12);
  }
}

TEST_CASE("solve_spd_right computes B times the inverse", "[linalg]") {
  Mat l0(3, 3);
  l0 << 1.5, 0.0, 0.0, 0.2, 1.1, 0.0, -0.6, 0.4, 0.9;
  const Mat a = l0 * l0.transpose();
  Mat b(2, 3);
  b << 1.0, -2.0, 0.5, 0.0, 3.0, 1.0;
  const Mat x = ssmkit::solve_spd_right(a, b, "test");
  REQUIRE((x * a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("counter RNG is deterministic and sensitive to every key part", "[rng]") {
  const double base = ssmkit::counter_uniform(1, 2, 3, ssmkit::NoiseRole::kProcess, 4);
  REQUIRE(base == ssmkit::counter_uniform(1, 2, 3, ssmkit::NoiseRole::kProcess, 4));
  REQUIRE(base != ssmkit::counter_uniform(2, 2, 3, ssmkit::NoiseRole::kProcess, 4));
  REQUIRE(base != ssmkit::counter_uniform(1, 3, 3, ssmkit::NoiseRole::kProcess, 4));
  REQUIRE(base != ssmkit::counter_uniform(1, 2, 4, ssmkit::NoiseRole::kProcess, 4));
  REQUIRE(base != ssmkit::counter_uniform(1, 2, 3, ssmkit::NoiseRole::kMeasurement, 4));
  REQUIRE(base != ssmkit::counter_uniform(1, 2, 3, ssmkit::NoiseRole::kProcess, 5));
  REQUIRE(base >= 0.0);
  REQUIRE(base < 1.0);
}

TEST_CASE("counter gaussian draws have standard moments", "[rng]") {
  const int draws = 200000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    const Vec z = ssmkit::counter_gaussian(42, 0, static_cast<std::uint64_t>(i),
                                           ssmkit::NoiseRole::kProcess, 1);
    sum += z(0);
    sum_sq += z(0) * z(0);
  }
  const double mean = sum / draws;
  const double var = sum_sq / draws - mean * mean;
  REQUIRE(std::abs(mean) < 0.01);
  REQUIRE(var == Catch::Approx(1.0).margin(0.02));
}

TEST_CASE("counter gaussian vectors are finite and componentwise distinct", "[rng]") {
  const Vec z = ssmkit::counter_gaussian(7, 1, 2, ssmkit::NoiseRole::kMeasurement, 5);
  REQUIRE(z.size() == 5);
  REQUIRE(z.allFinite());
  for (int i = 1; i < z.size(); ++i) REQUIRE(z(i) != z(0));
}
