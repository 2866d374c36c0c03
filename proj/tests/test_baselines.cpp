#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "ssmkit/baselines.hpp"
#include "ssmkit/models.hpp"

using ssmkit::Mat;
using ssmkit::PfProposal;
using ssmkit::StateSpaceModel;
using ssmkit::Vec;
using ssmkit::build_rule;

namespace {

/// Scalar linear model used for the particle-filter statistics: informative
/// enough that proposals matter, cheap enough for repeated runs.
StateSpaceModel scalar_linear_model(double r_var) {
  return ssmkit::linear_gaussian_model(Mat::Constant(1, 1, 0.9), Mat::Identity(1, 1),
                                       Mat::Constant(1, 1, 0.2), Mat::Constant(1, 1, r_var),
                                       Vec::Zero(1), Mat::Identity(1, 1));
}

}  // namespace

TEST_CASE("the extended filter is exact on linear models", "[baselines]") {
  const oracle::LinearSystem sys = oracle::make_linear_system(31);
  const StateSpaceModel m =
      ssmkit::linear_gaussian_model(sys.a, sys.h, sys.q, sys.r, sys.m0, sys.p0);
  const ssmkit::SimOutput sim = ssmkit::simulate(m, Vec(), 50, 32, 0);
  const oracle::KalmanResult kf =
      oracle::kalman_filter(sys.a, sys.h, sys.q, sys.r, sys.m0, sys.p0, sim.measurements);

  const ssmkit::FilterResult ekf = ssmkit::ekf_filter_pass(m, Vec(), sim.measurements);
  REQUIRE(ekf.loglik == Catch::Approx(kf.loglik).epsilon(1e-12));
  REQUIRE(ekf.evals == 4 * 50);
  for (int k = 1; k <= 50; ++k) {
    const auto& step = ekf.steps[static_cast<size_t>(k - 1)];
    REQUIRE((step.posterior.mean - kf.filt_mean[k]).cwiseAbs().maxCoeff() < 1e-11);
    REQUIRE((step.posterior.cov - kf.filt_cov[k]).cwiseAbs().maxCoeff() < 1e-11);
  }

  const oracle::RtsResult rts = oracle::rts_smoother(kf, sys.a);
  const ssmkit::SmootherResult smoothed = ssmkit::ekf_rts_pass(ekf, m, Vec());
  REQUIRE(smoothed.evals == 2 * 50);
  for (int k = 0; k <= 50; ++k) {
    REQUIRE((smoothed.steps[static_cast<size_t>(k)].smoothed.mean - rts.mean[k])
                .cwiseAbs()
                .maxCoeff() < 1e-10);
    REQUIRE((smoothed.steps[static_cast<size_t>(k)].smoothed.cov - rts.cov[k])
                .cwiseAbs()
                .maxCoeff() < 1e-10);
  }
  REQUIRE((smoothed.steps.back().smoothed.mean.array() ==
           ekf.steps.back().posterior.mean.array())
              .all());
}

TEST_CASE("the extended filter runs on the benchmark nonlinear models", "[baselines]") {
  const StateSpaceModel ungm = ssmkit::ungm_model();
  const ssmkit::SimOutput s1 = ssmkit::simulate(ungm, ungm.default_theta, 60, 7, 0);
  const ssmkit::FilterResult f1 = ssmkit::ekf_filter_pass(ungm, ungm.default_theta, s1.measurements);
  REQUIRE(std::isfinite(f1.loglik));

  const StateSpaceModel ct = ssmkit::ct_model();
  const ssmkit::SimOutput s2 = ssmkit::simulate(ct, ct.default_theta, 50, 7, 0);
  const ssmkit::FilterResult f2 = ssmkit::ekf_filter_pass(ct, ct.default_theta, s2.measurements);
  REQUIRE(std::isfinite(f2.loglik));
  const ssmkit::SmootherResult sm2 = ssmkit::ekf_rts_pass(f2, ct, ct.default_theta);
  REQUIRE(sm2.steps.size() == 51);

  // close to the sigma-point answer on a smooth stretch, not exactly equal
  const auto rule = build_rule("sym3", 5);
  const ssmkit::FilterResult sp = ssmkit::filter_pass(ct, ct.default_theta, s2.measurements, *rule);
  REQUIRE(std::abs(f2.loglik - sp.loglik) < 0.05 * std::abs(sp.loglik) + 5.0);
}

TEST_CASE("the extended filter insists on Jacobians", "[baselines]") {
  StateSpaceModel m = ssmkit::ungm_model();
  m.fx = nullptr;
  REQUIRE_THROWS_AS(ssmkit::ekf_filter_pass(m, m.default_theta, Mat(1, 3)),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(ssmkit::ekf_rts_pass(ssmkit::FilterResult{}, m, m.default_theta),
                    std::invalid_argument);
}

TEST_CASE("particle estimates are reproducible and seed-sensitive", "[baselines]") {
  const StateSpaceModel m = ssmkit::ungm_model();
  const ssmkit::SimOutput sim = ssmkit::simulate(m, m.default_theta, 40, 11, 0);
  const ssmkit::PfResult a = ssmkit::pf_loglik(m, m.default_theta, sim.measurements, 300, 5);
  const ssmkit::PfResult b = ssmkit::pf_loglik(m, m.default_theta, sim.measurements, 300, 5);
  const ssmkit::PfResult c = ssmkit::pf_loglik(m, m.default_theta, sim.measurements, 300, 6);
  REQUIRE(a.loglik == b.loglik);
  REQUIRE((a.ess.array() == b.ess.array()).all());
  REQUIRE(a.loglik != c.loglik);
  REQUIRE(a.evals == 2LL * 300 * 40);
  REQUIRE(a.ess.size() == 40);
  REQUIRE(a.ess.minCoeff() > 0.0);
  REQUIRE(a.ess.maxCoeff() <= 300.0 + 1e-9);
}

TEST_CASE("particle likelihoods center on the exact likelihood", "[baselines]") {
  const StateSpaceModel m = scalar_linear_model(0.5);
  const ssmkit::SimOutput sim = ssmkit::simulate(m, Vec(), 25, 40, 0);
  const double exact =
      oracle::kalman_filter(Mat::Constant(1, 1, 0.9), Mat::Identity(1, 1),
                            Mat::Constant(1, 1, 0.2), Mat::Constant(1, 1, 0.5), Vec::Zero(1),
                            Mat::Identity(1, 1), sim.measurements)
          .loglik;

  double ratio_sum = 0.0;
  for (int seed = 1; seed <= 60; ++seed) {
    const ssmkit::PfResult pf = ssmkit::pf_loglik(m, Vec(), sim.measurements, 500,
                                                  static_cast<std::uint64_t>(seed),
                                                  PfProposal::kOptimalLinear);
    ratio_sum += std::exp(pf.loglik - exact);
  }
  const double mean_ratio = ratio_sum / 60.0;
  REQUIRE(mean_ratio > 0.85);
  REQUIRE(mean_ratio < 1.15);
}

TEST_CASE("the exact proposal keeps more effective particles than the bootstrap",
          "[baselines]") {
  // sharp measurements: blind propagation wastes most particles
  const StateSpaceModel m = scalar_linear_model(0.05);
  const ssmkit::SimOutput sim = ssmkit::simulate(m, Vec(), 30, 41, 0);
  double boot = 0.0, opt = 0.0;
  for (int seed = 1; seed <= 10; ++seed) {
    boot += ssmkit::pf_loglik(m, Vec(), sim.measurements, 400,
                              static_cast<std::uint64_t>(seed), PfProposal::kBootstrap)
                .ess.mean();
    opt += ssmkit::pf_loglik(m, Vec(), sim.measurements, 400,
                             static_cast<std::uint64_t>(seed), PfProposal::kOptimalLinear)
               .ess.mean();
  }
  REQUIRE(opt > boot);
}

TEST_CASE("the exact proposal demands an affine measurement", "[baselines]") {
  const StateSpaceModel ct = ssmkit::ct_model();
  const ssmkit::SimOutput sim = ssmkit::simulate(ct, ct.default_theta, 10, 3, 0);
  REQUIRE_THROWS_AS(ssmkit::pf_loglik(ct, ct.default_theta, sim.measurements, 50, 1,
                                      PfProposal::kOptimalLinear),
                    std::invalid_argument);

  StateSpaceModel no_jac = scalar_linear_model(0.5);
  no_jac.hx = nullptr;
  REQUIRE_THROWS_AS(
      ssmkit::pf_loglik(no_jac, Vec(), Mat(1, 5), 50, 1, PfProposal::kOptimalLinear),
      std::invalid_argument);

  REQUIRE_THROWS_AS(ssmkit::pf_loglik(ct, ct.default_theta, sim.measurements, 0, 1),
                    std::invalid_argument);
}

TEST_CASE("a single particle still produces a finite estimate", "[baselines]") {
  // nearly deterministic dynamics and a flat likelihood keep one particle alive
  const StateSpaceModel m = ssmkit::linear_gaussian_model(
      Mat::Constant(1, 1, 0.9), Mat::Identity(1, 1), Mat::Constant(1, 1, 1e-8),
      Mat::Constant(1, 1, 25.0), Vec::Zero(1), Mat::Identity(1, 1));
  const ssmkit::SimOutput sim = ssmkit::simulate(m, Vec(), 20, 8, 0);
  const ssmkit::PfResult pf = ssmkit::pf_loglik(m, Vec(), sim.measurements, 1, 4);
  REQUIRE(std::isfinite(pf.loglik));
  REQUIRE((pf.ess.array() == 1.0).all());
}

TEST_CASE("likelihood maximization through the extended filter", "[baselines]") {
  // theta = measurement-noise variance; on this linear model the extended
  // and sigma-point likelihoods coincide, so both maximizers must agree
  StateSpaceModel m = scalar_linear_model(0.5);
  m.param_dim = 1;
  m.default_theta = Vec::Constant(1, 0.5);
  m.meas_cov = [](const Vec& th) { return Mat(Mat::Constant(1, 1, th(0))); };
  m.dr_dtheta = [](const Vec&, int) { return Mat(Mat::Identity(1, 1)); };
  const ssmkit::SimOutput sim = ssmkit::simulate(m, m.default_theta, 80, 21, 0);

  ssmkit::OptimizerConfig config;
  config.grad_tol = 1e-5;
  const ssmkit::OptimizerResult ekf_fit =
      ssmkit::ekf_maximize_likelihood(m, Vec::Constant(1, 1.2), sim.measurements, config);
  const auto rule = build_rule("sym3", 1);
  const ssmkit::OptimizerResult sp_fit = ssmkit::maximize_likelihood(
      m, Vec::Constant(1, 1.2), sim.measurements, *rule, config);
  REQUIRE(ekf_fit.converged);
  REQUIRE(std::abs(ekf_fit.theta(0) - sp_fit.theta(0)) < 1e-4);
  REQUIRE(ekf_fit.evals > 0);
}
