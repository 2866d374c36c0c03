#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssmkit/estimate.hpp"
#include "ssmkit/gauss.hpp"
#include "ssmkit/linalg.hpp"
#include "ssmkit/models.hpp"
#include "ssmkit/rng.hpp"

namespace ssmkit {

/// Extended Kalman filter over the same model interface; shares the
/// FilterStep/FilterResult containers with the sigma-point filter so the two
/// can be compared step by step.  Requires the state Jacobians fx and hx.
inline FilterResult ekf_filter_pass(const StateSpaceModel& model, const Vec& theta, const Mat& y) {
  if (model.fx == nullptr || model.hx == nullptr)
    throw std::invalid_argument("EKF requires state Jacobians fx and hx");
  const int t_len = static_cast<int>(y.cols());
  const Mat q = model.process_cov(theta);
  const Mat r = model.meas_cov(theta);

  FilterResult result;
  result.initial = {model.init_mean(theta), symmetrize(model.init_cov(theta))};
  result.steps.reserve(t_len);
  GaussState current = result.initial;
  for (int k = 1; k <= t_len; ++k) {
    const std::string where = " at step " + std::to_string(k);
    FilterStep step;
    const Mat f_jac = model.fx(current.mean, theta, k - 1);
    step.predicted.mean = model.f(current.mean, theta, k - 1);
    step.predicted.cov = symmetrize(f_jac * current.cov * f_jac.transpose() + q);

    const Mat h_jac = model.hx(step.predicted.mean, theta);
    step.mu = model.h(step.predicted.mean, theta);
    step.S = symmetrize(h_jac * step.predicted.cov * h_jac.transpose() + r);
    step.C = step.predicted.cov * h_jac.transpose();
    step.K = solve_spd_right(step.S, step.C, "innovation covariance" + where);
    step.v = model.apply_residual(y.col(k - 1) - step.mu);
    step.posterior.mean = step.predicted.mean + step.K * step.v;
    step.posterior.cov = symmetrize(step.predicted.cov - step.K * step.S * step.K.transpose());
    step.loglik = gaussian_log_density(step.v, Vec::Zero(step.v.size()), step.S,
                                       "innovation covariance" + where);
    result.loglik += step.loglik;
    current = step.posterior;
    result.steps.push_back(std::move(step));
  }
  result.evals = 4 * static_cast<long long>(t_len);
  return result;
}

/// RTS smoother matching ekf_filter_pass, with the linearized transition
/// cross covariance D_{k+1} = P_{k|k} F_x(m_{k|k})^T.
inline SmootherResult ekf_rts_pass(const FilterResult& filter, const StateSpaceModel& model,
                                   const Vec& theta) {
  if (filter.steps.empty())
    throw std::invalid_argument("ekf_rts_pass requires at least one filter step");
  const int t_len = static_cast<int>(filter.steps.size());
  const Mat q = model.process_cov(theta);

  SmootherResult result;
  result.steps.resize(t_len + 1);
  result.steps[t_len].smoothed = filter.steps[t_len - 1].posterior;
  for (int k = t_len - 1; k >= 0; --k) {
    const GaussState& posterior = k == 0 ? filter.initial : filter.steps[k - 1].posterior;
    const Mat f_jac = model.fx(posterior.mean, theta, k);
    const Vec pred_mean = model.f(posterior.mean, theta, k);
    const Mat pred_cov = symmetrize(f_jac * posterior.cov * f_jac.transpose() + q);
    const Mat cross = posterior.cov * f_jac.transpose();
    const Mat gain =
        solve_spd_right(pred_cov, cross, "smoother predicted covariance at step " +
                                             std::to_string(k));
    const GaussState& next = result.steps[k + 1].smoothed;
    result.steps[k].smoothed.mean = posterior.mean + gain * (next.mean - pred_mean);
    result.steps[k].smoothed.cov =
        symmetrize(posterior.cov + gain * (next.cov - pred_cov) * gain.transpose());
    result.steps[k].gain = gain;
  }
  result.evals = 2 * static_cast<long long>(t_len);
  return result;
}

enum class PfProposal { kBootstrap, kOptimalLinear };

struct PfResult {
  double loglik = 0.0;
  Vec ess;  // effective sample size after each step, before resampling
  long long evals = 0;
};

/// Particle-filter estimate of the marginal log-likelihood.  Systematic
/// resampling triggers when the effective sample size drops below half the
/// particle count.  The optimal proposal requires an affine measurement
/// h(x) = H x + c (verified on probe points) and samples each particle from
/// p(x_k | x_{k-1}, y_k) exactly.  All randomness is counter-based, keyed by
/// (seed, particle, step, role), so results are reproducible bit for bit.
inline PfResult pf_loglik(const StateSpaceModel& model, const Vec& theta, const Mat& y,
                          int particles, std::uint64_t seed,
                          PfProposal proposal = PfProposal::kBootstrap) {
  if (particles < 1) throw std::invalid_argument("pf_loglik requires at least one particle");
  const int n = model.state_dim;
  const int d = model.meas_dim;
  const int t_len = static_cast<int>(y.cols());

  const Mat q = model.process_cov(theta);
  const Mat r = model.meas_cov(theta);
  const Mat lq = jittered_cholesky(q, "process covariance");
  const Mat l0 = jittered_cholesky(model.init_cov(theta), "initial covariance");

  // Cached measurement-density pieces.
  Mat h_mat, prop_gain, l_prop;
  Vec h_off;
  Mat ls;  // Cholesky factor of the innovation covariance used in weights
  if (proposal == PfProposal::kOptimalLinear) {
    const Vec probe = Vec::Zero(n);
    if (model.hx == nullptr)
      throw std::invalid_argument("optimal proposal requires the measurement Jacobian hx");
    h_mat = model.hx(probe, theta);
    h_off = model.h(probe, theta) - h_mat * probe;
    for (int trial = 0; trial < 3; ++trial) {
      const Vec x = Vec::Constant(n, 0.7 * (trial + 1));
      if ((model.h(x, theta) - (h_mat * x + h_off)).cwiseAbs().maxCoeff() > 1e-8)
        throw std::invalid_argument(
            "optimal proposal requires an affine measurement function");
    }
    const Mat s_p = symmetrize(h_mat * q * h_mat.transpose() + r);
    ls = jittered_cholesky(s_p, "proposal innovation covariance");
    prop_gain = solve_spd_right(s_p, Mat(q * h_mat.transpose()), "proposal covariance");
    l_prop = jittered_cholesky(symmetrize(q - prop_gain * s_p * prop_gain.transpose()),
                               "proposal covariance");
  } else {
    ls = jittered_cholesky(r, "measurement covariance");
  }
  const double ls_logdet = 2.0 * ls.diagonal().array().log().sum();
  const auto log_density = [&](const Vec& residual) {
    const Vec z = ls.triangularView<Eigen::Lower>().solve(residual);
    return -0.5 * (d * std::log(2.0 * std::numbers::pi) + ls_logdet + z.squaredNorm());
  };

  Mat x(n, particles);
  for (int i = 0; i < particles; ++i)
    x.col(i) = model.init_mean(theta) +
               l0 * counter_gaussian(seed, static_cast<std::uint64_t>(i), 0,
                                     NoiseRole::kInitState, n);
  Vec log_w = Vec::Constant(particles, -std::log(static_cast<double>(particles)));

  PfResult result;
  result.ess = Vec(t_len);
  for (int k = 1; k <= t_len; ++k) {
    Vec log_inc(particles);
    for (int i = 0; i < particles; ++i) {
      if (proposal == PfProposal::kBootstrap) {
        x.col(i) = model.f(x.col(i), theta, k - 1) +
                   lq * counter_gaussian(seed, static_cast<std::uint64_t>(i),
                                         static_cast<std::uint64_t>(k), NoiseRole::kProcess, n);
        log_inc(i) =
            log_density(model.apply_residual(y.col(k - 1) - model.h(x.col(i), theta)));
      } else {
        const Vec pred = model.f(x.col(i), theta, k - 1);
        const Vec meas_res = y.col(k - 1) - (h_mat * pred + h_off);
        log_inc(i) = log_density(meas_res);
        x.col(i) = pred + prop_gain * meas_res +
                   l_prop * counter_gaussian(seed, static_cast<std::uint64_t>(i),
                                             static_cast<std::uint64_t>(k),
                                             NoiseRole::kProposal, n);
      }
    }
    const Vec combined = log_w + log_inc;
    const double max_c = combined.maxCoeff();
    const double lse = max_c + std::log((combined.array() - max_c).exp().sum());
    result.loglik += lse;
    log_w = combined.array() - lse;

    const Vec w = log_w.array().exp();
    const double ess = 1.0 / w.squaredNorm();
    result.ess(k - 1) = ess;
    if (ess < 0.5 * particles) {
      // Systematic resampling at evenly spaced quantiles of the weights.
      const double u0 = counter_uniform(seed, 0, static_cast<std::uint64_t>(k),
                                        NoiseRole::kResample, 0);
      Mat resampled(n, particles);
      double cumulative = w(0);
      int src = 0;
      for (int j = 0; j < particles; ++j) {
        const double target = (u0 + j) / static_cast<double>(particles);
        while (cumulative < target && src + 1 < particles) cumulative += w(++src);
        resampled.col(j) = x.col(src);
      }
      x = std::move(resampled);
      log_w.setConstant(-std::log(static_cast<double>(particles)));
    }
  }
  result.evals = 2 * static_cast<long long>(particles) * t_len;
  return result;
}

/// Maximum-likelihood estimation with the EKF likelihood.  The gradient is
/// taken by central finite differences; analytic sensitivities are only
/// implemented for the sigma-point filter.
inline OptimizerResult ekf_maximize_likelihood(const StateSpaceModel& model, const Vec& theta0,
                                               const Mat& y, const OptimizerConfig& config = {}) {
  LikelihoodBackend backend;
  backend.eval_cost = 4 * y.cols();
  backend.loglik = [&model, &y](const Vec& theta) {
    return ekf_filter_pass(model, theta, y).loglik;
  };
  return maximize_with_backend(backend, theta0, config);
}

}  // namespace ssmkit
