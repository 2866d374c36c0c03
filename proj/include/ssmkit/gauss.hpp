#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ssmkit/cubature.hpp"
#include "ssmkit/linalg.hpp"
#include "ssmkit/models.hpp"

namespace ssmkit {

struct GaussState {
  Vec mean;
  Mat cov;
};

/// Moments produced by propagating a Gaussian through a dynamic function:
/// the predicted state and the input-output cross covariance
/// D = E[(x - m)(f(x) - m^-)^T], which the smoother turns into its gain.
struct Prediction {
  GaussState state;
  Mat cross;
};

/// One measurement-update step of the Gaussian filter.  `v` is the
/// innovation after any residual post-processing (angle wrapping), `loglik`
/// the log-density of the innovation under N(0, S).
struct FilterStep {
  GaussState predicted;
  GaussState posterior;
  Vec mu;
  Mat S;
  Mat C;
  Mat K;
  Vec v;
  double loglik = 0.0;
};

struct FilterResult {
  GaussState initial;             // prior N(m0, P0), the step-0 posterior
  std::vector<FilterStep> steps;  // steps 1..T
  double loglik = 0.0;
  long long evals = 0;  // model function evaluations consumed
};

struct SmootherStep {
  GaussState smoothed;
  Mat gain;  // G_k, defined for k < T; empty at the terminal step
};

struct SmootherResult {
  std::vector<SmootherStep> steps;  // indices 0..T
  long long evals = 0;
};

/// Sigma-point propagation of N(mean, cov) through `f` plus additive noise Q.
/// Mean weights form the predicted mean; covariance weights form all
/// outer-product sums, including the input-output cross covariance.
inline Prediction predict(const GaussState& state,
                          const std::function<Vec(const Vec&)>& f, const Mat& q,
                          const CubatureRule& rule,
                          const std::string& context = "predicted covariance") {
  const Mat l = jittered_cholesky(state.cov, context + " (input state)");
  const Mat spread = l * rule.points;                 // n x N, deviations from the mean
  Mat propagated(state.mean.size(), rule.count());
  for (Eigen::Index i = 0; i < rule.count(); ++i)
    propagated.col(i) = f(state.mean + spread.col(i));
  const Vec mean = propagated * rule.mean_weights;
  const Mat centered = propagated.colwise() - mean;
  Prediction out;
  out.state.mean = mean;
  out.state.cov = symmetrize(centered * rule.cov_weights.asDiagonal() * centered.transpose() + q);
  out.cross = spread * rule.cov_weights.asDiagonal() * centered.transpose();
  return out;
}

/// Sigma-point measurement update of a predicted state against observation y.
/// `residual_fn` post-processes the raw innovation y - mu (identity if null).
inline FilterStep update(const GaussState& predicted, const Vec& y,
                         const std::function<Vec(const Vec&)>& h, const Mat& r,
                         const CubatureRule& rule,
                         const std::function<Vec(const Vec&)>& residual_fn = nullptr,
                         const std::string& context = "innovation covariance") {
  const Mat l = jittered_cholesky(predicted.cov, "predicted covariance");
  const Mat spread = l * rule.points;
  Mat propagated(y.size(), rule.count());
  for (Eigen::Index i = 0; i < rule.count(); ++i)
    propagated.col(i) = h(predicted.mean + spread.col(i));
  const Vec mu = propagated * rule.mean_weights;
  const Mat centered = propagated.colwise() - mu;

  FilterStep step;
  step.predicted = predicted;
  step.mu = mu;
  step.S = symmetrize(centered * rule.cov_weights.asDiagonal() * centered.transpose() + r);
  step.C = spread * rule.cov_weights.asDiagonal() * centered.transpose();
  step.K = solve_spd_right(step.S, step.C, context);
  step.v = residual_fn ? residual_fn(y - mu) : Vec(y - mu);
  step.posterior.mean = predicted.mean + step.K * step.v;
  step.posterior.cov = symmetrize(predicted.cov - step.K * step.S * step.K.transpose());
  step.loglik = gaussian_log_density(step.v, Vec::Zero(step.v.size()), step.S, context);
  return step;
}

/// Full forward pass over measurements y_1..y_T (columns of `y`), returning
/// per-step moments and the accumulated log-likelihood.  Deterministic: the
/// output is a pure function of the inputs.
inline FilterResult filter_pass(const StateSpaceModel& model, const Vec& theta, const Mat& y,
                                const CubatureRule& rule) {
  if (rule.dim != model.state_dim)
    throw std::invalid_argument("rule dimension " + std::to_string(rule.dim) +
                                " does not match state dimension " +
                                std::to_string(model.state_dim));
  if (y.cols() > 0 && y.rows() != model.meas_dim)
    throw std::invalid_argument("measurement matrix has " + std::to_string(y.rows()) +
                                " rows, model expects " + std::to_string(model.meas_dim));
  const int t_len = static_cast<int>(y.cols());
  FilterResult result;
  result.initial = {model.init_mean(theta), symmetrize(model.init_cov(theta))};
  result.steps.reserve(t_len);
  const Mat q = model.process_cov(theta);
  const Mat r = model.meas_cov(theta);

  GaussState current = result.initial;
  for (int k = 1; k <= t_len; ++k) {
    const std::string where = " at step " + std::to_string(k);
    Prediction pred = predict(
        current, [&](const Vec& x) { return model.f(x, theta, k - 1); }, q, rule,
        "predicted covariance" + where);
    FilterStep step = update(
        pred.state, y.col(k - 1), [&](const Vec& x) { return model.h(x, theta); }, r, rule,
        model.residual ? model.residual : std::function<Vec(const Vec&)>(),
        "innovation covariance" + where);
    result.loglik += step.loglik;
    current = step.posterior;
    result.steps.push_back(std::move(step));
  }
  result.evals = 2 * static_cast<long long>(rule.count()) * t_len;
  return result;
}

/// Rauch-Tung-Striebel backward pass over a completed filter result.  Entry k
/// of the output covers x_k for k = 0..T; the terminal entry is a bitwise
/// copy of the final filtered state, and entry 0 smooths the prior.
/// The transition moments are recomputed with `rule`, so a smoother may use
/// a different rule than the filter did.
inline SmootherResult rts_pass(const FilterResult& filter, const StateSpaceModel& model,
                               const Vec& theta, const CubatureRule& rule) {
  if (filter.steps.empty())
    throw std::invalid_argument("rts_pass requires at least one filter step");
  const int t_len = static_cast<int>(filter.steps.size());
  const Mat q = model.process_cov(theta);

  SmootherResult result;
  result.steps.resize(t_len + 1);
  result.steps[t_len].smoothed = filter.steps[t_len - 1].posterior;
  for (int k = t_len - 1; k >= 0; --k) {
    const GaussState& posterior = k == 0 ? filter.initial : filter.steps[k - 1].posterior;
    const std::string where = " at step " + std::to_string(k);
    const Prediction pred = predict(
        posterior, [&](const Vec& x) { return model.f(x, theta, k); }, q, rule,
        "smoother transition covariance" + where);
    const Mat gain =
        solve_spd_right(pred.state.cov, pred.cross, "smoother predicted covariance" + where);
    const GaussState& next = result.steps[k + 1].smoothed;
    result.steps[k].smoothed.mean = posterior.mean + gain * (next.mean - pred.state.mean);
    result.steps[k].smoothed.cov =
        symmetrize(posterior.cov + gain * (next.cov - pred.state.cov) * gain.transpose());
    result.steps[k].gain = gain;
  }
  result.evals = static_cast<long long>(rule.count()) * t_len;
  return result;
}

/// Joint smoothing distribution of the pair (x_k, x_{k-1}) for k = 1..T,
/// assembled from the smoothed marginals and the smoother gain:
///   cov = [ P_k          P_k G_{k-1}^T ]
///         [ G_{k-1} P_k  P_{k-1}       ].
inline GaussState pairwise_joint(const SmootherResult& smoother, int k) {
  if (k < 1 || k >= static_cast<int>(smoother.steps.size()))
    throw std::out_of_range("pairwise_joint requires 1 <= k <= T");
  const GaussState& cur = smoother.steps[k].smoothed;
  const GaussState& prev = smoother.steps[k - 1].smoothed;
  const Mat& gain = smoother.steps[k - 1].gain;
  const Eigen::Index n = cur.mean.size();

  GaussState joint;
  joint.mean = Vec(2 * n);
  joint.mean.head(n) = cur.mean;
  joint.mean.tail(n) = prev.mean;
  joint.cov = Mat(2 * n, 2 * n);
  joint.cov.topLeftCorner(n, n) = cur.cov;
  joint.cov.topRightCorner(n, n) = cur.cov * gain.transpose();
  joint.cov.bottomLeftCorner(n, n) = gain * cur.cov;
  joint.cov.bottomRightCorner(n, n) = prev.cov;
  joint.cov = symmetrize(joint.cov);
  return joint;
}

/// Sigma-point expectation of g over a 2n-dimensional pairwise joint.  The
/// rule must be built for dimension 2n.  g receives the stacked vector
/// (x_k, x_{k-1}).
template <class G>
auto expect_pairwise(const GaussState& joint, const CubatureRule& rule2n, G&& g) {
  if (rule2n.dim != joint.mean.size())
    throw std::invalid_argument("pairwise rule dimension does not match joint dimension");
  const Mat l = jittered_cholesky(joint.cov, "pairwise joint covariance");
  return expect(rule2n, joint.mean, l, std::forward<G>(g));
}

}  // namespace ssmkit
