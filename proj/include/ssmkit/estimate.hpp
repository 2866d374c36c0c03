#pragma once

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssmkit/cubature.hpp"
#include "ssmkit/gauss.hpp"
#include "ssmkit/linalg.hpp"
#include "ssmkit/models.hpp"

namespace ssmkit {

/// Marginal log-likelihood of the data under the sigma-point filter.
inline double log_likelihood(const StateSpaceModel& model, const Vec& theta, const Mat& y,
                             const CubatureRule& rule) {
  return filter_pass(model, theta, y, rule).loglik;
}

struct GradientResult {
  double loglik = 0.0;
  Vec gradient;
  long long evals = 0;
};

namespace detail {

inline Vec call_df(const StateSpaceModel& m, const Vec& x, const Vec& th, int k, int i) {
  return m.df_dtheta ? m.df_dtheta(x, th, k, i) : Vec(Vec::Zero(m.state_dim));
}
inline Vec call_dh(const StateSpaceModel& m, const Vec& x, const Vec& th, int i) {
  return m.dh_dtheta ? m.dh_dtheta(x, th, i) : Vec(Vec::Zero(m.meas_dim));
}
inline Mat call_dq(const StateSpaceModel& m, const Vec& th, int i) {
  return m.dq_dtheta ? m.dq_dtheta(th, i) : Mat(Mat::Zero(m.state_dim, m.state_dim));
}
inline Mat call_dr(const StateSpaceModel& m, const Vec& th, int i) {
  return m.dr_dtheta ? m.dr_dtheta(th, i) : Mat(Mat::Zero(m.meas_dim, m.meas_dim));
}
inline Vec call_dm0(const StateSpaceModel& m, const Vec& th, int i) {
  return m.dm0_dtheta ? m.dm0_dtheta(th, i) : Vec(Vec::Zero(m.state_dim));
}
inline Mat call_dp0(const StateSpaceModel& m, const Vec& th, int i) {
  return m.dp0_dtheta ? m.dp0_dtheta(th, i) : Mat(Mat::Zero(m.state_dim, m.state_dim));
}

}  // namespace detail

/// Exact gradient of the sigma-point log-likelihood surface, obtained by
/// differentiating the whole filter recursion (including the Cholesky
/// factors that place the sigma points) with respect to each parameter.
/// The returned log-likelihood matches filter_pass exactly, so a zero
/// gradient identifies a stationary point of the computed surface.
inline GradientResult loglik_gradient_sensitivity(const StateSpaceModel& model, const Vec& theta,
                                                  const Mat& y, const CubatureRule& rule) {
  if (model.fx == nullptr || model.hx == nullptr)
    throw std::invalid_argument("sensitivity gradients require state Jacobians fx and hx");
  const int n = model.state_dim;
  const int d = model.meas_dim;
  const int m_dim = model.param_dim;
  const int t_len = static_cast<int>(y.cols());
  const Eigen::Index n_pts = rule.count();

  const Mat q = model.process_cov(theta);
  const Mat r = model.meas_cov(theta);
  std::vector<Mat> dq(m_dim), dr(m_dim);
  for (int i = 0; i < m_dim; ++i) {
    dq[i] = detail::call_dq(model, theta, i);
    dr[i] = detail::call_dr(model, theta, i);
  }

  Vec mean = model.init_mean(theta);
  Mat cov = symmetrize(model.init_cov(theta));
  std::vector<Vec> dmean(m_dim);
  std::vector<Mat> dcov(m_dim);
  for (int i = 0; i < m_dim; ++i) {
    dmean[i] = detail::call_dm0(model, theta, i);
    dcov[i] = symmetrize(detail::call_dp0(model, theta, i));
  }

  GradientResult result;
  result.gradient = Vec::Zero(m_dim);

  for (int k = 1; k <= t_len; ++k) {
    const std::string where = " at step " + std::to_string(k);

    // --- prediction, values and derivatives -----------------------------
    const Mat l = jittered_cholesky(cov, "posterior covariance" + where);
    const Mat spread = l * rule.points;
    std::vector<Mat> dl(m_dim);
    for (int i = 0; i < m_dim; ++i) dl[i] = cholesky_derivative(l, dcov[i]);
    Mat propagated(n, n_pts);
    std::vector<Mat> dprop(m_dim, Mat(n, n_pts));
    for (Eigen::Index j = 0; j < n_pts; ++j) {
      const Vec x = mean + spread.col(j);
      propagated.col(j) = model.f(x, theta, k - 1);
      const Mat jac = model.fx(x, theta, k - 1);
      for (int i = 0; i < m_dim; ++i) {
        const Vec dx = dmean[i] + dl[i] * rule.points.col(j);
        dprop[i].col(j) = jac * dx + detail::call_df(model, x, theta, k - 1, i);
      }
    }
    const Vec pred_mean = propagated * rule.mean_weights;
    const Mat centered = propagated.colwise() - pred_mean;
    const Mat pred_cov =
        symmetrize(centered * rule.cov_weights.asDiagonal() * centered.transpose() + q);
    std::vector<Vec> dpred_mean(m_dim);
    std::vector<Mat> dpred_cov(m_dim);
    for (int i = 0; i < m_dim; ++i) {
      dpred_mean[i] = dprop[i] * rule.mean_weights;
      const Mat dcentered = dprop[i].colwise() - dpred_mean[i];
      const Mat half = dcentered * rule.cov_weights.asDiagonal() * centered.transpose();
      dpred_cov[i] = symmetrize(half + half.transpose() + dq[i]);
    }

    // --- update, values and derivatives ---------------------------------
    const Mat lp = jittered_cholesky(pred_cov, "predicted covariance" + where);
    const Mat spread_p = lp * rule.points;
    std::vector<Mat> dlp(m_dim);
    for (int i = 0; i < m_dim; ++i) dlp[i] = cholesky_derivative(lp, dpred_cov[i]);

    Mat meas(d, n_pts);
    std::vector<Mat> dmeas(m_dim, Mat(d, n_pts));
    for (Eigen::Index j = 0; j < n_pts; ++j) {
      const Vec x = pred_mean + spread_p.col(j);
      meas.col(j) = model.h(x, theta);
      const Mat jac = model.hx(x, theta);
      for (int i = 0; i < m_dim; ++i) {
        const Vec dx = dpred_mean[i] + dlp[i] * rule.points.col(j);
        dmeas[i].col(j) = jac * dx + detail::call_dh(model, x, theta, i);
      }
    }
    const Vec mu = meas * rule.mean_weights;
    const Mat meas_centered = meas.colwise() - mu;
    const Mat s =
        symmetrize(meas_centered * rule.cov_weights.asDiagonal() * meas_centered.transpose() + r);
    const Mat c = spread_p * rule.cov_weights.asDiagonal() * meas_centered.transpose();
    const Mat gain = solve_spd_right(s, c, "innovation covariance" + where);
    const Vec innovation = model.apply_residual(y.col(k - 1) - mu);

    const Mat ls = jittered_cholesky(s, "innovation covariance" + where);
    const Vec s_inv_v = [&] {
      Vec z = ls.triangularView<Eigen::Lower>().solve(innovation);
      return Vec(ls.transpose().triangularView<Eigen::Upper>().solve(z));
    }();
    result.loglik += -0.5 * (d * std::log(2.0 * std::numbers::pi) +
                             2.0 * ls.diagonal().array().log().sum() +
                             innovation.dot(s_inv_v));

    for (int i = 0; i < m_dim; ++i) {
      const Vec dmu = dmeas[i] * rule.mean_weights;
      const Mat dmeas_centered = dmeas[i].colwise() - dmu;
      const Mat half_s =
          dmeas_centered * rule.cov_weights.asDiagonal() * meas_centered.transpose();
      const Mat ds = symmetrize(half_s + half_s.transpose() + dr[i]);
      const Mat dc = dlp[i] * rule.points * rule.cov_weights.asDiagonal() *
                         meas_centered.transpose() +
                     spread_p * rule.cov_weights.asDiagonal() * dmeas_centered.transpose();
      const Mat dgain = solve_spd_right(s, Mat(dc - gain * ds), "innovation covariance" + where);
      const Vec dv = -dmu;

      dmean[i] = dpred_mean[i] + dgain * innovation + gain * dv;
      dcov[i] = symmetrize(dpred_cov[i] - dgain * s * gain.transpose() -
                           gain * ds * gain.transpose() - gain * s * dgain.transpose());

      // d log-lik = -1/2 tr(S^-1 dS) - v^T S^-1 dv + 1/2 v^T S^-1 dS S^-1 v
      const Mat s_inv_ds = [&] {
        Mat z = ls.triangularView<Eigen::Lower>().solve(ds);
        return Mat(ls.transpose().triangularView<Eigen::Upper>().solve(z));
      }();
      result.gradient(i) += -0.5 * s_inv_ds.trace() - s_inv_v.dot(dv) +
                            0.5 * s_inv_v.dot(ds * s_inv_v);
    }

    mean = pred_mean + gain * innovation;
    cov = symmetrize(pred_cov - gain * s * gain.transpose());
  }
  result.evals = 4 * static_cast<long long>(n_pts) * t_len;
  return result;
}

/// Expectations shared by the Q-function value and its parameter gradient:
/// initial-state, dynamic and measurement residual moments under the
/// smoothing distributions from the previous parameter iterate.
struct QExpectations {
  Vec m0_smooth;
  Mat p0_smooth;
  Mat dyn_residual_sum;   // sum_k E[(x_k - f(x_{k-1}))(x_k - f(x_{k-1}))^T]
  Mat meas_residual_sum;  // sum_k E[(y_k - h(x_k))(y_k - h(x_k))^T]
  Vec df_terms;           // sum_k E[(x_k - f)^T Q^-1 df_i], per parameter
  Vec dh_terms;           // sum_k E[(y_k - h)^T R^-1 dh_i], per parameter
  long long evals = 0;
};

namespace detail {

inline QExpectations q_expectations(const StateSpaceModel& model, const Vec& theta,
                                    const SmootherResult& smoother, const Mat& y,
                                    const CubatureRule& rule, const CubatureRule& rule2n,
                                    bool with_param_terms) {
  const int n = model.state_dim;
  const int d = model.meas_dim;
  const int m_dim = with_param_terms ? model.param_dim : 0;
  const int t_len = static_cast<int>(smoother.steps.size()) - 1;

  const Mat q = model.process_cov(theta);
  const Mat r = model.meas_cov(theta);
  const Mat lq = jittered_cholesky(q, "process covariance");
  const Mat lr = jittered_cholesky(r, "measurement covariance");
  const auto solve_q = [&](const Vec& e) {
    Vec z = lq.triangularView<Eigen::Lower>().solve(e);
    return Vec(lq.transpose().triangularView<Eigen::Upper>().solve(z));
  };
  const auto solve_r = [&](const Vec& e) {
    Vec z = lr.triangularView<Eigen::Lower>().solve(e);
    return Vec(lr.transpose().triangularView<Eigen::Upper>().solve(z));
  };

  QExpectations out;
  out.m0_smooth = smoother.steps[0].smoothed.mean;
  out.p0_smooth = smoother.steps[0].smoothed.cov;
  out.dyn_residual_sum = Mat::Zero(n, n);
  out.meas_residual_sum = Mat::Zero(d, d);
  out.df_terms = Vec::Zero(m_dim);
  out.dh_terms = Vec::Zero(m_dim);

  for (int k = 1; k <= t_len; ++k) {
    // Dynamic term over the pairwise joint of (x_k, x_{k-1}).
    const GaussState joint = pairwise_joint(smoother, k);
    const Mat lj = jittered_cholesky(joint.cov, "pairwise joint covariance at step " +
                                                    std::to_string(k));
    for (Eigen::Index j = 0; j < rule2n.count(); ++j) {
      const Vec xj = joint.mean + lj * rule2n.points.col(j);
      const Vec e = xj.head(n) - model.f(xj.tail(n), theta, k - 1);
      const double w = rule2n.mean_weights(j);
      out.dyn_residual_sum.noalias() += w * e * e.transpose();
      if (m_dim > 0) {
        const Vec qe = solve_q(e);
        for (int i = 0; i < m_dim; ++i)
          out.df_terms(i) += w * qe.dot(call_df(model, Vec(xj.tail(n)), theta, k - 1, i));
      }
    }

    // Measurement term over the smoothed marginal of x_k.
    const GaussState& marg = smoother.steps[k].smoothed;
    const Mat lm = jittered_cholesky(marg.cov, "smoothed covariance at step " +
                                                   std::to_string(k));
    for (Eigen::Index j = 0; j < rule.count(); ++j) {
      const Vec xj = marg.mean + lm * rule.points.col(j);
      const Vec e = model.apply_residual(y.col(k - 1) - model.h(xj, theta));
      const double w = rule.mean_weights(j);
      out.meas_residual_sum.noalias() += w * e * e.transpose();
      if (m_dim > 0) {
        const Vec re = solve_r(e);
        for (int i = 0; i < m_dim; ++i)
          out.dh_terms(i) += w * re.dot(call_dh(model, xj, theta, i));
      }
    }
  }
  out.dyn_residual_sum = symmetrize(out.dyn_residual_sum);
  out.meas_residual_sum = symmetrize(out.meas_residual_sum);
  out.evals = static_cast<long long>(t_len) * (rule2n.count() + rule.count());
  return out;
}

inline double logdet_spd(const Mat& a, const std::string& context) {
  const Mat l = jittered_cholesky(a, context);
  return 2.0 * l.diagonal().array().log().sum();
}

inline Mat solve_spd(const Mat& a, const Mat& b, const std::string& context) {
  const Mat l = jittered_cholesky(a, context);
  Mat z = l.triangularView<Eigen::Lower>().solve(b);
  return l.transpose().triangularView<Eigen::Upper>().solve(z);
}

}  // namespace detail

/// Expected complete-data log-likelihood Q(theta; smoothing distribution).
/// The smoother must have been run at the previous parameter iterate; theta
/// is where the integrands are evaluated.  Expectations use `rule` for
/// single-state terms and `rule2n` (built for dimension 2n) for the
/// transition terms.
inline double q_function(const StateSpaceModel& model, const Vec& theta,
                         const SmootherResult& smoother, const Mat& y, const CubatureRule& rule,
                         const CubatureRule& rule2n) {
  const int n = model.state_dim;
  const int d = model.meas_dim;
  const int t_len = static_cast<int>(smoother.steps.size()) - 1;
  const double log2pi = std::log(2.0 * std::numbers::pi);

  const auto ex = detail::q_expectations(model, theta, smoother, y, rule, rule2n, false);
  const Mat p0 = model.init_cov(theta);
  const Vec dm0 = ex.m0_smooth - model.init_mean(theta);
  const Mat z0 = ex.p0_smooth + dm0 * dm0.transpose();
  const Mat q = model.process_cov(theta);
  const Mat r = model.meas_cov(theta);

  double value = -0.5 * (n * log2pi + detail::logdet_spd(p0, "initial covariance")) -
                 0.5 * detail::solve_spd(p0, z0, "initial covariance").trace();
  value += -0.5 * t_len * (n * log2pi + detail::logdet_spd(q, "process covariance")) -
           0.5 * detail::solve_spd(q, ex.dyn_residual_sum, "process covariance").trace();
  value += -0.5 * t_len * (d * log2pi + detail::logdet_spd(r, "measurement covariance")) -
           0.5 * detail::solve_spd(r, ex.meas_residual_sum, "measurement covariance").trace();
  return value;
}

/// Gradient of Q(theta; smoothing-at-theta_n) with respect to theta, with
/// the smoothing moments held fixed.  Evaluated at theta = theta_n this is
/// the Fisher-identity approximation of the log-likelihood gradient.
inline Vec q_gradient(const StateSpaceModel& model, const Vec& theta,
                      const SmootherResult& smoother, const Mat& y, const CubatureRule& rule,
                      const CubatureRule& rule2n, long long* evals = nullptr) {
  const int m_dim = model.param_dim;
  const int t_len = static_cast<int>(smoother.steps.size()) - 1;

  const auto ex = detail::q_expectations(model, theta, smoother, y, rule, rule2n, true);
  if (evals) *evals += ex.evals;

  const Mat p0 = model.init_cov(theta);
  const Vec dm0_res = ex.m0_smooth - model.init_mean(theta);
  const Mat z0 = ex.p0_smooth + dm0_res * dm0_res.transpose();
  const Mat q = model.process_cov(theta);
  const Mat r = model.meas_cov(theta);
  const Vec p0_inv_dm0 = detail::solve_spd(p0, dm0_res, "initial covariance");
  const Mat p0_inv_z0 = detail::solve_spd(p0, z0, "initial covariance");
  const Mat q_inv_dyn = detail::solve_spd(q, ex.dyn_residual_sum, "process covariance");
  const Mat r_inv_meas = detail::solve_spd(r, ex.meas_residual_sum, "measurement covariance");

  Vec grad = Vec::Zero(m_dim);
  for (int i = 0; i < m_dim; ++i) {
    const Mat dp0 = detail::call_dp0(model, theta, i);
    const Vec dm0 = detail::call_dm0(model, theta, i);
    const Mat dq = detail::call_dq(model, theta, i);
    const Mat dr = detail::call_dr(model, theta, i);

    double g = 0.0;
    if (dp0.cwiseAbs().maxCoeff() > 0.0) {
      const Mat p0_inv_dp0 = detail::solve_spd(p0, dp0, "initial covariance");
      g += -0.5 * p0_inv_dp0.trace() + 0.5 * (p0_inv_dp0 * p0_inv_z0).trace();
    }
    g += p0_inv_dm0.dot(dm0);
    if (dq.cwiseAbs().maxCoeff() > 0.0) {
      const Mat q_inv_dq = detail::solve_spd(q, dq, "process covariance");
      g += -0.5 * t_len * q_inv_dq.trace() + 0.5 * (q_inv_dq * q_inv_dyn).trace();
    }
    g += ex.df_terms(i);
    if (dr.cwiseAbs().maxCoeff() > 0.0) {
      const Mat r_inv_dr = detail::solve_spd(r, dr, "measurement covariance");
      g += -0.5 * t_len * r_inv_dr.trace() + 0.5 * (r_inv_dr * r_inv_meas).trace();
    }
    g += ex.dh_terms(i);
    grad(i) = g;
  }
  return grad;
}

/// Fisher-identity gradient of the marginal log-likelihood: smooth at theta,
/// then differentiate the Q-function at the same theta with the smoothing
/// moments frozen.
inline GradientResult loglik_gradient_fisher(const StateSpaceModel& model, const Vec& theta,
                                             const Mat& y, const CubatureRule& rule,
                                             const CubatureRule& rule2n) {
  const FilterResult filter = filter_pass(model, theta, y, rule);
  GradientResult result;
  result.loglik = filter.loglik;
  result.evals = filter.evals;
  if (y.cols() == 0) {
    result.gradient = Vec::Zero(model.param_dim);
    return result;
  }
  const SmootherResult smoother = rts_pass(filter, model, theta, rule);
  result.evals += smoother.evals;
  result.gradient = q_gradient(model, theta, smoother, y, rule, rule2n, &result.evals);
  return result;
}

inline GradientResult loglik_gradient_fisher(const StateSpaceModel& model, const Vec& theta,
                                             const Mat& y, const CubatureRule& rule) {
  return loglik_gradient_fisher(model, theta, y, rule,
                                *build_rule(rule.spec, 2 * model.state_dim));
}

// ---------------------------------------------------------------------------
// Expectation-maximization
// ---------------------------------------------------------------------------

/// Smoothed sufficient statistics for the linear-in-parameters M-step, all
/// averaged over k = 1..T.
struct EMStatistics {
  Mat Sigma;  // E[x_k x_k^T]
  Mat Phi;    // E[f~(x_{k-1}) f~(x_{k-1})^T]
  Mat B;      // y_k E[h~(x_k)]^T
  Mat C;      // E[x_k f~(x_{k-1})^T]
  Mat D;      // y_k y_k^T  (data only)
  Mat Theta;  // E[h~(x_k) h~(x_k)^T]
  Vec m0_smooth;
  Mat p0_smooth;
  int T = 0;
  long long evals = 0;
};

/// Computes the EM statistics from a completed smoother pass.  Single-state
/// expectations use `rule`; the cross statistic C uses `rule2n` over the
/// pairwise joints.  Set need_pairwise = false when neither A nor Q is
/// updated, which skips the 2n-dimensional sweeps entirely.
inline EMStatistics em_statistics(const SmootherResult& smoother, const Mat& y,
                                  const std::function<Vec(const Vec&, int)>& f_basis,
                                  int f_basis_dim, const std::function<Vec(const Vec&)>& h_basis,
                                  int h_basis_dim, const CubatureRule& rule,
                                  const CubatureRule& rule2n, bool need_pairwise = true) {
  const int t_len = static_cast<int>(smoother.steps.size()) - 1;
  if (t_len < 1) throw std::invalid_argument("em_statistics requires at least one step");
  const int n = static_cast<int>(smoother.steps[0].smoothed.mean.size());
  const int d = static_cast<int>(y.rows());

  EMStatistics stats;
  stats.T = t_len;
  stats.Sigma = Mat::Zero(n, n);
  stats.Phi = Mat::Zero(f_basis_dim, f_basis_dim);
  stats.B = Mat::Zero(d, h_basis_dim);
  stats.C = Mat::Zero(n, f_basis_dim);
  stats.D = Mat::Zero(d, d);
  stats.Theta = Mat::Zero(h_basis_dim, h_basis_dim);
  stats.m0_smooth = smoother.steps[0].smoothed.mean;
  stats.p0_smooth = smoother.steps[0].smoothed.cov;

  for (int k = 1; k <= t_len; ++k) {
    const GaussState& cur = smoother.steps[k].smoothed;
    const GaussState& prev = smoother.steps[k - 1].smoothed;
    stats.Sigma += cur.cov + cur.mean * cur.mean.transpose();
    stats.D += y.col(k - 1) * y.col(k - 1).transpose();

    const Mat l_cur =
        jittered_cholesky(cur.cov, "smoothed covariance at step " + std::to_string(k));
    for (Eigen::Index j = 0; j < rule.count(); ++j) {
      const Vec x = cur.mean + l_cur * rule.points.col(j);
      const Vec hb = h_basis(x);
      stats.Theta.noalias() += rule.mean_weights(j) * hb * hb.transpose();
      stats.B.noalias() += rule.mean_weights(j) * y.col(k - 1) * hb.transpose();
    }
    const Mat l_prev =
        jittered_cholesky(prev.cov, "smoothed covariance at step " + std::to_string(k - 1));
    for (Eigen::Index j = 0; j < rule.count(); ++j) {
      const Vec x = prev.mean + l_prev * rule.points.col(j);
      const Vec fb = f_basis(x, k - 1);
      stats.Phi.noalias() += rule.mean_weights(j) * fb * fb.transpose();
    }
    if (need_pairwise) {
      const GaussState joint = pairwise_joint(smoother, k);
      const Mat lj = jittered_cholesky(joint.cov, "pairwise joint covariance at step " +
                                                      std::to_string(k));
      for (Eigen::Index j = 0; j < rule2n.count(); ++j) {
        const Vec xj = joint.mean + lj * rule2n.points.col(j);
        stats.C.noalias() += rule2n.mean_weights(j) * xj.head(n) *
                             f_basis(Vec(xj.tail(n)), k - 1).transpose();
      }
    }
  }
  const double inv_t = 1.0 / static_cast<double>(t_len);
  stats.Sigma = symmetrize(stats.Sigma * inv_t);
  stats.Phi = symmetrize(stats.Phi * inv_t);
  stats.Theta = symmetrize(stats.Theta * inv_t);
  stats.D = symmetrize(stats.D * inv_t);
  stats.B *= inv_t;
  stats.C *= inv_t;
  stats.evals = static_cast<long long>(t_len) *
                (2 * rule.count() + (need_pairwise ? rule2n.count() : 0));
  return stats;
}

/// Which parameter blocks the M-step updates.  The optional diagonal masks
/// restrict the Q or R update to the listed diagonal entries; they are exact
/// restricted maximizers only when the matrix is constrained diagonal, which
/// is how the benchmark models use them.
struct EMFreeSet {
  bool A = false;
  bool H = false;
  bool Q = false;
  bool R = false;
  bool m0 = false;
  bool P0 = false;
  std::optional<std::vector<int>> q_diag;
  std::optional<std::vector<int>> r_diag;

  bool needs_pairwise() const { return A || Q || q_diag.has_value(); }
};

/// Closed-form M-step for linear-in-parameters models: jointly maximizes the
/// Q-function over the free blocks, in the order (A, Q), (H, R), (m0, P0).
/// Blocks that are not free keep their current values and enter the paired
/// covariance update at those values.
inline EMParams m_step_closed_form(const EMStatistics& stats, const EMFreeSet& free_set,
                                   const EMParams& current) {
  EMParams next = current;
  if (free_set.A)
    next.A = detail::solve_spd(stats.Phi, stats.C.transpose(), "EM statistic Phi").transpose();
  if (free_set.Q || free_set.q_diag) {
    const Mat q_full = symmetrize(stats.Sigma - stats.C * next.A.transpose() -
                                  next.A * stats.C.transpose() +
                                  next.A * stats.Phi * next.A.transpose());
    if (free_set.q_diag) {
      for (int idx : *free_set.q_diag) next.Q(idx, idx) = q_full(idx, idx);
    } else {
      next.Q = q_full;
    }
  }
  if (free_set.H)
    next.H = detail::solve_spd(stats.Theta, stats.B.transpose(), "EM statistic Theta").transpose();
  if (free_set.R || free_set.r_diag) {
    const Mat r_full = symmetrize(stats.D - next.H * stats.B.transpose() -
                                  stats.B * next.H.transpose() +
                                  next.H * stats.Theta * next.H.transpose());
    if (free_set.r_diag) {
      for (int idx : *free_set.r_diag) next.R(idx, idx) = r_full(idx, idx);
    } else {
      next.R = r_full;
    }
  }
  if (free_set.m0) next.m0 = stats.m0_smooth;
  if (free_set.P0) {
    const Vec dm = stats.m0_smooth - next.m0;
    next.P0 = symmetrize(stats.p0_smooth + dm * dm.transpose());
  }
  return next;
}

/// Q-function value at `params` computed from the statistics (the quantity
/// the closed-form M-step maximizes).
inline double q_value_from_stats(const EMStatistics& stats, const EMParams& params) {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  const int n = static_cast<int>(params.Q.rows());
  const int d = static_cast<int>(params.R.rows());
  const double t_len = static_cast<double>(stats.T);

  const Vec dm0 = stats.m0_smooth - params.m0;
  const Mat z0 = stats.p0_smooth + dm0 * dm0.transpose();
  const Mat e_dyn = symmetrize(stats.Sigma - stats.C * params.A.transpose() -
                               params.A * stats.C.transpose() +
                               params.A * stats.Phi * params.A.transpose());
  const Mat e_meas = symmetrize(stats.D - params.H * stats.B.transpose() -
                                stats.B * params.H.transpose() +
                                params.H * stats.Theta * params.H.transpose());

  double value = -0.5 * (n * log2pi + detail::logdet_spd(params.P0, "initial covariance")) -
                 0.5 * detail::solve_spd(params.P0, z0, "initial covariance").trace();
  value += -0.5 * t_len * (n * log2pi + detail::logdet_spd(params.Q, "process covariance") +
                           detail::solve_spd(params.Q, e_dyn, "process covariance").trace());
  value += -0.5 * t_len * (d * log2pi + detail::logdet_spd(params.R, "measurement covariance") +
                           detail::solve_spd(params.R, e_meas, "measurement covariance").trace());
  return value;
}

struct EMTrace {
  std::vector<Vec> thetas;        // theta_0 .. theta_N via the view's theta_of
  std::vector<EMParams> params;   // same length
  std::vector<double> q_values;   // Q(theta_{j+1}; theta_j), length N
  long long evals = 0;
};

/// Runs N iterations of sigma-point EM on a model with a linear-in-parameters
/// view, updating the blocks in `free_set` by the closed-form M-step.  The
/// pairwise statistic uses the same scheme instantiated in dimension 2n.
inline EMTrace em_iterate(const StateSpaceModel& model, const Vec& theta0, const Mat& y,
                          const CubatureRule& rule, int iterations, const EMFreeSet& free_set) {
  if (!model.linear_view)
    throw std::invalid_argument("em_iterate requires a linear-in-parameters view");
  const auto rule2n = build_rule(rule.spec, 2 * model.state_dim);
  LinearInParams view = model.linear_view(theta0);

  EMTrace trace;
  trace.thetas.push_back(view.theta_of(view.params));
  trace.params.push_back(view.params);

  for (int it = 0; it < iterations; ++it) {
    const StateSpaceModel step_model = model_from_linear_view(view, model.residual);
    const FilterResult filter = filter_pass(step_model, Vec(0), y, rule);
    const SmootherResult smoother = rts_pass(filter, step_model, Vec(0), rule);
    const EMStatistics stats =
        em_statistics(smoother, y, view.f_basis, view.f_basis_dim, view.h_basis,
                      view.h_basis_dim, rule, *rule2n, free_set.needs_pairwise());
    view.params = m_step_closed_form(stats, free_set, view.params);
    trace.evals += filter.evals + smoother.evals + stats.evals;
    trace.q_values.push_back(q_value_from_stats(stats, view.params));
    trace.thetas.push_back(view.theta_of(view.params));
    trace.params.push_back(view.params);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Gradient-based maximum likelihood
// ---------------------------------------------------------------------------

enum class GradientMode { kSensitivity, kFisher, kFiniteDifference };
enum class ParamTransform { kIdentity, kLog };

struct OptimizerConfig {
  int max_iter = 200;
  double grad_tol = 1e-6;
  double armijo_c1 = 1e-4;
  double backtrack = 0.5;
  double init_step = 1.0;
  int max_backtracks = 60;
  GradientMode gradient = GradientMode::kSensitivity;
  /// Per-parameter transform; empty means identity everywhere.  kLog
  /// optimizes log(theta_i), keeping scale parameters positive.
  std::vector<ParamTransform> transforms;
  /// Optional log-prior; the objective becomes loglik + log_prior.  -inf
  /// marks forbidden regions the line search must not enter.
  std::function<double(const Vec&)> log_prior;
  std::function<Vec(const Vec&)> log_prior_gradient;  // finite differences if unset
};

struct OptimizerTraceRow {
  int iteration = 0;
  Vec theta;
  double objective = 0.0;  // negative (loglik + prior), the minimized value
  double grad_norm = 0.0;
  long long cum_evals = 0;
  double wall_seconds = 0.0;
};

struct OptimizerResult {
  Vec theta;
  double loglik = -std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  std::string status;
  std::vector<OptimizerTraceRow> trace;
  long long evals = 0;
};

/// Penalized objective: sigma-point log-likelihood plus an optional
/// log-prior.  Returns -inf where the prior is -inf.
inline double objective_with_prior(const StateSpaceModel& model, const Vec& theta, const Mat& y,
                                   const CubatureRule& rule,
                                   const std::function<double(const Vec&)>& log_prior = nullptr) {
  double prior = 0.0;
  if (log_prior) {
    prior = log_prior(theta);
    if (!std::isfinite(prior)) return -std::numeric_limits<double>::infinity();
  }
  return log_likelihood(model, theta, y, rule) + prior;
}

namespace detail {

inline Vec apply_transform(const Vec& theta, const std::vector<ParamTransform>& tf) {
  Vec eta = theta;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    if (!tf.empty() && tf[static_cast<size_t>(i)] == ParamTransform::kLog) {
      if (!(theta(i) > 0.0))
        throw std::invalid_argument("log transform requires a positive parameter");
      eta(i) = std::log(theta(i));
    }
  }
  return eta;
}

inline Vec invert_transform(const Vec& eta, const std::vector<ParamTransform>& tf) {
  Vec theta = eta;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (!tf.empty() && tf[static_cast<size_t>(i)] == ParamTransform::kLog)
      theta(i) = std::exp(eta(i));
  }
  return theta;
}

/// d theta_i / d eta_i, evaluated at theta.
inline Vec transform_jacobian(const Vec& theta, const std::vector<ParamTransform>& tf) {
  Vec jac = Vec::Ones(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (!tf.empty() && tf[static_cast<size_t>(i)] == ParamTransform::kLog) jac(i) = theta(i);
  }
  return jac;
}

}  // namespace detail

/// Central finite-difference gradient of a scalar function, with step
/// 1e-5 * (1 + |theta_i|) per coordinate.
inline Vec finite_difference_gradient(const std::function<double(const Vec&)>& fn,
                                      const Vec& theta, double step_scale = 1e-5) {
  Vec grad(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double h = step_scale * (1.0 + std::abs(theta(i)));
    Vec lo = theta, hi = theta;
    lo(i) -= h;
    hi(i) += h;
    grad(i) = (fn(hi) - fn(lo)) / (2.0 * h);
  }
  return grad;
}

/// Abstracts the likelihood evaluation the optimizer drives, so the same
/// BFGS core serves sigma-point and EKF objectives.  `gradient` may be null,
/// in which case central finite differences of `loglik` are used, charged at
/// `eval_cost` model evaluations per likelihood call.
struct LikelihoodBackend {
  std::function<double(const Vec& theta)> loglik;
  std::function<GradientResult(const Vec& theta)> gradient;
  long long eval_cost = 0;
};

/// BFGS with Armijo backtracking on the negative penalized log-likelihood.
/// Scale parameters can be optimized in log-space through
/// OptimizerConfig::transforms.  Numerical breakdown inside a trial
/// objective is treated as an infinite value, i.e. a rejected step.
inline OptimizerResult maximize_with_backend(const LikelihoodBackend& backend, const Vec& theta0,
                                             const OptimizerConfig& config = {}) {
  if (!config.transforms.empty() &&
      config.transforms.size() != static_cast<size_t>(theta0.size()))
    throw std::invalid_argument("transform list must match parameter dimension");
  const auto t_start = std::chrono::steady_clock::now();
  long long evals = 0;

  const auto penalized = [&](const Vec& theta) -> double {
    double prior = 0.0;
    if (config.log_prior) {
      prior = config.log_prior(theta);
      if (!std::isfinite(prior)) return -std::numeric_limits<double>::infinity();
    }
    evals += backend.eval_cost;
    return backend.loglik(theta) + prior;
  };

  const auto objective = [&](const Vec& eta) -> double {
    const Vec theta = detail::invert_transform(eta, config.transforms);
    try {
      return -penalized(theta);
    } catch (const NumericalBreakdown&) {
      return std::numeric_limits<double>::infinity();
    }
  };

  const auto gradient = [&](const Vec& eta, double& value_out) -> Vec {
    const Vec theta = detail::invert_transform(eta, config.transforms);
    Vec grad_theta;
    if (backend.gradient) {
      const GradientResult g = backend.gradient(theta);
      grad_theta = -g.gradient;
      value_out = -g.loglik;
      evals += g.evals;
    } else {
      grad_theta = -finite_difference_gradient(
          [&](const Vec& th) {
            evals += backend.eval_cost;
            return backend.loglik(th);
          },
          theta);
      evals += backend.eval_cost;
      value_out = -backend.loglik(theta);
    }
    if (config.log_prior) {
      const Vec prior_grad =
          config.log_prior_gradient
              ? config.log_prior_gradient(theta)
              : finite_difference_gradient(config.log_prior, theta);
      grad_theta -= prior_grad;
      value_out -= config.log_prior(theta);
    }
    return Vec(grad_theta.cwiseProduct(detail::transform_jacobian(theta, config.transforms)));
  };

  OptimizerResult result;
  Vec eta = detail::apply_transform(theta0, config.transforms);
  double f_val = 0.0;
  Vec grad = gradient(eta, f_val);
  Mat h_inv = Mat::Identity(eta.size(), eta.size());

  const auto record = [&](int it) {
    OptimizerTraceRow row;
    row.iteration = it;
    row.theta = detail::invert_transform(eta, config.transforms);
    row.objective = f_val;
    row.grad_norm = grad.size() > 0 ? grad.cwiseAbs().maxCoeff() : 0.0;
    row.cum_evals = evals;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.trace.push_back(std::move(row));
  };
  record(0);

  result.status = "max-iterations";
  for (int it = 0; it < config.max_iter; ++it) {
    if (grad.size() == 0 || grad.cwiseAbs().maxCoeff() < config.grad_tol) {
      result.converged = true;
      result.status = "converged";
      break;
    }
    Vec direction = -(h_inv * grad);
    if (direction.dot(grad) >= 0.0) direction = -grad;  // safeguard: descent only

    double step = config.init_step;
    const double slope = grad.dot(direction);
    bool accepted = false;
    Vec eta_new;
    double f_new = 0.0;
    for (int bt = 0; bt < config.max_backtracks; ++bt) {
      eta_new = eta + step * direction;
      f_new = objective(eta_new);
      if (std::isfinite(f_new) && f_new <= f_val + config.armijo_c1 * step * slope) {
        accepted = true;
        break;
      }
      step *= config.backtrack;
    }
    if (!accepted) {
      result.status = "line-search-failure";
      break;
    }

    double f_at_new = 0.0;
    Vec grad_new = gradient(eta_new, f_at_new);
    const Vec s = eta_new - eta;
    const Vec y_diff = grad_new - grad;
    const double sy = s.dot(y_diff);
    if (sy > 1e-12 * s.norm() * y_diff.norm()) {
      const double rho = 1.0 / sy;
      const Mat outer = s * y_diff.transpose();
      h_inv = (Mat::Identity(eta.size(), eta.size()) - rho * outer) * h_inv *
                  (Mat::Identity(eta.size(), eta.size()) - rho * outer.transpose()) +
              rho * s * s.transpose();
    }
    eta = eta_new;
    f_val = f_new;
    grad = grad_new;
    result.iterations = it + 1;
    record(it + 1);
  }
  if (!result.converged && result.status == "max-iterations" &&
      grad.size() > 0 && grad.cwiseAbs().maxCoeff() < config.grad_tol) {
    result.converged = true;
    result.status = "converged";
  }

  result.theta = detail::invert_transform(eta, config.transforms);
  result.loglik = -f_val;
  result.evals = evals;
  return result;
}

/// Maximum-likelihood estimation with a sigma-point filter likelihood.
inline OptimizerResult maximize_likelihood(const StateSpaceModel& model, const Vec& theta0,
                                           const Mat& y, const CubatureRule& rule,
                                           const OptimizerConfig& config = {}) {
  const auto rule2n_ptr = config.gradient == GradientMode::kFisher
                              ? build_rule(rule.spec, 2 * model.state_dim)
                              : nullptr;
  LikelihoodBackend backend;
  backend.eval_cost = 2 * static_cast<long long>(rule.count()) * y.cols();
  backend.loglik = [&model, &y, &rule](const Vec& theta) {
    return log_likelihood(model, theta, y, rule);
  };
  switch (config.gradient) {
    case GradientMode::kSensitivity:
      backend.gradient = [&model, &y, &rule](const Vec& theta) {
        return loglik_gradient_sensitivity(model, theta, y, rule);
      };
      break;
    case GradientMode::kFisher:
      backend.gradient = [&model, &y, &rule, rule2n_ptr](const Vec& theta) {
        return loglik_gradient_fisher(model, theta, y, rule, *rule2n_ptr);
      };
      break;
    case GradientMode::kFiniteDifference:
      break;  // null gradient selects central differences in the core
  }
  return maximize_with_backend(backend, theta0, config);
}

}  // namespace ssmkit
