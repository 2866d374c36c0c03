// Independent reference implementations used to validate the library.
// Everything here is written directly from textbook formulas, without
// calling into the code under test, so agreement is meaningful.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "ssmkit/models.hpp"
#include "ssmkit/rng.hpp"

namespace oracle {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Gaussian moments
// ---------------------------------------------------------------------------

/// E[prod_i z_i^{a_i}] for z ~ N(0, I): zero if any exponent is odd, else the
/// product of double factorials (a_i - 1)!!.
inline double gaussian_moment(const std::vector<int>& exponents) {
  double value = 1.0;
  for (int a : exponents) {
    if (a % 2 == 1) return 0.0;
    for (int k = a - 1; k >= 1; k -= 2) value *= k;
  }
  return value;
}

// ---------------------------------------------------------------------------
// Classical Kalman filter / RTS smoother (sequential form)
// ---------------------------------------------------------------------------

struct KalmanResult {
  std::vector<Vec> filt_mean;   // index 0..T (0 = prior)
  std::vector<Mat> filt_cov;
  std::vector<Vec> pred_mean;   // index 1..T stored at [k]
  std::vector<Mat> pred_cov;
  double loglik = 0.0;
};

struct RtsResult {
  std::vector<Vec> mean;      // index 0..T
  std::vector<Mat> cov;
  std::vector<Mat> gain;      // G_k for k = 0..T-1
  std::vector<Mat> lag_one;   // Cov(x_k, x_{k-1} | y_{1:T}) stored at [k], k = 1..T
};

inline KalmanResult kalman_filter(const Mat& a, const Mat& h, const Mat& q, const Mat& r,
                                  const Vec& m0, const Mat& p0, const Mat& y) {
  const int t_len = static_cast<int>(y.cols());
  KalmanResult out;
  out.filt_mean.resize(t_len + 1);
  out.filt_cov.resize(t_len + 1);
  out.pred_mean.resize(t_len + 1);
  out.pred_cov.resize(t_len + 1);
  out.filt_mean[0] = m0;
  out.filt_cov[0] = p0;
  const double log2pi = std::log(2.0 * M_PI);
  for (int k = 1; k <= t_len; ++k) {
    const Vec mp = a * out.filt_mean[k - 1];
    const Mat pp = a * out.filt_cov[k - 1] * a.transpose() + q;
    out.pred_mean[k] = mp;
    out.pred_cov[k] = pp;
    const Mat s = h * pp * h.transpose() + r;
    const Eigen::LDLT<Mat> s_ldlt(s);
    const Mat gain = (s_ldlt.solve(h * pp)).transpose();
    const Vec v = y.col(k - 1) - h * mp;
    out.filt_mean[k] = mp + gain * v;
    out.filt_cov[k] = pp - gain * s * gain.transpose();
    const double logdet = s_ldlt.vectorD().array().log().sum();
    out.loglik += -0.5 * (s.rows() * log2pi + logdet + v.dot(s_ldlt.solve(v)));
  }
  return out;
}

inline RtsResult rts_smoother(const KalmanResult& kf, const Mat& a) {
  const int t_len = static_cast<int>(kf.filt_mean.size()) - 1;
  RtsResult out;
  out.mean.resize(t_len + 1);
  out.cov.resize(t_len + 1);
  out.gain.resize(t_len);
  out.lag_one.resize(t_len + 1);
  out.mean[t_len] = kf.filt_mean[t_len];
  out.cov[t_len] = kf.filt_cov[t_len];
  for (int k = t_len - 1; k >= 0; --k) {
    const Mat& pp = kf.pred_cov[k + 1];
    const Mat cross = kf.filt_cov[k] * a.transpose();  // Cov(x_k, x_{k+1} | y_{1:k})
    const Mat gain = cross * pp.inverse();
    out.gain[k] = gain;
    out.mean[k] = kf.filt_mean[k] + gain * (out.mean[k + 1] - kf.pred_mean[k + 1]);
    out.cov[k] = kf.filt_cov[k] + gain * (out.cov[k + 1] - pp) * gain.transpose();
    out.lag_one[k + 1] = out.cov[k + 1] * gain.transpose();  // Cov(x_{k+1}, x_k | y_{1:T})
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch joint-Gaussian smoother
// ---------------------------------------------------------------------------
// Builds the exact joint Gaussian over (x_0..x_T, y_1..y_T) and conditions on
// the stacked measurements.  Cubic in T, so use small T; works as a fully
// independent check of the sequential recursions above.

struct BatchResult {
  std::vector<Vec> mean;      // smoothed, 0..T
  std::vector<Mat> cov;       // smoothed marginals
  std::vector<Mat> lag_one;   // Cov(x_k, x_{k-1} | y), k = 1..T at [k]
  double loglik = 0.0;
};

inline BatchResult batch_smoother(const Mat& a, const Mat& h, const Mat& q, const Mat& r,
                                  const Vec& m0, const Mat& p0, const Mat& y) {
  const int n = static_cast<int>(a.rows());
  const int d = static_cast<int>(h.rows());
  const int t_len = static_cast<int>(y.cols());
  const int nx = (t_len + 1) * n;
  const int ny = t_len * d;

  Vec mean_x(nx);
  mean_x.segment(0, n) = m0;
  for (int k = 1; k <= t_len; ++k)
    mean_x.segment(k * n, n) = a * mean_x.segment((k - 1) * n, n);

  Mat cov_x = Mat::Zero(nx, nx);
  cov_x.block(0, 0, n, n) = p0;
  for (int k = 1; k <= t_len; ++k) {
    cov_x.block(k * n, k * n, n, n) =
        a * cov_x.block((k - 1) * n, (k - 1) * n, n, n) * a.transpose() + q;
    for (int j = 0; j < k; ++j) {
      cov_x.block(j * n, k * n, n, n) = cov_x.block(j * n, (k - 1) * n, n, n) * a.transpose();
      cov_x.block(k * n, j * n, n, n) = cov_x.block(j * n, k * n, n, n).transpose();
    }
  }

  Mat h_stack = Mat::Zero(ny, nx);
  Mat r_stack = Mat::Zero(ny, ny);
  Vec y_stack(ny);
  for (int k = 1; k <= t_len; ++k) {
    h_stack.block((k - 1) * d, k * n, d, n) = h;
    r_stack.block((k - 1) * d, (k - 1) * d, d, d) = r;
    y_stack.segment((k - 1) * d, d) = y.col(k - 1);
  }

  const Mat s = h_stack * cov_x * h_stack.transpose() + r_stack;
  const Eigen::LDLT<Mat> s_ldlt(s);
  const Mat cross = cov_x * h_stack.transpose();
  const Vec innov = y_stack - h_stack * mean_x;
  const Vec post_mean = mean_x + cross * s_ldlt.solve(innov);
  const Mat post_cov = cov_x - cross * s_ldlt.solve(cross.transpose());

  BatchResult out;
  out.mean.resize(t_len + 1);
  out.cov.resize(t_len + 1);
  out.lag_one.resize(t_len + 1);
  for (int k = 0; k <= t_len; ++k) {
    out.mean[k] = post_mean.segment(k * n, n);
    out.cov[k] = post_cov.block(k * n, k * n, n, n);
    if (k >= 1) out.lag_one[k] = post_cov.block(k * n, (k - 1) * n, n, n);
  }
  const double logdet = s_ldlt.vectorD().array().log().sum();
  out.loglik = -0.5 * (ny * std::log(2.0 * M_PI) + logdet + innov.dot(s_ldlt.solve(innov)));
  return out;
}

// ---------------------------------------------------------------------------
// EM for linear-Gaussian models (closed-form statistics + M-step)
// ---------------------------------------------------------------------------

struct LinearEmStats {
  Mat sigma, phi, b, c, d;  // averaged over k = 1..T as in the M-step formulas
  Vec m0_smoothed;
  Mat p0_smoothed;
};

inline LinearEmStats linear_em_stats(const RtsResult& rts, const Mat& y) {
  const int t_len = static_cast<int>(y.cols());
  const int n = static_cast<int>(rts.mean[0].size());
  const int d = static_cast<int>(y.rows());
  LinearEmStats s;
  s.sigma = Mat::Zero(n, n);
  s.phi = Mat::Zero(n, n);
  s.b = Mat::Zero(d, n);
  s.c = Mat::Zero(n, n);
  s.d = Mat::Zero(d, d);
  for (int k = 1; k <= t_len; ++k) {
    s.sigma += rts.cov[k] + rts.mean[k] * rts.mean[k].transpose();
    s.phi += rts.cov[k - 1] + rts.mean[k - 1] * rts.mean[k - 1].transpose();
    s.c += rts.lag_one[k] + rts.mean[k] * rts.mean[k - 1].transpose();
    s.b += y.col(k - 1) * rts.mean[k].transpose();
    s.d += y.col(k - 1) * y.col(k - 1).transpose();
  }
  s.sigma /= t_len;
  s.phi /= t_len;
  s.c /= t_len;
  s.b /= t_len;
  s.d /= t_len;
  s.m0_smoothed = rts.mean[0];
  s.p0_smoothed = rts.cov[0];
  return s;
}

struct LinearEmUpdate {
  Mat a, h, q, r;
  Vec m0;
  Mat p0;
};

/// One full EM update for the linear-Gaussian model with every block free.
/// Since the initial mean moves to the smoothed mean, the paired covariance
/// update reduces to the smoothed covariance itself.
inline LinearEmUpdate linear_em_update(const LinearEmStats& s) {
  LinearEmUpdate u;
  u.a = s.c * s.phi.inverse();
  u.q = s.sigma - s.c * u.a.transpose() - u.a * s.c.transpose() + u.a * s.phi * u.a.transpose();
  u.h = s.b * s.sigma.inverse();
  u.r = s.d - u.h * s.b.transpose() - s.b * u.h.transpose() + u.h * s.sigma * u.h.transpose();
  u.m0 = s.m0_smoothed;
  u.p0 = s.p0_smoothed;
  return u;
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

inline Vec fd_gradient(const std::function<double(const Vec&)>& fn, const Vec& theta,
                       double step_scale = 1e-5) {
  Vec grad(theta.size());
  for (int i = 0; i < theta.size(); ++i) {
    const double h = step_scale * std::max(1.0, std::abs(theta(i)));
    Vec hi = theta, lo = theta;
    hi(i) += h;
    lo(i) -= h;
    grad(i) = (fn(hi) - fn(lo)) / (2.0 * h);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Deterministic pseudo-random test fixtures
// ---------------------------------------------------------------------------

/// Fixed 3-state/2-measurement linear-Gaussian system with a stable dynamic
/// matrix; coefficients drawn once from the counter RNG so every run sees the
/// same system.
struct LinearSystem {
  Mat a, h, q, r;
  Vec m0;
  Mat p0;
};

inline LinearSystem make_linear_system(std::uint64_t seed, int n = 3, int d = 2) {
  LinearSystem sys;
  int draw = 0;
  const auto next = [&]() {
    return ssmkit::counter_gaussian(seed, 0, 0, ssmkit::NoiseRole::kInitState, draw++ + 16)(0);
  };
  sys.a = Mat(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) sys.a(i, j) = 0.3 * next();
  // scale to spectral radius 0.85 for a comfortably stable system
  const double rho = sys.a.eigenvalues().cwiseAbs().maxCoeff();
  sys.a *= 0.85 / rho;
  sys.h = Mat(d, n);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < n; ++j) sys.h(i, j) = next();
  Mat lq(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) lq(i, j) = 0.4 * next();
  sys.q = lq * lq.transpose() + 0.1 * Mat::Identity(n, n);
  Mat lr(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) lr(i, j) = 0.3 * next();
  sys.r = lr * lr.transpose() + 0.05 * Mat::Identity(d, d);
  sys.m0 = Vec(n);
  for (int i = 0; i < n; ++i) sys.m0(i) = next();
  Mat lp(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) lp(i, j) = 0.5 * next();
  sys.p0 = lp * lp.transpose() + 0.2 * Mat::Identity(n, n);
  return sys;
}

}  // namespace oracle
