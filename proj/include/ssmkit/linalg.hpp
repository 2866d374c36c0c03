#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ssmkit {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Thrown when a covariance stays non-factorizable after the full jitter
/// schedule, or when a quantity that must be invertible is singular.
/// The message carries enough context (step index, matrix name) to locate
/// the failure inside a long filtering pass.
class NumericalBreakdown : public std::runtime_error {
 public:
  explicit NumericalBreakdown(const std::string& what) : std::runtime_error(what) {}
};

/// Replace a nominally symmetric matrix by (P + P^T)/2.  Applied after every
/// covariance-producing formula so round-off asymmetry never accumulates.
inline Mat symmetrize(const Mat& p) { return 0.5 * (p + p.transpose()); }

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
///
/// On factorization failure a diagonal jitter of 1e-12 * trace(P)/n is added
/// and escalated by factors of 10 up to 1e-6 * trace(P)/n before giving up
/// with a NumericalBreakdown naming `context`.  An exactly zero matrix is a
/// valid edge case (deterministic models) and factors to zero.
inline Mat jittered_cholesky(const Mat& p, const std::string& context = "covariance") {
  const Eigen::Index n = p.rows();
  if (n == 0) return Mat(0, 0);
  if (p.cwiseAbs().maxCoeff() == 0.0) return Mat::Zero(n, n);

  Eigen::LLT<Mat> llt(p);
  if (llt.info() == Eigen::Success) return llt.matrixL();

  const double scale = p.trace() > 0.0 ? p.trace() / static_cast<double>(n) : 1.0;
  for (double eps = 1e-12; eps <= 1e-6 * 1.0000001; eps *= 10.0) {
    Mat jittered = p + eps * scale * Mat::Identity(n, n);
    llt.compute(jittered);
    if (llt.info() == Eigen::Success) return llt.matrixL();
  }
  throw NumericalBreakdown("Cholesky factorization failed for " + context +
                           " after jitter escalation to 1e-6 * trace/n");
}

/// Derivative of the lower Cholesky factor L of P in the direction dP:
/// dL = L * phi(L^{-1} dP L^{-T}) where phi keeps the strictly lower
/// triangle and half of the diagonal.
inline Mat cholesky_derivative(const Mat& chol_l, const Mat& dp) {
  const Eigen::Index n = chol_l.rows();
  if (n == 0) return Mat(0, 0);
  Mat inner = chol_l.triangularView<Eigen::Lower>().solve(dp);
  inner = chol_l.triangularView<Eigen::Lower>().solve(inner.transpose()).transpose();
  Mat phi = inner.triangularView<Eigen::StrictlyLower>();
  phi.diagonal() = 0.5 * inner.diagonal();
  return chol_l * phi;
}

/// log N(x; mean, S) evaluated through a Cholesky factor of S.
/// Throws NumericalBreakdown (via jittered_cholesky) if S cannot be factored.
inline double gaussian_log_density(const Vec& x, const Vec& mean, const Mat& s,
                                   const std::string& context = "innovation covariance") {
  const Mat l = jittered_cholesky(s, context);
  const Vec z = l.triangularView<Eigen::Lower>().solve(x - mean);
  const double logdet = 2.0 * l.diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi) + logdet +
                 z.squaredNorm());
}

/// Wrap an angle to the interval (-pi, pi].
inline double wrap_angle(double a) {
  double w = std::remainder(a, 2.0 * std::numbers::pi);
  if (w <= -std::numbers::pi) w += 2.0 * std::numbers::pi;
  return w;
}

/// Solve X * A = B (i.e. X = B * A^{-1}) for symmetric positive definite A
/// through a Cholesky factor; used for gain computations K = C S^{-1}.
inline Mat solve_spd_right(const Mat& a, const Mat& b, const std::string& context) {
  const Mat l = jittered_cholesky(a, context);
  Mat y = l.triangularView<Eigen::Lower>().solve(b.transpose());
  y = l.transpose().triangularView<Eigen::Upper>().solve(y);
  return y.transpose();
}

}  // namespace ssmkit
