#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssmkit/linalg.hpp"
#include "ssmkit/rng.hpp"

namespace ssmkit {

/// Parameter blocks of a model whose coefficients enter linearly:
/// x_k = A f~(x_{k-1}, k-1) + q_k,  y_k = H h~(x_k) + r_k.
struct EMParams {
  Mat A;   // state_dim x f_basis_dim
  Mat H;   // meas_dim x h_basis_dim
  Mat Q;   // state_dim x state_dim
  Mat R;   // meas_dim x meas_dim
  Vec m0;  // state_dim
  Mat P0;  // state_dim x state_dim
};

/// Linear-in-parameters view of a model: basis functions plus the
/// coefficient blocks they multiply.  `theta_of` maps a parameter block back
/// to the model's own parameter vector for reporting.
struct LinearInParams {
  int f_basis_dim = 0;
  int h_basis_dim = 0;
  std::function<Vec(const Vec& x, int k)> f_basis;
  std::function<Vec(const Vec& x)> h_basis;
  EMParams params;
  std::function<Vec(const EMParams&)> theta_of;
};

/// A discrete-time state-space model
///   x_k = f(x_{k-1}, theta, k-1) + q_k,  q_k ~ N(0, Q(theta)),
///   y_k = h(x_k, theta) + r_k,           r_k ~ N(0, R(theta)),
///   x_0 ~ N(m0(theta), P0(theta)),
/// with the step index of the *source* state passed to f, so a prediction
/// from step k-1 to step k evaluates f(., ., k-1).
///
/// Parameter partials may be left unset for parameter-free blocks; consumers
/// treat a missing function as identically zero.
struct StateSpaceModel {
  std::string name;
  int state_dim = 0;
  int meas_dim = 0;
  int param_dim = 0;
  Vec default_theta;

  std::function<Vec(const Vec& x, const Vec& theta, int k)> f;
  std::function<Vec(const Vec& x, const Vec& theta)> h;
  std::function<Mat(const Vec& theta)> process_cov;
  std::function<Mat(const Vec& theta)> meas_cov;
  std::function<Vec(const Vec& theta)> init_mean;
  std::function<Mat(const Vec& theta)> init_cov;

  std::function<Mat(const Vec& x, const Vec& theta, int k)> fx;  // df/dx
  std::function<Mat(const Vec& x, const Vec& theta)> hx;         // dh/dx

  std::function<Vec(const Vec& x, const Vec& theta, int k, int i)> df_dtheta;
  std::function<Vec(const Vec& x, const Vec& theta, int i)> dh_dtheta;
  std::function<Mat(const Vec& theta, int i)> dq_dtheta;
  std::function<Mat(const Vec& theta, int i)> dr_dtheta;
  std::function<Vec(const Vec& theta, int i)> dm0_dtheta;
  std::function<Mat(const Vec& theta, int i)> dp0_dtheta;

  /// Innovation post-processor (e.g. angle wrapping); identity when unset.
  std::function<Vec(const Vec& v)> residual;

  /// Linear-in-parameters view for closed-form EM; unset when unavailable.
  std::function<LinearInParams(const Vec& theta)> linear_view;

  Vec apply_residual(const Vec& v) const { return residual ? residual(v) : v; }
};

/// One simulated trajectory: states x_0..x_T (columns) and measurements
/// y_1..y_T (columns).
struct SimOutput {
  Mat states;        // state_dim x (T+1)
  Mat measurements;  // meas_dim x T
};

/// Draws a trajectory of length T.  All noise comes from the counter-based
/// generator keyed by (seed, trajectory, step, role), so any subset of
/// trajectories can be re-simulated bit-identically and in any order.
inline SimOutput simulate(const StateSpaceModel& model, const Vec& theta, int T,
                          std::uint64_t seed, std::uint64_t trajectory = 0) {
  if (T < 0) throw std::invalid_argument("simulate requires T >= 0");
  const int n = model.state_dim;
  const int d = model.meas_dim;
  const Mat l0 = jittered_cholesky(model.init_cov(theta), "initial covariance");
  const Mat lq = jittered_cholesky(model.process_cov(theta), "process covariance");
  const Mat lr = jittered_cholesky(model.meas_cov(theta), "measurement covariance");

  SimOutput out{Mat(n, T + 1), Mat(d, T)};
  out.states.col(0) =
      model.init_mean(theta) + l0 * counter_gaussian(seed, trajectory, 0, NoiseRole::kInitState, n);
  for (int k = 0; k < T; ++k) {
    out.states.col(k + 1) =
        model.f(out.states.col(k), theta, k) +
        lq * counter_gaussian(seed, trajectory, static_cast<std::uint64_t>(k) + 1,
                              NoiseRole::kProcess, n);
    out.measurements.col(k) =
        model.h(out.states.col(k + 1), theta) +
        lr * counter_gaussian(seed, trajectory, static_cast<std::uint64_t>(k) + 1,
                              NoiseRole::kMeasurement, d);
  }
  return out;
}

/// Univariate nonstationary growth model with a linear measurement:
///   x_{k+1} = a x_k + b x_k/(1+x_k^2) + c cos(1.2 k) + q_k,
///   y_k     = d x_k + r_k,
/// free parameters theta = (a, b, c); d and the variances stay fixed.
inline StateSpaceModel ungm_model(double a = 0.5, double b = 25.0, double c = 8.0,
                                  double d = std::sqrt(0.05), double q = 10.0, double r = 0.01) {
  StateSpaceModel m;
  m.name = "ungm";
  m.state_dim = 1;
  m.meas_dim = 1;
  m.param_dim = 3;
  m.default_theta = (Vec(3) << a, b, c).finished();

  m.f = [](const Vec& x, const Vec& th, int k) {
    Vec out(1);
    out(0) = th(0) * x(0) + th(1) * x(0) / (1.0 + x(0) * x(0)) + th(2) * std::cos(1.2 * k);
    return out;
  };
  m.h = [d](const Vec& x, const Vec&) { return Vec::Constant(1, d * x(0)); };
  m.process_cov = [q](const Vec&) { return Mat::Constant(1, 1, q); };
  m.meas_cov = [r](const Vec&) { return Mat::Constant(1, 1, r); };
  m.init_mean = [](const Vec&) { return Vec::Zero(1); };
  m.init_cov = [](const Vec&) { return Mat::Constant(1, 1, 0.01); };

  m.fx = [](const Vec& x, const Vec& th, int) {
    const double denom = 1.0 + x(0) * x(0);
    return Mat::Constant(1, 1, th(0) + th(1) * (1.0 - x(0) * x(0)) / (denom * denom));
  };
  m.hx = [d](const Vec&, const Vec&) { return Mat::Constant(1, 1, d); };

  m.df_dtheta = [](const Vec& x, const Vec&, int k, int i) {
    Vec g(1);
    switch (i) {
      case 0: g(0) = x(0); break;
      case 1: g(0) = x(0) / (1.0 + x(0) * x(0)); break;
      case 2: g(0) = std::cos(1.2 * k); break;
      default: throw std::out_of_range("ungm has 3 parameters");
    }
    return g;
  };

  m.linear_view = [m](const Vec& th) {
    LinearInParams view;
    view.f_basis_dim = 3;
    view.h_basis_dim = 1;
    view.f_basis = [](const Vec& x, int k) {
      return (Vec(3) << x(0), x(0) / (1.0 + x(0) * x(0)), std::cos(1.2 * k)).finished();
    };
    view.h_basis = [](const Vec& x) { return x; };
    view.params = {th.transpose(), m.hx(Vec::Zero(1), th), m.process_cov(th), m.meas_cov(th),
                   m.init_mean(th), m.init_cov(th)};
    view.theta_of = [](const EMParams& p) { return Vec(p.A.row(0).transpose()); };
    return view;
  };
  return m;
}

namespace detail {

/// Integrated-turn-rate terms sin(w dt)/w and (cos(w dt) - 1)/w together
/// with their derivatives in w, switching to series expansions when |w dt|
/// is small enough that the direct quotients lose accuracy.
struct TurnTerms {
  double sin_w;       // sin(w dt) / w
  double cos1_w;      // (cos(w dt) - 1) / w
  double d_sin_w;     // d/dw of sin_w
  double d_cos1_w;    // d/dw of cos1_w
};

inline TurnTerms turn_terms(double w, double dt) {
  TurnTerms t{};
  if (std::abs(w * dt) < 1e-4) {
    const double dt2 = dt * dt;
    t.sin_w = dt * (1.0 - w * w * dt2 / 6.0);
    t.cos1_w = -w * dt2 / 2.0 + w * w * w * dt2 * dt2 / 24.0;
    t.d_sin_w = -w * dt2 * dt / 3.0 + w * w * w * dt2 * dt2 * dt / 30.0;
    t.d_cos1_w = -dt2 / 2.0 + w * w * dt2 * dt2 / 8.0;
  } else {
    const double s = std::sin(w * dt);
    const double c = std::cos(w * dt);
    t.sin_w = s / w;
    t.cos1_w = (c - 1.0) / w;
    t.d_sin_w = (dt * c * w - s) / (w * w);
    t.d_cos1_w = (-dt * s * w - (c - 1.0)) / (w * w);
  }
  return t;
}

}  // namespace detail

/// Coordinated-turn target with bearings-only measurements from two fixed
/// sensors.  State (x1, x2, dx1, dx2, w); free parameter theta = (sqrt of
/// the first sensor's noise variance); the second sensor's variance and all
/// dynamic quantities stay fixed.
inline StateSpaceModel ct_model(double q_c = 0.1, double q_w = 0.1, double dt = 0.01,
                                std::vector<Vec> sensors = {(Vec(2) << -1.0, 0.5).finished(),
                                                            (Vec(2) << 1.0, 1.0).finished()},
                                Vec r_diag = (Vec(2) << 0.05 * 0.05, 0.1 * 0.1).finished()) {
  if (sensors.size() != static_cast<size_t>(r_diag.size()))
    throw std::invalid_argument("ct_model: one noise variance per sensor required");
  StateSpaceModel m;
  m.name = "ct";
  m.state_dim = 5;
  m.meas_dim = static_cast<int>(sensors.size());
  m.param_dim = 1;
  m.default_theta = Vec::Constant(1, std::sqrt(r_diag(0)));

  m.f = [dt](const Vec& x, const Vec&, int) {
    const auto t = detail::turn_terms(x(4), dt);
    const double s = std::sin(x(4) * dt);
    const double c = std::cos(x(4) * dt);
    Vec out(5);
    out(0) = x(0) + t.sin_w * x(2) + t.cos1_w * x(3);
    out(1) = x(1) - t.cos1_w * x(2) + t.sin_w * x(3);
    out(2) = c * x(2) - s * x(3);
    out(3) = s * x(2) + c * x(3);
    out(4) = x(4);
    return out;
  };
  m.fx = [dt](const Vec& x, const Vec&, int) {
    const auto t = detail::turn_terms(x(4), dt);
    const double s = std::sin(x(4) * dt);
    const double c = std::cos(x(4) * dt);
    Mat jac = Mat::Identity(5, 5);
    jac(0, 2) = t.sin_w;
    jac(0, 3) = t.cos1_w;
    jac(1, 2) = -t.cos1_w;
    jac(1, 3) = t.sin_w;
    jac(2, 2) = c;
    jac(2, 3) = -s;
    jac(3, 2) = s;
    jac(3, 3) = c;
    jac(0, 4) = t.d_sin_w * x(2) + t.d_cos1_w * x(3);
    jac(1, 4) = -t.d_cos1_w * x(2) + t.d_sin_w * x(3);
    jac(2, 4) = dt * (-s * x(2) - c * x(3));
    jac(3, 4) = dt * (c * x(2) - s * x(3));
    return jac;
  };

  m.h = [sensors](const Vec& x, const Vec&) {
    Vec y(static_cast<Eigen::Index>(sensors.size()));
    for (size_t i = 0; i < sensors.size(); ++i)
      y(static_cast<Eigen::Index>(i)) = std::atan2(x(1) - sensors[i](1), x(0) - sensors[i](0));
    return y;
  };
  m.hx = [sensors](const Vec& x, const Vec&) {
    Mat jac = Mat::Zero(static_cast<Eigen::Index>(sensors.size()), 5);
    for (size_t i = 0; i < sensors.size(); ++i) {
      const double dx = x(0) - sensors[i](0);
      const double dy = x(1) - sensors[i](1);
      const double rho2 = dx * dx + dy * dy;
      jac(static_cast<Eigen::Index>(i), 0) = -dy / rho2;
      jac(static_cast<Eigen::Index>(i), 1) = dx / rho2;
    }
    return jac;
  };

  m.process_cov = [q_c, q_w, dt](const Vec&) {
    Mat q = Mat::Zero(5, 5);
    const double dt3 = dt * dt * dt;
    q(0, 0) = q(1, 1) = q_c * dt3 / 3.0;
    q(0, 2) = q(2, 0) = q(1, 3) = q(3, 1) = q_c * dt * dt / 2.0;
    q(2, 2) = q(3, 3) = q_c * dt;
    q(4, 4) = q_w * dt;
    return q;
  };
  m.meas_cov = [r_diag](const Vec& th) {
    Vec diag = r_diag;
    diag(0) = th(0) * th(0);
    return Mat(diag.asDiagonal());
  };
  m.init_mean = [](const Vec&) { return (Vec(5) << 2, 0, 0, 0, 0).finished(); };
  m.init_cov = [](const Vec&) {
    return Mat((Vec(5) << 0.25, 0.25, 0.25, 0.25, 1.0).finished().asDiagonal());
  };

  m.dr_dtheta = [n = m.meas_dim](const Vec& th, int i) {
    if (i != 0) throw std::out_of_range("ct has 1 parameter");
    Mat d = Mat::Zero(n, n);
    d(0, 0) = 2.0 * th(0);
    return d;
  };
  m.residual = [](const Vec& v) {
    Vec w = v;
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = wrap_angle(w(i));
    return w;
  };

  m.linear_view = [m](const Vec& th) {
    LinearInParams view;
    view.f_basis_dim = 5;
    view.h_basis_dim = static_cast<int>(m.meas_dim);
    view.f_basis = [f = m.f, th](const Vec& x, int k) { return f(x, th, k); };
    view.h_basis = [h = m.h, th](const Vec& x) { return h(x, th); };
    view.params = {Mat::Identity(5, 5), Mat::Identity(m.meas_dim, m.meas_dim),
                   m.process_cov(th), m.meas_cov(th), m.init_mean(th), m.init_cov(th)};
    view.theta_of = [](const EMParams& p) {
      return Vec::Constant(1, std::sqrt(p.R(0, 0)));
    };
    return view;
  };
  return m;
}

/// Replaces the initial distribution of `model` to express a location prior
/// with per-coordinate standard deviation sigma in (0, 0.5]: the first two
/// diagonal entries of P0 become sigma^2 and the first two components of m0
/// are interpolated between the model's m0 and the true simulated x0 so the
/// prior stays consistent with its own uncertainty.
inline StateSpaceModel initial_uncertainty_sweep(const StateSpaceModel& model, double sigma,
                                                 const Vec& x0_true) {
  if (!(sigma > 0.0) || sigma > 0.5)
    throw std::invalid_argument("initial uncertainty sweep requires sigma in (0, 0.5]");
  StateSpaceModel swept = model;
  const double blend = sigma / 0.5;
  swept.init_mean = [base = model.init_mean, x0_true, blend](const Vec& th) {
    Vec m0 = base(th);
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(2, m0.size()); ++i)
      m0(i) = blend * m0(i) + (1.0 - blend) * x0_true(i);
    return m0;
  };
  swept.init_cov = [base = model.init_cov, sigma](const Vec& th) {
    Mat p0 = base(th);
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(2, p0.rows()); ++i)
      p0(i, i) = sigma * sigma;
    return p0;
  };
  if (model.linear_view) {
    swept.linear_view = [base = model.linear_view, init_mean = swept.init_mean,
                         init_cov = swept.init_cov](const Vec& th) {
      LinearInParams view = base(th);
      view.params.m0 = init_mean(th);
      view.params.P0 = init_cov(th);
      return view;
    };
  }
  return swept;
}

/// Materializes a linear-in-parameters view as a plain state-space model
/// with an empty parameter vector: f(x, k) = A f~(x, k), h(x) = H h~(x).
/// Only sigma-point consumers can use it (no state Jacobians are available
/// for the bases).  `residual` carries over any innovation post-processing
/// from the original model.
inline StateSpaceModel model_from_linear_view(const LinearInParams& view,
                                              std::function<Vec(const Vec&)> residual = nullptr) {
  StateSpaceModel m;
  m.name = "linear-view";
  m.state_dim = static_cast<int>(view.params.A.rows());
  m.meas_dim = static_cast<int>(view.params.H.rows());
  m.param_dim = 0;
  m.default_theta = Vec(0);
  m.f = [a = view.params.A, basis = view.f_basis](const Vec& x, const Vec&, int k) {
    return Vec(a * basis(x, k));
  };
  m.h = [h = view.params.H, basis = view.h_basis](const Vec& x, const Vec&) {
    return Vec(h * basis(x));
  };
  m.process_cov = [q = view.params.Q](const Vec&) { return q; };
  m.meas_cov = [r = view.params.R](const Vec&) { return r; };
  m.init_mean = [m0 = view.params.m0](const Vec&) { return m0; };
  m.init_cov = [p0 = view.params.P0](const Vec&) { return p0; };
  if (residual) m.residual = std::move(residual);
  return m;
}

/// Plain linear-Gaussian model x_k = A x_{k-1} + q, y_k = H x_k + r with an
/// empty parameter vector; used as a reference model by tests and the CLI.
inline StateSpaceModel linear_gaussian_model(Mat a, Mat h, Mat q, Mat r, Vec m0, Mat p0) {
  StateSpaceModel m;
  m.name = "linear";
  m.state_dim = static_cast<int>(a.rows());
  m.meas_dim = static_cast<int>(h.rows());
  m.param_dim = 0;
  m.default_theta = Vec(0);
  m.f = [a](const Vec& x, const Vec&, int) { return Vec(a * x); };
  m.h = [h](const Vec& x, const Vec&) { return Vec(h * x); };
  m.fx = [a](const Vec&, const Vec&, int) { return a; };
  m.hx = [h](const Vec&, const Vec&) { return h; };
  m.process_cov = [q](const Vec&) { return q; };
  m.meas_cov = [r](const Vec&) { return r; };
  m.init_mean = [m0](const Vec&) { return m0; };
  m.init_cov = [p0](const Vec&) { return p0; };
  m.linear_view = [a, h, q, r, m0, p0, n = m.state_dim](const Vec&) {
    LinearInParams view;
    view.f_basis_dim = static_cast<int>(a.cols());
    view.h_basis_dim = static_cast<int>(h.cols());
    view.f_basis = [](const Vec& x, int) { return x; };
    view.h_basis = [](const Vec& x) { return x; };
    view.params = {a, h, q, r, m0, p0};
    view.theta_of = [](const EMParams&) { return Vec(0); };
    return view;
  };
  return m;
}

}  // namespace ssmkit
