#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ssmkit/linalg.hpp"

namespace ssmkit {

enum class RuleKind { kUnscented, kSymmetric, kGaussHermite };

/// Identifies a sigma-point scheme independently of the dimension it will be
/// instantiated in.  `order` is the polynomial exactness degree for symmetric
/// rules (3, 5, 7, 9) and the per-axis point count for Gauss-Hermite.
struct SchemeSpec {
  RuleKind kind = RuleKind::kSymmetric;
  int order = 3;
  double alpha = 1.0;  // unscented only
  double beta = 0.0;   // unscented only
  double kappa = 0.0;  // unscented only

  static SchemeSpec unscented(double alpha, double beta, double kappa) {
    return {RuleKind::kUnscented, 0, alpha, beta, kappa};
  }
  static SchemeSpec symmetric(int order) { return {RuleKind::kSymmetric, order}; }
  static SchemeSpec gauss_hermite(int points_per_axis) {
    return {RuleKind::kGaussHermite, points_per_axis};
  }
};

/// Renders a spec in the grammar accepted by parse_scheme, e.g. "sym5",
/// "gh(3)", "ut(1,0,0)".
inline std::string to_string(const SchemeSpec& spec) {
  std::ostringstream out;
  switch (spec.kind) {
    case RuleKind::kUnscented:
      out << "ut(" << spec.alpha << "," << spec.beta << "," << spec.kappa << ")";
      break;
    case RuleKind::kSymmetric:
      out << "sym" << spec.order;
      break;
    case RuleKind::kGaussHermite:
      out << "gh(" << spec.order << ")";
      break;
  }
  return out.str();
}

/// Parses scheme strings: "ut(alpha,beta,kappa)", "sym3|sym5|sym7|sym9",
/// "gh(p)".  Throws std::invalid_argument on anything else.
inline SchemeSpec parse_scheme(const std::string& text) {
  const auto fail = [&]() -> SchemeSpec {
    throw std::invalid_argument("unrecognized sigma-point scheme '" + text +
                                "'; expected ut(a,b,k), sym3|5|7|9, or gh(p)");
  };
  if (text.rfind("sym", 0) == 0) {
    const std::string rest = text.substr(3);
    if (rest != "3" && rest != "5" && rest != "7" && rest != "9") return fail();
    return SchemeSpec::symmetric(std::stoi(rest));
  }
  if (text.rfind("gh(", 0) == 0 && text.back() == ')') {
    int p = 0;
    try {
      size_t used = 0;
      p = std::stoi(text.substr(3), &used);
      if (used + 4 != text.size()) return fail();
    } catch (const std::exception&) {
      return fail();
    }
    if (p < 1) throw std::invalid_argument("gh(p) requires p >= 1, got " + text);
    return SchemeSpec::gauss_hermite(p);
  }
  if (text.rfind("ut(", 0) == 0 && text.back() == ')') {
    std::istringstream in(text.substr(3, text.size() - 4));
    double a = 0.0, b = 0.0, k = 0.0;
    char c1 = 0, c2 = 0;
    if (!(in >> a >> c1 >> b >> c2 >> k) || c1 != ',' || c2 != ',' || !(in >> std::ws).eof())
      return fail();
    return SchemeSpec::unscented(a, b, k);
  }
  return fail();
}

/// A sigma-point rule instantiated in `dim` dimensions.  `points` holds unit
/// sigma points (columns) for the standard normal N(0, I); transforming to
/// N(m, P) is m + chol(P) * points.  Mean and covariance sums may use
/// different weights (the unscented rule's center weight differs between the
/// two); for all other schemes the vectors coincide.
struct CubatureRule {
  SchemeSpec spec;
  int dim = 0;
  Mat points;
  Vec mean_weights;
  Vec cov_weights;

  Eigen::Index count() const { return points.cols(); }
};

namespace detail {

/// Nonzero radii of a fully symmetric rule of the given exactness degree.
/// These are the nonzero roots of the probabilists' Hermite polynomials
/// He3 (degree 5), He4 (degree 7) and He5 (degree 9), largest first.
inline std::vector<double> symmetric_radii(int order) {
  switch (order) {
    case 3:
      return {};  // radius depends on dimension; handled separately
    case 5:
      return {std::sqrt(3.0)};
    case 7:
      return {std::sqrt(3.0 + std::sqrt(6.0)), std::sqrt(3.0 - std::sqrt(6.0))};
    case 9:
      return {std::sqrt(5.0 + std::sqrt(10.0)), std::sqrt(5.0 - std::sqrt(10.0))};
    default:
      throw std::invalid_argument("fully symmetric rules support orders 3, 5, 7, 9; got " +
                                  std::to_string(order));
  }
}

/// Orbit generators for each rule, as multisets of radius indices placed on
/// distinct coordinate axes (empty = the origin).  Radius index 0 is the
/// larger radius; ties between candidate assignments are broken by giving
/// the larger radius to the outer (higher-multiplicity) orbit.
inline std::vector<std::vector<int>> symmetric_orbits(int order) {
  switch (order) {
    case 5:
      return {{}, {0}, {0, 0}};
    case 7:
      return {{}, {0}, {1}, {0, 0}, {1, 1}, {0, 0, 0}};
    case 9:
      return {{}, {0}, {1}, {0, 0}, {1, 1}, {0, 1}, {0, 0, 0}, {1, 1, 1}, {0, 0, 0, 0}};
    default:
      throw std::invalid_argument("no orbit table for order " + std::to_string(order));
  }
}

/// Number of points the orbit expands to in dimension n: choose distinct
/// axes for each radius group, then all sign combinations.
inline std::int64_t orbit_size(const std::vector<int>& orbit, int n) {
  std::map<int, int> radius_mult;
  for (int r : orbit) ++radius_mult[r];
  const int k = static_cast<int>(orbit.size());
  if (k > n) return 0;
  std::int64_t placements = 1;
  int remaining = n;
  for (const auto& [radius, mult] : radius_mult) {
    // C(remaining, mult)
    std::int64_t comb = 1;
    for (int i = 0; i < mult; ++i) comb = comb * (remaining - i) / (i + 1);
    placements *= comb;
    remaining -= mult;
  }
  return placements << k;  // 2^k sign choices
}

/// Expands an orbit into explicit points (columns appended to `out`).
inline void expand_orbit(const std::vector<int>& orbit, const std::vector<double>& radii, int n,
                         std::vector<Vec>& out) {
  const int k = static_cast<int>(orbit.size());
  if (k > n) return;
  if (k == 0) {
    out.push_back(Vec::Zero(n));
    return;
  }
  // Assign each entry of the orbit to a distinct axis.  Entries with equal
  // radius are interchangeable, so force their axes to be increasing to
  // avoid duplicates.
  std::vector<int> axes(k, -1);
  std::vector<bool> used(n, false);
  const std::function<void(int)> place = [&](int slot) {
    if (slot == k) {
      for (std::uint32_t signs = 0; signs < (1u << k); ++signs) {
        Vec p = Vec::Zero(n);
        for (int j = 0; j < k; ++j)
          p(axes[j]) = ((signs >> j) & 1u ? -1.0 : 1.0) * radii[orbit[j]];
        out.push_back(p);
      }
      return;
    }
    const int start =
        (slot > 0 && orbit[slot] == orbit[slot - 1]) ? axes[slot - 1] + 1 : 0;
    for (int axis = start; axis < n; ++axis) {
      if (used[axis]) continue;
      used[axis] = true;
      axes[slot] = axis;
      place(slot + 1);
      used[axis] = false;
    }
  };
  place(0);
}

/// Even-exponent monomial patterns (sorted descending) of total degree at
/// most `degree` using at most `n` variables; one representative per
/// permutation class is enough because the rules are permutation and sign
/// symmetric.
inline std::vector<std::vector<int>> even_moment_patterns(int n, int degree) {
  std::vector<std::vector<int>> result{{}};
  std::vector<int> current;
  const std::function<void(int, int)> recurse = [&](int remaining, int max_part) {
    if (static_cast<int>(current.size()) > n) return;
    if (!current.empty()) result.push_back(current);
    int start = std::min(remaining, max_part);
    if (start % 2 != 0) --start;
    for (int part = start; part >= 2; part -= 2) {
      if (static_cast<int>(current.size()) == n) break;
      current.push_back(part);
      recurse(remaining - part, part);
      current.pop_back();
    }
  };
  recurse(degree, degree);
  return result;
}

/// E[prod x_i^{a_i}] for x ~ N(0, I): product of double factorials of the
/// (even) exponents.
inline double standard_gaussian_moment(const std::vector<int>& pattern) {
  double m = 1.0;
  for (int a : pattern) {
    for (int k = a - 1; k >= 1; k -= 2) m *= static_cast<double>(k);
  }
  return m;
}

inline double pow_int(double base, int e) {
  double r = 1.0;
  for (int i = 0; i < e; ++i) r *= base;
  return r;
}

}  // namespace detail

/// Solves the orbit weights of a fully symmetric rule of the given exactness
/// degree in dimension n by matching all standard-normal moments up to that
/// degree.  Returns one weight per non-empty orbit together with the orbit
/// generators and radii.  Throws NumericalBreakdown if the moment system is
/// inconsistent (residual above 1e-8 after row equilibration).
struct SymmetricWeights {
  std::vector<double> radii;
  std::vector<std::vector<int>> orbits;  // non-empty orbits only
  std::vector<double> weights;           // per orbit, shared by all its points
};

inline SymmetricWeights solve_symmetric_weights(int n, int order) {
  if (n < 1) throw std::invalid_argument("dimension must be positive");
  SymmetricWeights result;
  result.radii = detail::symmetric_radii(order);

  if (order == 3) {
    result.radii = {std::sqrt(static_cast<double>(n))};
    result.orbits = {{0}};
    result.weights = {1.0 / (2.0 * n)};
    return result;
  }

  for (const auto& orbit : detail::symmetric_orbits(order)) {
    if (detail::orbit_size(orbit, n) > 0) result.orbits.push_back(orbit);
  }
  const int n_orbits = static_cast<int>(result.orbits.size());

  std::vector<std::vector<Vec>> orbit_points(result.orbits.size());
  for (size_t o = 0; o < result.orbits.size(); ++o)
    detail::expand_orbit(result.orbits[o], result.radii, n, orbit_points[o]);

  // One moment-matching equation per even monomial pattern of degree <= order;
  // the representative monomial uses the first |pattern| coordinates, which
  // suffices because the point sets are permutation and sign symmetric.
  const auto patterns = detail::even_moment_patterns(n, order);
  const int n_eq = static_cast<int>(patterns.size());
  Mat a(n_eq, n_orbits);
  Vec b(n_eq);
  for (int row = 0; row < n_eq; ++row) {
    const auto& pattern = patterns[row];
    b(row) = detail::standard_gaussian_moment(pattern);
    for (int col = 0; col < n_orbits; ++col) {
      double sum = 0.0;
      for (const Vec& p : orbit_points[col]) {
        double term = 1.0;
        for (size_t i = 0; i < pattern.size(); ++i)
          term *= detail::pow_int(p(static_cast<Eigen::Index>(i)), pattern[i]);
        sum += term;
      }
      a(row, col) = sum;
    }
  }

  // Equilibrate rows so the residual check is scale-free.
  Mat a_scaled = a;
  Vec b_scaled = b;
  for (int row = 0; row < n_eq; ++row) {
    const double scale = std::max(1.0, a.row(row).cwiseAbs().maxCoeff());
    a_scaled.row(row) /= scale;
    b_scaled(row) /= scale;
  }
  const Vec w = a_scaled.colPivHouseholderQr().solve(b_scaled);
  const double residual = (a_scaled * w - b_scaled).cwiseAbs().maxCoeff();
  if (!w.allFinite() || residual > 1e-8) {
    throw NumericalBreakdown("moment system for sym" + std::to_string(order) + " in dimension " +
                             std::to_string(n) + " is inconsistent (residual " +
                             std::to_string(residual) + ")");
  }
  result.weights.assign(w.data(), w.data() + w.size());
  return result;
}

/// One-dimensional Gauss-Hermite nodes and weights for the standard normal
/// weight function, computed from the Jacobi matrix of the probabilists'
/// Hermite recurrence.  Nodes are exactly sign-symmetric.
inline void gauss_hermite_1d(int p, Vec& nodes, Vec& weights) {
  if (p < 1) throw std::invalid_argument("gauss_hermite_1d requires p >= 1");
  if (p == 1) {
    nodes = Vec::Zero(1);
    weights = Vec::Ones(1);
    return;
  }
  Mat jacobi = Mat::Zero(p, p);
  for (int i = 0; i + 1 < p; ++i) {
    const double off = std::sqrt(static_cast<double>(i + 1));
    jacobi(i, i + 1) = off;
    jacobi(i + 1, i) = off;
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(jacobi);
  nodes = eig.eigenvalues();
  weights = eig.eigenvectors().row(0).transpose().array().square();
  // Enforce exact symmetry of the node set (the eigensolver is symmetric
  // only to round-off).
  for (int i = 0; i < p / 2; ++i) {
    const double x = 0.5 * (nodes(p - 1 - i) - nodes(i));
    nodes(i) = -x;
    nodes(p - 1 - i) = x;
    const double w = 0.5 * (weights(i) + weights(p - 1 - i));
    weights(i) = w;
    weights(p - 1 - i) = w;
  }
  if (p % 2 == 1) nodes(p / 2) = 0.0;
  weights /= weights.sum();
}

/// Closed-form point count of a scheme in dimension n (no rule construction).
inline std::int64_t point_count(const SchemeSpec& spec, int n) {
  if (n < 1) throw std::invalid_argument("dimension must be positive");
  const std::int64_t nn = n;
  switch (spec.kind) {
    case RuleKind::kUnscented:
      return 2 * nn + 1;
    case RuleKind::kSymmetric:
      switch (spec.order) {
        case 3:
          return 2 * nn;
        case 5:
          return 2 * nn * nn + 1;
        case 7:
          return (4 * nn * nn * nn + 8 * nn + 3) / 3;
        case 9:
          return (2 * nn * nn * nn * nn - 4 * nn * nn * nn + 22 * nn * nn - 8 * nn + 3) / 3;
        default:
          throw std::invalid_argument("fully symmetric rules support orders 3, 5, 7, 9");
      }
    case RuleKind::kGaussHermite: {
      std::int64_t c = 1;
      for (int i = 0; i < n; ++i) {
        c *= spec.order;
        if (c > (std::int64_t{1} << 40))
          throw std::invalid_argument("Gauss-Hermite tensor grid too large: gh(" +
                                      std::to_string(spec.order) + ") in dimension " +
                                      std::to_string(n));
      }
      return c;
    }
  }
  throw std::logic_error("unreachable");
}

namespace detail {

inline CubatureRule build_unscented(const SchemeSpec& spec, int n) {
  const double lambda = spec.alpha * spec.alpha * (n + spec.kappa) - n;
  if (std::abs(n + lambda) < 1e-12)
    throw std::invalid_argument("unscented rule undefined: n + lambda = 0 for n = " +
                                std::to_string(n));
  if (n + lambda < 0.0)
    throw std::invalid_argument("unscented rule undefined: n + lambda < 0 (negative spread)");
  CubatureRule rule{spec, n, Mat::Zero(n, 2 * n + 1), Vec(2 * n + 1), Vec(2 * n + 1)};
  const double spread = std::sqrt(n + lambda);
  const double wi = 1.0 / (2.0 * (n + lambda));
  rule.mean_weights.setConstant(wi);
  rule.cov_weights.setConstant(wi);
  rule.mean_weights(0) = lambda / (n + lambda);
  rule.cov_weights(0) = lambda / (n + lambda) + (1.0 - spec.alpha * spec.alpha + spec.beta);
  for (int i = 0; i < n; ++i) {
    rule.points(i, 1 + i) = spread;
    rule.points(i, 1 + n + i) = -spread;
  }
  return rule;
}

inline CubatureRule build_symmetric(const SchemeSpec& spec, int n) {
  const SymmetricWeights sw = solve_symmetric_weights(n, spec.order);
  std::vector<Vec> pts;
  std::vector<double> wts;
  for (size_t o = 0; o < sw.orbits.size(); ++o) {
    std::vector<Vec> orbit_pts;
    expand_orbit(sw.orbits[o], sw.radii, n, orbit_pts);
    for (Vec& p : orbit_pts) {
      pts.push_back(std::move(p));
      wts.push_back(sw.weights[o]);
    }
  }
  CubatureRule rule{spec, n, Mat(n, static_cast<Eigen::Index>(pts.size())),
                    Vec(static_cast<Eigen::Index>(pts.size())),
                    Vec(static_cast<Eigen::Index>(pts.size()))};
  for (size_t i = 0; i < pts.size(); ++i) {
    rule.points.col(static_cast<Eigen::Index>(i)) = pts[i];
    rule.mean_weights(static_cast<Eigen::Index>(i)) = wts[i];
  }
  rule.cov_weights = rule.mean_weights;
  return rule;
}

inline CubatureRule build_gauss_hermite(const SchemeSpec& spec, int n) {
  Vec nodes, weights;
  gauss_hermite_1d(spec.order, nodes, weights);
  const std::int64_t total = point_count(spec, n);
  CubatureRule rule{spec, n, Mat(n, total), Vec(total), Vec(total)};
  std::vector<int> idx(n, 0);
  for (std::int64_t col = 0; col < total; ++col) {
    double w = 1.0;
    for (int i = 0; i < n; ++i) {
      rule.points(i, col) = nodes(idx[i]);
      w *= weights(idx[i]);
    }
    rule.mean_weights(col) = w;
    for (int i = 0; i < n; ++i) {
      if (++idx[i] < spec.order) break;
      idx[i] = 0;
    }
  }
  rule.cov_weights = rule.mean_weights;
  return rule;
}

}  // namespace detail

/// Builds (or fetches from a process-wide cache) the rule for `spec` in
/// dimension n.  The returned rule is immutable and safe to share across
/// threads.
inline std::shared_ptr<const CubatureRule> build_rule(const SchemeSpec& spec, int n) {
  if (n < 1) throw std::invalid_argument("dimension must be positive");
  static std::mutex cache_mutex;
  static std::map<std::string, std::shared_ptr<const CubatureRule>> cache;
  const std::string key = to_string(spec) + "@" + std::to_string(n);
  {
    std::lock_guard<std::mutex> lock(cache_mutex);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  CubatureRule built;
  switch (spec.kind) {
    case RuleKind::kUnscented:
      built = detail::build_unscented(spec, n);
      break;
    case RuleKind::kSymmetric:
      built = detail::build_symmetric(spec, n);
      break;
    case RuleKind::kGaussHermite:
      built = detail::build_gauss_hermite(spec, n);
      break;
  }
  auto shared = std::make_shared<const CubatureRule>(std::move(built));
  std::lock_guard<std::mutex> lock(cache_mutex);
  cache.emplace(key, shared);
  return shared;
}

inline std::shared_ptr<const CubatureRule> build_rule(const std::string& spec, int n) {
  return build_rule(parse_scheme(spec), n);
}

/// Sigma-point approximation of E[g(x)] for x ~ N(mean, L L^T), where L is a
/// lower Cholesky factor.  Works for scalar-, vector- and matrix-valued g;
/// mean weights are used (covariance weights only matter inside explicit
/// outer-product sums, which the filtering code assembles itself).
template <class G>
auto expect(const CubatureRule& rule, const Vec& mean, const Mat& chol_l, G&& g) {
  using Result = std::invoke_result_t<G, Vec>;
  Result acc{};
  bool first = true;
  for (Eigen::Index i = 0; i < rule.count(); ++i) {
    const Vec x = mean + chol_l * rule.points.col(i);
    if (first) {
      acc = rule.mean_weights(i) * g(x);
      first = false;
    } else {
      acc += rule.mean_weights(i) * g(x);
    }
  }
  return acc;
}

}  // namespace ssmkit
