#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ssmkit {

/// Distinguishes independent noise channels drawn at the same (seed,
/// trajectory, step) coordinate.
enum class NoiseRole : std::uint64_t {
  kInitState = 1,
  kProcess = 2,
  kMeasurement = 3,
  kProposal = 4,
  kResample = 5,
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t counter_hash(std::uint64_t seed, std::uint64_t trajectory,
                                  std::uint64_t step, NoiseRole role, std::uint64_t index) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ trajectory);
  h = splitmix64(h ^ step);
  h = splitmix64(h ^ static_cast<std::uint64_t>(role));
  h = splitmix64(h ^ index);
  return h;
}

}  // namespace detail

/// Counter-based uniform draw in [0, 1).  Stateless: the value is a pure
/// function of the key tuple, so simulation is reproducible bit-for-bit no
/// matter how work is split across threads.
inline double counter_uniform(std::uint64_t seed, std::uint64_t trajectory, std::uint64_t step,
                              NoiseRole role, std::uint64_t index) {
  const std::uint64_t h = detail::counter_hash(seed, trajectory, step, role, index);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Counter-based standard Gaussian vector via Box-Muller over counter
/// uniforms.  Deterministic for a given key tuple and dimension.
inline Eigen::VectorXd counter_gaussian(std::uint64_t seed, std::uint64_t trajectory,
                                        std::uint64_t step, NoiseRole role, int dim) {
  Eigen::VectorXd z(dim);
  for (int i = 0; i < dim; i += 2) {
    const std::uint64_t base = 2 * static_cast<std::uint64_t>(i);
    // Nudge into (0, 1] so the logarithm stays finite.
    const double u1 =
        (static_cast<double>(detail::counter_hash(seed, trajectory, step, role, base) >> 11) +
         1.0) *
        0x1.0p-53;
    const double u2 = counter_uniform(seed, trajectory, step, role, base + 1);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    z(i) = radius * std::cos(angle);
    if (i + 1 < dim) z(i + 1) = radius * std::sin(angle);
  }
  return z;
}

}  // namespace ssmkit
