#pragma once

#include <algorithm>
#include <ostream>
#include <vector>

#include "jneus/core.hpp"
#include "jneus/mesh.hpp"

namespace jneus {

struct ThresholdPolicy {
  double gamma_up = 1.05;
  double gamma_down = 0.95;
  double rho_high = 1.0;
  double rho_low = 0.5;
};

struct UncertaintyRecord {
  double mu_d = std::numeric_limits<double>::infinity();
  double mu_c = 1.0;
  bool mesh_hit = false;
};

// mu_d = |1 - D_mesh / D_vol|. A mesh miss or a vanishing volumetric depth
// yields +inf, which routes the ray to the uncertain branch everywhere.
inline double geometric_uncertainty(double mesh_depth, double vol_depth,
                                    double eps = 1e-6) {
  if (mesh_depth == kMiss || !(vol_depth > eps))
    return std::numeric_limits<double>::infinity();
  return std::abs(1.0 - mesh_depth / vol_depth);
}

// mu_c = channel-mean absolute error between the single-sample mesh-point
// color and the ground-truth pixel. A miss is maximally uncertain.
inline double photometric_uncertainty(bool mesh_hit, const Vec3& c_mesh,
                                      const Vec3& c_gt) {
  if (!mesh_hit) return 1.0;
  return (c_mesh - c_gt).cwiseAbs().mean();
}

// One adaptive-threshold step: u uncertain rays, c certain ones, ratio
// rho = u/c steers tau up or down; c = 0 counts as rho = +inf (grow).
inline double update_threshold(double tau, const std::vector<double>& mu_batch,
                               const ThresholdPolicy& policy = {}) {
  size_t u = 0;
  for (double m : mu_batch)
    if (m > tau) ++u;
  size_t c = mu_batch.size() - u;
  double rho = (c == 0) ? std::numeric_limits<double>::infinity()
                        : double(u) / double(c);
  if (rho > policy.rho_high) return tau * policy.gamma_up;
  if (rho < policy.rho_low) return tau * policy.gamma_down;
  return tau;
}

// 1 when the ray is photometrically certain. The flip flag applies the
// opposite (literal Eq. 5 indicator) reading.
inline bool certainty_indicator(double mu_c, double tau_c, bool flip = false) {
  bool certain = mu_c <= tau_c;
  return flip ? !certain : certain;
}

// Quantile over a copy; infinities sort high and can appear in the output.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  double idx = q * double(v.size() - 1);
  size_t lo = size_t(idx);
  size_t hi = std::min(lo + 1, v.size() - 1);
  double frac = idx - double(lo);
  if (std::isinf(v[lo]) || std::isinf(v[hi])) return v[hi];
  return v[lo] * (1 - frac) + v[hi] * frac;
}

inline void uncertainty_csv_header(std::ostream& os) {
  os << "epoch,mu_d_q10,mu_d_q50,mu_d_q90,mu_c_q10,mu_c_q50,mu_c_q90,tau_d\n";
}

inline void uncertainty_csv_row(std::ostream& os, int epoch,
                                const std::vector<double>& mu_d,
                                const std::vector<double>& mu_c, double tau_d) {
  os << epoch;
  for (double q : {0.1, 0.5, 0.9}) os << ',' << quantile(mu_d, q);
  for (double q : {0.1, 0.5, 0.9}) os << ',' << quantile(mu_c, q);
  os << ',' << tau_d << '\n';
}

}  // namespace jneus
