#pragma once

#include <vector>

#include "jneus/core.hpp"
#include "jneus/mesh.hpp"

namespace jneus {

enum class GrsBranch { kCertainMesh, kUncertainVol, kFallbackFull };

struct SamplingBounds {
  double t_near = 0.0;
  double t_far = 1.0;
  GrsBranch branch = GrsBranch::kFallbackFull;
};

struct SampleBudget {
  int proposal0 = 128;
  int proposal1 = 96;
  int volumetric = 48;
  int sdf = 24;
  int refine_sdf_coarse = 32;
  int refine_sdf_fine = 28;
};

// Shell schedule: starts at 5% of the scene extent and decays geometrically
// per epoch, floored at 4 marching-cube cells so it never undercuts the
// guidance mesh's own resolution.
inline double initial_shell(const Aabb& box) {
  return 0.05 * (box.hi - box.lo).maxCoeff();
}

inline double shell_floor(const Aabb& box, int mc_resolution) {
  return 4.0 * (box.hi - box.lo).maxCoeff() / double(mc_resolution);
}

inline double shell_update(double delta, double delta_min) {
  return std::max(delta * 0.8, delta_min);
}

// Eq.-6 bounds for the volumetric pass: certain rays are truncated just past
// the mesh surface, everything else keeps the full box interval.
inline SamplingBounds volumetric_grs_bounds(const Ray& ray, double mu_c,
                                            double mesh_depth, double delta,
                                            double tau_c) {
  SamplingBounds full{ray.t_near, ray.t_far, GrsBranch::kFallbackFull};
  if (mesh_depth == kMiss || !(mu_c < tau_c)) return full;
  double t_far = std::min(mesh_depth + delta, ray.t_far);
  if (!(t_far > ray.t_near)) return full;
  return {ray.t_near, t_far, GrsBranch::kCertainMesh};
}

// Eq.-7 bounds for the SDF pass: a +-delta shell around the mesh depth when
// the representations agree, around the volumetric depth otherwise.
inline SamplingBounds sdf_grs_bounds(const Ray& ray, double mu_d, double mesh_depth,
                                     double vol_depth, double delta, double tau_d) {
  double center;
  GrsBranch branch;
  if (mu_d < tau_d && mesh_depth != kMiss) {
    center = mesh_depth;
    branch = GrsBranch::kCertainMesh;
  } else {
    center = vol_depth;
    branch = GrsBranch::kUncertainVol;
  }
  double lo = std::max({center - delta, 0.0, ray.t_near});
  double hi = std::min(center + delta, ray.t_far);
  if (!(hi > lo)) return {ray.t_near, ray.t_far, GrsBranch::kFallbackFull};
  return {lo, hi, branch};
}

// Inverse-CDF sampling of a piecewise-constant weight profile over bin
// `edges`, restricted to `bounds`. Stratified uniforms keep the output
// strictly sorted; zero total weight falls back to stratified uniform over
// the bounds.
inline std::vector<double> pdf_sample(const SamplingBounds& bounds,
                                      const std::vector<double>& edges,
                                      const std::vector<double>& weights, int n,
                                      CounterRng& rng) {
  assert(n >= 1);
  assert(edges.size() == weights.size() + 1);

  // clip the (contiguous, sorted) profile to the bounds
  std::vector<double> clip_edges, clip_w;
  for (size_t i = 0; i < weights.size(); ++i) {
    double lo = std::max(edges[i], bounds.t_near);
    double hi = std::min(edges[i + 1], bounds.t_far);
    if (hi <= lo) continue;
    if (clip_edges.empty()) clip_edges.push_back(lo);
    clip_edges.push_back(hi);
    // weights are per-bin masses; a partially clipped bin keeps its share
    clip_w.push_back(std::max(weights[i], 0.0) * (hi - lo) / (edges[i + 1] - edges[i]));
  }

  std::vector<double> out(static_cast<size_t>(n));
  double total = 0;
  for (double w : clip_w) total += w;

  if (clip_w.empty() || total <= 0) {
    double span = bounds.t_far - bounds.t_near;
    for (int i = 0; i < n; ++i)
      out[size_t(i)] = bounds.t_near + span * (double(i) + rng.uniform(0.0, 1.0)) / double(n);
  } else {
    std::vector<double> cdf(clip_w.size() + 1, 0.0);
    for (size_t i = 0; i < clip_w.size(); ++i) cdf[i + 1] = cdf[i] + clip_w[i] / total;
    cdf.back() = 1.0;
    size_t bin = 0;
    for (int i = 0; i < n; ++i) {
      double u = (double(i) + rng.uniform(0.0, 1.0)) / double(n);
      while (bin + 1 < clip_w.size() && cdf[bin + 1] <= u) ++bin;
      double seg = cdf[bin + 1] - cdf[bin];
      double frac = (seg > 0) ? (u - cdf[bin]) / seg : 0.5;
      out[size_t(i)] = clip_edges[bin] + frac * (clip_edges[bin + 1] - clip_edges[bin]);
    }
  }

  // enforce strict monotonicity against ties from degenerate bins
  for (size_t i = 1; i < out.size(); ++i)
    if (out[i] <= out[i - 1])
      out[i] = std::nextafter(out[i - 1], std::numeric_limits<double>::infinity());
  return out;
}

}  // namespace jneus
