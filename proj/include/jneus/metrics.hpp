#pragma once

#include <map>
#include <string>
#include <vector>

#include "jneus/mesh.hpp"
#include "jneus/scene.hpp"

namespace jneus {

struct GeoReport {
  bool valid = false;
  double mean_p2m = kInf;
  std::map<std::string, double> per_class_mean;  // keyed by semantic class name
  std::vector<double> distances;                 // per point, for export
};

// Mean point-to-mesh distance with a per-semantic-class breakdown.
inline GeoReport point_to_mesh(const LidarCloud& points, const SceneMesh& mesh) {
  GeoReport rep;
  rep.distances.assign(points.size(), kInf);
  if (mesh.empty() || points.size() == 0) return rep;

  double total = 0;
  std::map<uint8_t, std::pair<double, int>> by_class;
  for (size_t i = 0; i < points.size(); ++i) {
    double d = std::sqrt(mesh.bvh.nearest_sq(points.points[i]));
    rep.distances[i] = d;
    total += d;
    auto& [sum, n] = by_class[points.labels[i]];
    sum += d;
    ++n;
  }
  rep.mean_p2m = total / double(points.size());
  for (const auto& [cls, acc] : by_class)
    rep.per_class_mean[sem_class_name(SemClass(cls))] = acc.first / acc.second;
  rep.valid = true;
  return rep;
}

// Fraction of points closer to the mesh than `threshold`.
inline double precision_at(const GeoReport& rep, double threshold) {
  if (threshold <= 0) throw ConfigError("precision threshold must be positive");
  if (!rep.valid || rep.distances.empty()) return 0.0;
  size_t under = 0;
  for (double d : rep.distances)
    if (d < threshold) ++under;
  return double(under) / double(rep.distances.size());
}

// The 0.15 m threshold expressed as a fraction of a 50 m-equivalent extent.
inline double default_precision_threshold(double scene_extent) {
  return 0.15 / 50.0 * scene_extent;
}

// ---------------------------------------------------------------------------
// Image metrics over [0,1] float RGB buffers (h*w*3, row-major)

inline double psnr(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size() || a.empty()) throw ConfigError("psnr: size mismatch");
  double mse = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = double(a[i]) - double(b[i]);
    mse += d * d;
  }
  mse /= double(a.size());
  if (mse <= 0) return 99.0;  // identical images, capped report
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

// SSIM with the standard 11x11 Gaussian window (sigma 1.5), C1/C2 for unit
// dynamic range, channel-averaged, valid-window region only.
inline double ssim(const std::vector<float>& a, const std::vector<float>& b,
                   int width, int height) {
  if (a.size() != b.size() || a.size() != size_t(width) * height * 3)
    throw ConfigError("ssim: size mismatch");
  const int k = 11, half = k / 2;
  if (width < k || height < k) throw ConfigError("ssim: image smaller than window");
  double w[k];
  double wsum = 0;
  for (int i = 0; i < k; ++i) {
    double x = i - half;
    w[i] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    wsum += w[i];
  }
  for (int i = 0; i < k; ++i) w[i] /= wsum;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

  auto px = [&](const std::vector<float>& img, int u, int v, int c) {
    return double(img[(size_t(v) * width + u) * 3 + c]);
  };

  double total = 0;
  int count = 0;
  for (int c = 0; c < 3; ++c)
    for (int v = half; v < height - half; ++v)
      for (int u = half; u < width - half; ++u) {
        double ma = 0, mb = 0, va = 0, vb = 0, cov = 0;
        for (int dy = -half; dy <= half; ++dy)
          for (int dx = -half; dx <= half; ++dx) {
            double ww = w[dy + half] * w[dx + half];
            double pa = px(a, u + dx, v + dy, c), pb = px(b, u + dx, v + dy, c);
            ma += ww * pa;
            mb += ww * pb;
            va += ww * pa * pa;
            vb += ww * pb * pb;
            cov += ww * pa * pb;
          }
        va -= ma * ma;
        vb -= mb * mb;
        cov -= ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) /
                 ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
  return total / count;
}

struct ImageMetrics {
  double psnr_db = 0;
  double ssim = 0;
};

inline ImageMetrics image_metrics(const std::vector<float>& rendered,
                                  const std::vector<float>& reference, int width,
                                  int height) {
  ImageMetrics m;
  m.psnr_db = psnr(rendered, reference);
  m.ssim = ssim(rendered, reference, width, height);
  return m;
}

// ---------------------------------------------------------------------------
// Error-colored point cloud: purple (zero error) to yellow (>= ramp_max).

inline Vec3 error_ramp_color(double d, double ramp_max) {
  double t = std::clamp(d / ramp_max, 0.0, 1.0);
  Vec3 purple(0.5, 0.0, 0.5), yellow(1.0, 1.0, 0.0);
  return purple + t * (yellow - purple);
}

inline void export_error_cloud(const LidarCloud& points,
                               const std::vector<double>& distances,
                               const std::string& path, double ramp_max) {
  if (points.size() != distances.size())
    throw ConfigError("error cloud: points/distances size mismatch");
  SceneMesh cloud;  // vertex-only PLY
  cloud.vertices = points.points;
  cloud.colors.reserve(points.size());
  for (double d : distances) cloud.colors.push_back(error_ramp_color(d, ramp_max));
  export_ply(cloud, path);
}

}  // namespace jneus
