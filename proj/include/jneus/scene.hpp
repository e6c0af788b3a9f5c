#pragma once

#include <string>
#include <vector>

#include "jneus/core.hpp"
#include "jneus/render.hpp"

namespace jneus {

// Semantic classes. kSky is never attached to geometry; it labels rays that
// miss every primitive.
enum class SemClass : uint8_t {
  kGround = 0,
  kWall = 1,
  kPole = 2,
  kVegetation = 3,
  kSky = 4,
};

inline const char* sem_class_name(SemClass c) {
  switch (c) {
    case SemClass::kGround: return "ground";
    case SemClass::kWall: return "wall";
    case SemClass::kPole: return "pole";
    case SemClass::kVegetation: return "vegetation";
    case SemClass::kSky: return "sky";
  }
  return "?";
}
inline constexpr int kNumSemClasses = 5;  // including sky

// World frame: x forward along the street, y left, z up; ground at z = 0.
struct ScenePrimitive {
  enum class Kind { kGroundPlane, kBox, kCylinder, kSphere };

  Kind kind = Kind::kSphere;
  Vec3 center = Vec3::Zero();
  // kBox: half extents; kCylinder: (radius, _, half_height); kSphere:
  // (radius, _, _); kGroundPlane: center.z() is the plane height.
  Vec3 size = Vec3::Ones();
  SemClass sem = SemClass::kGround;
  Vec3 albedo = Vec3(0.5, 0.5, 0.5);

  double sdf(const Vec3& p) const {
    switch (kind) {
      case Kind::kGroundPlane:
        return p.z() - center.z();
      case Kind::kSphere:
        return (p - center).norm() - size.x();
      case Kind::kBox: {
        Vec3 q = (p - center).cwiseAbs() - size;
        double outside = q.cwiseMax(0.0).norm();
        double inside = std::min(q.maxCoeff(), 0.0);
        return outside + inside;
      }
      case Kind::kCylinder: {
        Vec3 d = p - center;
        double dr = std::hypot(d.x(), d.y()) - size.x();
        double dz = std::abs(d.z()) - size.z();
        double outside = std::hypot(std::max(dr, 0.0), std::max(dz, 0.0));
        double inside = std::min(std::max(dr, dz), 0.0);
        return outside + inside;
      }
    }
    return kInf;
  }
};

struct SyntheticScene {
  std::vector<ScenePrimitive> prims;
  Aabb box;

  double sdf(const Vec3& p) const {
    double best = kInf;
    for (const auto& pr : prims) best = std::min(best, pr.sdf(p));
    return best;
  }

  int nearest_primitive(const Vec3& p) const {
    int best = -1;
    double dist = kInf;
    for (size_t i = 0; i < prims.size(); ++i) {
      double d = prims[i].sdf(p);
      if (d < dist) {
        dist = d;
        best = int(i);
      }
    }
    return best;
  }

  SemClass semantic_at(const Vec3& p) const {
    int i = nearest_primitive(p);
    return i < 0 ? SemClass::kSky : prims[size_t(i)].sem;
  }

  // Normalized central-difference gradient of the union SDF.
  Vec3 normal_at(const Vec3& p, double h = 1e-5) const {
    Vec3 g;
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = h;
      g[a] = sdf(p + e) - sdf(p - e);
    }
    double n = g.norm();
    return n > 0 ? Vec3(g / n) : Vec3(0, 0, 1);
  }

  // First surface hit along o + t*u by sphere tracing; kInf on a miss.
  double trace(const Vec3& o, const Vec3& u, double eps, int max_steps = 128,
               double t_max = kInf) const {
    if (t_max == kInf) t_max = 4.0 * box.max_extent();
    double t = 0.0;
    for (int i = 0; i < max_steps; ++i) {
      double d = sdf(o + t * u);
      if (d < eps) return t;
      t += d;
      if (t > t_max) return kInf;
    }
    return kInf;
  }
};

inline SyntheticScene build_scene(std::vector<ScenePrimitive> prims, const Aabb& box) {
  if (prims.empty()) throw ConfigError("scene needs at least one primitive");
  SyntheticScene s;
  s.prims = std::move(prims);
  s.box = box;
  return s;
}

// Default preset: a straight street with a ground plane, two walls, four
// thin poles and a couple of vegetation blobs. extent is the street length.
inline SyntheticScene mini_street(double extent = 50.0) {
  double e = extent;
  std::vector<ScenePrimitive> prims;
  ScenePrimitive ground;
  ground.kind = ScenePrimitive::Kind::kGroundPlane;
  ground.center = Vec3(0, 0, 0);
  ground.sem = SemClass::kGround;
  ground.albedo = Vec3(0.45, 0.42, 0.40);
  prims.push_back(ground);

  for (int side = 0; side < 2; ++side) {
    ScenePrimitive wall;
    wall.kind = ScenePrimitive::Kind::kBox;
    wall.center = Vec3(0.45 * e, (side ? 1.0 : -1.0) * 0.16 * e, 0.05 * e);
    wall.size = Vec3(0.45 * e, 0.01 * e, 0.06 * e);
    wall.sem = SemClass::kWall;
    wall.albedo = side ? Vec3(0.75, 0.55, 0.35) : Vec3(0.55, 0.6, 0.75);
    prims.push_back(wall);
  }

  for (int i = 0; i < 4; ++i) {
    ScenePrimitive pole;
    pole.kind = ScenePrimitive::Kind::kCylinder;
    pole.center = Vec3((0.15 + 0.2 * i) * e, (i % 2 ? 1.0 : -1.0) * 0.1 * e, 0.05 * e);
    pole.size = Vec3(0.012 * e, 0, 0.05 * e);  // radius ~1.2% of extent
    pole.sem = SemClass::kPole;
    pole.albedo = Vec3(0.3, 0.3, 0.32);
    prims.push_back(pole);
  }

  for (int i = 0; i < 2; ++i) {
    ScenePrimitive bush;
    bush.kind = ScenePrimitive::Kind::kSphere;
    bush.center = Vec3((0.3 + 0.35 * i) * e, (i % 2 ? -1.0 : 1.0) * 0.12 * e, 0.03 * e);
    bush.size = Vec3(0.035 * e, 0, 0);
    bush.sem = SemClass::kVegetation;
    bush.albedo = Vec3(0.2, 0.5, 0.25);
    prims.push_back(bush);
  }

  Aabb box;
  box.lo = Vec3(-0.1 * e, -0.2 * e, -0.02 * e);
  box.hi = Vec3(0.9 * e, 0.2 * e, 0.14 * e);
  return build_scene(std::move(prims), box);
}

// ---------------------------------------------------------------------------
// Camera rig

struct Camera {
  int width = 160, height = 120;
  double fx = 120, fy = 120, cx = 80, cy = 60;
  Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();  // columns: right, down, fwd
  Vec3 origin = Vec3::Zero();
  std::string name;

  Vec3 forward() const { return rot.col(2); }

  Ray pixel_ray(double u, double v) const {
    Vec3 dir_cam((u - cx) / fx, (v - cy) / fy, 1.0);
    Ray r;
    r.o = origin;
    r.u = (rot * dir_cam).normalized();
    return r;
  }

  // (u, v, depth along the optical axis); u/v may be out of bounds.
  Vec3 project(const Vec3& p) const {
    Vec3 pc = rot.transpose() * (p - origin);
    return Vec3(cx + fx * pc.x() / pc.z(), cy + fy * pc.y() / pc.z(), pc.z());
  }

  bool sees(const Vec3& p) const {
    Vec3 uvz = project(p);
    return uvz.z() > 0 && uvz.x() >= 0 && uvz.x() < width && uvz.y() >= 0 &&
           uvz.y() < height;
  }
};

// Camera looking along a yaw direction in the ground plane (0 = +x), with
// world z up mapped to image up.
inline Eigen::Matrix3d yaw_rotation(double yaw) {
  Vec3 fwd(std::cos(yaw), std::sin(yaw), 0);
  Vec3 right = fwd.cross(Vec3(0, 0, 1));
  Vec3 down = fwd.cross(right);
  Eigen::Matrix3d R;
  R.col(0) = right;
  R.col(1) = down;
  R.col(2) = fwd;
  return R;
}

struct TrajectoryParams {
  int n_frames = 8;
  double step = 1.5;
  Vec3 start = Vec3(0, 0, 1.5);
  double side_yaw = M_PI / 4;  // the two side cameras look +-45 degrees out
  int width = 160, height = 120;
  double fx = 120, fy = 120;
};

inline std::vector<Camera> generate_trajectory(const TrajectoryParams& p) {
  if (p.n_frames < 2) throw ConfigError("trajectory needs at least 2 frames");
  std::vector<Camera> cams;
  const char* names[3] = {"FRONT", "LEFT", "RIGHT"};
  const double yaws[3] = {0.0, p.side_yaw, -p.side_yaw};
  for (int f = 0; f < p.n_frames; ++f) {
    for (int c = 0; c < 3; ++c) {
      Camera cam;
      cam.width = p.width;
      cam.height = p.height;
      cam.fx = p.fx;
      cam.fy = p.fy;
      cam.cx = 0.5 * p.width;
      cam.cy = 0.5 * p.height;
      cam.rot = yaw_rotation(yaws[c]);
      cam.origin = p.start + Vec3(p.step * f, 0, 0);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%04d_%s", f, names[c]);
      cam.name = buf;
      cams.push_back(cam);
    }
  }
  return cams;
}

// Fraction of a's frustum (sampled at a few depths) visible from b.
inline double frustum_overlap(const Camera& a, const Camera& b, double d0 = 2.0,
                              double d1 = 20.0) {
  int inside = 0, total = 0;
  for (int gy = 0; gy < 8; ++gy)
    for (int gx = 0; gx < 8; ++gx)
      for (int gd = 0; gd < 4; ++gd) {
        Ray r = a.pixel_ray((gx + 0.5) / 8.0 * a.width, (gy + 0.5) / 8.0 * a.height);
        double d = d0 + (d1 - d0) * (gd + 0.5) / 4.0;
        ++total;
        if (b.sees(r.o + d * r.u)) ++inside;
      }
  return double(inside) / double(total);
}

// Mean consecutive-frame overlap of the forward cameras (3 cameras per frame).
inline double mean_trajectory_overlap(const std::vector<Camera>& cams) {
  double sum = 0;
  int n = 0;
  for (size_t i = 0; i + 3 < cams.size(); i += 3) {
    sum += frustum_overlap(cams[i], cams[i + 3]);
    ++n;
  }
  return n ? sum / n : 0.0;
}

// ---------------------------------------------------------------------------
// Ground-truth rendering

struct GroundTruthFrame {
  int width = 0, height = 0;
  std::vector<float> rgb;      // h*w*3, row-major
  std::vector<float> normal;   // h*w*3
  std::vector<double> depth;   // h*w, kInf on sky
  std::vector<uint8_t> semantic;  // h*w, SemClass values
  std::vector<uint8_t> sky;       // h*w, 1 = sky

  size_t n_pixels() const { return size_t(width) * size_t(height); }
};

inline const Vec3 kLightDir = Vec3(1, 1, 3).normalized();

inline Vec3 shade_lambert(const Vec3& albedo, const Vec3& n) {
  return albedo * std::max(n.dot(kLightDir), 0.1);
}

inline GroundTruthFrame render_ground_truth(const SyntheticScene& scene,
                                            const Camera& cam) {
  GroundTruthFrame f;
  f.width = cam.width;
  f.height = cam.height;
  f.rgb.assign(f.n_pixels() * 3, 0.0f);
  f.normal.assign(f.n_pixels() * 3, 0.0f);
  f.depth.assign(f.n_pixels(), kInf);
  f.semantic.assign(f.n_pixels(), uint8_t(SemClass::kSky));
  f.sky.assign(f.n_pixels(), 1);

  const double eps = 1e-5 * scene.box.max_extent();
  const Vec3 sky_color(0.65, 0.8, 0.95);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      size_t idx = size_t(v) * cam.width + u;
      Ray r = cam.pixel_ray(u + 0.5, v + 0.5);
      double t = scene.trace(r.o, r.u, eps);
      if (t == kInf) {
        for (int c = 0; c < 3; ++c) f.rgb[idx * 3 + c] = float(sky_color[c]);
        continue;
      }
      Vec3 p = r.o + t * r.u;
      int prim = scene.nearest_primitive(p);
      Vec3 n = scene.normal_at(p, 1e-5 * scene.box.max_extent());
      Vec3 color = shade_lambert(scene.prims[size_t(prim)].albedo, n);
      for (int c = 0; c < 3; ++c) {
        f.rgb[idx * 3 + c] = float(std::clamp(color[c], 0.0, 1.0));
        f.normal[idx * 3 + c] = float(n[c]);
      }
      f.depth[idx] = t;
      f.semantic[idx] = uint8_t(scene.prims[size_t(prim)].sem);
      f.sky[idx] = 0;
    }
  return f;
}

// ---------------------------------------------------------------------------
// LiDAR-like surface samples

struct LidarCloud {
  std::vector<Vec3> points;
  std::vector<uint8_t> labels;  // SemClass values

  size_t size() const { return points.size(); }
};

struct LidarPattern {
  int n_azimuth = 256;
  int n_elevation = 12;
  double elev_lo = -0.45;  // radians
  double elev_hi = 0.1;
  double max_range = kInf;
};

inline LidarCloud sample_lidar(const SyntheticScene& scene,
                               const std::vector<Vec3>& origins,
                               const LidarPattern& pat = {}) {
  LidarCloud cloud;
  double range = pat.max_range == kInf ? 2.0 * scene.box.max_extent() : pat.max_range;
  for (const Vec3& o : origins)
    for (int e = 0; e < pat.n_elevation; ++e) {
      double elev = pat.elev_lo +
                    (pat.elev_hi - pat.elev_lo) * (e + 0.5) / pat.n_elevation;
      for (int a = 0; a < pat.n_azimuth; ++a) {
        double az = 2.0 * M_PI * a / pat.n_azimuth;
        Vec3 u(std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az),
               std::sin(elev));
        double t = scene.trace(o, u, 1e-7, 256, range);
        if (t == kInf) continue;
        Vec3 p = o + t * u;
        if (std::abs(scene.sdf(p)) > 1e-6) continue;  // grazing non-convergence
        cloud.points.push_back(p);
        cloud.labels.push_back(uint8_t(scene.semantic_at(p)));
      }
    }
  return cloud;
}

}  // namespace jneus
