#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace jneus {

using Vec3 = Eigen::Vector3d;

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Axis-aligned scene box. All fields operate on positions normalized to
// [0,1]^3 relative to this box.
struct Aabb {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Ones();

  Vec3 extent() const { return hi - lo; }
  double max_extent() const { return extent().maxCoeff(); }
  Vec3 center() const { return 0.5 * (lo + hi); }

  bool contains(const Vec3& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
  Vec3 clamp(const Vec3& p) const {
    return p.cwiseMax(lo).cwiseMin(hi);
  }
  Vec3 normalize(const Vec3& p) const {
    return (p - lo).cwiseQuotient(extent());
  }
  Vec3 denormalize(const Vec3& q) const {
    return lo + q.cwiseProduct(extent());
  }

  // Entry/exit distances of a ray against the box; returns false on miss.
  bool ray_range(const Vec3& o, const Vec3& u, double& t_near, double& t_far) const {
    double t0 = 0.0, t1 = kInf;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(u[a]) < 1e-300) {
        if (o[a] < lo[a] || o[a] > hi[a]) return false;
        continue;
      }
      double ta = (lo[a] - o[a]) / u[a];
      double tb = (hi[a] - o[a]) / u[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (t1 < t0) return false;
    t_near = t0;
    t_far = t1;
    return true;
  }

  void expand(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
};

// ---------------------------------------------------------------------------
// Counter-based RNG. Every random decision in training is keyed by a
// (seed, stream ids...) tuple so replays are exact regardless of evaluation
// order or batching.

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

class CounterRng {
 public:
  explicit CounterRng(uint64_t key) : key_(key) {}

  CounterRng(uint64_t seed, uint64_t s0) : key_(hash_combine(seed, s0)) {}
  CounterRng(uint64_t seed, uint64_t s0, uint64_t s1)
      : key_(hash_combine(hash_combine(seed, s0), s1)) {}
  CounterRng(uint64_t seed, uint64_t s0, uint64_t s1, uint64_t s2)
      : key_(hash_combine(hash_combine(hash_combine(seed, s0), s1), s2)) {}

  uint64_t next_u64() { return splitmix64(key_ + counter_++); }

  // Uniform in [0, 1).
  double uniform() {
    return double(next_u64() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    // Box-Muller; consumes two uniforms.
    double u1 = std::max(uniform(), 1e-300);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  uint32_t uniform_u32(uint32_t n) { return uint32_t(next_u64() % n); }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

// FNV-1a, used for config and checkpoint hashing.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}
inline uint64_t fnv1a(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(s.data(), s.size(), h);
}

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace jneus
