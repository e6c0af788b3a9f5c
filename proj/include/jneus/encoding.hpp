#pragma once

#include <cstdint>
#include <vector>

#include "jneus/core.hpp"
#include "jneus/params.hpp"
#include "jneus/tape.hpp"

namespace jneus {

struct HashGridConfig {
  int levels = 16;
  int coarsest_res = 16;
  int finest_res = 2048;
  int table_size_log2 = 19;
  int features_per_level = 2;

  int output_dim() const { return levels * features_per_level; }
  double growth() const {
    if (levels <= 1) return 1.0;
    return std::exp((std::log(double(finest_res)) - std::log(double(coarsest_res))) /
                    double(levels - 1));
  }
  int level_resolution(int level) const {
    int r = int(std::floor(double(coarsest_res) * std::pow(growth(), level) + 0.5));
    return std::max(r, coarsest_res + level);  // monotone even at tiny growth
  }
};

// Multiresolution hash-grid encoding with per-level trainable feature
// tables. Levels whose dense corner grid fits in the table are indexed
// directly; finer levels use the spatial hash. Colliding cells share an
// entry and average their gradients, no collision resolution.
template <class T>
class HashGrid {
 public:
  HashGrid(const HashGridConfig& cfg, const Aabb& box, ParameterStore<T>& store,
           const std::string& name, CounterRng rng)
      : cfg_(cfg), box_(box) {
    const int64_t table_cap = int64_t(1) << cfg.table_size_log2;
    for (int l = 0; l < cfg.levels; ++l) {
      int res = cfg.level_resolution(l);
      int64_t corners = int64_t(res + 1) * (res + 1) * (res + 1);
      int64_t entries = std::min(corners, table_cap);
      auto& p = store.create(name + ".table" + std::to_string(l), entries,
                             cfg.features_per_level);
      for (Eigen::Index i = 0; i < p.value.size(); ++i)
        p.value(i) = T(rng.uniform(-1e-4, 1e-4));
      levels_.push_back(Level{res, entries >= corners, entries, &p});
    }
  }

  const HashGridConfig& config() const { return cfg_; }
  const Aabb& box() const { return box_; }

  // Encodes world-space positions. Out-of-box points are clamped to the box;
  // `clamped_count` (optional) reports how many were.
  Var<T> encode(Tape<T>& tape, const Mat<double>& positions,
                int* clamped_count = nullptr) const {
    return encode_impl(tape, positions, false, clamped_count);
  }

  // As encode(), but the returned node has 4n rows: rows [0,n) hold the
  // features, rows [n,2n), [2n,3n), [3n,4n) hold d(feature)/dx,y,z in world
  // units. The jacobian is itself differentiable w.r.t. the table entries.
  Var<T> encode_with_jacobian(Tape<T>& tape, const Mat<double>& positions,
                              int* clamped_count = nullptr) const {
    return encode_impl(tape, positions, true, clamped_count);
  }

  // Plain (non-tape) feature lookup for inference paths.
  Mat<T> encode_values(const Mat<double>& positions) const {
    Tape<T> t;
    return encode(t, positions).val();
  }

 private:
  struct Level {
    int res;
    bool dense;
    int64_t entries;
    ParamTensor<T>* table;
  };

  static uint64_t spatial_hash(int64_t x, int64_t y, int64_t z) {
    // Prime-multiply hash from the multiresolution hash encoding literature.
    return uint64_t(x) ^ (uint64_t(y) * 2654435761ULL) ^ (uint64_t(z) * 805459861ULL);
  }

  int64_t corner_index(const Level& lv, int64_t x, int64_t y, int64_t z) const {
    if (lv.dense) {
      int64_t n1 = lv.res + 1;
      return x + n1 * (y + n1 * z);
    }
    return int64_t(spatial_hash(x, y, z) % uint64_t(lv.entries));
  }

  Var<T> encode_impl(Tape<T>& tape, const Mat<double>& positions, bool with_jac,
                     int* clamped_count) const {
    const Eigen::Index n = positions.rows();
    const int L = cfg_.levels;
    const int F = cfg_.features_per_level;
    const int out = L * F;
    const Vec3 ext = box_.extent();

    Mat<T> value = Mat<T>::Zero(with_jac ? 4 * n : n, out);

    // Per-sample, per-level corner indices and interpolation fractions are
    // kept for the backward scatter.
    auto idx = std::make_shared<std::vector<uint32_t>>(size_t(n) * L * 8);
    auto frac = std::make_shared<std::vector<double>>(size_t(n) * L * 3);
    int clamped = 0;

    for (Eigen::Index i = 0; i < n; ++i) {
      Vec3 p(positions(i, 0), positions(i, 1), positions(i, 2));
      if (!box_.contains(p)) {
        p = box_.clamp(p);
        ++clamped;
      }
      Vec3 q = box_.normalize(p);
      for (int l = 0; l < L; ++l) {
        const Level& lv = levels_[size_t(l)];
        double fx[3], cellf[3];
        int64_t c[3];
        for (int a = 0; a < 3; ++a) {
          double s = q[a] * lv.res;
          cellf[a] = std::floor(s);
          if (cellf[a] >= lv.res) cellf[a] = lv.res - 1;  // q==1 edge
          c[a] = int64_t(cellf[a]);
          fx[a] = s - cellf[a];
          frac->at(size_t((i * L + l) * 3 + a)) = fx[a];
        }
        const auto* tbl = lv.table->value.data();
        for (int k = 0; k < 8; ++k) {
          int64_t dx = k & 1, dy = (k >> 1) & 1, dz = (k >> 2) & 1;
          int64_t ti = corner_index(lv, c[0] + dx, c[1] + dy, c[2] + dz);
          idx->at(size_t((i * L + l) * 8 + k)) = uint32_t(ti);
          double w = (dx ? fx[0] : 1 - fx[0]) * (dy ? fx[1] : 1 - fx[1]) *
                     (dz ? fx[2] : 1 - fx[2]);
          for (int f = 0; f < F; ++f)
            value(i, l * F + f) += T(w * double(tbl[ti * F + f]));
          if (with_jac) {
            double wpartial[3] = {
                (dx ? 1.0 : -1.0) * (dy ? fx[1] : 1 - fx[1]) * (dz ? fx[2] : 1 - fx[2]),
                (dy ? 1.0 : -1.0) * (dx ? fx[0] : 1 - fx[0]) * (dz ? fx[2] : 1 - fx[2]),
                (dz ? 1.0 : -1.0) * (dx ? fx[0] : 1 - fx[0]) * (dy ? fx[1] : 1 - fx[1])};
            for (int a = 0; a < 3; ++a) {
              double scale = double(lv.res) / ext[a];
              for (int f = 0; f < F; ++f)
                value((a + 1) * n + i, l * F + f) +=
                    T(wpartial[a] * scale * double(tbl[ti * F + f]));
            }
          }
        }
      }
    }
    if (clamped_count) *clamped_count = clamped;

    std::vector<const Level*> lvls;
    for (auto& lv : levels_) lvls.push_back(&lv);
    Vec3 extent = ext;
    auto backprop = [lvls, idx, frac, n, L, F, with_jac, extent](Tape<T>& t,
                                                                 typename Tape<T>::Node& nd) {
      (void)t;
      const Mat<T>& g = nd.grad;
      for (Eigen::Index i = 0; i < n; ++i) {
        for (int l = 0; l < L; ++l) {
          const Level& lv = *lvls[size_t(l)];
          double fx[3];
          for (int a = 0; a < 3; ++a) fx[a] = frac->at(size_t((i * L + l) * 3 + a));
          auto* gt = lv.table->grad.data();
          for (int k = 0; k < 8; ++k) {
            int64_t dx = k & 1, dy = (k >> 1) & 1, dz = (k >> 2) & 1;
            uint32_t ti = idx->at(size_t((i * L + l) * 8 + k));
            double w = (dx ? fx[0] : 1 - fx[0]) * (dy ? fx[1] : 1 - fx[1]) *
                       (dz ? fx[2] : 1 - fx[2]);
            for (int f = 0; f < F; ++f) {
              double acc = w * double(g(i, l * F + f));
              if (with_jac) {
                double wpartial[3] = {(dx ? 1.0 : -1.0) * (dy ? fx[1] : 1 - fx[1]) *
                                          (dz ? fx[2] : 1 - fx[2]),
                                      (dy ? 1.0 : -1.0) * (dx ? fx[0] : 1 - fx[0]) *
                                          (dz ? fx[2] : 1 - fx[2]),
                                      (dz ? 1.0 : -1.0) * (dx ? fx[0] : 1 - fx[0]) *
                                          (dy ? fx[1] : 1 - fx[1])};
                for (int a = 0; a < 3; ++a)
                  acc += wpartial[a] * double(lv.res) / extent[a] *
                         double(g((a + 1) * n + i, l * F + f));
              }
              gt[ti * F + f] += acc;
            }
          }
        }
      }
    };
    return tape.make_node(std::move(value), {}, backprop, /*force_grad=*/true);
  }

  HashGridConfig cfg_;
  Aabb box_;
  std::vector<Level> levels_;
};

// Real spherical harmonics of the given degree evaluated on unit vectors;
// output length degree^2. Directions are control inputs (not on the tape).
template <class T>
Mat<T> sh_encode(const Mat<double>& dirs, int degree = 4) {
  const Eigen::Index n = dirs.rows();
  Mat<T> out(n, degree * degree);
  for (Eigen::Index i = 0; i < n; ++i) {
    double x = dirs(i, 0), y = dirs(i, 1), z = dirs(i, 2);
    double len = std::sqrt(x * x + y * y + z * z);
    if (len < 1e-12) throw std::invalid_argument("sh_encode: zero direction");
    x /= len;
    y /= len;
    z /= len;
    int c = 0;
    out(i, c++) = T(0.28209479177387814);
    if (degree > 1) {
      out(i, c++) = T(-0.48860251190291987 * y);
      out(i, c++) = T(0.48860251190291987 * z);
      out(i, c++) = T(-0.48860251190291987 * x);
    }
    if (degree > 2) {
      double xx = x * x, yy = y * y, zz = z * z;
      out(i, c++) = T(1.0925484305920792 * x * y);
      out(i, c++) = T(-1.0925484305920792 * y * z);
      out(i, c++) = T(0.31539156525252005 * (2 * zz - xx - yy));
      out(i, c++) = T(-1.0925484305920792 * x * z);
      out(i, c++) = T(0.5462742152960396 * (xx - yy));
    }
    if (degree > 3) {
      double xx = x * x, yy = y * y, zz = z * z;
      out(i, c++) = T(-0.5900435899266435 * y * (3 * xx - yy));
      out(i, c++) = T(2.890611442640554 * x * y * z);
      out(i, c++) = T(-0.4570457994644658 * y * (4 * zz - xx - yy));
      out(i, c++) = T(0.3731763325901154 * z * (2 * zz - 3 * xx - 3 * yy));
      out(i, c++) = T(-0.4570457994644658 * x * (4 * zz - xx - yy));
      out(i, c++) = T(1.445305721320277 * z * (xx - yy));
      out(i, c++) = T(-0.5900435899266435 * x * (xx - 3 * yy));
    }
  }
  return out;
}

}  // namespace jneus
