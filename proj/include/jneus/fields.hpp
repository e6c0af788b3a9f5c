#pragma once

#include <string>
#include <vector>

#include "jneus/core.hpp"
#include "jneus/encoding.hpp"
#include "jneus/params.hpp"
#include "jneus/tape.hpp"

namespace jneus {

enum class Act { kNone, kRelu, kSoftplus };

// Small dense MLP. Hidden activation fixed at construction; output is linear
// (heads apply their own output maps).
template <class T>
class Mlp {
 public:
  Mlp(ParameterStore<T>& store, const std::string& name, int in_dim, int hidden,
      int n_hidden, int out_dim, Act act, CounterRng rng, bool zero_last = false)
      : act_(act) {
    int prev = in_dim;
    for (int l = 0; l <= n_hidden; ++l) {
      int next = (l == n_hidden) ? out_dim : hidden;
      auto& W = store.create(name + ".W" + std::to_string(l), prev, next);
      auto& b = store.create(name + ".b" + std::to_string(l), 1, next);
      double stddev = std::sqrt(2.0 / double(prev));
      for (Eigen::Index i = 0; i < W.value.size(); ++i)
        W.value(i) = T(round_f32(stddev * rng.normal()));
      if (zero_last && l == n_hidden) W.value.setZero();
      layers_.push_back({&W, &b});
      prev = next;
    }
  }

  Var<T> forward(Tape<T>& tape, Var<T> x) const {
    Var<T> h = x;
    for (size_t l = 0; l < layers_.size(); ++l) {
      h = tape.add_bias(tape.matmul(h, tape.param(*layers_[l].W)),
                        tape.param(*layers_[l].b));
      if (l + 1 < layers_.size()) h = activate(tape, h);
    }
    return h;
  }

  // Joint value/tangent forward pass: tx holds k stacked directional
  // tangents of x ((k*n) x in_dim). Both outputs stay on the tape, so losses
  // on the tangents backpropagate into the weights.
  struct WithTangent {
    Var<T> y;
    Var<T> ty;
  };
  WithTangent forward_tangent(Tape<T>& tape, Var<T> x, Var<T> tx, int k) const {
    Var<T> h = x, th = tx;
    for (size_t l = 0; l < layers_.size(); ++l) {
      Var<T> W = tape.param(*layers_[l].W);
      h = tape.add_bias(tape.matmul(h, W), tape.param(*layers_[l].b));
      th = tape.matmul(th, W);
      if (l + 1 < layers_.size()) {
        Var<T> d = derivative(tape, h);
        th = tape.mul(th, tape.replicate_rows(d, k));
        h = activate(tape, h);
      }
    }
    return {h, th};
  }

 private:
  Var<T> activate(Tape<T>& tape, Var<T> z) const {
    switch (act_) {
      case Act::kRelu: return tape.relu(z);
      case Act::kSoftplus: return tape.softplus(z);
      default: return z;
    }
  }
  Var<T> derivative(Tape<T>& tape, Var<T> z) const {
    switch (act_) {
      case Act::kRelu:
        return tape.make_node(
            z.val().unaryExpr([](T x) { return x > T(0) ? T(1) : T(0); }), {},
            nullptr);
      case Act::kSoftplus: return tape.sigmoid(z);
      default: return tape.constant(Mat<T>::Ones(z.rows(), z.cols()));
    }
  }

  struct Layer {
    ParamTensor<T>* W;
    ParamTensor<T>* b;
  };
  std::vector<Layer> layers_;
  Act act_;
};

struct FieldConfig {
  HashGridConfig grid;
  int sh_degree = 4;
  int hidden = 64;
  int hidden_layers = 2;
  int geo_features = 15;
  int n_classes = 5;
  double density_bias = -4.0;  // fresh fields start near-transparent
  double sdf_sphere_radius_factor = 0.5;  // of the box half-extent
  double sdf_scale_init = 10.0;

  static HashGridConfig proposal_grid() {
    HashGridConfig g;
    g.levels = 8;
    g.coarsest_res = 16;
    g.finest_res = 512;
    g.table_size_log2 = 17;
    return g;
  }
};

namespace detail {
// Stacked tangent seed for world-space derivatives of box-normalized
// coordinates: block a of the 3n rows holds d(xn)/d(x_a).
template <class T>
Mat<T> normalized_coord_tangent(Eigen::Index n, const Vec3& extent) {
  Mat<T> t = Mat<T>::Zero(3 * n, 3);
  for (int a = 0; a < 3; ++a)
    t.block(a * n, a, n, 1).setConstant(T(1.0 / extent[a]));
  return t;
}

template <class T>
Mat<T> normalize_positions(const Aabb& box, const Mat<double>& pos) {
  Mat<T> out(pos.rows(), 3);
  for (Eigen::Index i = 0; i < pos.rows(); ++i) {
    Vec3 q = box.normalize(box.clamp(Vec3(pos(i, 0), pos(i, 1), pos(i, 2))));
    for (int a = 0; a < 3; ++a) out(i, a) = T(q[a]);
  }
  return out;
}
}  // namespace detail

// Volumetric radiance field: density + color + semantic logits. Density
// depends on position only; color additionally on the SH-encoded direction.
template <class T>
class VolumetricField {
 public:
  VolumetricField(ParameterStore<T>& store, const FieldConfig& cfg, const Aabb& box,
                  uint64_t seed)
      : cfg_(cfg),
        grid_(cfg.grid, box, store, "vol.grid", CounterRng(seed, 1)),
        trunk_(store, "vol.trunk", cfg.grid.output_dim(), cfg.hidden, cfg.hidden_layers,
               1 + cfg.geo_features + cfg.n_classes, Act::kRelu, CounterRng(seed, 2)),
        color_(store, "vol.color", cfg.geo_features + cfg.sh_degree * cfg.sh_degree,
               cfg.hidden, 1, 3, Act::kRelu, CounterRng(seed, 3)) {}

  struct Out {
    Var<T> sigma;   // (n,1) >= 0
    Var<T> color;   // (n,3) in [0,1]
    Var<T> sem;     // (n,K) logits
    int clamped = 0;
  };

  Out eval(Tape<T>& tape, const Mat<double>& pos, const Mat<double>& dirs) const {
    Out o;
    Var<T> enc = grid_.encode(tape, pos, &o.clamped);
    Var<T> trunk = trunk_.forward(tape, enc);
    Var<T> pre = tape.add_scalar(tape.slice_cols(trunk, 0, 1), T(cfg_.density_bias));
    o.sigma = tape.exp_clamped(pre, T(-15), T(15));
    Var<T> feat = tape.slice_cols(trunk, 1, cfg_.geo_features);
    Var<T> sh = tape.constant(sh_encode<T>(dirs, cfg_.sh_degree));
    o.color = tape.sigmoid(color_.forward(tape, tape.concat_cols({feat, sh})));
    o.sem = tape.slice_cols(trunk, 1 + cfg_.geo_features, cfg_.n_classes);
    return o;
  }

  // Density-only evaluation plus the spatial gradient of the density
  // pre-activation; -grad normalized is the field's surface normal proxy.
  struct DensityGrad {
    Var<T> sigma;
    Var<T> grad_pre;  // (n,3)
  };
  DensityGrad eval_density_gradient(Tape<T>& tape, const Mat<double>& pos) const {
    Eigen::Index n = pos.rows();
    Var<T> enc4 = grid_.encode_with_jacobian(tape, pos);
    Var<T> feats = tape.slice_rows(enc4, 0, int(n));
    Var<T> jac = tape.slice_rows(enc4, int(n), int(3 * n));
    auto vt = trunk_.forward_tangent(tape, feats, jac, 3);
    Var<T> pre = tape.add_scalar(tape.slice_cols(vt.y, 0, 1), T(cfg_.density_bias));
    return {tape.exp_clamped(pre, T(-15), T(15)),
            tape.stack_to_cols(tape.slice_cols(vt.ty, 0, 1), 3)};
  }

  const HashGrid<T>& grid() const { return grid_; }
  const FieldConfig& config() const { return cfg_; }

 private:
  FieldConfig cfg_;
  HashGrid<T> grid_;
  Mlp<T> trunk_;
  Mlp<T> color_;
};

// SDF field. The trunk predicts a residual on top of an analytic sphere, so
// a fresh field is exactly the sphere of radius factor*half_extent centered
// in the box. The logistic scale s is trained in log space to stay positive.
template <class T>
class SdfField {
 public:
  SdfField(ParameterStore<T>& store, const FieldConfig& cfg, const Aabb& box,
           uint64_t seed)
      : cfg_(cfg),
        box_(box),
        grid_(cfg.grid, box, store, "sdf.grid", CounterRng(seed, 11)),
        trunk_(store, "sdf.trunk", cfg.grid.output_dim() + 3, cfg.hidden,
               cfg.hidden_layers, 1 + cfg.geo_features, Act::kSoftplus,
               CounterRng(seed, 12), /*zero_last=*/true),
        color_(store, "sdf.color", cfg.geo_features + cfg.sh_degree * cfg.sh_degree,
               cfg.hidden, 1, 3, Act::kRelu, CounterRng(seed, 13)) {
    log_s_ = &store.create("sdf.log_s", 1, 1);
    log_s_->value(0, 0) = T(round_f32(std::log(cfg.sdf_scale_init)));
    sphere_center_ = box.center();
    sphere_radius_ = cfg.sdf_sphere_radius_factor * 0.5 * box.max_extent();
  }

  Var<T> scale_s(Tape<T>& tape) const {
    return tape.exp_clamped(tape.param(*log_s_), T(-20), T(20));
  }
  double scale_s_value() const { return std::exp(double(log_s_->value(0, 0))); }

  // deterministic sharpness annealing on top of the learnable parameter;
  // the training budget is far too short for s to grow by gradient alone
  void bump_scale(double factor) {
    log_s_->value(0, 0) =
        T(round_f32(double(log_s_->value(0, 0)) + std::log(factor)));
  }

  struct Out {
    Var<T> f;      // (n,1)
    Var<T> feat;   // (n,geo_features)
    Var<T> grad;   // (n,3), valid only if requested
    int clamped = 0;
  };

  Out eval(Tape<T>& tape, const Mat<double>& pos, bool want_grad) const {
    Eigen::Index n = pos.rows();
    Out o;
    Mat<T> xn = detail::normalize_positions<T>(box_, pos);
    if (!want_grad) {
      Var<T> enc = grid_.encode(tape, pos, &o.clamped);
      Var<T> h0 = tape.concat_cols({enc, tape.constant(xn)});
      Var<T> out = trunk_.forward(tape, h0);
      o.f = tape.add(tape.slice_cols(out, 0, 1), tape.constant(sphere_sdf(pos)));
      o.feat = tape.slice_cols(out, 1, cfg_.geo_features);
      return o;
    }
    Var<T> enc4 = grid_.encode_with_jacobian(tape, pos, &o.clamped);
    Var<T> feats = tape.slice_rows(enc4, 0, int(n));
    Var<T> jac = tape.slice_rows(enc4, int(n), int(3 * n));
    Var<T> h0 = tape.concat_cols({feats, tape.constant(xn)});
    Var<T> t0 = tape.concat_cols(
        {jac, tape.constant(detail::normalized_coord_tangent<T>(n, box_.extent()))});
    auto vt = trunk_.forward_tangent(tape, h0, t0, 3);
    o.f = tape.add(tape.slice_cols(vt.y, 0, 1), tape.constant(sphere_sdf(pos)));
    o.feat = tape.slice_cols(vt.y, 1, cfg_.geo_features);
    Var<T> grad_res = tape.stack_to_cols(tape.slice_cols(vt.ty, 0, 1), 3);
    o.grad = tape.add(grad_res, tape.constant(sphere_grad(pos)));
    return o;
  }

  Var<T> eval_color(Tape<T>& tape, Var<T> feat, const Mat<double>& dirs) const {
    Var<T> sh = tape.constant(sh_encode<T>(dirs, cfg_.sh_degree));
    return tape.sigmoid(color_.forward(tape, tape.concat_cols({feat, sh})));
  }

  // Color of the field queried at explicit points (single-sample rendering,
  // mesh colorization).
  Var<T> eval_point_color(Tape<T>& tape, const Mat<double>& pos,
                          const Mat<double>& dirs) const {
    Out o = eval(tape, pos, false);
    return eval_color(tape, o.feat, dirs);
  }

  const HashGrid<T>& grid() const { return grid_; }
  const Aabb& box() const { return box_; }
  const FieldConfig& config() const { return cfg_; }

 private:
  Mat<T> sphere_sdf(const Mat<double>& pos) const {
    Mat<T> d(pos.rows(), 1);
    for (Eigen::Index i = 0; i < pos.rows(); ++i) {
      Vec3 r = Vec3(pos(i, 0), pos(i, 1), pos(i, 2)) - sphere_center_;
      d(i, 0) = T(std::sqrt(r.squaredNorm() + 1e-12) - sphere_radius_);
    }
    return d;
  }
  Mat<T> sphere_grad(const Mat<double>& pos) const {
    Mat<T> g(pos.rows(), 3);
    for (Eigen::Index i = 0; i < pos.rows(); ++i) {
      Vec3 r = Vec3(pos(i, 0), pos(i, 1), pos(i, 2)) - sphere_center_;
      Vec3 gr = r / std::sqrt(r.squaredNorm() + 1e-12);
      for (int a = 0; a < 3; ++a) g(i, a) = T(gr[a]);
    }
    return g;
  }

  FieldConfig cfg_;
  Aabb box_;
  HashGrid<T> grid_;
  Mlp<T> trunk_;
  Mlp<T> color_;
  ParamTensor<T>* log_s_;
  Vec3 sphere_center_;
  double sphere_radius_ = 0.0;
};

// Coarse density-only estimator used for importance sampling.
template <class T>
class ProposalField {
 public:
  ProposalField(ParameterStore<T>& store, const Aabb& box, const std::string& name,
                uint64_t seed, double density_bias = -4.0)
      : density_bias_(density_bias),
        grid_(FieldConfig::proposal_grid(), box, store, name + ".grid",
              CounterRng(seed, 21)),
        mlp_(store, name + ".mlp", FieldConfig::proposal_grid().output_dim(), 32, 1, 1,
             Act::kRelu, CounterRng(seed, 22)) {}

  Var<T> eval_density(Tape<T>& tape, const Mat<double>& pos) const {
    Var<T> enc = grid_.encode(tape, pos);
    Var<T> pre = tape.add_scalar(mlp_.forward(tape, enc), T(density_bias_));
    return tape.exp_clamped(pre, T(-15), T(15));
  }

 private:
  double density_bias_;
  HashGrid<T> grid_;
  Mlp<T> mlp_;
};

// Direction-conditioned sky color.
template <class T>
class SkyHead {
 public:
  SkyHead(ParameterStore<T>& store, int sh_degree, uint64_t seed)
      : sh_degree_(sh_degree),
        mlp_(store, "sky.mlp", sh_degree * sh_degree, 32, 1, 3, Act::kRelu,
             CounterRng(seed, 31)) {}

  Var<T> eval(Tape<T>& tape, const Mat<double>& dirs) const {
    Var<T> sh = tape.constant(sh_encode<T>(dirs, sh_degree_));
    return tape.sigmoid(mlp_.forward(tape, sh));
  }

 private:
  int sh_degree_;
  Mlp<T> mlp_;
};

}  // namespace jneus
