#pragma once

#include "jneus/core.hpp"
#include "jneus/tape.hpp"

namespace jneus {

struct Ray {
  Vec3 o = Vec3::Zero();
  Vec3 u = Vec3::UnitZ();  // unit direction
  int pixel = -1;
  double t_near = 0.0;
  double t_far = 1.0;
};

// All renderer ops work on stacked per-ray layouts: a batch of R rays with n
// samples each is an (R*n, c) row-major matrix, ray-major.

// alpha_i = 1 - exp(-sigma_i * delta_i)
template <class T>
Var<T> alpha_from_density(Tape<T>& t, Var<T> sigma, const Mat<T>& delta) {
  Var<T> neg_tau = t.neg(t.mul_const(sigma, delta));
  return t.add_scalar(t.neg(t.exp_clamped(neg_tau, T(-60), T(0))), T(1));
}

// alpha_i = max((Phi_s(f_i) - Phi_s(f_{i+1})) / Phi_s(f_i), 0) with
// Phi_s(x) = sigmoid(s*x). `f` holds section values, n_bins+1 per ray; the
// output has n_bins rows per ray. Evaluated in log space so Phi never
// underflows mid-expression; a genuinely underflowed Phi_s(f_i) yields
// alpha = 0 with zero gradient.
template <class T>
Var<T> alpha_from_sdf(Tape<T>& t, Var<T> f, Var<T> s, int n_bins) {
  assert(s.rows() == 1 && s.cols() == 1 && f.cols() == 1);
  const int group = n_bins + 1;
  assert(f.rows() % group == 0);
  const Eigen::Index R = f.rows() / group;

  auto logsig = [](double x) {  // log(sigmoid(x)), stable both tails
    return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x))));
  };
  const double sv = double(s.val()(0, 0));

  Mat<T> alpha(R * n_bins, 1);
  for (Eigen::Index r = 0; r < R; ++r) {
    for (int i = 0; i < n_bins; ++i) {
      double fi = double(f.val()(r * group + i, 0));
      double fj = double(f.val()(r * group + i + 1, 0));
      double la = logsig(sv * fi), lb = logsig(sv * fj);
      double a = (la < -708.0) ? 0.0 : 1.0 - std::exp(lb - la);
      alpha(r * n_bins + i, 0) = T(std::max(a, 0.0));
    }
  }
  return t.make_node(std::move(alpha), {f, s}, [f, s, n_bins, logsig](Tape<T>& tp,
                                                                      typename Tape<T>::Node& n) {
    const int group = n_bins + 1;
    const Eigen::Index R = n.value.rows() / n_bins;
    const Mat<T>& fv = tp.node(f.id).value;
    const double sv = double(tp.node(s.id).value(0, 0));
    Mat<T> gf = Mat<T>::Zero(fv.rows(), 1);
    double gs = 0.0;
    for (Eigen::Index r = 0; r < R; ++r) {
      for (int i = 0; i < n_bins; ++i) {
        T g = n.grad(r * n_bins + i, 0);
        if (g == T(0) || n.value(r * n_bins + i, 0) <= T(0)) continue;
        double fi = double(fv(r * group + i, 0));
        double fj = double(fv(r * group + i + 1, 0));
        double a = sv * fi, b = sv * fj;
        double ratio = std::exp(logsig(b) - logsig(a));
        double sig_na = 1.0 / (1.0 + std::exp(a));   // sigmoid(-a)
        double sig_nb = 1.0 / (1.0 + std::exp(b));
        double da = ratio * sig_na;   // d alpha / d a
        double db = -ratio * sig_nb;  // d alpha / d b
        gf(r * group + i, 0) += T(double(g) * da * sv);
        gf(r * group + i + 1, 0) += T(double(g) * db * sv);
        gs += double(g) * (da * fi + db * fj);
      }
    }
    tp.accumulate(f, gf);
    if (tp.node(s.id).needs_grad) tp.grad_of(s)(0, 0) += T(gs);
  });
}

// w_i = T_i alpha_i with T_i = prod_{j<i} (1 - alpha_j), per ray segment.
// Alphas are clamped to 1 - 1e-7 so the backward division stays finite.
template <class T>
Var<T> transmittance_weights(Tape<T>& t, Var<T> alpha, int n_per_ray) {
  assert(alpha.cols() == 1 && alpha.rows() % n_per_ray == 0);
  const T cap = T(1) - T(1e-7);
  const Eigen::Index R = alpha.rows() / n_per_ray;
  Mat<T> w(alpha.rows(), 1);
  for (Eigen::Index r = 0; r < R; ++r) {
    T trans = T(1);
    for (int i = 0; i < n_per_ray; ++i) {
      T a = std::min(alpha.val()(r * n_per_ray + i, 0), cap);
      w(r * n_per_ray + i, 0) = trans * a;
      trans *= (T(1) - a);
    }
  }
  return t.make_node(std::move(w), {alpha}, [alpha, n_per_ray, cap](
                                                Tape<T>& tp, typename Tape<T>::Node& n) {
    const Mat<T>& av = tp.node(alpha.id).value;
    const Eigen::Index R = av.rows() / n_per_ray;
    Mat<T> ga = Mat<T>::Zero(av.rows(), 1);
    for (Eigen::Index r = 0; r < R; ++r) {
      // dL/da_k = g_k T_k - (sum_{i>k} g_i w_i) / (1 - a_k)
      double suffix = 0.0;
      for (int k = n_per_ray - 1; k >= 0; --k) {
        Eigen::Index row = r * n_per_ray + k;
        T a = std::min(av(row, 0), cap);
        double trans_k = double(n.value(row, 0)) / std::max(double(a), 1e-300);
        if (a == T(0)) {
          // w_k = 0; recompute T_k directly
          trans_k = 1.0;
          for (int j = 0; j < k; ++j)
            trans_k *= 1.0 - double(std::min(av(r * n_per_ray + j, 0), cap));
        }
        ga(row, 0) = T(double(n.grad(row, 0)) * trans_k - suffix / (1.0 - double(a)));
        suffix += double(n.grad(row, 0)) * double(n.value(row, 0));
      }
    }
    tp.accumulate(alpha, ga);
  });
}

template <class T>
struct RenderOut {
  Var<T> color;    // (R, 3)
  Var<T> depth;    // (R, 1)
  Var<T> acc;      // (R, 1) accumulated opacity
  Var<T> weights;  // (R*n, 1), as passed in
};

// Alpha compositing over per-ray segments. `z` holds the per-sample depth
// midpoints (constant w.r.t. the tape). Depth is normalized by accumulation
// by default so it stays an expectation on half-transparent rays; sky, when
// supplied as a valid (R,3) Var, fills the residual transmittance of color only.
template <class T>
RenderOut<T> composite(Tape<T>& t, Var<T> weights, Var<T> color, const Mat<T>& z,
                       int n_per_ray, Var<T> sky = {},
                       bool normalized_depth = true, T depth_eps = T(1e-6)) {
  RenderOut<T> out;
  out.weights = weights;
  out.acc = t.seg_sum(weights, n_per_ray);
  out.color = t.seg_sum(t.colwise_scale(color, weights), n_per_ray);
  Var<T> wz = t.seg_sum(t.mul_const(weights, z), n_per_ray);
  if (normalized_depth) {
    Mat<T> eps = Mat<T>::Constant(out.acc.rows(), 1, depth_eps);
    out.depth = t.div(wz, t.maximum(out.acc, t.constant(std::move(eps))));
  } else {
    out.depth = wz;
  }
  if (sky.valid()) {
    Var<T> residual = t.add_scalar(t.neg(out.acc), T(1));
    out.color = t.add(out.color, t.colwise_scale(sky, residual));
  }
  return out;
}

}  // namespace jneus
