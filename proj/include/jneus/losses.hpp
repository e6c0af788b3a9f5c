#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "jneus/core.hpp"
#include "jneus/tape.hpp"

namespace jneus {

enum class Stage { kInit, kRefine };

struct LossWeights {
  double lambda_sky = 0.01;
  double lambda_d = 0.001;
  double lambda_normal = 0.01;
  double lambda_sem = 0.001;
  double lambda_eik = 0.1;
  // refinement-stage overrides
  double refine_lambda_d = 0.1;
  double refine_lambda_normal_flat = 0.05;
  // early-epoch down-weighting of the normal + distortion terms
  double early_factor = 0.1;
  double tv_depth = 0.0;  // optional TV-on-depth, off by default
  bool gate_f_normal = true;  // Eq. 11 reading: gated normal term in L_f

  void validate() const {
    for (double w : {lambda_sky, lambda_d, lambda_normal, lambda_sem, lambda_eik,
                     refine_lambda_d, refine_lambda_normal_flat, early_factor, tv_depth})
      if (w < 0) throw ConfigError("loss weights must be non-negative");
  }

  struct Effective {
    double sky, d, normal, sem, eik, dist_factor, tv;
  };
  Effective effective(Stage stage, bool first_epoch) const {
    Effective e;
    e.sky = lambda_sky;
    e.sem = lambda_sem;
    e.eik = lambda_eik;
    e.d = (stage == Stage::kRefine) ? refine_lambda_d : lambda_d;
    e.normal = (stage == Stage::kRefine) ? refine_lambda_normal_flat : lambda_normal;
    e.dist_factor = 1.0;
    if (first_epoch) {
      e.normal *= early_factor;
      e.dist_factor = early_factor;
    }
    e.tv = tv_depth;
    return e;
  }
};

namespace detail {

// Averaging matrix for valid kxk windows over a pxp patch: (out, p*p) with
// out = (p-k+1)^2 rows, each averaging one window.
template <class T>
Mat<T> window_mean_matrix(int p, int k) {
  int m = p - k + 1;
  Mat<T> A = Mat<T>::Zero(int64_t(m) * m, int64_t(p) * p);
  T inv = T(1) / T(k * k);
  for (int wy = 0; wy < m; ++wy)
    for (int wx = 0; wx < m; ++wx)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx)
          A(wy * m + wx, (wy + dy) * p + (wx + dx)) = inv;
  return A;
}

}  // namespace detail

// Mean DSSIM over consecutive patch_size x patch_size row blocks (row-major
// inside a patch); a trailing partial patch is ignored. Constant zero when no
// full patch fits.
template <class T>
Var<T> dssim_patches(Tape<T>& t, Var<T> chat, const Mat<T>& cbar, int patch_size = 8,
                     int window = 3) {
  const int pp = patch_size * patch_size;
  const int n_patches = int(chat.rows()) / pp;
  if (n_patches == 0) return t.constant_scalar(T(0));

  Mat<T> A = detail::window_mean_matrix<T>(patch_size, window);
  Var<T> Av = t.constant(A);
  const T c1 = T(0.01 * 0.01), c2 = T(0.03 * 0.03);

  Var<T> ssim_sum;
  for (int p = 0; p < n_patches; ++p) {
    Var<T> x = t.slice_rows(chat, p * pp, pp);          // (pp, 3)
    Mat<T> ybar = cbar.middleRows(p * pp, pp);
    Var<T> y = t.constant(ybar);
    Var<T> mx = t.matmul(Av, x), my = t.matmul(Av, y);
    Var<T> mx2 = t.square(mx), my2 = t.square(my), mxy = t.mul(mx, my);
    Var<T> vx = t.sub(t.matmul(Av, t.square(x)), mx2);
    Var<T> vy = t.sub(t.matmul(Av, t.square(y)), my2);
    Var<T> cov = t.sub(t.matmul(Av, t.mul(x, y)), mxy);
    Var<T> num = t.mul(t.add_scalar(t.scale(mxy, T(2)), c1),
                       t.add_scalar(t.scale(cov, T(2)), c2));
    Var<T> den = t.mul(t.add_scalar(t.add(mx2, my2), c1),
                       t.add_scalar(t.add(vx, vy), c2));
    Var<T> ssim = t.mean(t.div(num, den));
    ssim_sum = ssim_sum.valid() ? t.add(ssim_sum, ssim) : ssim;
  }
  Var<T> mean_ssim = t.scale(ssim_sum, T(1) / T(n_patches));
  // DSSIM = (1 - SSIM) / 2
  return t.scale(t.add_scalar(t.neg(mean_ssim), T(1)), T(0.5));
}

// Mean L1 plus weighted DSSIM over ray patches.
template <class T>
Var<T> rgb_loss(Tape<T>& t, Var<T> chat, const Mat<T>& cbar, int patch_size = 8,
                int window = 3, T dssim_weight = T(0.2)) {
  Var<T> l1 = t.mean(t.abs(t.sub(chat, t.constant(cbar))));
  if (dssim_weight == T(0) || int(chat.rows()) < patch_size * patch_size) return l1;
  return t.add(l1, t.scale(dssim_patches(t, chat, cbar, patch_size, window),
                           dssim_weight));
}

// Binary cross-entropy of accumulated opacity against zero on sky rays:
// -log(1 - acc), averaged over the sky rays. Zero when the mask is empty.
template <class T>
Var<T> sky_loss(Tape<T>& t, Var<T> acc, const std::vector<uint8_t>& sky_mask,
                T eps = T(1e-6)) {
  assert(size_t(acc.rows()) == sky_mask.size());
  int n_sky = 0;
  Mat<T> mask = Mat<T>::Zero(acc.rows(), 1);
  for (size_t i = 0; i < sky_mask.size(); ++i)
    if (sky_mask[i]) {
      mask(Eigen::Index(i), 0) = T(1);
      ++n_sky;
    }
  if (n_sky == 0) return t.constant_scalar(T(0));
  Var<T> transp = t.add_scalar(t.neg(acc), T(1));
  Var<T> bce = t.neg(t.log_eps(transp, eps));
  return t.scale(t.sum(t.mul_const(bce, mask)), T(1) / T(n_sky));
}

// MipNeRF360 distortion on the normalized ray parameter: per ray,
// sum_{i,j} w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 ds_i, averaged over rays.
// Custom op: the pairwise term is evaluated with prefix sums in O(n), and the
// analytic gradient 2 sum_j w_j |s_i - s_j| + (2/3) w_i ds_i likewise.
template <class T>
Var<T> distortion_loss(Tape<T>& t, Var<T> weights, const Mat<T>& s_mid,
                       const Mat<T>& ds, int n_per_ray) {
  assert(weights.cols() == 1 && weights.rows() % n_per_ray == 0);
  const Eigen::Index R = weights.rows() / n_per_ray;
  const Mat<T>& w = weights.val();
  double total = 0;
  for (Eigen::Index r = 0; r < R; ++r) {
    double acc_w = 0, acc_ws = 0, pair = 0, self = 0;
    for (int i = 0; i < n_per_ray; ++i) {
      Eigen::Index row = r * n_per_ray + i;
      double wi = double(w(row, 0)), si = double(s_mid(row, 0));
      pair += 2.0 * wi * (si * acc_w - acc_ws);  // s sorted ascending
      self += wi * wi * double(ds(row, 0)) / 3.0;
      acc_w += wi;
      acc_ws += wi * si;
    }
    total += pair + self;
  }
  Mat<T> v(1, 1);
  v(0, 0) = T(total / double(R));
  Mat<T> smid_c = s_mid, ds_c = ds;
  return t.make_node(std::move(v), {weights},
                     [weights, smid_c, ds_c, n_per_ray](Tape<T>& tp,
                                                        typename Tape<T>::Node& n) {
    const Mat<T>& w = tp.node(weights.id).value;
    const Eigen::Index R = w.rows() / n_per_ray;
    const double g = double(n.grad(0, 0)) / double(R);
    Mat<T> gw = Mat<T>::Zero(w.rows(), 1);
    for (Eigen::Index r = 0; r < R; ++r) {
      // prefix pass
      double acc_w = 0, acc_ws = 0;
      for (int i = 0; i < n_per_ray; ++i) {
        Eigen::Index row = r * n_per_ray + i;
        double si = double(smid_c(row, 0));
        gw(row, 0) = T(2.0 * (si * acc_w - acc_ws));
        acc_w += double(w(row, 0));
        acc_ws += double(w(row, 0)) * si;
      }
      // suffix pass + self term
      double suf_w = 0, suf_ws = 0;
      for (int i = n_per_ray - 1; i >= 0; --i) {
        Eigen::Index row = r * n_per_ray + i;
        double si = double(smid_c(row, 0));
        gw(row, 0) += T(2.0 * (suf_ws - si * suf_w) +
                        (2.0 / 3.0) * double(w(row, 0)) * double(ds_c(row, 0)));
        suf_w += double(w(row, 0));
        suf_ws += double(w(row, 0)) * si;
      }
    }
    tp.accumulate(weights, Mat<T>(gw * T(g)));
  });
}

// MipNeRF360 proposal loss. Field weights are targets (stop-gradient, passed
// as plain values); for each field bin the proposal must supply at least the
// field's mass via every proposal bin overlapping that interval:
// sum_j max(0, w_j - what_j)^2 / (what_j + eps), mean over rays.
template <class T>
Var<T> proposal_loss(Tape<T>& t, Var<T> prop_weights, const Mat<T>& prop_edges,
                     const Mat<T>& field_weights, const Mat<T>& field_edges,
                     int n_prop, int n_field, T eps = T(1e-7)) {
  assert(prop_weights.cols() == 1 && prop_weights.rows() % n_prop == 0);
  const Eigen::Index R = prop_weights.rows() / n_prop;
  assert(field_weights.rows() == R * n_field);
  assert(prop_edges.rows() == R * (n_prop + 1));
  assert(field_edges.rows() == R * (n_field + 1));

  auto overlap = [](double a0, double a1, double b0, double b1) {
    return std::min(a1, b1) > std::max(a0, b0);
  };

  const Mat<T>& pw = prop_weights.val();
  double total = 0;
  for (Eigen::Index r = 0; r < R; ++r) {
    for (int j = 0; j < n_field; ++j) {
      double f0 = double(field_edges(r * (n_field + 1) + j, 0));
      double f1 = double(field_edges(r * (n_field + 1) + j + 1, 0));
      double wj = double(field_weights(r * n_field + j, 0));
      double what = 0;
      for (int k = 0; k < n_prop; ++k) {
        double p0 = double(prop_edges(r * (n_prop + 1) + k, 0));
        double p1 = double(prop_edges(r * (n_prop + 1) + k + 1, 0));
        if (overlap(f0, f1, p0, p1)) what += double(pw(r * n_prop + k, 0));
      }
      double viol = std::max(0.0, wj - what);
      total += viol * viol / (what + double(eps));
    }
  }
  Mat<T> v(1, 1);
  v(0, 0) = T(total / double(R));
  Mat<T> pe = prop_edges, fw = field_weights, fe = field_edges;
  return t.make_node(std::move(v), {prop_weights},
                     [prop_weights, pe, fw, fe, n_prop, n_field, eps, overlap](
                         Tape<T>& tp, typename Tape<T>::Node& n) {
    const Mat<T>& pw = tp.node(prop_weights.id).value;
    const Eigen::Index R = pw.rows() / n_prop;
    const double g = double(n.grad(0, 0)) / double(R);
    Mat<T> gp = Mat<T>::Zero(pw.rows(), 1);
    for (Eigen::Index r = 0; r < R; ++r) {
      for (int j = 0; j < n_field; ++j) {
        double f0 = double(fe(r * (n_field + 1) + j, 0));
        double f1 = double(fe(r * (n_field + 1) + j + 1, 0));
        double wj = double(fw(r * n_field + j, 0));
        double what = 0;
        for (int k = 0; k < n_prop; ++k) {
          double p0 = double(pe(r * (n_prop + 1) + k, 0));
          double p1 = double(pe(r * (n_prop + 1) + k + 1, 0));
          if (overlap(f0, f1, p0, p1)) what += double(pw(r * n_prop + k, 0));
        }
        double viol = wj - what;
        if (viol <= 0) continue;
        // d/dwhat [viol^2/(what+eps)] with viol = wj - what
        double denom = what + double(eps);
        double dwhat = (-2.0 * viol * denom - viol * viol) / (denom * denom);
        for (int k = 0; k < n_prop; ++k) {
          double p0 = double(pe(r * (n_prop + 1) + k, 0));
          double p1 = double(pe(r * (n_prop + 1) + k + 1, 0));
          if (overlap(f0, f1, p0, p1)) gp(r * n_prop + k, 0) += T(g * dwhat);
        }
      }
    }
    tp.accumulate(prop_weights, gp);
  });
}

// Softmax cross-entropy of composited logits against integer labels.
template <class T>
Var<T> semantic_loss(Tape<T>& t, Var<T> logits, const std::vector<int>& labels) {
  const Eigen::Index R = logits.rows(), K = logits.cols();
  assert(size_t(R) == labels.size());
  Mat<T> row_max(R, 1);
  for (Eigen::Index i = 0; i < R; ++i) row_max(i, 0) = logits.val().row(i).maxCoeff();
  Mat<T> max_rep = row_max.replicate(1, K);
  Var<T> shifted = t.sub(logits, t.constant(max_rep));
  Var<T> lse = t.add(t.log_eps(t.row_sum(t.exp_clamped(shifted, T(-60), T(1))), T(0)),
                     t.constant(row_max));
  Mat<T> onehot = Mat<T>::Zero(R, K);
  for (Eigen::Index i = 0; i < R; ++i) {
    assert(labels[size_t(i)] >= 0 && labels[size_t(i)] < K);
    onehot(i, labels[size_t(i)]) = T(1);
  }
  Var<T> picked = t.row_sum(t.mul_const(logits, onehot));
  return t.mean(t.sub(lse, picked));
}

// Uncertainty-gated normal supervision at the max-weight sample:
// L1(normalize(grad) - N) + (1 - cos), averaged over gated rays with a usable
// gradient. Rays with |grad| < 1e-8 are skipped (and counted via n_skipped).
template <class T>
Var<T> normal_loss_u(Tape<T>& t, Var<T> grad, const Mat<T>& normals,
                     const std::vector<uint8_t>& gate, int* n_skipped = nullptr) {
  const Eigen::Index R = grad.rows();
  assert(size_t(R) == gate.size() && normals.rows() == R);
  Mat<T> mask = Mat<T>::Zero(R, 1);
  int n_used = 0, skipped = 0;
  for (Eigen::Index i = 0; i < R; ++i) {
    if (!gate[size_t(i)]) continue;
    if (grad.val().row(i).norm() < T(1e-8)) {
      ++skipped;
      continue;
    }
    mask(i, 0) = T(1);
    ++n_used;
  }
  if (n_skipped) *n_skipped = skipped;
  if (n_used == 0) return t.constant_scalar(T(0));

  Var<T> norm = t.sqrt_eps(t.row_sum(t.square(grad)), T(1e-16));
  Var<T> unit = t.colwise_scale(grad, t.div(t.constant(Mat<T>::Ones(R, 1)), norm));
  Var<T> l1 = t.row_sum(t.abs(t.sub(unit, t.constant(normals))));
  Var<T> cos = t.row_sum(t.mul_const(unit, normals));
  Var<T> per_ray = t.add(l1, t.add_scalar(t.neg(cos), T(1)));
  return t.scale(t.sum(t.mul_const(per_ray, mask)), T(1) / T(n_used));
}

// Uncertainty-gated Eikonal term: mean over samples of gated rays of
// (|grad| - 1)^2. The gate is per ray, applied to all its samples.
template <class T>
Var<T> eikonal_loss_u(Tape<T>& t, Var<T> grads, const std::vector<uint8_t>& gate,
                      int n_per_ray) {
  const Eigen::Index R = grads.rows() / n_per_ray;
  assert(size_t(R) == gate.size());
  Mat<T> mask = Mat<T>::Zero(grads.rows(), 1);
  int n_used = 0;
  for (Eigen::Index r = 0; r < R; ++r)
    if (gate[size_t(r)]) {
      mask.middleRows(r * n_per_ray, n_per_ray).setOnes();
      n_used += n_per_ray;
    }
  if (n_used == 0) return t.constant_scalar(T(0));
  Var<T> norm = t.sqrt_eps(t.row_sum(t.square(grads)), T(1e-16));
  Var<T> per_sample = t.square(t.add_scalar(norm, T(-1)));
  return t.scale(t.sum(t.mul_const(per_sample, mask)), T(1) / T(n_used));
}

// Total variation over a patch-layout depth column (same layout as rgb_loss).
template <class T>
Var<T> tv_depth_loss(Tape<T>& t, Var<T> depth, int patch_size = 8) {
  const int pp = patch_size * patch_size;
  const int n_patches = int(depth.rows()) / pp;
  if (n_patches == 0) return t.constant_scalar(T(0));
  // difference matrix: horizontal + vertical neighbor pairs inside a patch
  std::vector<std::pair<int, int>> pairs;
  for (int y = 0; y < patch_size; ++y)
    for (int x = 0; x < patch_size; ++x) {
      if (x + 1 < patch_size) pairs.push_back({y * patch_size + x, y * patch_size + x + 1});
      if (y + 1 < patch_size) pairs.push_back({y * patch_size + x, (y + 1) * patch_size + x});
    }
  Mat<T> D = Mat<T>::Zero(Eigen::Index(pairs.size()), pp);
  for (size_t i = 0; i < pairs.size(); ++i) {
    D(Eigen::Index(i), pairs[i].first) = T(1);
    D(Eigen::Index(i), pairs[i].second) = T(-1);
  }
  Var<T> Dv = t.constant(D);
  Var<T> total;
  for (int p = 0; p < n_patches; ++p) {
    Var<T> d = t.slice_rows(depth, p * pp, pp);
    Var<T> tv = t.mean(t.abs(t.matmul(Dv, d)));
    total = total.valid() ? t.add(total, tv) : tv;
  }
  return t.scale(total, T(1) / T(n_patches));
}

struct LossReport {
  std::map<std::string, double> terms;
  double total_v = 0;
  double total_f = 0;

  std::string to_ndjson(int step) const {
    std::ostringstream os;
    os << "{\"step\":" << step;
    for (const auto& [k, v] : terms) os << ",\"" << k << "\":" << v;
    os << ",\"total_v\":" << total_v << ",\"total_f\":" << total_f << "}";
    return os.str();
  }
};

template <class T>
struct LossTerms {
  Var<T> rgb_v, rgb_f;      // photometric, per field
  Var<T> dist_v, dist_f;    // distortion
  Var<T> sky_v, sky_f;      // opacity BCE
  Var<T> normal_v;          // ungated normal term (Eq. 10)
  Var<T> normal_u;          // gated normal term (Eq. 11)
  Var<T> eik_u;             // gated Eikonal
  Var<T> sem;               // semantic CE (volumetric only)
  Var<T> tv_v;              // optional TV on depth
};

template <class T>
struct AssembledLosses {
  Var<T> total_v, total_f;
  LossReport report;
};

// Eq. 10-11 weighted totals with stage overrides. Missing (invalid) terms
// count as zero.
template <class T>
AssembledLosses<T> assemble_losses(Tape<T>& t, const LossTerms<T>& terms,
                                   const LossWeights& w, Stage stage,
                                   bool first_epoch) {
  w.validate();
  auto e = w.effective(stage, first_epoch);

  AssembledLosses<T> out;
  auto add_term = [&](Var<T>& total, Var<T> term, double lambda, const char* name) {
    if (!term.valid() || lambda == 0.0) return;
    double val = double(term.val()(0, 0));
    out.report.terms[name] = val;
    out.report.terms[std::string("w_") + name] = lambda;
    Var<T> scaled = t.scale(term, T(lambda));
    total = total.valid() ? t.add(total, scaled) : scaled;
  };

  add_term(out.total_v, terms.rgb_v, 1.0, "rgb_v");
  add_term(out.total_v, terms.dist_v, e.d * e.dist_factor, "dist_v");
  add_term(out.total_v, terms.sky_v, e.sky, "sky_v");
  add_term(out.total_v, terms.normal_v, e.normal, "normal_v");
  add_term(out.total_v, terms.sem, e.sem, "sem");
  add_term(out.total_v, terms.tv_v, e.tv, "tv_v");

  add_term(out.total_f, terms.rgb_f, 1.0, "rgb_f");
  add_term(out.total_f, terms.dist_f, e.d * e.dist_factor, "dist_f");
  add_term(out.total_f, terms.sky_f, e.sky, "sky_f");
  add_term(out.total_f, w.gate_f_normal ? terms.normal_u : terms.normal_v, e.normal,
           "normal_f");
  add_term(out.total_f, terms.eik_u, e.eik, "eik_u");

  if (!out.total_v.valid()) out.total_v = t.constant_scalar(T(0));
  if (!out.total_f.valid()) out.total_f = t.constant_scalar(T(0));
  out.report.total_v = double(out.total_v.val()(0, 0));
  out.report.total_f = double(out.total_f.val()(0, 0));
  return out;
}

}  // namespace jneus
