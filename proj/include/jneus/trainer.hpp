#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "jneus/config.hpp"
#include "jneus/dataset.hpp"
#include "jneus/fields.hpp"
#include "jneus/losses.hpp"
#include "jneus/mesh.hpp"
#include "jneus/metrics.hpp"
#include "jneus/render.hpp"
#include "jneus/sampling.hpp"
#include "jneus/uncertainty.hpp"

namespace jneus {

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One sampled ray batch: the first n_patch_rays rows are whole 8x8 patches
// (row-major inside a patch) feeding the DSSIM term; the rest are scattered
// single pixels.
struct RayBatch {
  std::vector<Ray> rays;
  Mat<double> gt_rgb;     // (R,3)
  Mat<double> gt_normal;  // (R,3)
  std::vector<uint8_t> sky;
  std::vector<int> sem;
  int n_patch_rays = 0;

  int size() const { return int(rays.size()); }
};

namespace detail {

// Section edges around sorted sample points: lo, midpoints, hi.
inline std::vector<double> edges_around(const std::vector<double>& ts, double lo,
                                        double hi) {
  std::vector<double> e(ts.size() + 1);
  e.front() = lo;
  for (size_t i = 1; i < ts.size(); ++i) e[i] = 0.5 * (ts[i - 1] + ts[i]);
  e.back() = hi;
  return e;
}

// Plain-value transmittance weights from alphas (for sampling decisions).
inline std::vector<double> weights_from_alpha(const std::vector<double>& alpha) {
  std::vector<double> w(alpha.size());
  double trans = 1.0;
  for (size_t i = 0; i < alpha.size(); ++i) {
    double a = std::min(alpha[i], 1.0 - 1e-7);
    w[i] = trans * a;
    trans *= 1.0 - a;
  }
  return w;
}

inline double logsig(double x) {
  return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::abs(x))));
}

}  // namespace detail

template <class T>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const Dataset& ds)
      : cfg_(cfg), ds_(&ds), box_(ds.box) {
    FieldConfig fc;
    // NeuS-style sharpness init assumes a unit-normalized scene; express it in
    // world units so sigmoid(s*f) is not saturated across the whole box, which
    // would freeze the SDF (zero alpha gradient everywhere).
    fc.sdf_scale_init = 25.0 / box_.max_extent();
    vol_ = std::make_unique<VolumetricField<T>>(store_v_, fc, box_, cfg.seed);
    sky_ = std::make_unique<SkyHead<T>>(store_v_, fc.sh_degree, cfg.seed);
    prop0_ = std::make_unique<ProposalField<T>>(store_p_, box_, "prop0", cfg.seed + 100);
    prop1_ = std::make_unique<ProposalField<T>>(store_p_, box_, "prop1", cfg.seed + 200);
    sdf_ = std::make_unique<SdfField<T>>(store_f_, fc, box_, cfg.seed);

    tau_d_ = cfg.uncertainty_tau_d_init;
    delta_ = initial_shell(box_);
    delta_min_ = shell_floor(box_, cfg.train_mesh_resolution);
    policy_ = {cfg.uncertainty_gamma_up, cfg.uncertainty_gamma_down,
               cfg.uncertainty_rho_high, cfg.uncertainty_rho_low};
    weights_.lambda_sky = cfg.loss_sky;
    weights_.lambda_d = cfg.loss_distortion;
    weights_.lambda_normal = cfg.loss_normal;
    weights_.lambda_sem = cfg.loss_semantic;
    weights_.lambda_eik = cfg.loss_eikonal;
    weights_.refine_lambda_d = cfg.loss_refine_distortion;
    weights_.refine_lambda_normal_flat = cfg.loss_refine_normal;
    weights_.early_factor = cfg.loss_early_factor;
    weights_.tv_depth = cfg.loss_tv_depth;
    weights_.gate_f_normal = cfg.loss_gate_f_normal;
    weights_.validate();
  }

  // ---- scheduling --------------------------------------------------------

  int steps_per_epoch() const {
    if (cfg_.train_steps_per_epoch > 0) return cfg_.train_steps_per_epoch;
    int64_t px = 0;
    for (const auto& f : ds_->frames) px += int64_t(f.n_pixels());
    return int((px + cfg_.train_rays_per_batch - 1) / cfg_.train_rays_per_batch);
  }

  int refine_start_epoch() const {
    int sw = int(std::ceil(double(cfg_.train_epochs) * (1.0 - cfg_.train_refine_fraction)));
    return std::min(std::max(sw, 1), cfg_.train_epochs);
  }

  Stage stage_of(int epoch) const {
    return epoch >= refine_start_epoch() ? Stage::kRefine : Stage::kInit;
  }

  // Extract the current SDF zero set, colorize it and swap it in as the
  // guidance snapshot. Epoch 0 has no snapshot.
  void refresh_mesh_snapshot(int resolution) {
    SceneMesh m = extract_mesh(
        [&](const Mat<double>& pos) { return eval_sdf_values(pos); }, box_, resolution);
    colorize_mesh(m, [&](const Mat<double>& pos, const Mat<double>& dirs) {
      return eval_sdf_colors(pos, dirs);
    });
    m.build_bvh();
    mesh_ = std::move(m);
    has_mesh_ = !mesh_.empty();
  }

  void begin_epoch(int epoch) {
    epoch_ = epoch;
    if (epoch > 0) {
      refresh_mesh_snapshot(cfg_.train_mesh_resolution);
      delta_ = shell_update(delta_, delta_min_);
      sdf_->bump_scale(cfg_.train_scale_growth);
    }
  }

  // ---- batching ----------------------------------------------------------

  RayBatch sample_batch(int epoch, int step) const {
    CounterRng rng(cfg_.seed, 1000 + uint64_t(epoch), uint64_t(step), 0);
    const int total = cfg_.train_rays_per_batch;
    const int n_patches = std::max(total / 2 / 64, 0);
    RayBatch b;
    b.n_patch_rays = n_patches * 64;
    int n_random = total - b.n_patch_rays;

    auto push_pixel = [&](size_t cam_idx, int u, int v) {
      const Camera& cam = ds_->cams[cam_idx];
      const GroundTruthFrame& f = ds_->frames[cam_idx];
      Ray r = cam.pixel_ray(u + 0.5, v + 0.5);
      double tn = 0, tf = 0;
      if (!box_.ray_range(r.o, r.u, tn, tf)) {
        tn = 0;
        tf = 1e-3;  // degenerate: treated as an empty (sky) ray
      }
      r.t_near = std::max(tn, 1e-4);
      r.t_far = std::max(tf, r.t_near + 1e-3);
      size_t idx = size_t(v) * f.width + u;
      b.rays.push_back(r);
      Eigen::Index row = Eigen::Index(b.rays.size()) - 1;
      for (int c = 0; c < 3; ++c) {
        b.gt_rgb(row, c) = double(f.rgb[idx * 3 + size_t(c)]);
        b.gt_normal(row, c) = double(f.normal[idx * 3 + size_t(c)]);
      }
      b.sky.push_back(f.sky[idx]);
      b.sem.push_back(int(f.semantic[idx]));
    };

    b.gt_rgb.resize(total, 3);
    b.gt_normal.resize(total, 3);
    b.rays.reserve(size_t(total));
    for (int p = 0; p < n_patches; ++p) {
      size_t cam_idx = rng.uniform_u32(uint32_t(ds_->cams.size()));
      const Camera& cam = ds_->cams[cam_idx];
      int u0 = int(rng.uniform_u32(uint32_t(cam.width - 7)));
      int v0 = int(rng.uniform_u32(uint32_t(cam.height - 7)));
      for (int dy = 0; dy < 8; ++dy)
        for (int dx = 0; dx < 8; ++dx) push_pixel(cam_idx, u0 + dx, v0 + dy);
    }
    for (int i = 0; i < n_random; ++i) {
      size_t cam_idx = rng.uniform_u32(uint32_t(ds_->cams.size()));
      const Camera& cam = ds_->cams[cam_idx];
      push_pixel(cam_idx, int(rng.uniform_u32(uint32_t(cam.width))),
                 int(rng.uniform_u32(uint32_t(cam.height))));
    }
    return b;
  }

  // ---- one optimization step (Fig. 2 order) ------------------------------

  LossReport train_step(const RayBatch& b, int epoch, int step) {
    const int R = b.size();
    const Stage stage = stage_of(epoch);
    const bool first_epoch = epoch == 0;

    // (1) mesh guidance: D_E and photometric uncertainty per ray
    std::vector<double> mesh_depth(size_t(R), kMiss), mu_c(size_t(R), 1.0);
    if (has_mesh_ && !cfg_.ablation_disable_grs) {
      std::vector<int> hit_rows;
      Mat<double> hit_pos(R, 3), hit_dirs(R, 3);
      for (int i = 0; i < R; ++i) {
        double d = ray_mesh_depth(mesh_, b.rays[size_t(i)]);
        mesh_depth[size_t(i)] = d;
        if (d != kMiss) {
          Vec3 p = b.rays[size_t(i)].o + d * b.rays[size_t(i)].u;
          Eigen::Index k = Eigen::Index(hit_rows.size());
          for (int a = 0; a < 3; ++a) {
            hit_pos(k, a) = p[a];
            hit_dirs(k, a) = b.rays[size_t(i)].u[a];
          }
          hit_rows.push_back(i);
        }
      }
      if (!hit_rows.empty()) {
        Mat<double> colors =
            eval_sdf_colors(hit_pos.topRows(Eigen::Index(hit_rows.size())),
                            hit_dirs.topRows(Eigen::Index(hit_rows.size())));
        for (size_t k = 0; k < hit_rows.size(); ++k) {
          int i = hit_rows[k];
          Vec3 cm(colors(Eigen::Index(k), 0), colors(Eigen::Index(k), 1),
                  colors(Eigen::Index(k), 2));
          Vec3 cg(b.gt_rgb(i, 0), b.gt_rgb(i, 1), b.gt_rgb(i, 2));
          mu_c[size_t(i)] = photometric_uncertainty(true, cm, cg);
        }
      }
    } else if (has_mesh_) {
      // GRS disabled: still track mesh depth for mu_d telemetry and tau_d
      for (int i = 0; i < R; ++i)
        mesh_depth[size_t(i)] = ray_mesh_depth(mesh_, b.rays[size_t(i)]);
    }

    // (2) volumetric pass
    LossReport report;
    std::vector<double> vol_depth(size_t(R), 0.0);
    bool ok_v = volumetric_pass(b, mesh_depth, mu_c, stage, first_epoch, epoch, step,
                                vol_depth, report);

    // (3) geometric uncertainty
    std::vector<double> mu_d(static_cast<size_t>(R));
    for (int i = 0; i < R; ++i)
      mu_d[size_t(i)] = geometric_uncertainty(mesh_depth[size_t(i)], vol_depth[size_t(i)]);

    // (4) SDF pass with gated regularizers
    bool ok_f = sdf_pass(b, mesh_depth, mu_d, mu_c, vol_depth, stage, first_epoch,
                         epoch, step, report);

    // (5) optimizer steps, one per field
    if (ok_v) {
      report.terms["gnorm_v"] = grad_norm(store_v_);
      report.terms["gnorm_p"] = grad_norm(store_p_);
      store_v_.adam_step(cfg_.train_lr_volumetric);
      store_p_.adam_step(cfg_.train_lr_proposal);
    }
    if (ok_f) {
      report.terms["gnorm_f"] = grad_norm(store_f_);
      store_f_.adam_step(cfg_.train_lr_sdf);
    }
    if (!ok_v || !ok_f) {
      if (++abort_streak_ >= 3)
        throw TrainingError("three consecutive aborted steps at epoch " +
                            std::to_string(epoch) + " step " + std::to_string(step));
    } else {
      abort_streak_ = 0;
    }

    // (6) adaptive threshold on the non-sky geometric uncertainties
    std::vector<double> mu_d_surface;
    for (int i = 0; i < R; ++i)
      if (!b.sky[size_t(i)]) mu_d_surface.push_back(mu_d[size_t(i)]);
    if (!mu_d_surface.empty()) tau_d_ = update_threshold(tau_d_, mu_d_surface, policy_);
    report.terms["tau_d"] = tau_d_;
    report.terms["delta"] = delta_;

    last_mu_d_ = std::move(mu_d);
    last_mu_c_ = std::move(mu_c);
    ++global_step_;
    return report;
  }

  // ---- full-image rendering (evaluation / `render` subcommand) -----------

  struct RenderedImage {
    int width = 0, height = 0;
    std::vector<float> rgb;
    std::vector<double> depth;
  };

  RenderedImage render_view(const Camera& cam, int chunk = 512) const {
    RenderedImage img;
    img.width = cam.width;
    img.height = cam.height;
    img.rgb.assign(size_t(cam.width) * cam.height * 3, 0.0f);
    img.depth.assign(size_t(cam.width) * cam.height, kInf);

    std::vector<Ray> rays;
    rays.reserve(size_t(cam.width) * cam.height);
    for (int v = 0; v < cam.height; ++v)
      for (int u = 0; u < cam.width; ++u) {
        Ray r = cam.pixel_ray(u + 0.5, v + 0.5);
        double tn = 0, tf = 0;
        if (!box_.ray_range(r.o, r.u, tn, tf)) {
          tn = 0;
          tf = 1e-3;
        }
        r.t_near = std::max(tn, 1e-4);
        r.t_far = std::max(tf, r.t_near + 1e-3);
        r.pixel = v * cam.width + u;
        rays.push_back(r);
      }

    CounterRng rng(cfg_.seed, 777, 0);
    for (size_t off = 0; off < rays.size(); off += size_t(chunk)) {
      size_t n = std::min(size_t(chunk), rays.size() - off);
      std::vector<Ray> part(rays.begin() + long(off), rays.begin() + long(off + n));
      render_chunk(part, rng, img);
    }
    return img;
  }

  // ---- checkpointing ------------------------------------------------------

  static constexpr uint32_t kCheckpointMagic = 0x53524e4aU;  // "JNRS"
  static constexpr uint32_t kCheckpointVersion = 1;

  void save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    uint32_t magic = kCheckpointMagic, version = kCheckpointVersion;
    uint64_t chash = config_hash(cfg_);
    os.write(reinterpret_cast<const char*>(&magic), 4);
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&chash), 8);
    os.write(reinterpret_cast<const char*>(&tau_d_), 8);
    os.write(reinterpret_cast<const char*>(&delta_), 8);
    uint32_t ep = uint32_t(epoch_);
    uint64_t gs = uint64_t(global_step_);
    os.write(reinterpret_cast<const char*>(&ep), 4);
    os.write(reinterpret_cast<const char*>(&gs), 8);
    store_v_.save(os);
    store_p_.save(os);
    store_f_.save(os);
    if (!os) throw IoError("checkpoint write failed: " + path);
  }

  // Returns true when the stored config hash matches; a mismatch throws
  // unless force is set (the caller decides how loudly to warn).
  bool load_checkpoint(const std::string& path, bool force = false) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint32_t magic = 0, version = 0;
    uint64_t chash = 0;
    is.read(reinterpret_cast<char*>(&magic), 4);
    is.read(reinterpret_cast<char*>(&version), 4);
    if (!is || magic != kCheckpointMagic) throw IoError("not a checkpoint: " + path);
    if (version != kCheckpointVersion)
      throw IoError("unsupported checkpoint version " + std::to_string(version));
    is.read(reinterpret_cast<char*>(&chash), 8);
    bool hash_ok = chash == config_hash(cfg_);
    if (!hash_ok && !force)
      throw ConfigError("checkpoint config hash mismatch (use --force to load anyway)");
    is.read(reinterpret_cast<char*>(&tau_d_), 8);
    is.read(reinterpret_cast<char*>(&delta_), 8);
    uint32_t ep = 0;
    uint64_t gs = 0;
    is.read(reinterpret_cast<char*>(&ep), 4);
    is.read(reinterpret_cast<char*>(&gs), 8);
    if (!is) throw IoError("truncated checkpoint: " + path);
    store_v_.load(is);
    store_p_.load(is);
    store_f_.load(is);
    epoch_ = int(ep);
    global_step_ = int64_t(gs);
    return hash_ok;
  }

  uint64_t parameter_hash() const {
    uint64_t h = store_v_.value_hash();
    h = hash_combine(h, store_p_.value_hash());
    h = hash_combine(h, store_f_.value_hash());
    return h;
  }

  // ---- value-only field queries -------------------------------------------

  Mat<double> eval_sdf_values(const Mat<double>& pos) const {
    Mat<double> out(pos.rows(), 1);
    const Eigen::Index chunk = 4096;
    for (Eigen::Index off = 0; off < pos.rows(); off += chunk) {
      Eigen::Index n = std::min(chunk, pos.rows() - off);
      Tape<T> tape;
      auto o = sdf_->eval(tape, pos.middleRows(off, n), false);
      for (Eigen::Index i = 0; i < n; ++i) out(off + i, 0) = double(o.f.val()(i, 0));
    }
    return out;
  }

  Mat<double> eval_sdf_colors(const Mat<double>& pos, const Mat<double>& dirs) const {
    Mat<double> out(pos.rows(), 3);
    const Eigen::Index chunk = 4096;
    for (Eigen::Index off = 0; off < pos.rows(); off += chunk) {
      Eigen::Index n = std::min(chunk, pos.rows() - off);
      Tape<T> tape;
      Var<T> c = sdf_->eval_point_color(tape, pos.middleRows(off, n),
                                        dirs.middleRows(off, n));
      for (Eigen::Index i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) out(off + i, a) = double(c.val()(i, a));
    }
    return out;
  }

  // ---- accessors ----------------------------------------------------------

  const RunConfig& config() const { return cfg_; }
  const Aabb& box() const { return box_; }
  const SceneMesh& mesh_snapshot() const { return mesh_; }
  bool has_mesh() const { return has_mesh_; }
  double tau_d() const { return tau_d_; }
  double shell() const { return delta_; }
  int epoch() const { return epoch_; }
  int64_t global_step() const { return global_step_; }
  const std::vector<double>& last_mu_d() const { return last_mu_d_; }
  const std::vector<double>& last_mu_c() const { return last_mu_c_; }
  const SdfField<T>& sdf_field() const { return *sdf_; }
  SampleBudget budget() const {
    SampleBudget sb;
    sb.proposal0 = cfg_.sampling_proposal0;
    sb.proposal1 = cfg_.sampling_proposal1;
    sb.volumetric = cfg_.sampling_volumetric;
    sb.sdf = cfg_.sampling_sdf;
    sb.refine_sdf_coarse = cfg_.sampling_refine_sdf_coarse;
    sb.refine_sdf_fine = cfg_.sampling_refine_sdf_fine;
    return sb;
  }

  // Test hook: replace the guidance mesh (e.g. with the ground-truth scene).
  void set_mesh_snapshot(SceneMesh m) {
    mesh_ = std::move(m);
    has_mesh_ = !mesh_.empty();
  }

 private:
  // One volumetric render + loss backward. Returns false on a non-finite
  // abort (gradients already cleared).
  bool volumetric_pass(const RayBatch& b, const std::vector<double>& mesh_depth,
                       const std::vector<double>& mu_c, Stage stage, bool first_epoch,
                       int epoch, int step, std::vector<double>& vol_depth,
                       LossReport& report) {
    const int R = b.size();
    const SampleBudget sb = budget();
    const int n0 = sb.proposal0, n1 = sb.proposal1, nv = sb.volumetric;
    CounterRng rng(cfg_.seed, 2000 + uint64_t(epoch), uint64_t(step), 1);

    std::vector<SamplingBounds> bounds(static_cast<size_t>(R));
    for (int i = 0; i < R; ++i) {
      const Ray& r = b.rays[size_t(i)];
      bounds[size_t(i)] =
          cfg_.ablation_disable_grs
              ? SamplingBounds{r.t_near, r.t_far, GrsBranch::kFallbackFull}
              : volumetric_grs_bounds(r, mu_c[size_t(i)], mesh_depth[size_t(i)],
                                      delta_, cfg_.uncertainty_tau_c);
    }

    Tape<T> tape;
    try {
      // proposal level 0: uniform sections over the bounds
      Mat<double> pos0(Eigen::Index(R) * n0, 3);
      Mat<T> p0_edges(Eigen::Index(R) * (n0 + 1), 1), delta0(Eigen::Index(R) * n0, 1);
      for (int i = 0; i < R; ++i) {
        double lo = bounds[size_t(i)].t_near, hi = bounds[size_t(i)].t_far;
        for (int j = 0; j <= n0; ++j)
          p0_edges(Eigen::Index(i) * (n0 + 1) + j, 0) =
              T(lo + (hi - lo) * double(j) / n0);
        for (int j = 0; j < n0; ++j) {
          double t = lo + (hi - lo) * (j + 0.5) / n0;
          Vec3 p = b.rays[size_t(i)].o + t * b.rays[size_t(i)].u;
          for (int a = 0; a < 3; ++a) pos0(Eigen::Index(i) * n0 + j, a) = p[a];
          delta0(Eigen::Index(i) * n0 + j, 0) = T((hi - lo) / n0);
        }
      }
      Var<T> sigma0 = prop0_->eval_density(tape, pos0);
      Var<T> w0 = transmittance_weights(tape, alpha_from_density(tape, sigma0, delta0), n0);

      // proposal level 1: importance resample from level 0
      auto resample = [&](const Mat<T>& src_edges, const Mat<T>& src_w, int n_src,
                          int n_dst, Mat<double>& pos, Mat<T>& edges, Mat<T>& deltas,
                          std::vector<std::vector<double>>& ts_out) {
        pos.resize(Eigen::Index(R) * n_dst, 3);
        edges.resize(Eigen::Index(R) * (n_dst + 1), 1);
        deltas.resize(Eigen::Index(R) * n_dst, 1);
        ts_out.assign(size_t(R), {});
        for (int i = 0; i < R; ++i) {
          std::vector<double> e(size_t(n_src) + 1);
          std::vector<double> w(static_cast<size_t>(n_src));
          for (int j = 0; j <= n_src; ++j)
            e[size_t(j)] = double(src_edges(Eigen::Index(i) * (n_src + 1) + j, 0));
          for (int j = 0; j < n_src; ++j)
            w[size_t(j)] = double(src_w(Eigen::Index(i) * n_src + j, 0));
          auto ts = pdf_sample(bounds[size_t(i)], e, w, n_dst, rng);
          auto te = detail::edges_around(ts, bounds[size_t(i)].t_near,
                                         bounds[size_t(i)].t_far);
          for (int j = 0; j <= n_dst; ++j)
            edges(Eigen::Index(i) * (n_dst + 1) + j, 0) = T(te[size_t(j)]);
          for (int j = 0; j < n_dst; ++j) {
            Vec3 p = b.rays[size_t(i)].o + ts[size_t(j)] * b.rays[size_t(i)].u;
            for (int a = 0; a < 3; ++a) pos(Eigen::Index(i) * n_dst + j, a) = p[a];
            deltas(Eigen::Index(i) * n_dst + j, 0) = T(te[size_t(j) + 1] - te[size_t(j)]);
          }
          ts_out[size_t(i)] = std::move(ts);
        }
      };

      Mat<double> pos1;
      Mat<T> p1_edges, delta1;
      std::vector<std::vector<double>> ts1;
      resample(p0_edges, w0.val(), n0, n1, pos1, p1_edges, delta1, ts1);
      Var<T> sigma1 = prop1_->eval_density(tape, pos1);
      Var<T> w1 = transmittance_weights(tape, alpha_from_density(tape, sigma1, delta1), n1);

      // final volumetric samples
      Mat<double> posv;
      Mat<T> v_edges, deltav;
      std::vector<std::vector<double>> tsv;
      resample(p1_edges, w1.val(), n1, nv, posv, v_edges, deltav, tsv);
      Mat<double> dirsv(Eigen::Index(R) * nv, 3);
      Mat<T> zv(Eigen::Index(R) * nv, 1);
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < nv; ++j) {
          for (int a = 0; a < 3; ++a)
            dirsv(Eigen::Index(i) * nv + j, a) = b.rays[size_t(i)].u[a];
          zv(Eigen::Index(i) * nv + j, 0) = T(tsv[size_t(i)][size_t(j)]);
        }

      auto out = vol_->eval(tape, posv, dirsv);
      Var<T> wv = transmittance_weights(tape, alpha_from_density(tape, out.sigma, deltav), nv);

      Mat<double> ray_dirs(R, 3);
      for (int i = 0; i < R; ++i)
        for (int a = 0; a < 3; ++a) ray_dirs(i, a) = b.rays[size_t(i)].u[a];
      Var<T> sky_color = sky_->eval(tape, ray_dirs);
      auto rend = composite(tape, wv, out.color, zv, nv, sky_color);

      for (int i = 0; i < R; ++i) vol_depth[size_t(i)] = double(rend.depth.val()(i, 0));

      // losses (Eq. 10 side)
      Mat<T> gt = b.gt_rgb.template cast<T>();
      LossTerms<T> terms;
      Var<T> l1 = tape.mean(tape.abs(tape.sub(rend.color, tape.constant(gt))));
      if (b.n_patch_rays >= 64) {
        Var<T> patch_pred = tape.slice_rows(rend.color, 0, b.n_patch_rays);
        Mat<T> patch_gt = gt.topRows(b.n_patch_rays);
        terms.rgb_v = tape.add(
            l1, tape.scale(dssim_patches(tape, patch_pred, patch_gt), T(0.2)));
      } else {
        terms.rgb_v = l1;
      }
      terms.sky_v = sky_loss(tape, rend.acc, b.sky);

      // distortion on bounds-normalized coordinates
      Mat<T> s_mid(Eigen::Index(R) * nv, 1), s_ds(Eigen::Index(R) * nv, 1);
      for (int i = 0; i < R; ++i) {
        double lo = bounds[size_t(i)].t_near;
        double span = bounds[size_t(i)].t_far - lo;
        for (int j = 0; j < nv; ++j) {
          s_mid(Eigen::Index(i) * nv + j, 0) = T((tsv[size_t(i)][size_t(j)] - lo) / span);
          s_ds(Eigen::Index(i) * nv + j, 0) =
              T(double(deltav(Eigen::Index(i) * nv + j, 0)) / span);
        }
      }
      terms.dist_v = distortion_loss(tape, wv, s_mid, s_ds, nv);

      // composited semantic logits
      Var<T> sem_comp = tape.seg_sum(tape.colwise_scale(out.sem, wv), nv);
      terms.sem = semantic_loss(tape, sem_comp, b.sem);

      // volumetric normal proxy at each ray's max-weight sample (non-sky rays)
      {
        std::vector<uint8_t> gate(size_t(R), 0);
        Mat<double> max_pos(R, 3);
        for (int i = 0; i < R; ++i) {
          int best = 0;
          for (int j = 1; j < nv; ++j)
            if (wv.val()(Eigen::Index(i) * nv + j, 0) >
                wv.val()(Eigen::Index(i) * nv + best, 0))
              best = j;
          for (int a = 0; a < 3; ++a)
            max_pos(i, a) = posv(Eigen::Index(i) * nv + best, a);
          gate[size_t(i)] = b.sky[size_t(i)] ? 0 : 1;
        }
        auto dg = vol_->eval_density_gradient(tape, max_pos);
        Mat<T> gtn = b.gt_normal.template cast<T>();
        terms.normal_v = normal_loss_u(tape, tape.neg(dg.grad_pre), gtn, gate);
      }

      // proposal bound losses against the detached field weights
      Mat<T> wv_det = wv.val(), ve = v_edges;
      Var<T> lp = tape.add(
          proposal_loss(tape, w0, p0_edges, wv_det, ve, n0, nv),
          proposal_loss(tape, w1, p1_edges, wv_det, ve, n1, nv));

      auto asm_v = assemble_losses(tape, terms, weights_, stage, first_epoch);
      Var<T> total = tape.add(asm_v.total_v, lp);
      report.terms.insert(asm_v.report.terms.begin(), asm_v.report.terms.end());
      report.terms["proposal"] = double(lp.val()(0, 0));
      report.total_v = double(total.val()(0, 0));

      store_v_.zero_grad();
      store_p_.zero_grad();
      tape.backward(total);
      return true;
    } catch (const std::runtime_error&) {
      store_v_.zero_grad();
      store_p_.zero_grad();
      report.terms["abort_v"] = 1.0;
      return false;
    }
  }

  bool sdf_pass(const RayBatch& b, const std::vector<double>& mesh_depth,
                const std::vector<double>& mu_d, const std::vector<double>& mu_c,
                const std::vector<double>& vol_depth, Stage stage, bool first_epoch,
                int epoch, int step, LossReport& report) {
    const int R = b.size();
    const SampleBudget sb = budget();
    CounterRng rng(cfg_.seed, 3000 + uint64_t(epoch), uint64_t(step), 2);

    std::vector<SamplingBounds> bounds(static_cast<size_t>(R));
    for (int i = 0; i < R; ++i) {
      const Ray& r = b.rays[size_t(i)];
      bounds[size_t(i)] =
          cfg_.ablation_disable_grs
              ? SamplingBounds{r.t_near, r.t_far, GrsBranch::kFallbackFull}
              : sdf_grs_bounds(r, mu_d[size_t(i)], mesh_depth[size_t(i)],
                               vol_depth[size_t(i)], delta_, tau_d_);
    }

    // section points per ray
    const int n_pts = (stage == Stage::kRefine)
                          ? sb.refine_sdf_coarse + sb.refine_sdf_fine
                          : sb.sdf;
    const int n_bins = n_pts - 1;
    std::vector<std::vector<double>> ts(static_cast<size_t>(R));
    if (stage == Stage::kRefine) {
      for (int i = 0; i < R; ++i) {
        double lo = bounds[size_t(i)].t_near, hi = bounds[size_t(i)].t_far;
        // coarse uniform sections, then PDF weights directly from the field
        int nc = sb.refine_sdf_coarse, nf = sb.refine_sdf_fine;
        std::vector<double> coarse(static_cast<size_t>(nc));
        for (int j = 0; j < nc; ++j)
          coarse[size_t(j)] = lo + (hi - lo) * (j + rng.uniform()) / nc;
        Mat<double> cpos(nc, 3);
        for (int j = 0; j < nc; ++j) {
          Vec3 p = b.rays[size_t(i)].o + coarse[size_t(j)] * b.rays[size_t(i)].u;
          for (int a = 0; a < 3; ++a) cpos(j, a) = p[a];
        }
        Mat<double> fvals = eval_sdf_values(cpos);
        double s = sdf_->scale_s_value();
        std::vector<double> alpha(size_t(nc) - 1);
        for (int j = 0; j + 1 < nc; ++j) {
          double la = detail::logsig(s * fvals(j, 0));
          double lb = detail::logsig(s * fvals(j + 1, 0));
          alpha[size_t(j)] = (la < -708.0) ? 0.0 : std::max(1.0 - std::exp(lb - la), 0.0);
        }
        auto wc = detail::weights_from_alpha(alpha);
        auto fine = pdf_sample(bounds[size_t(i)], coarse, wc, nf, rng);
        auto& all = ts[size_t(i)];
        all = coarse;
        all.insert(all.end(), fine.begin(), fine.end());
        std::sort(all.begin(), all.end());
        for (size_t k = 1; k < all.size(); ++k)
          if (all[k] <= all[k - 1])
            all[k] = std::nextafter(all[k - 1], std::numeric_limits<double>::infinity());
      }
    } else {
      // initial stage: the proposal networks pick the sections within the
      // guided shell. Values only, on a throwaway tape: the proposals are
      // trained exclusively from the volumetric pass, here they just tell the
      // SDF where along each ray the surface is likely to sit.
      Tape<T> ptape;
      const int n0 = sb.proposal0, n1 = sb.proposal1;
      Mat<double> pos0(Eigen::Index(R) * n0, 3);
      Mat<T> delta0(Eigen::Index(R) * n0, 1);
      std::vector<std::vector<double>> e0(static_cast<size_t>(R));
      for (int i = 0; i < R; ++i) {
        double lo = bounds[size_t(i)].t_near, hi = bounds[size_t(i)].t_far;
        auto& e = e0[size_t(i)];
        e.resize(size_t(n0) + 1);
        for (int j = 0; j <= n0; ++j) e[size_t(j)] = lo + (hi - lo) * double(j) / n0;
        for (int j = 0; j < n0; ++j) {
          double t = lo + (hi - lo) * (j + 0.5) / n0;
          Vec3 p = b.rays[size_t(i)].o + t * b.rays[size_t(i)].u;
          for (int a = 0; a < 3; ++a) pos0(Eigen::Index(i) * n0 + j, a) = p[a];
          delta0(Eigen::Index(i) * n0 + j, 0) = T((hi - lo) / n0);
        }
      }
      Mat<T> w0 = transmittance_weights(
                      ptape,
                      alpha_from_density(ptape, prop0_->eval_density(ptape, pos0), delta0),
                      n0)
                      .val();

      Mat<double> pos1(Eigen::Index(R) * n1, 3);
      Mat<T> delta1(Eigen::Index(R) * n1, 1);
      std::vector<std::vector<double>> e1(static_cast<size_t>(R));
      for (int i = 0; i < R; ++i) {
        std::vector<double> w(static_cast<size_t>(n0));
        for (int j = 0; j < n0; ++j) w[size_t(j)] = double(w0(Eigen::Index(i) * n0 + j, 0));
        auto t1 = pdf_sample(bounds[size_t(i)], e0[size_t(i)], w, n1, rng);
        e1[size_t(i)] = detail::edges_around(t1, bounds[size_t(i)].t_near,
                                             bounds[size_t(i)].t_far);
        for (int j = 0; j < n1; ++j) {
          Vec3 p = b.rays[size_t(i)].o + t1[size_t(j)] * b.rays[size_t(i)].u;
          for (int a = 0; a < 3; ++a) pos1(Eigen::Index(i) * n1 + j, a) = p[a];
          delta1(Eigen::Index(i) * n1 + j, 0) =
              T(e1[size_t(i)][size_t(j) + 1] - e1[size_t(i)][size_t(j)]);
        }
      }
      Mat<T> w1 = transmittance_weights(
                      ptape,
                      alpha_from_density(ptape, prop1_->eval_density(ptape, pos1), delta1),
                      n1)
                      .val();

      for (int i = 0; i < R; ++i) {
        std::vector<double> w(static_cast<size_t>(n1));
        for (int j = 0; j < n1; ++j) w[size_t(j)] = double(w1(Eigen::Index(i) * n1 + j, 0));
        auto& all = ts[size_t(i)];
        all = pdf_sample(bounds[size_t(i)], e1[size_t(i)], w, n_pts, rng);
        for (size_t k = 1; k < all.size(); ++k)
          if (all[k] <= all[k - 1])
            all[k] = std::nextafter(all[k - 1], std::numeric_limits<double>::infinity());
      }
    }

    Tape<T> tape;
    try {
      Mat<double> pos(Eigen::Index(R) * n_pts, 3);
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < n_pts; ++j) {
          Vec3 p = b.rays[size_t(i)].o + ts[size_t(i)][size_t(j)] * b.rays[size_t(i)].u;
          for (int a = 0; a < 3; ++a) pos(Eigen::Index(i) * n_pts + j, a) = p[a];
        }

      auto out = sdf_->eval(tape, pos, /*want_grad=*/true);
      Var<T> s = sdf_->scale_s(tape);
      Var<T> alpha = alpha_from_sdf(tape, out.f, s, n_bins);
      Var<T> w = transmittance_weights(tape, alpha, n_bins);

      // per-bin color from the left section point's features
      Var<T> feat_bins = tape.seg_slice(out.feat, n_pts, 0, n_bins);
      Mat<double> dirs_bins(Eigen::Index(R) * n_bins, 3);
      Mat<T> z(Eigen::Index(R) * n_bins, 1);
      for (int i = 0; i < R; ++i)
        for (int j = 0; j < n_bins; ++j) {
          for (int a = 0; a < 3; ++a)
            dirs_bins(Eigen::Index(i) * n_bins + j, a) = b.rays[size_t(i)].u[a];
          z(Eigen::Index(i) * n_bins + j, 0) =
              T(0.5 * (ts[size_t(i)][size_t(j)] + ts[size_t(i)][size_t(j) + 1]));
        }
      Var<T> color = sdf_->eval_color(tape, feat_bins, dirs_bins);

      // No sky fill here: residual-transmittance color would let a transparent
      // SDF inherit the sky head's (initially scene-mean) colors and kill the
      // photometric pressure to form a surface. Non-sky rays must earn their
      // color from SDF opacity; sky rays are handled by the sky loss alone and
      // are excluded from the photometric term below.
      auto rend = composite(tape, w, color, z, n_bins);

      // gates: regularizers apply on photometrically certain, non-sky rays
      std::vector<uint8_t> gate(size_t(R), 0);
      int n_certain = 0;
      for (int i = 0; i < R; ++i) {
        // during warm-up the mesh snapshot is absent or meaningless, so the
        // relaxation machinery stays inactive (regularize everything)
        bool warmup = !has_mesh_ || epoch < cfg_.uncertainty_warmup_epochs;
        bool certain = (cfg_.ablation_disable_relaxation || warmup)
                           ? true
                           : certainty_indicator(mu_c[size_t(i)], cfg_.uncertainty_tau_c);
        gate[size_t(i)] = (!b.sky[size_t(i)] && certain) ? 1 : 0;
        if (certain && !b.sky[size_t(i)]) ++n_certain;
      }

      LossTerms<T> terms;
      Mat<T> gt = b.gt_rgb.template cast<T>();
      int n_nonsky_rgb = 0;
      Mat<T> nonsky(R, 1);
      for (int i = 0; i < R; ++i) {
        nonsky(i, 0) = b.sky[size_t(i)] ? T(0) : T(1);
        if (!b.sky[size_t(i)]) ++n_nonsky_rgb;
      }
      if (n_nonsky_rgb > 0) {
        Var<T> absdiff = tape.abs(tape.sub(rend.color, tape.constant(gt)));
        Var<T> masked = tape.colwise_scale(absdiff, tape.constant(nonsky));
        terms.rgb_f = tape.scale(tape.sum(masked), T(1.0 / (3.0 * n_nonsky_rgb)));
      } else {
        terms.rgb_f = tape.constant_scalar(T(0));
      }
      terms.sky_f = sky_loss(tape, rend.acc, b.sky);

      Mat<T> s_mid(Eigen::Index(R) * n_bins, 1), s_ds(Eigen::Index(R) * n_bins, 1);
      for (int i = 0; i < R; ++i) {
        double lo = bounds[size_t(i)].t_near;
        double span = bounds[size_t(i)].t_far - lo;
        for (int j = 0; j < n_bins; ++j) {
          s_mid(Eigen::Index(i) * n_bins + j, 0) =
              T((double(z(Eigen::Index(i) * n_bins + j, 0)) - lo) / span);
          s_ds(Eigen::Index(i) * n_bins + j, 0) =
              T((ts[size_t(i)][size_t(j) + 1] - ts[size_t(i)][size_t(j)]) / span);
        }
      }
      terms.dist_f = distortion_loss(tape, w, s_mid, s_ds, n_bins);

      // gated Eikonal over every section sample of gated rays
      terms.eik_u = eikonal_loss_u(tape, out.grad, gate, n_pts);

      // plus ungated anchors drawn uniformly over the box: once guidance
      // narrows the shells no ray sample lands elsewhere, and without these
      // the field stops being an SDF away from the surface (spurious zero
      // crossings at mesh extraction)
      {
        const int K = 64;
        Mat<double> up(K, 3);
        for (int k = 0; k < K; ++k)
          for (int a = 0; a < 3; ++a) up(k, a) = rng.uniform(box_.lo[a], box_.hi[a]);
        auto ug = sdf_->eval(tape, up, /*want_grad=*/true);
        std::vector<uint8_t> all_on(K, 1);
        terms.eik_u = tape.add(terms.eik_u, eikonal_loss_u(tape, ug.grad, all_on, 1));
      }

      // gated normal term at the max-weight section point per ray
      {
        Mat<double> max_pos(R, 3);
        for (int i = 0; i < R; ++i) {
          int best = 0;
          for (int j = 1; j < n_bins; ++j)
            if (w.val()(Eigen::Index(i) * n_bins + j, 0) >
                w.val()(Eigen::Index(i) * n_bins + best, 0))
              best = j;
          for (int a = 0; a < 3; ++a)
            max_pos(i, a) = pos(Eigen::Index(i) * n_pts + best, a);
        }
        auto go = sdf_->eval(tape, max_pos, /*want_grad=*/true);
        int skipped = 0;
        Mat<T> gtn = b.gt_normal.template cast<T>();
        terms.normal_u = normal_loss_u(tape, go.grad, gtn, gate, &skipped);
        report.terms["normal_skipped"] = double(skipped);
      }

      auto asm_f = assemble_losses(tape, terms, weights_, stage, first_epoch);
      for (const auto& [k, v] : asm_f.report.terms) report.terms[k] = v;
      report.total_f = asm_f.report.total_f;
      report.terms["certain_frac"] =
          R > 0 ? double(n_certain) / double(R) : 0.0;
      int n_certain_branch = 0, n_nonsky = 0;
      for (int i = 0; i < R; ++i) {
        if (b.sky[size_t(i)]) continue;
        ++n_nonsky;
        if (bounds[size_t(i)].branch == GrsBranch::kCertainMesh) ++n_certain_branch;
      }
      report.terms["sdf_certain_branch_frac"] =
          n_nonsky > 0 ? double(n_certain_branch) / double(n_nonsky) : 0.0;

      store_f_.zero_grad();
      tape.backward(asm_f.total_f);
      return true;
    } catch (const std::runtime_error&) {
      store_f_.zero_grad();
      report.terms["abort_f"] = 1.0;
      return false;
    }
  }

  void render_chunk(const std::vector<Ray>& rays, CounterRng& rng,
                    RenderedImage& img) const {
    const int R = int(rays.size());
    const SampleBudget sb = budget();
    const int n0 = sb.proposal0, nv = sb.volumetric;
    Tape<T> tape;

    Mat<double> pos0(Eigen::Index(R) * n0, 3);
    Mat<T> delta0(Eigen::Index(R) * n0, 1);
    std::vector<std::vector<double>> e0(static_cast<size_t>(R));
    for (int i = 0; i < R; ++i) {
      double lo = rays[size_t(i)].t_near, hi = rays[size_t(i)].t_far;
      auto& e = e0[size_t(i)];
      e.resize(size_t(n0) + 1);
      for (int j = 0; j <= n0; ++j) e[size_t(j)] = lo + (hi - lo) * double(j) / n0;
      for (int j = 0; j < n0; ++j) {
        Vec3 p = rays[size_t(i)].o + (0.5 * (e[size_t(j)] + e[size_t(j) + 1])) *
                                         rays[size_t(i)].u;
        for (int a = 0; a < 3; ++a) pos0(Eigen::Index(i) * n0 + j, a) = p[a];
        delta0(Eigen::Index(i) * n0 + j, 0) = T(e[size_t(j) + 1] - e[size_t(j)]);
      }
    }
    Var<T> w0 = transmittance_weights(
        tape, alpha_from_density(tape, prop0_->eval_density(tape, pos0), delta0), n0);

    Mat<double> posv(Eigen::Index(R) * nv, 3), dirsv(Eigen::Index(R) * nv, 3);
    Mat<T> deltav(Eigen::Index(R) * nv, 1), zv(Eigen::Index(R) * nv, 1);
    for (int i = 0; i < R; ++i) {
      SamplingBounds bd{rays[size_t(i)].t_near, rays[size_t(i)].t_far,
                        GrsBranch::kFallbackFull};
      std::vector<double> w(static_cast<size_t>(n0));
      for (int j = 0; j < n0; ++j) w[size_t(j)] = double(w0.val()(Eigen::Index(i) * n0 + j, 0));
      auto ts = pdf_sample(bd, e0[size_t(i)], w, nv, rng);
      auto te = detail::edges_around(ts, bd.t_near, bd.t_far);
      for (int j = 0; j < nv; ++j) {
        Vec3 p = rays[size_t(i)].o + ts[size_t(j)] * rays[size_t(i)].u;
        for (int a = 0; a < 3; ++a) {
          posv(Eigen::Index(i) * nv + j, a) = p[a];
          dirsv(Eigen::Index(i) * nv + j, a) = rays[size_t(i)].u[a];
        }
        deltav(Eigen::Index(i) * nv + j, 0) = T(te[size_t(j) + 1] - te[size_t(j)]);
        zv(Eigen::Index(i) * nv + j, 0) = T(ts[size_t(j)]);
      }
    }
    auto out = vol_->eval(tape, posv, dirsv);
    Var<T> wv = transmittance_weights(
        tape, alpha_from_density(tape, out.sigma, deltav), nv);
    Mat<double> ray_dirs(R, 3);
    for (int i = 0; i < R; ++i)
      for (int a = 0; a < 3; ++a) ray_dirs(i, a) = rays[size_t(i)].u[a];
    Var<T> sky_color = sky_->eval(tape, ray_dirs);
    auto rend = composite(tape, wv, out.color, zv, nv, sky_color);

    for (int i = 0; i < R; ++i) {
      int px = rays[size_t(i)].pixel;
      for (int c = 0; c < 3; ++c)
        img.rgb[size_t(px) * 3 + size_t(c)] =
            float(std::clamp(double(rend.color.val()(i, c)), 0.0, 1.0));
      img.depth[size_t(px)] = double(rend.depth.val()(i, 0));
    }
  }

  static double grad_norm(const ParameterStore<T>& store) {
    double s = 0;
    for (const auto& p : store.tensors()) s += p->grad.squaredNorm();
    return std::sqrt(s);
  }

  RunConfig cfg_;
  const Dataset* ds_;
  Aabb box_;
  ParameterStore<T> store_v_, store_p_, store_f_;
  std::unique_ptr<VolumetricField<T>> vol_;
  std::unique_ptr<SkyHead<T>> sky_;
  std::unique_ptr<ProposalField<T>> prop0_, prop1_;
  std::unique_ptr<SdfField<T>> sdf_;
  SceneMesh mesh_;
  bool has_mesh_ = false;
  double tau_d_ = 0.1;
  double delta_ = 1.0, delta_min_ = 0.1;
  ThresholdPolicy policy_;
  LossWeights weights_;
  int epoch_ = 0;
  int64_t global_step_ = 0;
  int abort_streak_ = 0;
  std::vector<double> last_mu_d_, last_mu_c_;
};

// ---------------------------------------------------------------------------
// Full training loop: per-epoch mesh snapshot swap, stage switch, NDJSON log,
// per-epoch checkpoints, final mesh + checkpoint.

struct TrainOutputs {
  std::string final_checkpoint;
  std::string final_mesh;
  uint64_t parameter_hash = 0;
};

template <class T>
TrainOutputs run_training(Trainer<T>& trainer, const std::string& out_dir,
                          std::ostream* log = nullptr, int start_epoch = 0,
                          const std::string& uncertainty_csv = "") {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const RunConfig& cfg = trainer.config();
  int steps = trainer.steps_per_epoch();

  std::ofstream csv;
  if (!uncertainty_csv.empty()) {
    csv.open(uncertainty_csv);
    if (!csv) throw IoError("cannot open for write: " + uncertainty_csv);
    uncertainty_csv_header(csv);
  }

  for (int epoch = start_epoch; epoch < cfg.train_epochs; ++epoch) {
    trainer.begin_epoch(epoch);
    for (int step = 0; step < steps; ++step) {
      RayBatch batch = trainer.sample_batch(epoch, step);
      LossReport rep = trainer.train_step(batch, epoch, step);
      if (log) *log << rep.to_ndjson(int(trainer.global_step())) << "\n";
    }
    if (csv.is_open())
      uncertainty_csv_row(csv, epoch, trainer.last_mu_d(), trainer.last_mu_c(),
                          trainer.tau_d());
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_%04d.jnrs", epoch);
    trainer.save_checkpoint((fs::path(out_dir) / name).string());
  }

  trainer.refresh_mesh_snapshot(cfg.train_mesh_resolution);
  TrainOutputs out;
  out.final_mesh = (fs::path(out_dir) / "mesh.ply").string();
  export_ply(trainer.mesh_snapshot(), out.final_mesh);
  out.final_checkpoint = (fs::path(out_dir) / "final.jnrs").string();
  trainer.save_checkpoint(out.final_checkpoint);
  out.parameter_hash = trainer.parameter_hash();
  return out;
}

}  // namespace jneus
