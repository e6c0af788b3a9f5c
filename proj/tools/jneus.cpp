#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "jneus/trainer.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace jneus;

namespace {

// Every registered config key becomes a flag: train.epochs -> --train-epochs.
// Provided flags land in `flags` keyed by the dotted name so parse_config can
// apply its usual precedence (flags > env > file > defaults).
void add_config_flags(CLI::App* cmd, std::map<std::string, std::string>& flags,
                      std::string& config_file) {
  cmd->add_option("--config", config_file, "JSON config file");
  RunConfig defaults;
  RunConfig::visit(defaults, [&](const char* key, auto* field) {
    std::string name = "--";
    for (const char* c = key; *c; ++c) name += (*c == '.') ? '-' : *c;
    std::string desc = std::string(key) + " (default " +
                       jneus::detail::value_string(field) + ", env " +
                       env_name_for_key(key) + ")";
    std::string k = key;
    cmd->add_option_function<std::string>(
           name, [k, &flags](const std::string& v) { flags[k] = v; }, desc)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  });
}

RunConfig resolve_config(const std::string& config_file,
                         const std::map<std::string, std::string>& flags) {
  return parse_config(config_file, capture_env(environ), flags);
}

SyntheticScene scene_for(const RunConfig& cfg) {
  if (cfg.scene_preset != "mini-street")
    throw ConfigError("unknown scene preset '" + cfg.scene_preset + "'");
  return mini_street(cfg.scene_extent);
}

Dataset build_dataset(const RunConfig& cfg) {
  SyntheticScene scene = scene_for(cfg);
  TrajectoryParams tp;
  tp.n_frames = cfg.scene_frames;
  tp.width = cfg.scene_width;
  tp.height = cfg.scene_height;
  tp.step = cfg.scene_step;
  tp.start = Vec3(0, 0, 0.03 * cfg.scene_extent);

  Dataset ds;
  ds.box = scene.box;
  ds.cams = generate_trajectory(tp);
  std::vector<Vec3> lidar_origins;
  for (size_t i = 0; i < ds.cams.size(); ++i) {
    ds.frames.push_back(render_ground_truth(scene, ds.cams[i]));
    if (i % 3 == 0) lidar_origins.push_back(ds.cams[i].origin);
  }
  LidarPattern pat;
  pat.n_azimuth = cfg.scene_lidar_azimuth;
  pat.n_elevation = cfg.scene_lidar_elevation;
  ds.lidar = sample_lidar(scene, lidar_origins, pat);
  return ds;
}

void maybe_load(Trainer<float>& tr, const std::string& checkpoint, bool force) {
  if (checkpoint.empty()) return;
  if (!tr.load_checkpoint(checkpoint, force))
    std::cerr << "warning: checkpoint config hash differs from the resolved "
                 "config; loading anyway (--force)\n";
}

int cmd_generate_scene(const RunConfig& cfg, const std::string& out_dir) {
  Dataset ds = build_dataset(cfg);
  write_dataset(ds, out_dir);
  double overlap = mean_trajectory_overlap(ds.cams);
  std::cout << "wrote " << ds.frames.size() << " frames and "
            << ds.lidar.size() << " lidar points to " << out_dir
            << " (frame-to-frame overlap " << overlap << ")\n";
  return 0;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume, bool force,
              const std::string& dump_uncertainty) {
  Dataset ds = load_dataset(data_dir);
  Trainer<float> tr(cfg, ds);
  maybe_load(tr, resume, force);
  int start_epoch = resume.empty() ? 0 : tr.epoch() + 1;

  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "log.ndjson",
                    resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw IoError("cannot open training log in " + out_dir);
  TrainOutputs out = run_training(tr, out_dir, &log, start_epoch, dump_uncertainty);
  std::cout << "final mesh: " << out.final_mesh << "\n"
            << "final checkpoint: " << out.final_checkpoint << "\n"
            << "parameter hash: " << std::hex << out.parameter_hash << std::dec
            << "\n";
  return 0;
}

int cmd_extract_mesh(const RunConfig& cfg, const std::string& data_dir,
                     const std::string& checkpoint, const std::string& out_path,
                     int resolution, bool force) {
  Dataset ds = load_dataset(data_dir);
  Trainer<float> tr(cfg, ds);
  maybe_load(tr, checkpoint, force);
  tr.refresh_mesh_snapshot(resolution > 0 ? resolution : cfg.train_mesh_resolution);
  export_ply(tr.mesh_snapshot(), out_path);
  std::cout << "wrote " << tr.mesh_snapshot().triangles.size() << " triangles to "
            << out_path << "\n";
  return 0;
}

int cmd_render(const RunConfig& cfg, const std::string& data_dir,
               const std::string& checkpoint, const std::string& out_dir, int view,
               bool force) {
  Dataset ds = load_dataset(data_dir);
  Trainer<float> tr(cfg, ds);
  maybe_load(tr, checkpoint, force);
  fs::create_directories(out_dir);

  size_t lo = 0, hi = ds.cams.size();
  if (view >= 0) {
    if (size_t(view) >= ds.cams.size())
      throw ConfigError("--view out of range (dataset has " +
                        std::to_string(ds.cams.size()) + " views)");
    lo = size_t(view);
    hi = lo + 1;
  }
  for (size_t i = lo; i < hi; ++i) {
    auto img = tr.render_view(ds.cams[i]);
    fs::path base = fs::path(out_dir) / ds.cams[i].name;
    write_rgb_png(base.string() + ".png", img.width, img.height, img.rgb);
    std::vector<float> depth(img.depth.begin(), img.depth.end());
    write_float_grid(base.string() + "_depth.bin", img.width, img.height, 1, depth);
    std::cout << "rendered " << ds.cams[i].name << "\n";
  }
  return 0;
}

int cmd_evaluate(const RunConfig& cfg, const std::string& data_dir,
                 const std::string& checkpoint, const std::string& mesh_path,
                 const std::string& out_path, const std::string& error_cloud,
                 int n_views, bool force) {
  Dataset ds = load_dataset(data_dir);

  SceneMesh mesh;
  if (!mesh_path.empty()) {
    mesh = import_ply(mesh_path);
  } else if (!checkpoint.empty()) {
    Trainer<float> tr(cfg, ds);
    maybe_load(tr, checkpoint, force);
    tr.refresh_mesh_snapshot(cfg.train_mesh_resolution);
    mesh = tr.mesh_snapshot();
  } else {
    throw ConfigError("evaluate needs --mesh or --checkpoint");
  }
  mesh.build_bvh();

  GeoReport geo = point_to_mesh(ds.lidar, mesh);
  double thresh = default_precision_threshold(cfg.scene_extent);
  nlohmann::json rep;
  rep["mean_p2m"] = geo.mean_p2m;
  rep["precision"] = precision_at(geo, thresh);
  rep["precision_threshold"] = thresh;
  rep["n_lidar_points"] = ds.lidar.size();
  rep["n_triangles"] = mesh.triangles.size();
  for (const auto& [cls, v] : geo.per_class_mean) rep["per_class_p2m"][cls] = v;

  if (!checkpoint.empty() && n_views > 0) {
    Trainer<float> tr(cfg, ds);
    maybe_load(tr, checkpoint, force);
    double psnr_sum = 0, ssim_sum = 0;
    int n = std::min<int>(n_views, int(ds.cams.size()));
    for (int i = 0; i < n; ++i) {
      auto img = tr.render_view(ds.cams[size_t(i)]);
      auto m = image_metrics(img.rgb, ds.frames[size_t(i)].rgb, img.width, img.height);
      psnr_sum += m.psnr_db;
      ssim_sum += m.ssim;
    }
    rep["psnr_db"] = psnr_sum / n;
    rep["ssim"] = ssim_sum / n;
    rep["n_views_evaluated"] = n;
  }

  if (!error_cloud.empty())
    export_error_cloud(ds.lidar, geo.distances, error_cloud,
                       0.4 * cfg.scene_extent / 50.0);

  std::string text = rep.dump(2);
  if (out_path.empty() || out_path == "-") {
    std::cout << text << "\n";
  } else {
    std::ofstream os(out_path);
    if (!os) throw IoError("cannot open for write: " + out_path);
    os << text << "\n";
    std::cout << "mean point-to-mesh: " << geo.mean_p2m
              << "  precision@" << thresh << ": " << precision_at(geo, thresh);
    if (rep.contains("psnr_db"))
      std::cout << "  psnr: " << double(rep["psnr_db"]) << " dB";
    std::cout << "\nreport written to " << out_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint radiance-SDF reconstruction on synthetic street scenes"};
  app.require_subcommand(1);

  std::string config_file;
  std::map<std::string, std::string> flags;

  // generate-scene
  auto* gen = app.add_subcommand("generate-scene", "synthesize a dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  add_config_flags(gen, flags, config_file);

  // train
  auto* train = app.add_subcommand("train", "train both fields");
  std::string train_data, train_out, train_resume, train_csv;
  bool train_force = false;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "run output directory")->required();
  train->add_option("--resume", train_resume, "checkpoint to resume from");
  train->add_flag("--force", train_force, "load a checkpoint despite a config hash mismatch");
  train->add_option("--dump-uncertainty", train_csv, "per-epoch uncertainty quantile CSV");
  add_config_flags(train, flags, config_file);

  // extract-mesh
  auto* mesh = app.add_subcommand("extract-mesh", "marching-cubes surface from a checkpoint");
  std::string mesh_data, mesh_ckpt, mesh_out;
  int mesh_res = 0;
  bool mesh_force = false;
  mesh->add_option("--data", mesh_data, "dataset directory")->required();
  mesh->add_option("--checkpoint", mesh_ckpt, "checkpoint file")->required();
  mesh->add_option("--out", mesh_out, "output PLY path")->required();
  mesh->add_option("--resolution", mesh_res, "marching-cubes grid resolution");
  mesh->add_flag("--force", mesh_force, "load despite a config hash mismatch");
  add_config_flags(mesh, flags, config_file);

  // render
  auto* render = app.add_subcommand("render", "render dataset views from a checkpoint");
  std::string ren_data, ren_ckpt, ren_out;
  int ren_view = -1;
  bool ren_force = false;
  render->add_option("--data", ren_data, "dataset directory")->required();
  render->add_option("--checkpoint", ren_ckpt, "checkpoint file")->required();
  render->add_option("--out", ren_out, "output image directory")->required();
  render->add_option("--view", ren_view, "render a single view index (default: all)");
  render->add_flag("--force", ren_force, "load despite a config hash mismatch");
  add_config_flags(render, flags, config_file);

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "geometry + image metrics as JSON");
  std::string ev_data, ev_ckpt, ev_mesh, ev_out, ev_cloud;
  int ev_views = 3;
  bool ev_force = false;
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint file");
  eval->add_option("--mesh", ev_mesh, "mesh PLY (overrides --checkpoint for geometry)");
  eval->add_option("--out", ev_out, "report path ('-' for stdout)");
  eval->add_option("--error-cloud", ev_cloud, "error-colored point cloud PLY");
  eval->add_option("--views", ev_views, "number of views for image metrics");
  eval->add_flag("--force", ev_force, "load despite a config hash mismatch");
  add_config_flags(eval, flags, config_file);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad usage is exit code 2, --help stays 0
  }

  try {
    RunConfig cfg = resolve_config(config_file, flags);
    if (gen->parsed()) return cmd_generate_scene(cfg, gen_out);
    if (train->parsed())
      return cmd_train(cfg, train_data, train_out, train_resume, train_force, train_csv);
    if (mesh->parsed())
      return cmd_extract_mesh(cfg, mesh_data, mesh_ckpt, mesh_out, mesh_res, mesh_force);
    if (render->parsed())
      return cmd_render(cfg, ren_data, ren_ckpt, ren_out, ren_view, ren_force);
    if (eval->parsed())
      return cmd_evaluate(cfg, ev_data, ev_ckpt, ev_mesh, ev_out, ev_cloud, ev_views,
                          ev_force);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
