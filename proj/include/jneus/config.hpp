#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "jneus/core.hpp"

namespace jneus {

// Every tunable in one flat struct; keys are dotted lowercase, environment
// overrides use the JNEUS_ prefix with dots mapped to underscores
// (train.epochs -> JNEUS_TRAIN_EPOCHS). Precedence: flags > env > file >
// defaults.
struct RunConfig {
  uint64_t seed = 1;

  std::string scene_preset = "mini-street";
  double scene_extent = 50.0;
  int scene_frames = 24;
  int scene_width = 160;
  int scene_height = 120;
  double scene_step = 1.5;
  int scene_lidar_azimuth = 256;
  int scene_lidar_elevation = 12;

  int train_epochs = 12;
  int train_rays_per_batch = 4096;
  int train_steps_per_epoch = 0;  // 0 = one full pixel pass per epoch
  double train_refine_fraction = 0.25;  // final fraction of epochs in refinement
  double train_lr_volumetric = 5e-3;
  double train_lr_sdf = 1e-3;
  double train_lr_proposal = 5e-3;
  int train_mesh_resolution = 128;
  double train_scale_growth = 1.5;  // per-epoch multiplier on SDF sharpness s

  int sampling_proposal0 = 128;
  int sampling_proposal1 = 96;
  int sampling_volumetric = 48;
  int sampling_sdf = 24;
  int sampling_refine_sdf_coarse = 32;
  int sampling_refine_sdf_fine = 28;

  double loss_sky = 0.01;
  double loss_distortion = 0.001;
  double loss_normal = 0.01;
  double loss_semantic = 0.001;
  double loss_eikonal = 0.1;
  double loss_refine_distortion = 0.1;
  double loss_refine_normal = 0.05;
  double loss_early_factor = 0.1;
  double loss_tv_depth = 0.0;
  bool loss_gate_f_normal = true;

  double uncertainty_tau_c = 0.1;
  int uncertainty_warmup_epochs = 2;
  double uncertainty_tau_d_init = 0.1;
  double uncertainty_gamma_up = 1.05;
  double uncertainty_gamma_down = 0.95;
  double uncertainty_rho_high = 1.0;
  double uncertainty_rho_low = 0.5;

  bool ablation_disable_relaxation = false;  // indicator forced to 1 everywhere
  bool ablation_disable_grs = false;         // fallback bounds always

  // Enumerates (key, typed pointer) pairs; single source of truth for
  // parsing, env lookup, dumping and hashing.
  template <class F>
  static void visit(RunConfig& c, F&& f) {
    f("seed", &c.seed);
    f("scene.preset", &c.scene_preset);
    f("scene.extent", &c.scene_extent);
    f("scene.frames", &c.scene_frames);
    f("scene.width", &c.scene_width);
    f("scene.height", &c.scene_height);
    f("scene.step", &c.scene_step);
    f("scene.lidar_azimuth", &c.scene_lidar_azimuth);
    f("scene.lidar_elevation", &c.scene_lidar_elevation);
    f("train.epochs", &c.train_epochs);
    f("train.rays_per_batch", &c.train_rays_per_batch);
    f("train.steps_per_epoch", &c.train_steps_per_epoch);
    f("train.refine_fraction", &c.train_refine_fraction);
    f("train.lr_volumetric", &c.train_lr_volumetric);
    f("train.lr_sdf", &c.train_lr_sdf);
    f("train.lr_proposal", &c.train_lr_proposal);
    f("train.mesh_resolution", &c.train_mesh_resolution);
    f("train.scale_growth", &c.train_scale_growth);
    f("sampling.proposal0", &c.sampling_proposal0);
    f("sampling.proposal1", &c.sampling_proposal1);
    f("sampling.volumetric", &c.sampling_volumetric);
    f("sampling.sdf", &c.sampling_sdf);
    f("sampling.refine_sdf_coarse", &c.sampling_refine_sdf_coarse);
    f("sampling.refine_sdf_fine", &c.sampling_refine_sdf_fine);
    f("loss.sky", &c.loss_sky);
    f("loss.distortion", &c.loss_distortion);
    f("loss.normal", &c.loss_normal);
    f("loss.semantic", &c.loss_semantic);
    f("loss.eikonal", &c.loss_eikonal);
    f("loss.refine_distortion", &c.loss_refine_distortion);
    f("loss.refine_normal", &c.loss_refine_normal);
    f("loss.early_factor", &c.loss_early_factor);
    f("loss.tv_depth", &c.loss_tv_depth);
    f("loss.gate_f_normal", &c.loss_gate_f_normal);
    f("uncertainty.tau_c", &c.uncertainty_tau_c);
    f("uncertainty.warmup_epochs", &c.uncertainty_warmup_epochs);
    f("uncertainty.tau_d_init", &c.uncertainty_tau_d_init);
    f("uncertainty.gamma_up", &c.uncertainty_gamma_up);
    f("uncertainty.gamma_down", &c.uncertainty_gamma_down);
    f("uncertainty.rho_high", &c.uncertainty_rho_high);
    f("uncertainty.rho_low", &c.uncertainty_rho_low);
    f("ablation.disable_relaxation", &c.ablation_disable_relaxation);
    f("ablation.disable_grs", &c.ablation_disable_grs);
  }
};

namespace detail {

inline void set_value(const std::string& key, int* p, const std::string& s) {
  size_t pos = 0;
  int v;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + s + "'");
  }
  if (pos != s.size())
    throw ConfigError("config key '" + key + "': expected integer, got '" + s + "'");
  *p = v;
}

inline void set_value(const std::string& key, uint64_t* p, const std::string& s) {
  size_t pos = 0;
  unsigned long long v;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + s + "'");
  }
  if (pos != s.size())
    throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + s + "'");
  *p = v;
}

inline void set_value(const std::string& key, double* p, const std::string& s) {
  size_t pos = 0;
  double v;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + s + "'");
  }
  if (pos != s.size())
    throw ConfigError("config key '" + key + "': expected number, got '" + s + "'");
  *p = v;
}

inline void set_value(const std::string& key, bool* p, const std::string& s) {
  if (s == "true" || s == "1")
    *p = true;
  else if (s == "false" || s == "0")
    *p = false;
  else
    throw ConfigError("config key '" + key + "': expected bool, got '" + s + "'");
}

inline void set_value(const std::string&, std::string* p, const std::string& s) {
  *p = s;
}

inline std::string value_string(const int* p) { return std::to_string(*p); }
inline std::string value_string(const uint64_t* p) { return std::to_string(*p); }
inline std::string value_string(const bool* p) { return *p ? "true" : "false"; }
inline std::string value_string(const std::string* p) { return *p; }
inline std::string value_string(const double* p) {
  std::ostringstream os;
  os.precision(17);
  os << *p;
  return os.str();
}

inline std::string json_scalar_string(const std::string& key, const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number_float()) {
    std::ostringstream os;
    os.precision(17);
    os << v.get<double>();
    return os.str();
  }
  throw ConfigError("config key '" + key + "': expected a scalar value");
}

inline void flatten_json(const nlohmann::json& j, const std::string& prefix,
                         std::map<std::string, std::string>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) {
      std::string key = prefix.empty() ? k : prefix + "." + k;
      if (v.is_object())
        flatten_json(v, key, out);
      else
        out[key] = json_scalar_string(key, v);
    }
  } else if (!j.is_null()) {
    throw ConfigError("config file must be a JSON object");
  }
}

}  // namespace detail

inline std::string env_name_for_key(const std::string& key) {
  std::string name = "JNEUS_";
  for (char c : key) name += (c == '.') ? '_' : char(std::toupper(uint8_t(c)));
  return name;
}

inline void apply_overrides(RunConfig& cfg,
                            const std::map<std::string, std::string>& kv) {
  std::map<std::string, std::string> pending = kv;
  RunConfig::visit(cfg, [&](const char* key, auto* field) {
    auto it = pending.find(key);
    if (it == pending.end()) return;
    detail::set_value(key, field, it->second);
    pending.erase(it);
  });
  if (!pending.empty())
    throw ConfigError("unknown config key '" + pending.begin()->first + "'");
}

// env: either a captured map (for tests) or live getenv lookups keyed by the
// registered key set. Unknown keys in the file or flags are rejected.
inline RunConfig parse_config(const std::string& file_path,
                              const std::map<std::string, std::string>& env,
                              const std::map<std::string, std::string>& flags) {
  RunConfig cfg;

  if (!file_path.empty()) {
    std::ifstream is(file_path);
    if (!is) throw ConfigError("config file not found: " + file_path);
    nlohmann::json j;
    try {
      std::string text((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
      j = text.empty() ? nlohmann::json(nullptr) : nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    std::map<std::string, std::string> file_kv;
    detail::flatten_json(j, "", file_kv);
    apply_overrides(cfg, file_kv);
  }

  std::map<std::string, std::string> env_kv;
  RunConfig::visit(cfg, [&](const char* key, auto*) {
    auto it = env.find(env_name_for_key(key));
    if (it != env.end()) env_kv[key] = it->second;
  });
  // reject JNEUS_-prefixed variables that match no key
  for (const auto& [name, _] : env) {
    if (name.rfind("JNEUS_", 0) != 0) continue;
    bool known = false;
    RunConfig::visit(cfg, [&](const char* key, auto*) {
      if (env_name_for_key(key) == name) known = true;
    });
    if (!known) throw ConfigError("unknown config key '" + name + "'");
  }
  apply_overrides(cfg, env_kv);
  apply_overrides(cfg, flags);
  return cfg;
}

inline std::map<std::string, std::string> capture_env(char** envp) {
  std::map<std::string, std::string> env;
  for (char** e = envp; e && *e; ++e) {
    std::string s(*e);
    if (s.rfind("JNEUS_", 0) != 0) continue;
    size_t eq = s.find('=');
    if (eq != std::string::npos) env[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return env;
}

// Fully resolved key=value echo, sorted, one per line.
inline std::string dump_config(const RunConfig& cfg) {
  std::map<std::string, std::string> kv;
  RunConfig::visit(const_cast<RunConfig&>(cfg), [&](const char* key, auto* field) {
    kv[key] = detail::value_string(field);
  });
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

// Hash of the resolved config; sorted dump makes it key-order independent.
inline uint64_t config_hash(const RunConfig& cfg) { return fnv1a(dump_config(cfg)); }

}  // namespace jneus
