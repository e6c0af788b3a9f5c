#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "jneus/config.hpp"

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;
};

CmdResult run(const std::string& args) {
  std::string cmd = std::string(JNEUS_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  CmdResult r;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  int st = pclose(p);
  r.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

// tiny-scene flags shared by all pipeline tests
const char* kFlags =
    " --scene-extent 10 --scene-frames 2 --scene-width 32 --scene-height 24"
    " --scene-step 1.2 --scene-lidar_azimuth 64 --scene-lidar_elevation 6"
    " --train-epochs 1 --train-rays_per_batch 128 --train-steps_per_epoch 2"
    " --train-mesh_resolution 16 --sampling-proposal0 24 --sampling-proposal1 16"
    " --sampling-volumetric 12 --sampling-sdf 8 --sampling-refine_sdf_coarse 8"
    " --sampling-refine_sdf_fine 6";

std::string work_dir() {
  auto d = fs::temp_directory_path() / "jneus_cli_test";
  fs::create_directories(d);
  return d.string();
}

}  // namespace

TEST_CASE("help lists every subcommand and every config flag") {
  CmdResult top = run("--help");
  REQUIRE(top.code == 0);
  for (const char* sub :
       {"generate-scene", "train", "extract-mesh", "render", "evaluate"})
    REQUIRE(top.out.find(sub) != std::string::npos);

  CmdResult tr = run("train --help");
  REQUIRE(tr.code == 0);
  jneus::RunConfig cfg;
  jneus::RunConfig::visit(cfg, [&](const char* key, auto*) {
    std::string flag = "--";
    for (const char* c = key; *c; ++c) flag += (*c == '.') ? '-' : *c;
    INFO(flag);
    REQUIRE(tr.out.find(flag) != std::string::npos);
  });
  REQUIRE(tr.out.find("--resume") != std::string::npos);
  REQUIRE(tr.out.find("--dump-uncertainty") != std::string::npos);
}

TEST_CASE("usage and config errors exit with code 2") {
  REQUIRE(run("").code == 2);                       // missing subcommand
  REQUIRE(run("train").code == 2);                  // missing required options
  REQUIRE(run("no-such-command").code == 2);        // unknown subcommand
  REQUIRE(run("train --data x --out y --bogus 1").code == 2);  // unknown flag

  CmdResult r = run("generate-scene --out /tmp/x --train-epochs notanint");
  REQUIRE(r.code == 2);
  REQUIRE(r.out.find("train.epochs") != std::string::npos);
}

TEST_CASE("full pipeline: generate, train, extract, render, evaluate") {
  std::string d = work_dir();
  fs::remove_all(d);
  fs::create_directories(d);

  CmdResult gen = run("generate-scene --out " + d + "/ds" + kFlags);
  REQUIRE(gen.code == 0);
  for (const char* f : {"cameras.json", "lidar.ply", "rgb", "normal", "semantic", "sky"})
    REQUIRE(fs::exists(d + "/ds/" + f));

  CmdResult tr = run("train --data " + d + "/ds --out " + d + "/run" + kFlags);
  REQUIRE(tr.code == 0);
  REQUIRE(fs::exists(d + "/run/final.jnrs"));
  REQUIRE(fs::exists(d + "/run/mesh.ply"));
  REQUIRE(fs::exists(d + "/run/log.ndjson"));

  CmdResult mesh = run("extract-mesh --data " + d + "/ds --checkpoint " + d +
                       "/run/final.jnrs --out " + d + "/mesh.ply --resolution 16" +
                       kFlags);
  REQUIRE(mesh.code == 0);
  REQUIRE(fs::exists(d + "/mesh.ply"));

  CmdResult ren = run("render --data " + d + "/ds --checkpoint " + d +
                      "/run/final.jnrs --out " + d + "/imgs --view 0" + kFlags);
  REQUIRE(ren.code == 0);
  REQUIRE(fs::exists(d + "/imgs/0000_FRONT.png"));
  REQUIRE(fs::exists(d + "/imgs/0000_FRONT_depth.bin"));

  CmdResult ev = run("evaluate --data " + d + "/ds --mesh " + d +
                     "/mesh.ply --out - --views 0" + kFlags);
  REQUIRE(ev.code == 0);
  auto rep = nlohmann::json::parse(ev.out);
  REQUIRE(rep.contains("mean_p2m"));
  REQUIRE(rep.contains("precision"));
  REQUIRE(rep.contains("per_class_p2m"));
  REQUIRE(rep["mean_p2m"].get<double>() > 0.0);

  // resuming with a changed epoch budget needs --force
  CmdResult no_force = run("train --data " + d + "/ds --out " + d +
                           "/run2 --resume " + d + "/run/final.jnrs" + kFlags +
                           " --train-epochs 2");
  REQUIRE(no_force.code == 2);
  CmdResult forced = run("train --data " + d + "/ds --out " + d + "/run2 --resume " +
                         d + "/run/final.jnrs --force" + kFlags + " --train-epochs 2");
  REQUIRE(forced.code == 0);
  fs::remove_all(d);
}

TEST_CASE("identical invocations print identical parameter hashes") {
  std::string d = work_dir();
  fs::remove_all(d);
  fs::create_directories(d);
  REQUIRE(run("generate-scene --out " + d + "/ds" + kFlags).code == 0);

  auto hash_of = [&](const std::string& out) {
    size_t p = out.find("parameter hash: ");
    REQUIRE(p != std::string::npos);
    return out.substr(p, out.find('\n', p) - p);
  };
  CmdResult a = run("train --data " + d + "/ds --out " + d + "/ra" + kFlags);
  CmdResult b = run("train --data " + d + "/ds --out " + d + "/rb" + kFlags);
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  REQUIRE(hash_of(a.out) == hash_of(b.out));
  fs::remove_all(d);
}

TEST_CASE("config file is read and flags take precedence over it") {
  std::string d = work_dir();
  std::string cfg_path = d + "/cfg.json";
  std::ofstream(cfg_path) << R"({"scene": {"preset": "no-such-preset"}})";

  // file value alone causes a preset error at runtime (exit 2, named)
  CmdResult bad = run("generate-scene --out " + d + "/ds --config " + cfg_path);
  REQUIRE(bad.code == 2);
  REQUIRE(bad.out.find("no-such-preset") != std::string::npos);

  // flag overrides the file and the run succeeds
  CmdResult ok = run("generate-scene --out " + d + "/ds --config " + cfg_path +
                     " --scene-preset mini-street" + kFlags);
  REQUIRE(ok.code == 0);
  fs::remove_all(d);
}
