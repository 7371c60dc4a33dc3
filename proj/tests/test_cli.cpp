#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "uae/io.hpp"
#include "uae/shapes.hpp"

using namespace uae;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("uae_cli_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

// Shell out to the built binary; returns the exit code.
int run(const std::string& args, const std::string& env = "") {
  std::string cmd = env + (env.empty() ? "" : " ") + std::string(UAE_CLI_PATH) + " " + args +
                    " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

json read_summary(const std::string& dir) { return json::parse(slurp(dir + "/summary.json")); }

// A micro configuration small enough for second-scale runs.
std::string micro(const std::string& out) {
  return "--preset desk"
         " --set arch.k=3 --set arch.edge_widths=4,4,4,4 --set arch.emb=8 --set arch.d=4"
         " --set arch.head_widths=8,8"
         " --set data.clouds=4 --set data.points=64 --set train.r=0.25"
         " --set train.max_steps=4 --set train.epochs=4 --set train.batch_size=2"
         " --set loss.h=0.3 --out " +
         out;
}

}  // namespace

TEST_CASE("cli: missing subcommand and unknown flags are usage errors") {
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("pretrain --no-such-flag") == 2);
}

TEST_CASE("cli: gradcheck runs and rejects unknown scopes") {
  TempDir tmp;
  CHECK(run("gradcheck primitives --out " + tmp.file("g")) == 0);
  json s = read_summary(tmp.file("g"));
  CHECK(s["results"]["pass"] == true);
  CHECK(s["results"]["items"].size() > 10);
  CHECK(run("gradcheck bogus --out " + tmp.file("g2")) == 2);
}

TEST_CASE("cli: pretrain produces the full artifact set") {
  TempDir tmp;
  std::string dir = tmp.file("run");
  REQUIRE(run("pretrain --seed 5 " + micro(dir)) == 0);
  CHECK(fs::exists(dir + "/config.toml"));
  CHECK(fs::exists(dir + "/seed"));
  CHECK(fs::exists(dir + "/metrics.csv"));
  CHECK(fs::exists(dir + "/checkpoint.bin"));
  json s = read_summary(dir);
  CHECK(s["subcommand"] == "pretrain");
  CHECK(s["seed"] == 5);
  CHECK(s["config"]["train.r"] == "0.25");  // full effective config echoed
  CHECK(s["results"]["steps_run"] == 4);
  CHECK(s["wall_ms"].get<double>() > 0);
  std::string csv = slurp(dir + "/metrics.csv");
  CHECK(csv.rfind("epoch,step,loss,cd,lr\n", 0) == 0);
}

TEST_CASE("cli: identical seeds give bit-identical metrics; out dir is claimed") {
  TempDir tmp;
  REQUIRE(run("pretrain --seed 7 " + micro(tmp.file("a"))) == 0);
  REQUIRE(run("pretrain --seed 7 " + micro(tmp.file("b"))) == 0);
  CHECK(slurp(tmp.file("a") + "/metrics.csv") == slurp(tmp.file("b") + "/metrics.csv"));
  // Rerunning into a claimed directory without --resume is a usage error.
  CHECK(run("pretrain --seed 7 " + micro(tmp.file("a"))) == 2);
}

TEST_CASE("cli: --set validation and run-summary echo") {
  TempDir tmp;
  CHECK(run("pretrain --set nonsense.key=1 --out " + tmp.file("x")) == 2);
  CHECK(run("pretrain --set train.r=zero --out " + tmp.file("x")) == 2);
  std::string dir = tmp.file("v");
  REQUIRE(run("pretrain --seed 3 " + micro(dir) + " --set loss.variant=EMD+RL") == 0);
  json s = read_summary(dir);
  CHECK(s["config"]["loss.variant"] == "EMD+RL");
  CHECK(s["results"]["loss_variant"] == "EMD+RL");
}

TEST_CASE("cli: config file merges under --set overrides") {
  TempDir tmp;
  {
    std::ofstream f(tmp.file("cfg.toml"));
    f << "# overrides\n[train]\nbatch_size = 2\nmax_steps = 2\nepochs = 2\nr = 0.25\n"
      << "[arch]\nk = 3\nedge_widths = \"4,4,4,4\"\nemb = 8\nd = 4\n"
      << "[data]\nclouds = 4\npoints = 64\n[loss]\nh = 0.3\n";
  }
  std::string dir = tmp.file("r");
  REQUIRE(run("pretrain --preset desk --config " + tmp.file("cfg.toml") + " --seed 1 --out " + dir +
              " --set train.max_steps=3 --set train.epochs=3") == 0);
  json s = read_summary(dir);
  CHECK(s["config"]["train.batch_size"] == "2");  // from the file
  CHECK(s["config"]["train.max_steps"] == "3");   // --set wins over the file
  CHECK(run("pretrain --config " + tmp.file("missing.toml") + " --out " + tmp.file("r2")) == 2);
}

TEST_CASE("cli: probe compares pretrained against random init") {
  TempDir tmp;
  std::string pre = tmp.file("pre");
  std::string common =
      " --set data.shapes=sphere,cube --set data.clouds=8 --set train.batch_size=4";
  REQUIRE(run("pretrain --seed 2 " + micro(pre) + common) == 0);
  std::string dir = tmp.file("probe");
  REQUIRE(run("probe --seed 2 " + micro(dir) + common +
              " --set train.epochs=2 --set train.max_steps=0 --checkpoint " + pre +
              "/checkpoint.bin") == 0);
  json s = read_summary(dir);
  CHECK(s["results"]["head"] == "classification");
  double acc_pre = s["results"]["pretrained"]["test_accuracy"].get<double>();
  double acc_rand = s["results"]["random_init"]["test_accuracy"].get<double>();
  CHECK(acc_pre >= 0.0);
  CHECK(acc_pre <= 1.0);
  CHECK(acc_rand >= 0.0);
  CHECK(acc_rand <= 1.0);
  // Missing checkpoint is a data error (exit 3).
  CHECK(run("probe " + micro(tmp.file("p2")) + common + " --checkpoint " + tmp.file("nope.bin")) ==
        3);
}

TEST_CASE("cli: finetune runs with a segmentation head") {
  TempDir tmp;
  std::string pre = tmp.file("pre");
  REQUIRE(run("pretrain --seed 4 " + micro(pre)) == 0);
  std::string dir = tmp.file("ft");
  REQUIRE(run("finetune --seed 4 " + micro(dir) +
              " --set transfer.head=segmentation --set arch.parts=2 --set train.epochs=1"
              " --set train.max_steps=0 --checkpoint " +
              pre + "/checkpoint.bin") == 0);
  json s = read_summary(dir);
  CHECK(s["results"]["pretrained"].contains("test_miou"));
  CHECK_FALSE(s["results"].contains("random_init"));  // paired run is probe-only
}

TEST_CASE("cli: upsample writes the expanded cloud and surface metrics") {
  TempDir tmp;
  std::string pre = tmp.file("pre");
  REQUIRE(run("pretrain --seed 6 " + micro(pre)) == 0);
  // 16-point input at r=0.25 -> 64-point output.
  Rng rng(11);
  SyntheticShape sph;
  sph.kind = ShapeKind::Sphere;
  sph.params = {1.0};
  PointCloud input = sph.sample(16, rng);
  save_xyz(input, tmp.file("in.xyz"));
  std::string dir = tmp.file("up");
  REQUIRE(run("upsample --seed 6 " + micro(dir) + " --checkpoint " + pre +
              "/checkpoint.bin --input " + tmp.file("in.xyz") + " --reference sphere:1") == 0);
  json s = read_summary(dir);
  CHECK(s["results"]["input_points"] == 16);
  CHECK(s["results"]["output_points"] == 64);
  PointCloud up = load_xyz(dir + "/upsampled.xyz");
  CHECK(up.size() == 64);
  double cd = s["results"]["cd_to_input"].get<double>();
  CHECK(cd > 0.0);
  CHECK(std::isfinite(cd));
  CHECK(s["results"]["reference"].contains("p2f"));
  // Missing --input is a usage error.
  CHECK(run("upsample " + micro(tmp.file("u2")) + " --checkpoint " + pre + "/checkpoint.bin") == 2);
}

TEST_CASE("cli: eval reports CD/HD/P2F against an analytic reference") {
  TempDir tmp;
  Rng rng(12);
  SyntheticShape sph;
  sph.kind = ShapeKind::Sphere;
  sph.params = {1.0};
  save_xyz(sph.sample(128, rng), tmp.file("c.xyz"));
  std::string dir = tmp.file("e");
  REQUIRE(run("eval --input " + tmp.file("c.xyz") + " --reference sphere:1 --out " + dir) == 0);
  json s = read_summary(dir);
  CHECK(s["results"]["p2f"].get<double>() < 1e-6);  // points lie on the surface
  CHECK(s["results"]["cd"].get<double>() < 0.5);
  CHECK(s["results"]["hd"].get<double>() < 1.5);
  CHECK(run("eval --input " + tmp.file("missing.xyz") + " --reference sphere:1 --out " +
            tmp.file("e2")) == 3);
  CHECK(run("eval --input " + tmp.file("c.xyz") + " --reference bogus --out " + tmp.file("e3")) ==
        2);
}

TEST_CASE("cli: ablate runs the grid and isolates axes") {
  TempDir tmp;
  std::string dir = tmp.file("ab");
  std::string args = micro(dir) +
                     " --set data.shapes=sphere,cube --set data.clouds=6 --set train.batch_size=3"
                     " --set train.max_steps=2 --set train.epochs=2 --ratios 0.25,0.5";
  REQUIRE(run("ablate --seed 1 " + args, "PUAE_THREADS=2") == 0);
  std::string csv = slurp(dir + "/ablation.csv");
  CHECK(csv.rfind("strategy,r,loss,final_cd,probe_accuracy,status\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 cells
  json s = read_summary(dir);
  CHECK(s["results"]["cells"].size() == 2);
  for (const auto& c : s["results"]["cells"]) CHECK(c["status"] == "ok");
  // No axes at all is a usage error.
  CHECK(run("ablate " + micro(tmp.file("ab2"))) == 2);
}
