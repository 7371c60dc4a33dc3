// uae — command surface for pre-training, transfer, upsampling,
// evaluation, gradient verification, and the ablation grid.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "uae/config.hpp"
#include "uae/mesh.hpp"
#include "uae/verify.hpp"

#ifndef UAE_BUILD_ID
#define UAE_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using namespace uae;

namespace {

struct CommonArgs {
  std::string preset = "paper";
  std::string config_path;
  std::vector<std::string> overrides;
  int64_t seed = -1;  // -1 = keep the config's seed
  std::string out;
  bool resume = false;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--preset", a.preset, "Configuration preset: paper or desk");
  cmd->add_option("--config", a.config_path, "TOML-style config file merged over the preset");
  cmd->add_option("--set", a.overrides, "Override a config key (key=value, repeatable)");
  cmd->add_option("--seed", a.seed, "Override train.seed");
  cmd->add_option("--out", a.out, "Run output directory");
  cmd->add_flag("--resume", a.resume, "Resume from the run directory's checkpoint");
}

Config resolve_config(const CommonArgs& a) {
  Config cfg = preset_config(a.preset);
  if (!a.config_path.empty()) parse_config_file(cfg, a.config_path);
  for (const std::string& kv : a.overrides) apply_override(cfg, kv);
  if (a.seed >= 0) cfg.set("train.seed", std::to_string(a.seed), true);
  return cfg;
}

// A run directory is claimed once; re-running into it requires --resume.
std::string prepare_run_dir(const CommonArgs& a, const std::string& subcommand, const Config& cfg) {
  std::string dir = a.out.empty() ? "runs/" + subcommand : a.out;
  if (!a.resume && fs::exists(fs::path(dir) / "summary.json"))
    throw UsageError("output directory '" + dir + "' already holds a run (pass --resume or a fresh --out)");
  fs::create_directories(dir);
  std::ofstream echo(fs::path(dir) / "config.toml");
  echo << cfg.echo();
  std::ofstream seedf(fs::path(dir) / "seed");
  seedf << cfg.str("train.seed") << "\n";
  return dir;
}

void write_summary(const std::string& dir, const std::string& subcommand, const Config& cfg,
                   const json& results, double wall_ms) {
  json s;
  s["subcommand"] = subcommand;
  s["build_id"] = UAE_BUILD_ID;
  s["seed"] = cfg.integer("train.seed");
  s["config"] = cfg.to_json();
  s["results"] = results;
  s["wall_ms"] = wall_ms;
  std::ofstream out(fs::path(dir) / "summary.json");
  out << s.dump(2) << "\n";
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
};

// Derive classification classes from the synthetic shape list when unset.
ArchConfig arch_for_transfer(Config& cfg, HeadKind head) {
  if (head == HeadKind::Classification && cfg.integer("arch.classes") == 0 &&
      cfg.str("data.source") == "synthetic")
    cfg.set("arch.classes", std::to_string(cfg.str_list("data.shapes").size()), true);
  ArchConfig arch = make_arch(cfg);
  if (head == HeadKind::Classification && arch.classes < 2)
    throw UsageError("transfer: set arch.classes (>= 2) for classification");
  if (head == HeadKind::Segmentation && arch.parts < 2)
    throw UsageError("transfer: set arch.parts (>= 2) for segmentation");
  return arch;
}

// Synthetic part labels: slabs along z, so the task is learnable from
// geometry alone. Used when clouds carry no part annotations.
void label_parts_by_height(std::vector<PointCloud>& clouds, int64_t parts) {
  for (PointCloud& c : clouds) {
    if (!c.labels.empty()) continue;
    double lo = c.pts[2], hi = c.pts[2];
    for (int64_t i = 0; i < c.size(); ++i) {
      lo = std::min(lo, c.pts[3 * i + 2]);
      hi = std::max(hi, c.pts[3 * i + 2]);
    }
    double span = std::max(hi - lo, 1e-12);
    c.labels.resize(static_cast<size_t>(c.size()));
    for (int64_t i = 0; i < c.size(); ++i) {
      auto bin = static_cast<int64_t>((c.pts[3 * i + 2] - lo) / span * static_cast<double>(parts));
      c.labels[static_cast<size_t>(i)] = static_cast<int>(std::min(bin, parts - 1));
    }
  }
}

// Reference surface spec: a .off mesh path or "kind:p1,p2,..." analytic shape.
struct Reference {
  bool is_mesh = false;
  TriMesh mesh;
  SyntheticShape shape;

  static Reference parse(const std::string& spec) {
    Reference r;
    if (spec.size() > 4 && spec.substr(spec.size() - 4) == ".off") {
      r.is_mesh = true;
      r.mesh = load_off(spec);
      return r;
    }
    size_t colon = spec.find(':');
    if (colon == std::string::npos)
      throw UsageError("reference: expected a .off path or kind:p1,p2,... , got '" + spec + "'");
    r.shape.kind = shape_from_name(spec.substr(0, colon));
    std::istringstream ps(spec.substr(colon + 1));
    std::string tok;
    while (std::getline(ps, tok, ',')) r.shape.params.push_back(std::stod(tok));
    r.shape.validate();
    return r;
  }

  PointCloud sample(int64_t n, Rng& rng) const {
    if (is_mesh) return sample_mesh_surface(mesh, n, rng);
    return const_cast<SyntheticShape&>(shape).sample(n, rng);
  }
  double p2f(const PointCloud& c) const {
    return is_mesh ? point_to_surface(c, mesh) : point_to_surface(c, shape);
  }
};

json surface_metrics(const PointCloud& cloud, const Reference& ref, uint64_t seed) {
  Rng rng(seed);
  PointCloud refs = ref.sample(std::max<int64_t>(cloud.size(), 256), rng);
  json m;
  m["cd"] = chamfer_distance_value(cloud, refs);
  m["hd"] = hausdorff_distance(cloud, refs);
  m["p2f"] = ref.p2f(cloud);
  return m;
}

Checkpoint load_required_checkpoint(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(path)) throw DataError("checkpoint: '" + path + "' not found");
  return load_checkpoint(path);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_pretrain(const CommonArgs& a) {
  Timer timer;
  Config cfg = resolve_config(a);
  ArchConfig arch = make_arch(cfg);
  TrainConfig tc = make_train(cfg);
  std::string dir = prepare_run_dir(a, "pretrain", cfg);

  Dataset ds;
  ds.items = load_clouds(cfg);
  ds.split = "train";
  Rng init(tc.seed);
  Model<double> model(arch, init);

  Checkpoint resume_ck;
  const Checkpoint* resume = nullptr;
  if (a.resume) {
    std::string ckpt = (fs::path(dir) / "checkpoint.bin").string();
    if (!fs::exists(ckpt)) throw DataError("resume: no checkpoint at '" + ckpt + "'");
    resume_ck = load_checkpoint(ckpt);
    if (resume_ck.meta.config_hash != arch.hash())
      throw DataError("resume: checkpoint architecture mismatch");
    resume = &resume_ck;
  }

  PretrainResult res = pretrain(ds, model, tc, dir, resume);
  write_metrics_csv((fs::path(dir) / "metrics.csv").string(), res.log);

  json results;
  results["initial_cd"] = res.initial_cd;
  results["final_epoch_mean_cd"] = res.epoch_mean_cd.empty() ? res.initial_cd : res.epoch_mean_cd.back();
  results["steps_run"] = res.steps_run;
  results["checkpoint"] = res.checkpoint_path;
  results["loss_variant"] = cfg.str("loss.variant");
  write_summary(dir, "pretrain", cfg, results, timer.ms());
  std::cout << "pretrain: " << res.steps_run << " steps, initial CD " << res.initial_cd
            << ", final epoch-mean CD " << results["final_epoch_mean_cd"].get<double>() << "\n";
  return 0;
}

int cmd_transfer(const CommonArgs& a, const std::string& checkpoint_path, TransferMode mode) {
  Timer timer;
  Config cfg = resolve_config(a);
  const std::string& head_name = cfg.str("transfer.head");
  HeadKind head;
  if (head_name == "classification")
    head = HeadKind::Classification;
  else if (head_name == "segmentation")
    head = HeadKind::Segmentation;
  else
    throw UsageError("transfer.head must be classification or segmentation");
  ArchConfig arch = arch_for_transfer(cfg, head);
  TrainConfig tc = make_train(cfg);
  std::string sub = mode == TransferMode::Probe ? "probe" : "finetune";
  std::string dir = prepare_run_dir(a, sub, cfg);

  std::vector<PointCloud> clouds = load_clouds(cfg);
  if (head == HeadKind::Segmentation) label_parts_by_height(clouds, arch.parts);
  auto [train_set, test_set] = split_dataset(clouds, cfg.num("data.train_fraction"), tc.seed);

  Checkpoint ck = load_required_checkpoint(checkpoint_path);

  auto run_one = [&](bool pretrained) {
    Rng init(tc.seed);  // identical init for the paired comparison
    Model<double> model(arch, init);
    if (pretrained) load_backbone(model, ck);
    TransferResult r = transfer(train_set, test_set, model, mode, head, tc);
    json j;
    j["train_accuracy"] = r.train_accuracy;
    j["test_accuracy"] = r.test_accuracy;
    if (head == HeadKind::Segmentation) j["test_miou"] = r.test_miou;
    return j;
  };

  json results;
  results["pretrained"] = run_one(true);
  if (mode == TransferMode::Probe) results["random_init"] = run_one(false);
  results["head"] = head_name;
  results["checkpoint"] = checkpoint_path;
  write_summary(dir, sub, cfg, results, timer.ms());
  std::cout << sub << ": pretrained test accuracy "
            << results["pretrained"]["test_accuracy"].get<double>();
  if (mode == TransferMode::Probe)
    std::cout << " vs random-init " << results["random_init"]["test_accuracy"].get<double>();
  std::cout << "\n";
  return 0;
}

int cmd_upsample(const CommonArgs& a, const std::string& input_path,
                 const std::string& checkpoint_path, const std::string& reference_spec) {
  Timer timer;
  Config cfg = resolve_config(a);
  ArchConfig arch = make_arch(cfg);
  TrainConfig tc = make_train(cfg);
  std::string dir = prepare_run_dir(a, "upsample", cfg);

  if (input_path.empty()) throw UsageError("--input is required");
  PointCloud input = normalize(load_xyz(input_path), NormalizeTarget::UnitCube);
  Checkpoint ck = load_required_checkpoint(checkpoint_path);
  Rng init(tc.seed);
  Model<double> model(arch, init);
  load_backbone(model, ck);

  NoGradGuard ng;
  Tensor<double> feats = encoder_forward(model, cloud_to_tensor<double>(input), 1, /*train=*/false);
  Tensor<double> pred = decoder_forward(model, feats, tc.r, 1, /*train=*/false);
  PointCloud up = tensor_to_cloud(pred);
  std::string out_xyz = (fs::path(dir) / "upsampled.xyz").string();
  save_xyz(up, out_xyz);

  json results;
  results["input_points"] = input.size();
  results["output_points"] = up.size();
  results["output"] = out_xyz;
  results["cd_to_input"] = chamfer_distance_value(up, input);
  if (!reference_spec.empty())
    results["reference"] = surface_metrics(up, Reference::parse(reference_spec), tc.seed + 101);
  write_summary(dir, "upsample", cfg, results, timer.ms());
  std::cout << "upsample: " << input.size() << " -> " << up.size() << " points, CD to input "
            << results["cd_to_input"].get<double>() << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& a, const std::string& input_path, const std::string& reference_spec) {
  Timer timer;
  Config cfg = resolve_config(a);
  std::string dir = prepare_run_dir(a, "eval", cfg);
  if (input_path.empty()) throw UsageError("--input is required");
  if (reference_spec.empty()) throw UsageError("--reference is required");
  PointCloud cloud = load_xyz(input_path);
  json results = surface_metrics(cloud, Reference::parse(reference_spec),
                                 static_cast<uint64_t>(cfg.integer("train.seed")) + 101);
  results["input_points"] = cloud.size();
  write_summary(dir, "eval", cfg, results, timer.ms());
  std::cout << "eval: CD " << results["cd"].get<double>() << ", HD " << results["hd"].get<double>()
            << ", P2F " << results["p2f"].get<double>() << "\n";
  return 0;
}

int cmd_gradcheck(const CommonArgs& a, const std::string& scope) {
  Timer timer;
  Config cfg = resolve_config(a);
  std::string dir = prepare_run_dir(a, "gradcheck", cfg);
  std::vector<CheckItem> items = gradcheck_run(scope);
  bool all_pass = true;
  json report = json::array();
  for (const CheckItem& i : items) {
    std::printf("%-44s max rel err %.3e  %s\n", i.name.c_str(), i.max_rel, i.pass() ? "ok" : "FAIL");
    report.push_back({{"name", i.name}, {"max_rel_err", i.max_rel}, {"pass", i.pass()}});
    if (!i.pass()) {
      all_pass = false;
      std::cout << "gradcheck: FAILED item '" << i.name << "'\n";
    }
  }
  json results;
  results["scope"] = scope;
  results["items"] = report;
  results["pass"] = all_pass;
  write_summary(dir, "gradcheck", cfg, results, timer.ms());
  return all_pass ? 0 : 1;
}

int cmd_ablate(const CommonArgs& a, std::vector<std::string> strategies, std::vector<std::string> ratios,
               std::vector<std::string> losses) {
  Timer timer;
  Config base = resolve_config(a);
  if (strategies.empty() && ratios.empty() && losses.empty())
    throw UsageError("ablate: no axes specified (pass --strategies, --ratios, or --losses)");
  if (strategies.empty()) strategies = {base.str("train.strategy")};
  if (ratios.empty()) ratios = {base.str("train.r")};
  if (losses.empty()) losses = {base.str("loss.variant")};
  std::string dir = prepare_run_dir(a, "ablate", base);

  struct Cell {
    std::string strategy, ratio, loss, status = "ok";
    double final_cd = 0, probe_accuracy = 0;
  };
  std::vector<Cell> cells;
  for (const auto& s : strategies)
    for (const auto& r : ratios)
      for (const auto& l : losses) cells.push_back({s, r, l});

  int64_t threads = 1;
  if (const char* env = std::getenv("PUAE_THREADS")) {
    try {
      threads = std::stoll(env);
    } catch (const std::exception&) {
      throw UsageError("PUAE_THREADS must be an integer");
    }
    if (threads < 1) throw UsageError("PUAE_THREADS must be >= 1");
  }
  threads = std::min<int64_t>(threads, static_cast<int64_t>(cells.size()));

  auto run_cell = [&](size_t idx) {
    Cell& cell = cells[idx];
    try {
      Config cfg = base;  // independent seeded run per cell
      cfg.set("train.strategy", cell.strategy, true);
      cfg.set("train.r", cell.ratio, true);
      cfg.set("loss.variant", cell.loss, true);
      cfg.set("train.seed", std::to_string(base.integer("train.seed") + static_cast<int64_t>(idx)),
              true);
      ArchConfig arch = arch_for_transfer(cfg, HeadKind::Classification);
      TrainConfig tc = make_train(cfg);
      std::string cell_dir = dir + "/cell-" + std::to_string(idx) + "-" + cell.strategy + "-r" +
                             cell.ratio + "-" + cell.loss;
      fs::create_directories(cell_dir);

      Dataset ds;
      ds.items = load_clouds(cfg);
      ds.split = "train";
      Rng init(tc.seed);
      Model<double> model(arch, init);
      PretrainResult res = pretrain(ds, model, tc, cell_dir);
      write_metrics_csv(cell_dir + "/metrics.csv", res.log);
      cell.final_cd = res.epoch_mean_cd.empty() ? res.initial_cd : res.epoch_mean_cd.back();

      auto [train_set, test_set] =
          split_dataset(ds.items, cfg.num("data.train_fraction"), tc.seed);
      TransferResult tr =
          transfer(train_set, test_set, model, TransferMode::Probe, HeadKind::Classification, tc);
      cell.probe_accuracy = tr.test_accuracy;
    } catch (const std::exception& e) {
      cell.status = std::string("error: ") + e.what();
    }
  };

  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next.fetch_add(1); i < cells.size(); i = next.fetch_add(1)) run_cell(i);
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int64_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::ofstream csv(fs::path(dir) / "ablation.csv");
  csv << "strategy,r,loss,final_cd,probe_accuracy,status\n";
  json results = json::array();
  char buf[64];
  for (const Cell& c : cells) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g", c.final_cd, c.probe_accuracy);
    std::string status = c.status;
    for (char& ch : status)
      if (ch == ',' || ch == '\n') ch = ';';
    csv << c.strategy << "," << c.ratio << "," << c.loss << "," << buf << "," << status << "\n";
    results.push_back({{"strategy", c.strategy},
                       {"r", c.ratio},
                       {"loss", c.loss},
                       {"final_cd", c.final_cd},
                       {"probe_accuracy", c.probe_accuracy},
                       {"status", c.status}});
  }
  csv.close();
  json summary;
  summary["cells"] = results;
  summary["threads"] = threads;
  write_summary(dir, "ablate", base, summary, timer.ms());
  std::cout << "ablate: " << cells.size() << " cells -> " << (fs::path(dir) / "ablation.csv").string()
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Upsampling autoencoder for self-supervised point-cloud learning"};
  app.require_subcommand(1);

  CommonArgs pretrain_args;
  CLI::App* sc_pretrain = app.add_subcommand("pretrain", "Self-supervised reconstruction pre-training");
  add_common(sc_pretrain, pretrain_args);

  CommonArgs probe_args;
  std::string probe_ckpt;
  CLI::App* sc_probe = app.add_subcommand("probe", "Frozen-encoder linear probe (paired vs random init)");
  add_common(sc_probe, probe_args);
  sc_probe->add_option("--checkpoint", probe_ckpt, "Pre-trained checkpoint path");

  CommonArgs ft_args;
  std::string ft_ckpt;
  CLI::App* sc_ft = app.add_subcommand("finetune", "Supervised fine-tuning from a checkpoint");
  add_common(sc_ft, ft_args);
  sc_ft->add_option("--checkpoint", ft_ckpt, "Pre-trained checkpoint path");

  CommonArgs up_args;
  std::string up_input, up_ckpt, up_ref;
  CLI::App* sc_up = app.add_subcommand("upsample", "Upsample an input cloud by 1/r");
  add_common(sc_up, up_args);
  sc_up->add_option("--input", up_input, "Input .xyz cloud");
  sc_up->add_option("--checkpoint", up_ckpt, "Pre-trained checkpoint path");
  sc_up->add_option("--reference", up_ref, "Reference surface (.off mesh or kind:p1,p2,...)");

  CommonArgs eval_args;
  std::string eval_input, eval_ref;
  CLI::App* sc_eval = app.add_subcommand("eval", "CD/HD/P2F of a cloud against a reference surface");
  add_common(sc_eval, eval_args);
  sc_eval->add_option("--input", eval_input, "Input .xyz cloud");
  sc_eval->add_option("--reference", eval_ref, "Reference surface (.off mesh or kind:p1,p2,...)");

  CommonArgs gc_args;
  std::string gc_scope = "all";
  CLI::App* sc_gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  add_common(sc_gc, gc_args);
  sc_gc->add_option("scope", gc_scope, "primitives | layers | end2end | all");

  CommonArgs ab_args;
  std::vector<std::string> ab_strategies, ab_ratios, ab_losses;
  CLI::App* sc_ab = app.add_subcommand("ablate", "Grid of pretrain+probe runs over config axes");
  add_common(sc_ab, ab_args);
  sc_ab->add_option("--strategies", ab_strategies, "Subsampling strategies")->delimiter(',');
  sc_ab->add_option("--ratios", ab_ratios, "Subsampling ratios")->delimiter(',');
  sc_ab->add_option("--losses", ab_losses, "Loss variants")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // usage errors map to 2
  }

  try {
    if (sc_pretrain->parsed()) return cmd_pretrain(pretrain_args);
    if (sc_probe->parsed()) return cmd_transfer(probe_args, probe_ckpt, TransferMode::Probe);
    if (sc_ft->parsed()) return cmd_transfer(ft_args, ft_ckpt, TransferMode::Finetune);
    if (sc_up->parsed()) return cmd_upsample(up_args, up_input, up_ckpt, up_ref);
    if (sc_eval->parsed()) return cmd_eval(eval_args, eval_input, eval_ref);
    if (sc_gc->parsed()) return cmd_gradcheck(gc_args, gc_scope);
    if (sc_ab->parsed()) return cmd_ablate(ab_args, ab_strategies, ab_ratios, ab_losses);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ValueError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
