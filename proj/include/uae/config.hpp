#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uae/model.hpp"
#include "uae/shapes.hpp"
#include "uae/training.hpp"

namespace uae {

// ---------------------------------------------------------------------------
// Flat key=value configuration with dotted paths.
//
// File format is TOML-style: `key = value` lines, `#` comments, optional
// `[section]` headers that prefix subsequent keys with `section.`. Values
// are plain tokens or comma-separated lists; quotes around strings are
// optional and stripped.

class Config {
 public:
  void set(const std::string& key, const std::string& value, bool must_exist = false) {
    auto it = kv_.find(key);
    if (it == kv_.end()) {
      if (must_exist) throw UsageError("config: unknown key '" + key + "'");
      order_.push_back(key);
      kv_.emplace(key, value);
    } else {
      it->second = value;
    }
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  const std::string& str(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw UsageError("config: missing key '" + key + "'");
    return it->second;
  }

  double num(const std::string& key) const {
    const std::string& s = str(key);
    try {
      size_t pos = 0;
      double v = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw UsageError("config: key '" + key + "' expects a number, got '" + s + "'");
    }
  }

  int64_t integer(const std::string& key) const {
    const std::string& s = str(key);
    try {
      size_t pos = 0;
      long long v = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw UsageError("config: key '" + key + "' expects an integer, got '" + s + "'");
    }
  }

  bool boolean(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw UsageError("config: key '" + key + "' expects a boolean, got '" + s + "'");
  }

  std::vector<std::string> str_list(const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream in(str(key));
    std::string tok;
    while (std::getline(in, tok, ',')) {
      size_t a = tok.find_first_not_of(" \t");
      size_t b = tok.find_last_not_of(" \t");
      if (a == std::string::npos) continue;
      out.push_back(tok.substr(a, b - a + 1));
    }
    return out;
  }

  std::vector<int64_t> int_list(const std::string& key) const {
    std::vector<int64_t> out;
    for (const std::string& tok : str_list(key)) {
      try {
        out.push_back(std::stoll(tok));
      } catch (const std::exception&) {
        throw UsageError("config: key '" + key + "' expects integers, got '" + tok + "'");
      }
    }
    return out;
  }

  // Stable echo (insertion order of the default table).
  std::string echo() const {
    std::string out;
    for (const std::string& k : order_) out += k + " = " + kv_.at(k) + "\n";
    return out;
  }

  json to_json() const {
    json j = json::object();
    for (const std::string& k : order_) j[k] = kv_.at(k);
    return j;
  }

  const std::vector<std::string>& keys() const { return order_; }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> kv_;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::string unquote(std::string s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    return s.substr(1, s.size() - 2);
  return s;
}

}  // namespace detail

// All known keys with the paper's hyperparameters as defaults.
inline Config default_config() {
  Config c;
  // Architecture.
  c.set("arch.k", "20");
  c.set("arch.edge_widths", "64,64,128,256");
  c.set("arch.emb", "648");
  c.set("arch.d", "128");
  c.set("arch.grid_span", "0.2");
  c.set("arch.classes", "0");  // 0 = derive from data.shapes when needed
  c.set("arch.parts", "0");
  c.set("arch.head_widths", "512,256");
  c.set("arch.head_dropout", "0.5");
  // Pre-training.
  c.set("train.r", "0.125");
  c.set("train.strategy", "random");
  c.set("train.optimizer", "adam");
  c.set("train.lr0", "0.001");
  c.set("train.decay_factor", "0.7");
  c.set("train.decay_period", "10");
  c.set("train.schedule", "step");
  c.set("train.lr_floor", "1e-05");
  c.set("train.epochs", "120");
  c.set("train.max_steps", "0");
  c.set("train.batch_size", "32");
  c.set("train.bn_momentum", "0.9");  // fixed; echoed for reproducibility
  c.set("train.seed", "0");
  c.set("train.aug_scale", "false");
  c.set("train.aug_scale_lo", "0.67");
  c.set("train.aug_scale_hi", "1.5");
  c.set("train.aug_translate", "false");
  c.set("train.aug_translate_range", "0.2");
  c.set("train.aug_dropout", "0");
  c.set("train.checkpoint_every", "10");
  // Loss.
  c.set("loss.variant", "CD+RL");
  c.set("loss.alpha", "100");
  c.set("loss.beta", "1");
  c.set("loss.k_rep", "5");
  c.set("loss.h", "0.03");
  // Data.
  c.set("data.source", "synthetic");  // "synthetic" or a directory of .xyz files
  c.set("data.shapes", "sphere,cube,torus,cylinder,ellipsoid");
  c.set("data.clouds", "8");
  c.set("data.points", "2048");
  c.set("data.train_fraction", "0.667");
  // Transfer.
  c.set("transfer.head", "classification");
  return c;
}

// Desk-scale preset: small architecture and synthetic clouds sized so a
// 500-step pre-training run finishes in minutes on a CPU.
inline void apply_desk_overrides(Config& c) {
  c.set("arch.k", "8", true);
  c.set("arch.edge_widths", "16,16,32,64", true);
  c.set("arch.emb", "96", true);
  c.set("arch.d", "32", true);
  c.set("train.schedule", "constant", true);
  c.set("train.epochs", "500", true);
  c.set("train.max_steps", "500", true);
  c.set("train.batch_size", "1", true);
  c.set("train.checkpoint_every", "0", true);
  c.set("data.clouds", "8", true);
  c.set("data.points", "512", true);
  // 512-point clouds sit ~4x sparser on the surface than the full-size runs,
  // so the repulsion support radius scales up accordingly.
  c.set("loss.h", "0.1", true);
}

inline Config preset_config(const std::string& name) {
  Config c = default_config();
  if (name == "paper") return c;
  if (name == "desk") {
    apply_desk_overrides(c);
    return c;
  }
  throw UsageError("config: unknown preset '" + name + "' (expected 'paper' or 'desk')");
}

// Merge a TOML-style file into the config; unknown keys are usage errors.
inline void parse_config_text(Config& c, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    if (s.front() == '[' && s.back() == ']') {
      section = detail::trim(s.substr(1, s.size() - 2));
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw UsageError("config: '" + origin + "' line " + std::to_string(lineno) +
                       ": expected 'key = value'");
    std::string key = detail::trim(s.substr(0, eq));
    std::string value = detail::unquote(detail::trim(s.substr(eq + 1)));
    if (!section.empty()) key = section + "." + key;
    try {
      c.set(key, value, /*must_exist=*/true);
    } catch (const UsageError& e) {
      throw UsageError(std::string(e.what()) + " ('" + origin + "' line " + std::to_string(lineno) + ")");
    }
  }
}

inline void parse_config_file(Config& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  parse_config_text(c, text, path);
}

// Apply one `--set key=value` override.
inline void apply_override(Config& c, const std::string& kv) {
  size_t eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw UsageError("--set expects key=value, got '" + kv + "'");
  c.set(detail::trim(kv.substr(0, eq)), detail::unquote(detail::trim(kv.substr(eq + 1))),
        /*must_exist=*/true);
}

// ---------------------------------------------------------------------------
// Typed bindings

inline ArchConfig make_arch(const Config& c) {
  ArchConfig a;
  a.k = c.integer("arch.k");
  a.edge_widths = c.int_list("arch.edge_widths");
  a.emb = c.integer("arch.emb");
  a.d = c.integer("arch.d");
  a.grid_span = c.num("arch.grid_span");
  a.classes = c.integer("arch.classes");
  a.parts = c.integer("arch.parts");
  a.head_widths = c.int_list("arch.head_widths");
  a.head_dropout = c.num("arch.head_dropout");
  a.validate();
  return a;
}

inline TrainConfig make_train(const Config& c) {
  TrainConfig t;
  t.r = c.num("train.r");
  t.strategy = strategy_from_name(c.str("train.strategy"));
  t.loss.variant = loss_variant_from_name(c.str("loss.variant"));
  t.loss.alpha = c.num("loss.alpha");
  t.loss.beta = c.num("loss.beta");
  t.loss.k_rep = c.integer("loss.k_rep");
  t.loss.h = c.num("loss.h");
  t.optimizer = c.str("train.optimizer");
  t.lr0 = c.num("train.lr0");
  t.decay_factor = c.num("train.decay_factor");
  t.decay_period = c.integer("train.decay_period");
  const std::string& sched = c.str("train.schedule");
  if (sched == "step")
    t.schedule = LrSchedule::StepDecay;
  else if (sched == "cosine")
    t.schedule = LrSchedule::Cosine;
  else if (sched == "constant")
    t.schedule = LrSchedule::Constant;
  else
    throw UsageError("config: train.schedule must be step|cosine|constant, got '" + sched + "'");
  t.lr_floor = c.num("train.lr_floor");
  t.epochs = c.integer("train.epochs");
  t.max_steps = c.integer("train.max_steps");
  t.batch_size = c.integer("train.batch_size");
  if (c.num("train.bn_momentum") != 0.9)
    throw UsageError("config: train.bn_momentum is fixed at 0.9");
  t.seed = static_cast<uint64_t>(c.integer("train.seed"));
  t.aug_scale = c.boolean("train.aug_scale");
  t.aug_scale_lo = c.num("train.aug_scale_lo");
  t.aug_scale_hi = c.num("train.aug_scale_hi");
  t.aug_translate = c.boolean("train.aug_translate");
  t.aug_translate_range = c.num("train.aug_translate_range");
  t.aug_dropout = c.num("train.aug_dropout");
  t.checkpoint_every = c.integer("train.checkpoint_every");
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Synthetic dataset construction

// Deterministic family of synthetic clouds: kinds cycle through
// data.shapes, per-cloud parameters are drawn from fixed ranges, and the
// class label is the kind's index in the list.
inline std::vector<PointCloud> make_synthetic_clouds(const std::vector<std::string>& shape_names,
                                                     int64_t clouds, int64_t points, uint64_t seed) {
  if (shape_names.empty()) throw UsageError("config: data.shapes is empty");
  if (clouds < 1) throw UsageError("config: data.clouds must be >= 1");
  if (points < 1) throw UsageError("config: data.points must be >= 1");
  Rng rng(seed ^ 0x5953544e59535444ull);
  std::vector<PointCloud> out;
  out.reserve(static_cast<size_t>(clouds));
  for (int64_t i = 0; i < clouds; ++i) {
    size_t which = static_cast<size_t>(i) % shape_names.size();
    ShapeKind kind = shape_from_name(shape_names[which]);
    std::vector<double> params;
    switch (kind) {
      case ShapeKind::Sphere: params = {rng.uniform(0.5, 1.0)}; break;
      case ShapeKind::Cube: params = {rng.uniform(0.5, 1.0)}; break;
      case ShapeKind::Torus: {
        double R = rng.uniform(0.6, 1.0);
        params = {R, rng.uniform(0.2, 0.5) * R};
        break;
      }
      case ShapeKind::Cylinder: params = {rng.uniform(0.3, 0.8), rng.uniform(0.5, 1.5)}; break;
      case ShapeKind::Ellipsoid:
        params = {rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0), rng.uniform(0.4, 1.0)};
        break;
    }
    auto [cloud, shape] = synth_shape(kind, params, points, rng);
    cloud.cls = static_cast<int>(which);
    cloud.source = std::string(shape_name(kind)) + "#" + std::to_string(i);
    out.push_back(std::move(cloud));
  }
  return out;
}

// Dataset per the config: synthetic generator or a directory of .xyz files.
inline std::vector<PointCloud> load_clouds(const Config& c) {
  const std::string& src = c.str("data.source");
  if (src == "synthetic")
    return make_synthetic_clouds(c.str_list("data.shapes"), c.integer("data.clouds"),
                                 c.integer("data.points"), static_cast<uint64_t>(c.integer("train.seed")));
  namespace fs = std::filesystem;
  if (!fs::is_directory(src)) throw DataError("data: '" + src + "' is not a directory of .xyz files");
  std::vector<std::string> paths;
  for (const auto& e : fs::directory_iterator(src))
    if (e.path().extension() == ".xyz") paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw DataError("data: no .xyz files in '" + src + "'");
  std::vector<PointCloud> out;
  for (const std::string& p : paths) out.push_back(load_xyz(p));
  return out;
}

}  // namespace uae
