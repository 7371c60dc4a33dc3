#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "uae/io.hpp"
#include "uae/model.hpp"

namespace uae {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::map<std::string, std::vector<double>> m, v;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // no weight decay
};

// One bias-corrected Adam update over the model's trainable parameters.
template <class T>
void adam_step(Model<T>& model, const GradientMap<T>& grads, AdamState& st, double lr) {
  st.step += 1;
  double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (auto& [name, param] : model.params()) {
    if (!param.trainable()) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const auto& g = git->second.data();
    for (T gv : g)
      if (!std::isfinite(static_cast<double>(gv)))
        throw NumericError("adam: non-finite gradient for parameter '" + name + "'");
    auto& w = param.leaf_data();
    auto& m = st.m[name];
    auto& v = st.v[name];
    if (m.size() != w.size()) m.assign(w.size(), 0.0);
    if (v.size() != w.size()) v.assign(w.size(), 0.0);
    for (size_t i = 0; i < w.size(); ++i) {
      double gi = static_cast<double>(g[i]);
      m[i] = st.beta1 * m[i] + (1 - st.beta1) * gi;
      v[i] = st.beta2 * v[i] + (1 - st.beta2) * gi * gi;
      double mhat = m[i] / bc1, vhat = v[i] / bc2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

// Plain SGD (the segmentation preset's optimizer).
template <class T>
void sgd_step(Model<T>& model, const GradientMap<T>& grads, double lr) {
  for (auto& [name, param] : model.params()) {
    if (!param.trainable()) continue;
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const auto& g = git->second.data();
    auto& w = param.leaf_data();
    for (size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(static_cast<double>(g[i])))
        throw NumericError("sgd: non-finite gradient for parameter '" + name + "'");
      w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * static_cast<double>(g[i]));
    }
  }
}

// ---------------------------------------------------------------------------
// Training configuration and schedules

enum class LrSchedule { StepDecay, Cosine, Constant };

struct TrainConfig {
  double r = 0.125;
  SampleStrategy strategy = SampleStrategy::Random;
  LossConfig loss;
  std::string optimizer = "adam";  // "adam" or "sgd"
  double lr0 = 1e-3;
  double decay_factor = 0.7;
  int64_t decay_period = 10;  // epochs
  LrSchedule schedule = LrSchedule::StepDecay;
  double lr_floor = 1e-5;  // cosine annealing floor
  int64_t epochs = 120;
  int64_t max_steps = 0;  // 0 = no cap
  int64_t batch_size = 32;
  uint64_t seed = 0;
  // Augmentation switches (off unless enabled).
  bool aug_scale = false;      // anisotropic per-axis scale
  double aug_scale_lo = 0.67, aug_scale_hi = 1.5;
  bool aug_translate = false;  // per-axis translation
  double aug_translate_range = 0.2;
  double aug_dropout = 0.0;    // input dropout rate (0 = off)
  int64_t checkpoint_every = 0;  // epochs; 0 = final only

  void validate() const {
    loss.validate();
    if (!(r > 0 && r <= 1)) throw ValueError("train: subsample ratio must be in (0,1]");
    if (lr0 < 0) throw ValueError("train: lr0 must be non-negative");
    if (!(decay_factor > 0 && decay_factor <= 1)) throw ValueError("train: decay factor must be in (0,1]");
    if (decay_period < 1) throw ValueError("train: decay period must be >= 1");
    if (epochs < 1) throw ValueError("train: epochs must be >= 1");
    if (batch_size < 1) throw ValueError("train: batch size must be >= 1");
    if (!(aug_dropout >= 0 && aug_dropout < 1)) throw ValueError("train: input dropout in [0,1)");
    if (aug_scale_lo <= 0 || aug_scale_hi < aug_scale_lo) throw ValueError("train: bad scale range");
    if (optimizer != "adam" && optimizer != "sgd") throw ValueError("train: unknown optimizer");
  }
};

inline double lr_at(int64_t epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw ValueError("lr_at: epoch must be >= 0");
  switch (cfg.schedule) {
    case LrSchedule::StepDecay:
      return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_period));
    case LrSchedule::Cosine: {
      double t = static_cast<double>(std::min(epoch, cfg.epochs)) / static_cast<double>(cfg.epochs);
      return cfg.lr_floor + 0.5 * (cfg.lr0 - cfg.lr_floor) * (1.0 + std::cos(M_PI * t));
    }
    case LrSchedule::Constant: return cfg.lr0;
  }
  return cfg.lr0;
}

// ---------------------------------------------------------------------------
// Augmentation

// Per-axis anisotropic scale, per-axis translation, input dropout with
// duplication (dropped points are replaced by the first surviving point,
// keeping N fixed). Switch order: scale, translate, dropout.
inline PointCloud augment(const PointCloud& cloud, Rng& rng, const TrainConfig& cfg) {
  PointCloud out = cloud;
  int64_t n = out.size();
  if (cfg.aug_scale) {
    double s[3];
    for (double& v : s) v = rng.uniform(cfg.aug_scale_lo, cfg.aug_scale_hi);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < 3; ++c) out.pts[3 * i + c] *= s[c];
  }
  if (cfg.aug_translate) {
    double t[3];
    for (double& v : t) v = rng.uniform(-cfg.aug_translate_range, cfg.aug_translate_range);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t c = 0; c < 3; ++c) out.pts[3 * i + c] += t[c];
  }
  if (cfg.aug_dropout > 0) {
    std::vector<char> keep(static_cast<size_t>(n));
    int64_t first_kept = -1;
    for (int64_t i = 0; i < n; ++i) {
      keep[static_cast<size_t>(i)] = rng.uniform() >= cfg.aug_dropout;
      if (keep[static_cast<size_t>(i)] && first_kept < 0) first_kept = i;
    }
    if (first_kept >= 0) {
      for (int64_t i = 0; i < n; ++i)
        if (!keep[static_cast<size_t>(i)])
          for (int64_t c = 0; c < 3; ++c) out.pts[3 * i + c] = out.pts[3 * first_kept + c];
    }  // all dropped: leave the cloud unchanged
  }
  return out;
}

// ---------------------------------------------------------------------------
// Joint loss (Eq.-4 style weighting)

template <class T>
Tensor<T> total_loss(const Tensor<T>& pred, const PointCloud& target, const LossConfig& lc) {
  lc.validate();
  if (pred.rank() != 2 || pred.dim(1) != 3 || pred.dim(0) < 1)
    throw ShapeError("total_loss: expected non-empty Nx3 prediction");
  target.validate();
  Tensor<T> x = cloud_to_tensor<T>(target);
  Tensor<T> rec;
  if (lc.variant == LossVariant::CD || lc.variant == LossVariant::CD_RL)
    rec = chamfer_distance(pred, x);
  else
    rec = earth_movers_distance(pred, x);
  Tensor<T> out = scale(rec, lc.alpha);
  if (lc.variant == LossVariant::CD_RL || lc.variant == LossVariant::EMD_RL)
    out = add(out, scale(repulsion_loss(pred, lc.k_rep, lc.h), lc.beta));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint packing

template <class T>
Checkpoint pack_checkpoint(const Model<T>& m, const AdamState* opt, CheckpointMeta meta) {
  Checkpoint c;
  meta.config_hash = m.cfg.hash();
  meta.extra["backbone_hash"] = m.cfg.backbone_hash();
  c.meta = std::move(meta);
  for (const auto& [name, t] : m.params()) {
    std::vector<double> d(t.data().begin(), t.data().end());
    c.tensors.emplace(name, std::make_pair(t.shape(), std::move(d)));
  }
  for (const auto& [name, st] : m.bn_states()) {
    int64_t w = static_cast<int64_t>(st.running_mean.size());
    c.tensors.emplace("bn:" + name + ":mean",
                      std::make_pair(Shape{w}, std::vector<double>(st.running_mean.begin(),
                                                                   st.running_mean.end())));
    c.tensors.emplace("bn:" + name + ":var",
                      std::make_pair(Shape{w}, std::vector<double>(st.running_var.begin(),
                                                                   st.running_var.end())));
    c.tensors.emplace("bn:" + name + ":init",
                      std::make_pair(Shape{1}, std::vector<double>{st.running_mean.empty() ? 0.0 : 1.0}));
  }
  if (opt) {
    c.meta.extra["adam_step"] = opt->step;
    for (const auto& [name, mv] : opt->m)
      c.tensors.emplace("opt:m:" + name,
                        std::make_pair(Shape{static_cast<int64_t>(mv.size())}, mv));
    for (const auto& [name, vv] : opt->v)
      c.tensors.emplace("opt:v:" + name,
                        std::make_pair(Shape{static_cast<int64_t>(vv.size())}, vv));
  }
  return c;
}

template <class T>
void unpack_checkpoint(Model<T>& m, AdamState* opt, const Checkpoint& c) {
  if (c.meta.config_hash != m.cfg.hash())
    throw DataError("checkpoint: architecture config hash mismatch");
  int64_t count = 0;
  for (auto& [name, param] : m.params()) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw DataError("checkpoint: missing parameter '" + name + "'");
    const auto& [shape, data] = it->second;
    if (shape != param.shape())
      throw DataError("checkpoint: shape mismatch for parameter '" + name + "'");
    auto& w = param.leaf_data();
    for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(data[i]);
    count += param.size();
  }
  if (count != m.param_count()) throw DataError("checkpoint: parameter count mismatch");
  for (auto& [name, st] : m.bn_states()) {
    auto mi = c.tensors.find("bn:" + name + ":mean");
    auto vi = c.tensors.find("bn:" + name + ":var");
    auto ii = c.tensors.find("bn:" + name + ":init");
    if (mi == c.tensors.end() || vi == c.tensors.end() || ii == c.tensors.end())
      throw DataError("checkpoint: missing batch-norm state for '" + name + "'");
    if (ii->second.second[0] != 0.0) {
      st.running_mean.assign(mi->second.second.begin(), mi->second.second.end());
      st.running_var.assign(vi->second.second.begin(), vi->second.second.end());
    } else {
      st.running_mean.clear();
      st.running_var.clear();
    }
  }
  if (opt) {
    opt->step = c.meta.extra.value("adam_step", int64_t(0));
    opt->m.clear();
    opt->v.clear();
    for (const auto& [name, entry] : c.tensors) {
      if (name.rfind("opt:m:", 0) == 0) opt->m[name.substr(6)] = entry.second;
      if (name.rfind("opt:v:", 0) == 0) opt->v[name.substr(6)] = entry.second;
    }
  }
}

// Restore only the encoder/decoder ("backbone") from a checkpoint,
// leaving any heads at their fresh initialization. Lets a transfer
// model with heads consume a head-less pre-training checkpoint.
template <class T>
void load_backbone(Model<T>& m, const Checkpoint& c) {
  uint64_t want = m.cfg.backbone_hash();
  uint64_t got = c.meta.extra.value("backbone_hash", uint64_t(0));
  if (got != want) throw DataError("checkpoint: encoder/decoder architecture mismatch");
  for (auto& [name, param] : m.params()) {
    if (name.rfind("head.", 0) == 0) continue;
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw DataError("checkpoint: missing parameter '" + name + "'");
    const auto& [shape, data] = it->second;
    if (shape != param.shape())
      throw DataError("checkpoint: shape mismatch for parameter '" + name + "'");
    auto& w = param.leaf_data();
    for (size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(data[i]);
  }
  for (auto& [name, st] : m.bn_states()) {
    auto mi = c.tensors.find("bn:" + name + ":mean");
    auto vi = c.tensors.find("bn:" + name + ":var");
    auto ii = c.tensors.find("bn:" + name + ":init");
    if (mi == c.tensors.end() || vi == c.tensors.end() || ii == c.tensors.end())
      throw DataError("checkpoint: missing batch-norm state for '" + name + "'");
    if (ii->second.second[0] != 0.0) {
      st.running_mean.assign(mi->second.second.begin(), mi->second.second.end());
      st.running_var.assign(vi->second.second.begin(), vi->second.second.end());
    } else {
      st.running_mean.clear();
      st.running_var.clear();
    }
  }
}

// ---------------------------------------------------------------------------
// Pre-training loop

struct StepRecord {
  int64_t epoch = 0, step = 0;
  double loss = 0, cd = 0, lr = 0;
};

struct PretrainResult {
  std::vector<StepRecord> log;       // one record per optimization step
  std::vector<double> epoch_mean_cd; // per epoch
  double initial_cd = 0;             // mean CD of the untrained model
  int64_t steps_run = 0;
  std::string checkpoint_path;
};

// Deterministic columns only; timing belongs to the run summary JSON.
inline void write_metrics_csv(const std::string& path, const std::vector<StepRecord>& log) {
  std::ofstream out(path);
  if (!out) throw DataError("metrics: cannot open '" + path + "' for writing");
  out << "epoch,step,loss,cd,lr\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof(buf), "%lld,%lld,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(r.epoch), static_cast<long long>(r.step), r.loss, r.cd, r.lr);
    out << buf;
  }
}

namespace detail {

// Mean CD between the model's reconstructions and the (normalized)
// clouds, evaluated without augmentation or graph recording.
template <class T>
double eval_mean_cd(Model<T>& model, const std::vector<PointCloud>& clouds, const TrainConfig& cfg,
                    uint64_t seed) {
  NoGradGuard ng;
  Rng rng(seed);
  std::vector<double> cds;
  for (const auto& raw : clouds) {
    PointCloud x = normalize(raw, NormalizeTarget::UnitCube);
    int64_t count = std::max<int64_t>(1, std::llround(cfg.r * static_cast<double>(x.size())));
    SubsampleResult sub = cfg.strategy == SampleStrategy::Fps
                              ? farthest_point_sample(x, count)
                              : (cfg.strategy == SampleStrategy::Local
                                     ? local_subsample(x, count, rng)
                                     : random_subsample_count(x, count, rng));
    Tensor<T> p = cloud_to_tensor<T>(select_points(x, sub.indices));
    Tensor<T> feats = encoder_forward(model, p, 1, /*train=*/false);
    Tensor<T> pred = decoder_forward(model, feats, cfg.r, 1, /*train=*/false);
    PointCloud pc = tensor_to_cloud(pred);
    cds.push_back(chamfer_distance_value(pc, x));
  }
  return sorted_sum(cds) / static_cast<double>(cds.size());
}

}  // namespace detail

// Self-supervised pre-training. Per batch: normalize -> augment ->
// subsample -> encode -> decode -> total_loss -> backward -> step.
// Fully deterministic under cfg.seed in this single-worker form.
template <class T>
PretrainResult pretrain(const Dataset& dataset, Model<T>& model, const TrainConfig& cfg,
                        const std::string& out_dir = "", const Checkpoint* resume = nullptr) {
  cfg.validate();
  dataset.validate();
  if (dataset.items.empty()) throw DataError("pretrain: empty dataset");

  AdamState opt;
  Rng rng(cfg.seed);
  int64_t start_epoch = 0;
  if (resume) {
    unpack_checkpoint(model, &opt, *resume);
    rng.deserialize(resume->meta.rng_state);
    start_epoch = resume->meta.epoch;
  }

  PretrainResult res;
  res.initial_cd = detail::eval_mean_cd(model, dataset.items, cfg, cfg.seed + 1);
  std::string ckpt_path;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    ckpt_path = out_dir + "/checkpoint.bin";
  }
  auto save = [&](int64_t epoch, int64_t step) {
    if (ckpt_path.empty()) return;
    CheckpointMeta meta;
    meta.epoch = epoch;
    meta.step = step;
    meta.rng_state = rng.serialize();
    save_checkpoint(ckpt_path, pack_checkpoint(model, &opt, meta));
    res.checkpoint_path = ckpt_path;
  };

  int64_t n = static_cast<int64_t>(dataset.items.size());
  int64_t global_step = resume ? resume->meta.step : 0;
  bool capped = false;
  for (int64_t epoch = start_epoch; epoch < cfg.epochs && !capped; ++epoch) {
    double lr = lr_at(epoch, cfg);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(i + 1))]);
    std::vector<double> epoch_cds;
    for (int64_t base = 0; base < n && !capped; base += cfg.batch_size) {
      int64_t bsz = std::min(cfg.batch_size, n - base);
      // Prepare the batch: normalized targets and flattened subsampled inputs.
      std::vector<PointCloud> targets;
      std::vector<double> flat;
      int64_t rn = -1;
      for (int64_t b = 0; b < bsz; ++b) {
        PointCloud x = normalize(dataset.items[static_cast<size_t>(order[static_cast<size_t>(base + b)])],
                                 NormalizeTarget::UnitCube);
        x = augment(x, rng, cfg);
        int64_t count = std::max<int64_t>(1, std::llround(cfg.r * static_cast<double>(x.size())));
        SubsampleResult sub = cfg.strategy == SampleStrategy::Fps
                                  ? farthest_point_sample(x, count)
                                  : (cfg.strategy == SampleStrategy::Local
                                         ? local_subsample(x, count, rng)
                                         : random_subsample_count(x, count, rng));
        if (rn < 0) rn = count;
        if (count != rn) throw DataError("pretrain: inconsistent subsample counts in batch");
        PointCloud p = select_points(x, sub.indices);
        flat.insert(flat.end(), p.pts.begin(), p.pts.end());
        targets.push_back(std::move(x));
      }
      Tensor<T> coords = Tensor<T>::from_data({bsz * rn, 3}, std::vector<T>(flat.begin(), flat.end()));
      Tensor<T> feats = encoder_forward(model, coords, bsz, /*train=*/true);
      Tensor<T> pred = decoder_forward(model, feats, cfg.r, bsz, /*train=*/true);
      int64_t per = pred.dim(0) / bsz;
      Tensor<T> loss;
      std::vector<double> batch_cds;
      for (int64_t b = 0; b < bsz; ++b) {
        std::vector<int64_t> idx(static_cast<size_t>(per));
        std::iota(idx.begin(), idx.end(), b * per);
        Tensor<T> slice = (bsz == 1) ? pred : gather_rows(pred, idx);
        Tensor<T> lb = total_loss(slice, targets[static_cast<size_t>(b)], cfg.loss);
        loss = loss.valid() ? add(loss, lb) : lb;
        {
          NoGradGuard ng;
          PointCloud pc = tensor_to_cloud(slice.detached());
          batch_cds.push_back(chamfer_distance_value(pc, targets[static_cast<size_t>(b)]));
        }
      }
      loss = scale(loss, 1.0 / static_cast<double>(bsz));
      double lv = static_cast<double>(loss.scalar());
      if (!std::isfinite(lv))
        throw NumericError("pretrain: non-finite loss at step " + std::to_string(global_step) +
                           "; last good checkpoint retained");
      GradientMap<T> grads = backward(loss, model.trainables());
      if (cfg.optimizer == "adam")
        adam_step(model, grads, opt, lr);
      else
        sgd_step(model, grads, lr);
      global_step += 1;
      double cd = sorted_sum(batch_cds) / static_cast<double>(batch_cds.size());
      epoch_cds.push_back(cd);
      res.log.push_back({epoch, global_step, lv, cd, lr});
      if (cfg.max_steps > 0 && global_step >= cfg.max_steps) capped = true;
    }
    res.epoch_mean_cd.push_back(sorted_sum(epoch_cds) / static_cast<double>(epoch_cds.size()));
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      save(epoch + 1, global_step);
  }
  res.steps_run = global_step;
  save(cfg.epochs, global_step);
  return res;
}

// ---------------------------------------------------------------------------
// Transfer: linear probe / fine-tuning

enum class TransferMode { Probe, Finetune };
enum class HeadKind { Classification, Segmentation };

struct TransferResult {
  double train_accuracy = 0;
  double test_accuracy = 0;  // overall accuracy (classification)
  double test_miou = 0;      // segmentation
  std::vector<StepRecord> log;
};

// Per-sample part-IoU mean: parts with empty union are skipped.
inline double sample_miou(const std::vector<int>& gt, const std::vector<int>& pred, int64_t parts) {
  if (gt.size() != pred.size() || gt.empty()) throw ValueError("miou: label size mismatch");
  std::vector<double> ious;
  for (int64_t p = 0; p < parts; ++p) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < gt.size(); ++i) {
      bool g = gt[i] == p, q = pred[i] == p;
      inter += g && q;
      uni += g || q;
    }
    if (uni > 0) ious.push_back(static_cast<double>(inter) / static_cast<double>(uni));
  }
  if (ious.empty()) return 1.0;
  return sorted_sum(ious) / static_cast<double>(ious.size());
}

namespace detail {

// Frozen-encoder features for one cloud (eval-mode batch norm).
template <class T>
Tensor<T> encode_eval(Model<T>& model, const PointCloud& cloud) {
  NoGradGuard ng;
  return encoder_forward(model, cloud_to_tensor<T>(cloud), 1, /*train=*/false);
}

}  // namespace detail

// Probe: encoder frozen with eval-mode batch norm, only the head trains
// (features are cached since they never change). Finetune: everything
// trains with train-mode batch norm.
template <class T>
TransferResult transfer(const Dataset& train_set, const Dataset& test_set, Model<T>& model,
                        TransferMode mode, HeadKind head, const TrainConfig& cfg) {
  cfg.validate();
  train_set.validate();
  test_set.validate();
  if (train_set.items.empty() || test_set.items.empty()) throw DataError("transfer: empty dataset");
  int64_t label_cap = head == HeadKind::Classification ? model.cfg.classes : model.cfg.parts;
  if (label_cap < 1) throw ValueError("transfer: model lacks the requested head");
  auto check_labels = [&](const Dataset& ds) {
    for (const auto& c : ds.items) {
      if (head == HeadKind::Classification) {
        if (c.cls < 0 || c.cls >= label_cap)
          throw DataError("transfer: class label out of range for '" + c.source + "'");
      } else {
        if (c.labels.empty()) throw DataError("transfer: missing part labels for '" + c.source + "'");
        for (int l : c.labels)
          if (l < 0 || l >= label_cap)
            throw DataError("transfer: part label out of range for '" + c.source + "'");
      }
    }
  };
  check_labels(train_set);
  check_labels(test_set);

  bool probe = mode == TransferMode::Probe;
  if (probe) {
    model.set_trainable("enc.", false);
    model.set_trainable("dec.", false);
  }
  std::string head_prefix = head == HeadKind::Classification ? "head.cls" : "head.seg";

  auto normalize_all = [](const Dataset& ds) {
    std::vector<PointCloud> out;
    out.reserve(ds.items.size());
    for (const auto& c : ds.items) out.push_back(normalize(c, NormalizeTarget::UnitSphere));
    return out;
  };
  std::vector<PointCloud> train_clouds = normalize_all(train_set);
  std::vector<PointCloud> test_clouds = normalize_all(test_set);

  bool augmented = cfg.aug_scale || cfg.aug_translate || cfg.aug_dropout > 0;
  // Probe-mode feature cache: the frozen encoder is deterministic, so
  // features are computed once per item when augmentation is off.
  std::vector<Tensor<T>> cache;
  if (probe && !augmented)
    for (const auto& c : train_clouds) cache.push_back(detail::encode_eval(model, c));

  AdamState opt;
  Rng rng(cfg.seed);
  TransferResult res;
  int64_t n = static_cast<int64_t>(train_clouds.size());
  int64_t global_step = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = lr_at(epoch, cfg);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(i + 1))]);
    for (int64_t base = 0; base < n; base += cfg.batch_size) {
      int64_t bsz = std::min(cfg.batch_size, n - base);
      Tensor<T> loss;
      for (int64_t b = 0; b < bsz; ++b) {
        int64_t item = order[static_cast<size_t>(base + b)];
        const PointCloud& raw = train_clouds[static_cast<size_t>(item)];
        Tensor<T> feats;
        PointCloud used = raw;
        if (probe && !augmented) {
          feats = cache[static_cast<size_t>(item)];
        } else {
          used = augmented ? augment(raw, rng, cfg) : raw;
          if (probe)
            feats = detail::encode_eval(model, used);
          else
            feats = encoder_forward(model, cloud_to_tensor<T>(used), 1, /*train=*/true);
        }
        Tensor<T> lb;
        if (head == HeadKind::Classification) {
          Tensor<T> logits = classification_head(model, feats, 1, /*train=*/true, rng);
          lb = cross_entropy(logits, {used.cls});
        } else {
          Tensor<T> logits = segmentation_head(model, feats, 1, /*train=*/true, rng);
          std::vector<int64_t> tg(used.labels.begin(), used.labels.end());
          lb = cross_entropy(logits, tg);
        }
        loss = loss.valid() ? add(loss, lb) : lb;
      }
      loss = scale(loss, 1.0 / static_cast<double>(bsz));
      double lv = static_cast<double>(loss.scalar());
      if (!std::isfinite(lv))
        throw NumericError("transfer: non-finite loss at step " + std::to_string(global_step));
      GradientMap<T> grads = backward(loss, model.trainables());
      if (cfg.optimizer == "adam")
        adam_step(model, grads, opt, lr);
      else
        sgd_step(model, grads, lr);
      global_step += 1;
      res.log.push_back({epoch, global_step, lv, 0.0, lr});
    }
  }

  // Evaluation (eval-mode everything; dropout off).
  Rng eval_rng(cfg.seed + 17);
  auto evaluate = [&](const std::vector<PointCloud>& clouds, double* acc, double* miou) {
    NoGradGuard ng;
    int64_t correct = 0;
    std::vector<double> mious;
    for (const auto& c : clouds) {
      Tensor<T> feats = detail::encode_eval(model, c);
      if (head == HeadKind::Classification) {
        Tensor<T> logits = classification_head(model, feats, 1, /*train=*/false, eval_rng);
        int64_t best = 0;
        for (int64_t j = 1; j < model.cfg.classes; ++j)
          if (logits.data()[static_cast<size_t>(j)] > logits.data()[static_cast<size_t>(best)]) best = j;
        if (best == c.cls) correct += 1;
      } else {
        Tensor<T> logits = segmentation_head(model, feats, 1, /*train=*/false, eval_rng);
        std::vector<int> pred(static_cast<size_t>(c.size()));
        for (int64_t i = 0; i < c.size(); ++i) {
          int64_t best = 0;
          for (int64_t j = 1; j < model.cfg.parts; ++j)
            if (logits.data()[static_cast<size_t>(i * model.cfg.parts + j)] >
                logits.data()[static_cast<size_t>(i * model.cfg.parts + best)])
              best = j;
          pred[static_cast<size_t>(i)] = static_cast<int>(best);
        }
        mious.push_back(sample_miou(c.labels, pred, model.cfg.parts));
      }
    }
    if (acc) *acc = static_cast<double>(correct) / static_cast<double>(clouds.size());
    if (miou && !mious.empty()) *miou = sorted_sum(mious) / static_cast<double>(mious.size());
  };
  evaluate(train_clouds, &res.train_accuracy, nullptr);
  evaluate(test_clouds, &res.test_accuracy, &res.test_miou);

  if (probe) {
    model.set_trainable("enc.", true);
    model.set_trainable("dec.", true);
  }
  return res;
}

}  // namespace uae
