#pragma once

#include <cmath>
#include <map>
#include <string>

#include "uae/geometry.hpp"
#include "uae/ops.hpp"

namespace uae {

// ---------------------------------------------------------------------------
// Architecture configuration

struct ArchConfig {
  int64_t k = 20;                                  // encoder graph neighbors
  std::vector<int64_t> edge_widths = {64, 64, 128, 256};
  int64_t emb = 648;                               // encoder output width
  int64_t d = 128;                                 // decoder feature width D
  double grid_span = 0.2;                          // 2-d grid code half-extent
  int64_t classes = 0;                             // 0 = no classification head
  int64_t parts = 0;                               // 0 = no segmentation head
  std::vector<int64_t> head_widths = {512, 256};   // hidden widths of the heads
  double head_dropout = 0.5;

  void validate() const {
    if (k < 1) throw ValueError("arch: k must be >= 1");
    if (edge_widths.size() != 4) throw ValueError("arch: expected four edge-conv widths");
    for (int64_t w : edge_widths)
      if (w < 1) throw ValueError("arch: edge-conv widths must be positive");
    if (emb < 1 || d < 1) throw ValueError("arch: emb and d must be positive");
    if (d % 4 != 0) throw ValueError("arch: decoder width d must be divisible by 4");
    if (head_widths.size() != 2) throw ValueError("arch: expected two head hidden widths");
    if (!(head_dropout >= 0 && head_dropout < 1)) throw ValueError("arch: head dropout in [0,1)");
    if (grid_span <= 0) throw ValueError("arch: grid span must be positive");
  }

  int64_t skip_width() const {
    int64_t s = 0;
    for (int64_t w : edge_widths) s += w;
    return s;
  }
  int64_t pooled_width() const { return 2 * emb; }

  // Hash of the encoder/decoder shape only; heads may differ between a
  // pre-training run and the transfer model that reuses its backbone.
  uint64_t backbone_hash() const {
    std::string s = "k=" + std::to_string(k) + ";w=";
    for (int64_t w : edge_widths) s += std::to_string(w) + ",";
    s += ";emb=" + std::to_string(emb) + ";d=" + std::to_string(d) +
         ";span=" + std::to_string(grid_span);
    return fnv1a64(s);
  }

  uint64_t hash() const {
    std::string s = "k=" + std::to_string(k) + ";w=";
    for (int64_t w : edge_widths) s += std::to_string(w) + ",";
    s += ";emb=" + std::to_string(emb) + ";d=" + std::to_string(d) +
         ";span=" + std::to_string(grid_span) + ";cls=" + std::to_string(classes) +
         ";parts=" + std::to_string(parts) + ";h=";
    for (int64_t w : head_widths) s += std::to_string(w) + ",";
    s += ";drop=" + std::to_string(head_dropout);
    return fnv1a64(s);
  }
};

// ---------------------------------------------------------------------------
// Parameter store

template <class T>
class Model {
 public:
  ArchConfig cfg;

  Model() = default;
  Model(ArchConfig c, Rng& rng) : cfg(std::move(c)) {
    cfg.validate();
    // Encoder: four edge convs + embedding MLP.
    int64_t din = 3;
    for (size_t l = 0; l < cfg.edge_widths.size(); ++l) {
      add_lbr("enc.edge" + std::to_string(l), 2 * din, cfg.edge_widths[l], rng);
      din = cfg.edge_widths[l];
    }
    add_lbr("enc.emb", cfg.skip_width(), cfg.emb, rng);
    // Decoder.
    add_lbr("dec.entry", cfg.emb, cfg.d, rng);
    for (const char* up : {"dec.up1", "dec.up2"}) {
      std::string u(up);
      add_lbr(u + ".mlp", cfg.d + 2, cfg.d, rng);
      add_linear(u + ".attn.q", cfg.d, cfg.d / 4, rng, /*bias=*/false);
      add_linear(u + ".attn.k", cfg.d, cfg.d / 4, rng, /*bias=*/false);
      add_linear(u + ".attn.v", cfg.d, cfg.d, rng, /*bias=*/false);
      add_lbr(u + ".attn.lbr", cfg.d, cfg.d, rng);
    }
    add_lbr("dec.down.edge", 2 * cfg.d, cfg.d, rng);
    add_lbr("dec.down.mlp", cfg.d, cfg.d, rng);
    add_linear("dec.final", cfg.d, 3, rng);
    // Heads.
    if (cfg.classes > 0) {
      add_linear("head.cls.l0", cfg.pooled_width(), cfg.head_widths[0], rng);
      add_linear("head.cls.l1", cfg.head_widths[0], cfg.head_widths[1], rng);
      add_linear("head.cls.l2", cfg.head_widths[1], cfg.classes, rng);
    }
    if (cfg.parts > 0) {
      add_linear("head.seg.l0", cfg.emb + cfg.pooled_width(), cfg.head_widths[0], rng);
      add_linear("head.seg.l1", cfg.head_widths[0], cfg.head_widths[1], rng);
      add_linear("head.seg.l2", cfg.head_widths[1], cfg.parts, rng);
    }
  }

  Tensor<T>& p(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValueError("model: unknown parameter '" + name + "'");
    return it->second;
  }
  BNState<T>& bn(const std::string& name) {
    auto it = bn_.find(name);
    if (it == bn_.end()) throw ValueError("model: unknown batch-norm state '" + name + "'");
    return it->second;
  }
  std::map<std::string, Tensor<T>>& params() { return params_; }
  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  std::map<std::string, BNState<T>>& bn_states() { return bn_; }
  const std::map<std::string, BNState<T>>& bn_states() const { return bn_; }

  std::vector<Tensor<T>> trainables(const std::string& prefix = "") const {
    std::vector<Tensor<T>> out;
    for (const auto& [name, t] : params_)
      if (name.rfind(prefix, 0) == 0) out.push_back(t);
    return out;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  // Freeze or unfreeze a subtree of parameters by name prefix.
  void set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, t] : params_)
      if (name.rfind(prefix, 0) == 0) t.set_trainable(on);
  }

  template <class U>
  Model<U> cast() const {
    Model<U> out;
    out.cfg = cfg;
    for (const auto& [name, t] : params_) {
      auto c = t.template cast<U>();
      out.params().emplace(name, Tensor<U>::param(name, c.shape(), c.data()));
    }
    for (const auto& [name, s] : bn_) {
      BNState<U> su;
      su.running_mean.assign(s.running_mean.begin(), s.running_mean.end());
      su.running_var.assign(s.running_var.begin(), s.running_var.end());
      out.bn_states().emplace(name, std::move(su));
    }
    return out;
  }

 private:
  void add_linear(const std::string& name, int64_t in, int64_t out, Rng& rng, bool bias = true) {
    double limit = std::sqrt(6.0 / static_cast<double>(in));
    std::vector<T> w(static_cast<size_t>(in * out));
    for (auto& v : w) v = static_cast<T>(rng.uniform(-limit, limit));
    params_.emplace(name + ".w", Tensor<T>::param(name + ".w", {in, out}, std::move(w)));
    if (bias)
      params_.emplace(name + ".b", Tensor<T>::param(name + ".b", {out},
                                                    std::vector<T>(static_cast<size_t>(out), T(0))));
  }

  void add_lbr(const std::string& name, int64_t in, int64_t out, Rng& rng) {
    add_linear(name, in, out, rng);
    params_.emplace(name + ".g", Tensor<T>::param(name + ".g", {out},
                                                  std::vector<T>(static_cast<size_t>(out), T(1))));
    params_.emplace(name + ".be", Tensor<T>::param(name + ".be", {out},
                                                   std::vector<T>(static_cast<size_t>(out), T(0))));
    bn_.emplace(name, BNState<T>{});
  }

  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, BNState<T>> bn_;
};

// ---------------------------------------------------------------------------
// Shared layer helpers

template <class T>
Tensor<T> linear(Model<T>& m, const Tensor<T>& x, const std::string& name) {
  Tensor<T> y = matmul(x, m.p(name + ".w"));
  if (m.params().count(name + ".b")) y = add(y, m.p(name + ".b"));
  return y;
}

// Linear -> batch-norm -> ReLU; statistics pool over all rows of x.
template <class T>
Tensor<T> lbr(Model<T>& m, const Tensor<T>& x, const std::string& name, bool train) {
  Tensor<T> y = linear(m, x, name);
  y = batch_norm(y, m.p(name + ".g"), m.p(name + ".be"), m.bn(name), train);
  return relu(y);
}

// ---------------------------------------------------------------------------
// Graph construction over a flattened batch

// Per-cloud exact KNN over a (batch*m) x d value table; neighbor indices
// are global row indices, each cloud's rows only see their own cloud.
template <class T>
NeighborGraph batched_knn_graph(const Tensor<T>& values, int64_t batch, int64_t k, bool include_self,
                                FeatureSpace space) {
  if (values.rank() != 2) throw ShapeError("knn graph: expected 2-D table");
  int64_t rows = values.dim(0);
  if (batch < 1 || rows % batch != 0)
    throw ShapeError("knn graph: " + std::to_string(rows) + " rows not divisible into " +
                     std::to_string(batch) + " clouds");
  int64_t m = rows / batch, d = values.dim(1);
  if (k > (include_self ? m : m - 1))
    throw ValueError("knn graph: k=" + std::to_string(k) + " too large for clouds of " +
                     std::to_string(m) + " points");
  NeighborGraph g;
  g.rows = rows;
  g.k = k;
  g.include_self = include_self;
  g.space = space;
  g.neighbors.resize(static_cast<size_t>(rows * k));
  std::vector<double> block(static_cast<size_t>(m * d));
  std::vector<int64_t> row;
  for (int64_t b = 0; b < batch; ++b) {
    const T* src = values.data().data() + b * m * d;
    for (int64_t i = 0; i < m * d; ++i) block[static_cast<size_t>(i)] = static_cast<double>(src[i]);
    KdTree tree(block.data(), m, static_cast<int>(d));
    for (int64_t i = 0; i < m; ++i) {
      tree.knn(block.data() + i * d, k, row, include_self ? -1 : i);
      for (int64_t j = 0; j < k; ++j) g.neighbors[static_cast<size_t>((b * m + i) * k + j)] = b * m + row[static_cast<size_t>(j)];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// EdgeConv

// f_i = max_j ReLU(BN(h(x_i, x_i - x_j))) over the graph neighbors.
template <class T>
Tensor<T> edge_conv(Model<T>& m, const Tensor<T>& features, const NeighborGraph& graph,
                    const std::string& name, bool train) {
  if (features.rank() != 2) throw ShapeError("edge_conv: expected 2-D features");
  int64_t rows = features.dim(0);
  if (graph.rows != rows) throw ShapeError("edge_conv: graph rows do not match feature rows");
  for (int64_t idx : graph.neighbors)
    if (idx < 0 || idx >= rows) throw ValueError("edge_conv: neighbor index out of range");
  std::vector<int64_t> self_idx;
  self_idx.reserve(static_cast<size_t>(rows * graph.k));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < graph.k; ++j) self_idx.push_back(i);
  Tensor<T> xi = gather_rows(features, self_idx);
  Tensor<T> xj = gather_rows(features, graph.neighbors);
  Tensor<T> edge = concat<T>({xi, sub(xi, xj)}, 1);
  Tensor<T> h = lbr(m, edge, name, train);
  h = reshape(h, {rows, graph.k, h.dim(1)});
  return reduce_max(h, 1);
}

// ---------------------------------------------------------------------------
// Encoder

// Four stacked EdgeConvs with dynamic graphs (layer 1 on coordinates,
// layers 2-4 in feature space), skip-concat, shared MLP to cfg.emb.
template <class T>
Tensor<T> encoder_forward(Model<T>& m, const Tensor<T>& coords, int64_t batch, bool train) {
  if (coords.rank() != 2 || coords.dim(1) != 3) throw ShapeError("encoder: expected (batch*m)x3 coordinates");
  int64_t per_cloud = coords.dim(0) / std::max<int64_t>(batch, 1);
  if (per_cloud <= m.cfg.k)
    throw ValueError("encoder: need more than k=" + std::to_string(m.cfg.k) + " points per cloud, got " +
                     std::to_string(per_cloud));
  std::vector<Tensor<T>> skips;
  Tensor<T> cur = coords;
  for (size_t l = 0; l < m.cfg.edge_widths.size(); ++l) {
    FeatureSpace space = (l == 0) ? FeatureSpace::Coordinate : FeatureSpace::Feature;
    NeighborGraph g = batched_knn_graph(cur, batch, m.cfg.k, /*include_self=*/false, space);
    cur = edge_conv(m, cur, g, "enc.edge" + std::to_string(l), train);
    skips.push_back(cur);
  }
  Tensor<T> cat = concat<T>(skips, 1);
  return lbr(m, cat, "enc.emb", train);
}

// ---------------------------------------------------------------------------
// Offset-attention (PCT convention)

// Block-diagonal over the batch: each cloud attends only to its own rows.
// Scores are softmax-normalized over the key axis, then L1-normalized
// over the query axis; output = LBR(F - A V) + F.
template <class T>
Tensor<T> offset_attention(Model<T>& m, const Tensor<T>& f, int64_t batch, const std::string& name,
                           bool train) {
  if (f.rank() != 2 || f.dim(1) != m.cfg.d) throw ShapeError("offset_attention: expected rows x d features");
  int64_t rows = f.dim(0);
  if (batch < 1 || rows % batch != 0) throw ShapeError("offset_attention: rows not divisible by batch");
  int64_t mrows = rows / batch;
  std::vector<Tensor<T>> av_blocks;
  av_blocks.reserve(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<int64_t> idx(static_cast<size_t>(mrows));
    std::iota(idx.begin(), idx.end(), b * mrows);
    Tensor<T> fb = (batch == 1) ? f : gather_rows(f, idx);
    Tensor<T> q = matmul(fb, m.p(name + ".q.w"));
    Tensor<T> k = matmul(fb, m.p(name + ".k.w"));
    Tensor<T> v = matmul(fb, m.p(name + ".v.w"));
    Tensor<T> scores = matmul(q, transpose(k));
    Tensor<T> a = softmax(scores, 0);
    a = l1_normalize(a, 1);
    av_blocks.push_back(matmul(a, v, /*invariant_accum=*/true));
  }
  Tensor<T> av = (batch == 1) ? av_blocks[0] : concat<T>(av_blocks, 0);
  return add(lbr(m, sub(f, av), name + ".lbr", train), f);
}

// ---------------------------------------------------------------------------
// Grid pattern

// u codes on a near-square a x b lattice spanning [-span, span]^2 with
// a the largest divisor of u not exceeding sqrt(u); u=1 -> (0,0).
inline std::vector<double> grid_pattern(int64_t u, double span) {
  if (u < 1) throw ValueError("grid_pattern: need u >= 1");
  int64_t a = 1;
  for (int64_t c = 1; c * c <= u; ++c)
    if (u % c == 0) a = c;
  int64_t b = u / a;
  std::vector<double> out;
  out.reserve(static_cast<size_t>(2 * u));
  for (int64_t i = 0; i < a; ++i)
    for (int64_t j = 0; j < b; ++j) {
      double x = (a == 1) ? 0.0 : -span + 2 * span * static_cast<double>(i) / static_cast<double>(a - 1);
      double y = (b == 1) ? 0.0 : -span + 2 * span * static_cast<double>(j) / static_cast<double>(b - 1);
      out.push_back(x);
      out.push_back(y);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Feature-up / feature-down

// Duplicate each row u times (contiguous groups), append the copy's 2-d
// grid code, MLP back to width d, then offset-attention over the
// expanded rows.
template <class T>
Tensor<T> feature_up(Model<T>& m, const Tensor<T>& f, int64_t u, int64_t batch,
                     const std::string& name, bool train) {
  if (f.rank() != 2 || f.dim(1) != m.cfg.d) throw ShapeError("feature_up: expected rows x d features");
  if (u < 1) throw ValueError("feature_up: expansion factor must be a positive integer");
  int64_t rows = f.dim(0);
  Tensor<T> rep = (u == 1) ? f : repeat_rows(f, u);
  std::vector<double> code = grid_pattern(u, m.cfg.grid_span);
  std::vector<T> grid(static_cast<size_t>(rows * u * 2));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t c = 0; c < 2 * u; ++c) grid[static_cast<size_t>(i * 2 * u + c)] = static_cast<T>(code[static_cast<size_t>(c)]);
  Tensor<T> grid_t = Tensor<T>::from_data({rows * u, 2}, std::move(grid));
  Tensor<T> x = concat<T>({rep, grid_t}, 1);
  x = lbr(m, x, name + ".mlp", train);
  return offset_attention(m, x, batch, name + ".attn", train);
}

// Reshape contiguous groups of u rows, run one EdgeConv over the group
// members (all-pairs graph including self), max-reduce each group to a
// single vector, then a shared MLP.
template <class T>
Tensor<T> feature_down(Model<T>& m, const Tensor<T>& f_up, int64_t u, const std::string& name,
                       bool train) {
  if (f_up.rank() != 2 || f_up.dim(1) != m.cfg.d) throw ShapeError("feature_down: expected rows x d features");
  int64_t rows = f_up.dim(0);
  if (u < 1 || rows % u != 0)
    throw ShapeError("feature_down: " + std::to_string(rows) + " rows violate group size " +
                     std::to_string(u));
  NeighborGraph g;
  g.rows = rows;
  g.k = u;
  g.include_self = true;
  g.neighbors.reserve(static_cast<size_t>(rows * u));
  for (int64_t i = 0; i < rows; ++i) {
    int64_t group = i / u;
    for (int64_t j = 0; j < u; ++j) g.neighbors.push_back(group * u + j);
  }
  Tensor<T> e = edge_conv(m, f_up, g, name + ".edge", train);  // rows x d
  e = reshape(e, {rows / u, u, m.cfg.d});
  e = reduce_max(e, 1);  // one vector per group
  return lbr(m, e, name + ".mlp", train);
}

// ---------------------------------------------------------------------------
// Decoder

// Residual wiring: F_in = entry(F); F_up = up1(F_in, u); F_down =
// down(F_up); delta = up2(F_up - broadcast(F_down), factor 1); coords =
// final(F_up + delta). No coordinate skip: zero final weights give the
// all-zeros cloud.
template <class T>
Tensor<T> decoder_forward(Model<T>& m, const Tensor<T>& f, double r, int64_t batch, bool train) {
  if (f.rank() != 2 || f.dim(1) != m.cfg.emb) throw ShapeError("decoder: expected rows x emb features");
  if (!(r > 0 && r <= 1)) throw ValueError("decoder: ratio must be in (0,1]");
  double inv = 1.0 / r;
  int64_t u = std::llround(inv);
  if (std::abs(inv - static_cast<double>(u)) > 1e-9 || u < 1)
    throw ValueError("decoder: expansion factor 1/r must be a positive integer, got 1/" +
                     std::to_string(r));
  Tensor<T> f_in = lbr(m, f, "dec.entry", train);
  Tensor<T> f_up = feature_up(m, f_in, u, batch, "dec.up1", train);
  Tensor<T> f_down = feature_down(m, f_up, u, "dec.down", train);
  Tensor<T> offset = sub(f_up, (u == 1) ? f_down : repeat_rows(f_down, u));
  Tensor<T> delta = feature_up(m, offset, 1, batch, "dec.up2", train);
  return linear(m, add(f_up, delta), "dec.final");
}

// ---------------------------------------------------------------------------
// Heads

// Per-cloud pooled (max || avg) feature of width 2*emb.
template <class T>
Tensor<T> pooled_feature(Model<T>& m, const Tensor<T>& point_feats, int64_t batch) {
  if (point_feats.rank() != 2 || point_feats.dim(1) != m.cfg.emb)
    throw ShapeError("head: expected rows x emb point features");
  int64_t rows = point_feats.dim(0);
  if (rows < 1) throw ValueError("head: empty input");
  if (batch < 1 || rows % batch != 0) throw ShapeError("head: rows not divisible by batch");
  int64_t per = rows / batch;
  Tensor<T> x = reshape(point_feats, {batch, per, m.cfg.emb});
  Tensor<T> mx = reduce_max(x, 1);
  Tensor<T> av = reduce_mean(x, 1);
  return concat<T>({mx, av}, 1);  // batch x 2*emb
}

template <class T>
Tensor<T> classification_head(Model<T>& m, const Tensor<T>& point_feats, int64_t batch, bool train,
                              Rng& rng) {
  if (m.cfg.classes < 1) throw ValueError("head: model has no classification head");
  Tensor<T> x = pooled_feature(m, point_feats, batch);
  x = relu(linear(m, x, "head.cls.l0"));
  x = dropout(x, m.cfg.head_dropout, train, rng);
  x = relu(linear(m, x, "head.cls.l1"));
  x = dropout(x, m.cfg.head_dropout, train, rng);
  return linear(m, x, "head.cls.l2");  // batch x classes
}

template <class T>
Tensor<T> segmentation_head(Model<T>& m, const Tensor<T>& point_feats, int64_t batch, bool train,
                            Rng& rng) {
  if (m.cfg.parts < 1) throw ValueError("head: model has no segmentation head");
  Tensor<T> global = pooled_feature(m, point_feats, batch);  // batch x 2*emb
  int64_t per = point_feats.dim(0) / batch;
  Tensor<T> global_rows = repeat_rows(global, per);          // rows x 2*emb
  Tensor<T> x = concat<T>({point_feats, global_rows}, 1);
  x = relu(linear(m, x, "head.seg.l0"));
  x = dropout(x, m.cfg.head_dropout, train, rng);
  x = relu(linear(m, x, "head.seg.l1"));
  x = dropout(x, m.cfg.head_dropout, train, rng);
  return linear(m, x, "head.seg.l2");  // rows x parts
}

// ---------------------------------------------------------------------------
// Supervised loss: softmax cross-entropy with integer targets.

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: expected rows x classes logits");
  int64_t rows = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != rows)
    throw ShapeError("cross_entropy: target count does not match logit rows");
  for (int64_t t : targets)
    if (t < 0 || t >= c) throw ValueError("cross_entropy: target class out of range");
  // Stable log-softmax in double with order-invariant denominators.
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * c));
  std::vector<double> losses(static_cast<size_t>(rows));
  const T* lv = logits.data().data();
  for (int64_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(lv[i * c + j]));
    std::vector<double> ex(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) ex[static_cast<size_t>(j)] = std::exp(static_cast<double>(lv[i * c + j]) - mx);
    std::vector<double> scratch = ex;
    double denom = sorted_sum(scratch);
    for (int64_t j = 0; j < c; ++j) (*probs)[static_cast<size_t>(i * c + j)] = ex[static_cast<size_t>(j)] / denom;
    losses[static_cast<size_t>(i)] = -std::log((*probs)[static_cast<size_t>(i * c + targets[static_cast<size_t>(i)])]);
  }
  double value = sorted_sum(losses) / static_cast<double>(rows);
  auto ln = logits.node();
  auto tg = std::make_shared<std::vector<int64_t>>(targets);
  return detail::make_op<T>({}, {static_cast<T>(value)}, {ln}, [ln, probs, tg, rows, c](Node<T>& nd) {
    double g = static_cast<double>(nd.grad[0]) / static_cast<double>(rows);
    ln->ensure_grad();
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < c; ++j) {
        double p = (*probs)[static_cast<size_t>(i * c + j)];
        double ind = (j == (*tg)[static_cast<size_t>(i)]) ? 1.0 : 0.0;
        ln->grad[i * c + j] += static_cast<T>(g * (p - ind));
      }
  });
}

}  // namespace uae
