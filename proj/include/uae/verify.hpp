#pragma once

#include <functional>
#include <string>
#include <vector>

#include "uae/geometry.hpp"
#include "uae/gradcheck.hpp"
#include "uae/model.hpp"
#include "uae/training.hpp"

namespace uae {

// ---------------------------------------------------------------------------
// Shared gradient-verification suites (primitives / layers / end2end).
// Each item reports the max relative error of the analytic gradient
// against 64-bit central differences (eps 1e-5, tolerance 1e-4).

struct CheckItem {
  std::string name;
  double max_rel = 0.0;
  double tol = 1e-4;
  bool pass() const { return max_rel <= tol; }
};

namespace detail {

constexpr double kGradTol = 1e-4;

inline Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(static_cast<size_t>(numel(shape)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor<double>::from_data(std::move(shape), std::move(d));
}

inline void run_check(std::vector<CheckItem>& out, const std::string& name, const ScalarFn& f,
                      const Tensor<double>& x, const std::vector<int64_t>* coords = nullptr) {
  out.push_back({name, finite_difference_check(f, x, 1e-5, coords), kGradTol});
}

// Max relative error of d(loss)/d(param) for one model parameter,
// evaluated by mutating the persistent leaf storage directly. BN in
// train mode is pure in the parameters, so repeated forwards agree.
template <class T>
double param_grad_error(Model<T>& m, const std::string& pname,
                        const std::function<Tensor<T>()>& loss_fn,
                        const std::vector<int64_t>& coords, double eps = 1e-5) {
  Tensor<T> loss = loss_fn();
  GradientMap<T> grads = backward(loss, m.trainables());
  std::vector<T> analytic(m.p(pname).size(), T(0));
  auto it = grads.find(pname);
  if (it != grads.end()) analytic = it->second.data();
  auto& w = m.p(pname).leaf_data();
  double max_rel = 0.0;
  for (int64_t c : coords) {
    double orig = static_cast<double>(w[static_cast<size_t>(c)]);
    NoGradGuard ng;
    w[static_cast<size_t>(c)] = static_cast<T>(orig + eps);
    double fp = static_cast<double>(loss_fn().scalar());
    w[static_cast<size_t>(c)] = static_cast<T>(orig - eps);
    double fm = static_cast<double>(loss_fn().scalar());
    w[static_cast<size_t>(c)] = static_cast<T>(orig);
    double fd = (fp - fm) / (2.0 * eps);
    double rel = std::abs(static_cast<double>(analytic[static_cast<size_t>(c)]) - fd) /
                 std::max(1.0, std::abs(fd));
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

// Tiny architecture shared by the layer and end-to-end suites.
inline ArchConfig verify_arch() {
  ArchConfig cfg;
  cfg.k = 3;
  cfg.edge_widths = {4, 4, 4, 4};
  cfg.emb = 8;
  cfg.d = 4;
  cfg.classes = 3;
  cfg.parts = 3;
  cfg.head_widths = {6, 5};
  cfg.head_dropout = 0.0;  // keep the layer checks deterministic
  return cfg;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives

inline std::vector<CheckItem> gradcheck_primitives() {
  using detail::rand_tensor;
  std::vector<CheckItem> out;
  Rng rng(20240517);
  Tensor<double> a = rand_tensor({3, 4}, rng);
  Tensor<double> w = rand_tensor({4, 2}, rng);
  auto sq_sum = [](const Tensor<double>& t) { return reduce_sum(square(t)); };

  detail::run_check(out, "matmul", [&](const Tensor<double>& x) { return sq_sum(matmul(x, w)); }, a);
  detail::run_check(out, "matmul.invariant",
                    [&](const Tensor<double>& x) { return sq_sum(matmul(x, w, true)); }, a);
  detail::run_check(out, "add.broadcast",
                    [&](const Tensor<double>& x) {
                      return sq_sum(add(x, Tensor<double>::from_data({4}, {0.3, -0.2, 0.9, 0.1})));
                    },
                    a);
  detail::run_check(out, "sub", [&](const Tensor<double>& x) { return sq_sum(sub(x, a)); },
                    rand_tensor({3, 4}, rng));
  detail::run_check(out, "mul", [&](const Tensor<double>& x) { return sq_sum(mul(x, a)); },
                    rand_tensor({3, 4}, rng));
  // Keep inputs away from the ReLU kink / max ties.
  {
    std::vector<double> d(12);
    for (auto& v : d) v = rng.uniform(0.2, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    Tensor<double> x0 = Tensor<double>::from_data({3, 4}, d);
    detail::run_check(out, "relu", [&](const Tensor<double>& x) { return sq_sum(relu(x)); }, x0);
  }
  detail::run_check(out, "exp", [&](const Tensor<double>& x) { return reduce_sum(exp(x)); }, a);
  detail::run_check(out, "neg", [&](const Tensor<double>& x) { return sq_sum(neg(x)); }, a);
  detail::run_check(out, "sqrt", [&](const Tensor<double>& x) { return reduce_sum(sqrt(x)); },
                    rand_tensor({3, 4}, rng, 0.5, 2.0));
  detail::run_check(out, "square", [&](const Tensor<double>& x) { return reduce_sum(square(x)); }, a);
  detail::run_check(out, "scale", [&](const Tensor<double>& x) { return reduce_sum(scale(x, -2.5)); }, a);
  detail::run_check(out, "concat",
                    [&](const Tensor<double>& x) { return sq_sum(concat<double>({x, a}, 1)); },
                    rand_tensor({3, 2}, rng));
  Tensor<double> w31 = rand_tensor({3, 1}, rng);
  detail::run_check(out, "reshape",
                    [&](const Tensor<double>& x) { return sq_sum(matmul(reshape(x, {4, 3}), w31)); },
                    a);
  detail::run_check(out, "transpose",
                    [&](const Tensor<double>& x) { return sq_sum(matmul(transpose(x), w)); },
                    rand_tensor({4, 3}, rng));
  detail::run_check(out, "gather_rows",
                    [&](const Tensor<double>& x) { return sq_sum(gather_rows(x, {2, 0, 0, 1})); }, a);
  detail::run_check(out, "repeat_rows",
                    [&](const Tensor<double>& x) { return sq_sum(repeat_rows(x, 3)); }, a);
  {
    std::vector<double> d(12);
    for (size_t i = 0; i < d.size(); ++i) d[i] = 0.37 * static_cast<double>(i) - 1.9;  // distinct
    Tensor<double> x0 = Tensor<double>::from_data({3, 4}, d);
    detail::run_check(out, "reduce_max", [&](const Tensor<double>& x) { return sq_sum(reduce_max(x, 1)); },
                      x0);
  }
  detail::run_check(out, "reduce_sum", [&](const Tensor<double>& x) { return square(reduce_sum(x)); }, a);
  detail::run_check(out, "reduce_mean",
                    [&](const Tensor<double>& x) { return sq_sum(reduce_mean(x, 0)); }, a);
  detail::run_check(out, "softmax", [&](const Tensor<double>& x) { return sq_sum(softmax(x, 1)); }, a);
  detail::run_check(out, "l1_normalize",
                    [&](const Tensor<double>& x) { return sq_sum(l1_normalize(x, 1)); },
                    rand_tensor({3, 4}, rng, 0.2, 1.0));
  {
    Tensor<double> g = rand_tensor({4}, rng, 0.5, 1.5);
    Tensor<double> be = rand_tensor({4}, rng);
    detail::run_check(out, "batch_norm",
                      [&](const Tensor<double>& x) {
                        BNState<double> st;  // fresh stats each call: pure in x
                        return sq_sum(batch_norm(x, g, be, st, /*train=*/true));
                      },
                      rand_tensor({6, 4}, rng));
  }
  {
    auto mask = std::make_shared<std::vector<uint8_t>>(std::vector<uint8_t>{1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 1, 1});
    detail::run_check(out, "dropout",
                      [&](const Tensor<double>& x) { return sq_sum(dropout_with_mask(x, 0.25, mask)); },
                      a);
  }
  // Domain losses with custom VJPs.
  {
    Tensor<double> target = rand_tensor({5, 3}, rng);
    detail::run_check(out, "chamfer_distance",
                      [&](const Tensor<double>& x) { return chamfer_distance(x, target); },
                      rand_tensor({4, 3}, rng));
    Tensor<double> target2 = rand_tensor({4, 3}, rng);
    detail::run_check(out, "earth_movers_distance",
                      [&](const Tensor<double>& x) { return earth_movers_distance(x, target2); },
                      rand_tensor({4, 3}, rng));
    detail::run_check(out, "repulsion_loss",
                      [&](const Tensor<double>& x) { return repulsion_loss(x, 2, 0.5); },
                      rand_tensor({6, 3}, rng));
    detail::run_check(out, "cross_entropy",
                      [&](const Tensor<double>& x) { return cross_entropy(x, {2, 0, 1}); },
                      rand_tensor({3, 4}, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layers

inline std::vector<CheckItem> gradcheck_layers() {
  std::vector<CheckItem> out;
  Rng rng(77);
  Model<double> m(detail::verify_arch(), rng);
  const int64_t n = 8;
  Tensor<double> coords = detail::rand_tensor({n, 3}, rng);
  std::vector<int64_t> few = {0, 1, 2, 3};

  auto check = [&](const std::string& label, const std::string& pname,
                   const std::function<Tensor<double>()>& loss_fn) {
    out.push_back({label + " (" + pname + ")", detail::param_grad_error(m, pname, loss_fn, few),
                   detail::kGradTol});
  };

  check("edge_conv", "enc.edge0.w", [&] {
    NeighborGraph g = batched_knn_graph(coords, 1, m.cfg.k, false, FeatureSpace::Coordinate);
    return reduce_sum(square(edge_conv(m, coords, g, "enc.edge0", true)));
  });
  Tensor<double> feats_d = detail::rand_tensor({n, m.cfg.d}, rng);
  check("offset_attention", "dec.up1.attn.q.w",
        [&] { return reduce_sum(square(offset_attention(m, feats_d, 1, "dec.up1.attn", true))); });
  check("offset_attention", "dec.up1.attn.v.w",
        [&] { return reduce_sum(square(offset_attention(m, feats_d, 1, "dec.up1.attn", true))); });
  check("feature_up", "dec.up1.mlp.w",
        [&] { return reduce_sum(square(feature_up(m, feats_d, 4, 1, "dec.up1", true))); });
  check("feature_down", "dec.down.edge.w", [&] {
    Tensor<double> f_up = feature_up(m, feats_d, 4, 1, "dec.up1", true);
    return reduce_sum(square(feature_down(m, f_up, 4, "dec.down", true)));
  });
  Tensor<double> feats_e = detail::rand_tensor({n, m.cfg.emb}, rng);
  Rng head_rng(3);
  check("classification_head", "head.cls.l0.w", [&] {
    Tensor<double> logits = classification_head(m, feats_e, 1, true, head_rng);
    return cross_entropy(logits, {1});
  });
  check("segmentation_head", "head.seg.l0.w", [&] {
    Tensor<double> logits = segmentation_head(m, feats_e, 1, true, head_rng);
    return cross_entropy(logits, std::vector<int64_t>(static_cast<size_t>(n), 2));
  });
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end (reconstruction loss on a 16-point toy)

inline std::vector<CheckItem> gradcheck_end2end() {
  std::vector<CheckItem> out;
  Rng rng(13);
  Model<double> m(detail::verify_arch(), rng);
  PointCloud target;
  for (int i = 0; i < 16; ++i)
    for (int c = 0; c < 3; ++c) target.pts.push_back(rng.uniform(-1, 1));
  Tensor<double> sub = detail::rand_tensor({4, 3}, rng);  // r = 0.25 input

  LossConfig lc;
  lc.alpha = 100;
  lc.beta = 1;
  lc.k_rep = 5;
  lc.h = 0.3;  // toy clouds are unit-scale; keep some neighbors inside h
  lc.variant = LossVariant::CD_RL;
  std::function<Tensor<double>()> loss_fn = [&] {
    Tensor<double> feats = encoder_forward(m, sub, 1, true);
    Tensor<double> pred = decoder_forward(m, feats, 0.25, 1, true);
    return total_loss(pred, target, lc);
  };
  std::vector<int64_t> few = {0, 1, 2};
  for (const char* pname : {"enc.edge0.w", "enc.edge3.w", "enc.emb.w", "dec.entry.w", "dec.up1.mlp.w",
                            "dec.up1.attn.v.w", "dec.down.edge.w", "dec.up2.mlp.w", "dec.final.w",
                            "dec.final.b"}) {
    out.push_back({std::string("end2end (") + pname + ")",
                   detail::param_grad_error(m, pname, loss_fn, few), detail::kGradTol});
  }
  return out;
}

inline std::vector<CheckItem> gradcheck_run(const std::string& scope) {
  if (scope == "primitives") return gradcheck_primitives();
  if (scope == "layers") return gradcheck_layers();
  if (scope == "end2end") return gradcheck_end2end();
  if (scope == "all") {
    std::vector<CheckItem> out = gradcheck_primitives();
    for (auto& i : gradcheck_layers()) out.push_back(i);
    for (auto& i : gradcheck_end2end()) out.push_back(i);
    return out;
  }
  throw UsageError("gradcheck: unknown scope '" + scope + "' (primitives|layers|end2end|all)");
}

}  // namespace uae
