#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "uae/hungarian.hpp"
#include "uae/kdtree.hpp"
#include "uae/ops.hpp"
#include "uae/rng.hpp"

namespace uae {

// ---------------------------------------------------------------------------
// Domain types

// N x 3 coordinate set in normalized model space, with optional labels.
struct PointCloud {
  std::vector<double> pts;  // flat, 3N
  std::vector<int> labels;  // per-point part ids; empty when unlabeled
  int cls = -1;             // shape class; -1 when unlabeled
  std::string source;       // provenance: file path or generator id

  int64_t size() const { return static_cast<int64_t>(pts.size()) / 3; }
  const double* point(int64_t i) const { return pts.data() + 3 * i; }

  void validate() const {
    if (size() < 1) throw DataError("point cloud is empty");
    for (double v : pts)
      if (!std::isfinite(v)) throw DataError("point cloud has non-finite coordinates");
    if (!labels.empty() && static_cast<int64_t>(labels.size()) != size())
      throw DataError("point cloud label count does not match point count");
  }
};

enum class SampleStrategy { Random, Fps, Local };

inline const char* strategy_name(SampleStrategy s) {
  switch (s) {
    case SampleStrategy::Random: return "random";
    case SampleStrategy::Fps: return "fps";
    case SampleStrategy::Local: return "local";
  }
  return "?";
}

inline SampleStrategy strategy_from_name(const std::string& s) {
  if (s == "random") return SampleStrategy::Random;
  if (s == "fps") return SampleStrategy::Fps;
  if (s == "local") return SampleStrategy::Local;
  throw ValueError("unknown sampling strategy: " + s);
}

struct SubsampleResult {
  std::vector<int64_t> indices;
  double ratio = 1.0;
  SampleStrategy strategy = SampleStrategy::Random;
};

enum class FeatureSpace { Coordinate, Feature };

// M x k nearest-neighbor index table.
struct NeighborGraph {
  std::vector<int64_t> neighbors;  // flat, M*k
  int64_t rows = 0;
  int64_t k = 0;
  bool include_self = false;
  FeatureSpace space = FeatureSpace::Coordinate;

  int64_t at(int64_t row, int64_t j) const { return neighbors[row * k + j]; }
};

enum class LossVariant { CD, EMD, EMD_RL, CD_RL };

inline const char* loss_variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::CD: return "CD";
    case LossVariant::EMD: return "EMD";
    case LossVariant::EMD_RL: return "EMD+RL";
    case LossVariant::CD_RL: return "CD+RL";
  }
  return "?";
}

inline LossVariant loss_variant_from_name(const std::string& s) {
  if (s == "CD") return LossVariant::CD;
  if (s == "EMD") return LossVariant::EMD;
  if (s == "EMD+RL") return LossVariant::EMD_RL;
  if (s == "CD+RL") return LossVariant::CD_RL;
  throw ValueError("unknown loss variant: " + s);
}

struct LossConfig {
  double alpha = 100.0;  // reconstruction weight
  double beta = 1.0;     // repulsion weight
  int64_t k_rep = 5;     // repulsion neighbor count (PU-Net convention)
  double h = 0.03;       // repulsion finite support radius (PU-Net convention)
  LossVariant variant = LossVariant::CD_RL;

  void validate() const {
    if (alpha < 0 || beta < 0) throw ValueError("loss weights must be non-negative");
    if (k_rep < 1) throw ValueError("k_rep must be >= 1");
    if (h <= 0) throw ValueError("repulsion radius h must be positive");
  }
};

// ---------------------------------------------------------------------------
// Tensor <-> cloud conversion

template <class T>
Tensor<T> cloud_to_tensor(const PointCloud& c) {
  std::vector<T> d(c.pts.size());
  for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(c.pts[i]);
  return Tensor<T>::from_data({c.size(), 3}, std::move(d));
}

template <class T>
PointCloud tensor_to_cloud(const Tensor<T>& t, std::string source = "tensor") {
  if (t.rank() != 2 || t.dim(1) != 3)
    throw ShapeError("tensor_to_cloud: expected Nx3, got " + shape_str(t.shape()));
  PointCloud c;
  c.pts.assign(t.data().begin(), t.data().end());
  c.source = std::move(source);
  return c;
}

namespace detail {
template <class T>
std::vector<double> coords_as_double(const Tensor<T>& t) {
  if (t.rank() != 2) throw ShapeError("expected a 2-D point/feature table, got " + shape_str(t.shape()));
  return std::vector<double>(t.data().begin(), t.data().end());
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Subsampling

// Uniform sample of m distinct indices, deterministic under the seed.
inline SubsampleResult random_subsample_count(const PointCloud& cloud, int64_t m, Rng& rng) {
  int64_t n = cloud.size();
  if (m < 1 || m > n) throw ValueError("random_subsample: count " + std::to_string(m) + " out of range");
  std::vector<int64_t> pool(static_cast<size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int64_t i = 0; i < m; ++i) {
    int64_t j = i + rng.uniform_int(n - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
  }
  pool.resize(static_cast<size_t>(m));
  return {std::move(pool), static_cast<double>(m) / static_cast<double>(n), SampleStrategy::Random};
}

inline SubsampleResult random_subsample(const PointCloud& cloud, double r, Rng& rng) {
  if (!(r > 0.0 && r <= 1.0)) throw ValueError("random_subsample: ratio must be in (0,1]");
  int64_t m = std::llround(r * static_cast<double>(cloud.size()));
  if (m < 1) throw ValueError("random_subsample: round(r*N) is zero, empty result");
  SubsampleResult res = random_subsample_count(cloud, m, rng);
  res.ratio = r;
  return res;
}

// Greedy max-min selection; ties break to the lowest index.
inline SubsampleResult farthest_point_sample(const PointCloud& cloud, int64_t m, int64_t start = 0) {
  int64_t n = cloud.size();
  if (m < 1 || m > n) throw ValueError("farthest_point_sample: count out of range");
  if (start < 0 || start >= n) throw ValueError("farthest_point_sample: start index out of range");
  std::vector<int64_t> sel;
  sel.reserve(static_cast<size_t>(m));
  std::vector<double> mind2(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
  int64_t cur = start;
  sel.push_back(cur);
  for (int64_t it = 1; it < m; ++it) {
    const double* c = cloud.point(cur);
    for (int64_t i = 0; i < n; ++i)
      mind2[static_cast<size_t>(i)] =
          std::min(mind2[static_cast<size_t>(i)], KdTree::dist2(cloud.point(i), c, 3));
    int64_t best = -1;
    double bestd = -1;
    for (int64_t i = 0; i < n; ++i) {
      bool taken = false;
      for (int64_t s : sel)
        if (s == i) taken = true;
      if (taken) continue;
      if (mind2[static_cast<size_t>(i)] > bestd) {
        bestd = mind2[static_cast<size_t>(i)];
        best = i;
      }
    }
    cur = best;
    sel.push_back(cur);
  }
  return {std::move(sel), static_cast<double>(m) / static_cast<double>(n), SampleStrategy::Fps};
}

// One uniformly drawn seed point plus its m-1 nearest neighbors.
inline SubsampleResult local_subsample(const PointCloud& cloud, int64_t m, Rng& rng) {
  int64_t n = cloud.size();
  if (m < 1 || m > n) throw ValueError("local_subsample: count out of range");
  int64_t seed = rng.uniform_int(n);
  KdTree tree(cloud.pts.data(), n, 3);
  std::vector<int64_t> idx;
  tree.knn(cloud.point(seed), m, idx);  // includes the seed (distance 0, lowest-index ties)
  return {std::move(idx), static_cast<double>(m) / static_cast<double>(n), SampleStrategy::Local};
}

inline PointCloud select_points(const PointCloud& cloud, const std::vector<int64_t>& indices) {
  PointCloud out;
  out.cls = cloud.cls;
  out.source = cloud.source;
  out.pts.reserve(indices.size() * 3);
  for (int64_t i : indices) {
    out.pts.push_back(cloud.pts[3 * i]);
    out.pts.push_back(cloud.pts[3 * i + 1]);
    out.pts.push_back(cloud.pts[3 * i + 2]);
  }
  if (!cloud.labels.empty())
    for (int64_t i : indices) out.labels.push_back(cloud.labels[static_cast<size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// KNN graphs

// Exact k-nearest-neighbor table from each query row into the base table.
// When include_self is false the tables must be the same set and row i
// excludes base index i.
inline NeighborGraph knn(const std::vector<double>& query, int64_t m, const std::vector<double>& base,
                         int64_t mb, int64_t d, int64_t k, bool include_self,
                         FeatureSpace space = FeatureSpace::Coordinate) {
  if (static_cast<int64_t>(query.size()) != m * d || static_cast<int64_t>(base.size()) != mb * d)
    throw ShapeError("knn: table sizes inconsistent with declared dimensions");
  if (!include_self && m != mb)
    throw ValueError("knn: include_self=false requires query == base");
  if (k > (include_self ? mb : mb - 1))
    throw ValueError("knn: k=" + std::to_string(k) + " too large for base of " + std::to_string(mb));
  KdTree tree(base.data(), mb, static_cast<int>(d));
  NeighborGraph g;
  g.rows = m;
  g.k = k;
  g.include_self = include_self;
  g.space = space;
  g.neighbors.resize(static_cast<size_t>(m * k));
  std::vector<int64_t> row;
  for (int64_t i = 0; i < m; ++i) {
    tree.knn(query.data() + i * d, k, row, include_self ? -1 : i);
    std::copy(row.begin(), row.end(), g.neighbors.begin() + i * k);
  }
  return g;
}

template <class T>
NeighborGraph knn(const Tensor<T>& query, const Tensor<T>& base, int64_t k, bool include_self,
                  FeatureSpace space = FeatureSpace::Feature) {
  if (query.rank() != 2 || base.rank() != 2 || query.dim(1) != base.dim(1))
    throw ShapeError("knn: feature widths differ: " + shape_str(query.shape()) + " vs " +
                     shape_str(base.shape()));
  return knn(detail::coords_as_double(query), query.dim(0), detail::coords_as_double(base),
             base.dim(0), query.dim(1), k, include_self, space);
}

// ---------------------------------------------------------------------------
// Chamfer / Hausdorff / EMD / repulsion

namespace detail {

struct NearestPairs {
  std::vector<int64_t> nn;   // per source point, index of nearest target
  std::vector<double> dist;  // L2 distances
};

inline NearestPairs nearest_pairs(const double* a, int64_t n, const double* b, int64_t m) {
  KdTree tree(b, m, 3);
  NearestPairs p;
  p.nn.resize(static_cast<size_t>(n));
  p.dist.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    auto [j, d2] = tree.nearest(a + 3 * i);
    p.nn[static_cast<size_t>(i)] = j;
    p.dist[static_cast<size_t>(i)] = std::sqrt(d2);
  }
  return p;
}

inline double mean_of(const std::vector<double>& v) {
  std::vector<double> s = v;
  return sorted_sum(s) / static_cast<double>(v.size());
}

}  // namespace detail

// Symmetric mean closest-point distance, unsquared L2 in both directions.
inline double chamfer_distance_value(const double* a, int64_t n, const double* b, int64_t m) {
  if (n < 1 || m < 1) throw ValueError("chamfer_distance: empty point set");
  auto ab = detail::nearest_pairs(a, n, b, m);
  auto ba = detail::nearest_pairs(b, m, a, n);
  return detail::mean_of(ab.dist) + detail::mean_of(ba.dist);
}

inline double chamfer_distance_value(const PointCloud& a, const PointCloud& b) {
  return chamfer_distance_value(a.pts.data(), a.size(), b.pts.data(), b.size());
}

// Differentiable Chamfer distance. The argmin selection is treated as
// constant; gradients flow through the selected pair distances only.
template <class T>
Tensor<T> chamfer_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || a.dim(1) != 3 || b.rank() != 2 || b.dim(1) != 3)
    throw ShapeError("chamfer_distance: expected Nx3 tensors");
  const int64_t n = a.dim(0), m = b.dim(0);
  if (n < 1 || m < 1) throw ValueError("chamfer_distance: empty point set");
  std::vector<double> av = detail::coords_as_double(a);
  std::vector<double> bv = detail::coords_as_double(b);
  auto ab = std::make_shared<detail::NearestPairs>(detail::nearest_pairs(av.data(), n, bv.data(), m));
  auto ba = std::make_shared<detail::NearestPairs>(detail::nearest_pairs(bv.data(), m, av.data(), n));
  double value = detail::mean_of(ab->dist) + detail::mean_of(ba->dist);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>({}, {static_cast<T>(value)}, {an, bn}, [an, bn, ab, ba, n, m](Node<T>& nd) {
    double g = static_cast<double>(nd.grad[0]);
    if (an->needs_grad) an->ensure_grad();
    if (bn->needs_grad) bn->ensure_grad();
    auto accumulate = [&](Node<T>* src, Node<T>* dst, const detail::NearestPairs& p, int64_t count) {
      double w = g / static_cast<double>(count);
      for (int64_t i = 0; i < count; ++i) {
        double d = p.dist[static_cast<size_t>(i)];
        if (d <= 0) continue;
        int64_t j = p.nn[static_cast<size_t>(i)];
        for (int64_t c = 0; c < 3; ++c) {
          double dir = (static_cast<double>(src->value[3 * i + c]) -
                        static_cast<double>(dst->value[3 * j + c])) / d;
          if (src->needs_grad) src->grad[3 * i + c] += static_cast<T>(w * dir);
          if (dst->needs_grad) dst->grad[3 * j + c] -= static_cast<T>(w * dir);
        }
      }
    };
    accumulate(an.get(), bn.get(), *ab, n);
    accumulate(bn.get(), an.get(), *ba, m);
  });
}

// max over both directions of the farthest nearest-neighbor distance.
inline double hausdorff_distance(const double* a, int64_t n, const double* b, int64_t m) {
  if (n < 1 || m < 1) throw ValueError("hausdorff_distance: empty point set");
  auto ab = detail::nearest_pairs(a, n, b, m);
  auto ba = detail::nearest_pairs(b, m, a, n);
  double h = 0;
  for (double d : ab.dist) h = std::max(h, d);
  for (double d : ba.dist) h = std::max(h, d);
  return h;
}

inline double hausdorff_distance(const PointCloud& a, const PointCloud& b) {
  return hausdorff_distance(a.pts.data(), a.size(), b.pts.data(), b.size());
}

// Exact EMD via Hungarian assignment on equal-cardinality sets. Gradient
// flows through the optimal matching held fixed.
template <class T>
Tensor<T> earth_movers_distance(const Tensor<T>& a, const Tensor<T>& b, int64_t cap = 1024) {
  if (a.rank() != 2 || a.dim(1) != 3 || b.rank() != 2 || b.dim(1) != 3)
    throw ShapeError("earth_movers_distance: expected Nx3 tensors");
  const int64_t n = a.dim(0);
  if (b.dim(0) != n)
    throw ValueError("earth_movers_distance: cardinality mismatch " + std::to_string(n) + " vs " +
                     std::to_string(b.dim(0)));
  if (n > cap)
    throw ValueError("earth_movers_distance: " + std::to_string(n) + " points exceeds cap " +
                     std::to_string(cap));
  std::vector<double> av = detail::coords_as_double(a);
  std::vector<double> bv = detail::coords_as_double(b);
  std::vector<double> cost(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      cost[i * n + j] = std::sqrt(KdTree::dist2(av.data() + 3 * i, bv.data() + 3 * j, 3));
  auto match = std::make_shared<std::vector<int64_t>>(hungarian_assignment(cost, n));
  std::vector<double> dists(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) dists[static_cast<size_t>(i)] = cost[i * n + (*match)[static_cast<size_t>(i)]];
  double value = detail::mean_of(dists);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op<T>({}, {static_cast<T>(value)}, {an, bn}, [an, bn, match, n](Node<T>& nd) {
    double w = static_cast<double>(nd.grad[0]) / static_cast<double>(n);
    if (an->needs_grad) an->ensure_grad();
    if (bn->needs_grad) bn->ensure_grad();
    for (int64_t i = 0; i < n; ++i) {
      int64_t j = (*match)[static_cast<size_t>(i)];
      double d = 0;
      for (int64_t c = 0; c < 3; ++c) {
        double t = static_cast<double>(an->value[3 * i + c]) - static_cast<double>(bn->value[3 * j + c]);
        d += t * t;
      }
      d = std::sqrt(d);
      if (d <= 0) continue;
      for (int64_t c = 0; c < 3; ++c) {
        double dir = (static_cast<double>(an->value[3 * i + c]) -
                      static_cast<double>(bn->value[3 * j + c])) / d;
        if (an->needs_grad) an->grad[3 * i + c] += static_cast<T>(w * dir);
        if (bn->needs_grad) bn->grad[3 * j + c] -= static_cast<T>(w * dir);
      }
    }
  });
}

// Uniformity regularizer: sum over points and their k nearest neighbors
// (coordinate space, self excluded) of -m * exp(-m^2/h^2), m the pair
// distance. Neighbor selection is held fixed for the gradient.
template <class T>
Tensor<T> repulsion_loss(const Tensor<T>& p, int64_t k_rep, double h) {
  if (p.rank() != 2 || p.dim(1) != 3) throw ShapeError("repulsion_loss: expected Nx3 tensor");
  const int64_t n = p.dim(0);
  if (n <= k_rep)
    throw ValueError("repulsion_loss: need more than k_rep=" + std::to_string(k_rep) + " points, got " +
                     std::to_string(n));
  if (h <= 0) throw ValueError("repulsion_loss: h must be positive");
  std::vector<double> pv = detail::coords_as_double(p);
  auto graph = std::make_shared<NeighborGraph>(
      knn(pv, n, pv, n, 3, k_rep, /*include_self=*/false, FeatureSpace::Coordinate));
  std::vector<double> terms(static_cast<size_t>(n * k_rep));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < k_rep; ++t) {
      int64_t j = graph->at(i, t);
      double m = std::sqrt(KdTree::dist2(pv.data() + 3 * i, pv.data() + 3 * j, 3));
      terms[static_cast<size_t>(i * k_rep + t)] = -m * std::exp(-m * m / (h * h));
    }
  double value = sorted_sum(terms);
  auto pn = p.node();
  return detail::make_op<T>({}, {static_cast<T>(value)}, {pn}, [pn, graph, n, k_rep, h](Node<T>& nd) {
    double g = static_cast<double>(nd.grad[0]);
    pn->ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t t = 0; t < k_rep; ++t) {
        int64_t j = graph->at(i, t);
        double d2 = 0;
        for (int64_t c = 0; c < 3; ++c) {
          double dl = static_cast<double>(pn->value[3 * i + c]) - static_cast<double>(pn->value[3 * j + c]);
          d2 += dl * dl;
        }
        double m = std::sqrt(d2);
        if (m <= 0) continue;
        // d/dm of -m exp(-m^2/h^2).
        double w = std::exp(-m * m / (h * h)) * (2.0 * m * m / (h * h) - 1.0);
        for (int64_t c = 0; c < 3; ++c) {
          double dir = (static_cast<double>(pn->value[3 * i + c]) -
                        static_cast<double>(pn->value[3 * j + c])) / m;
          pn->grad[3 * i + c] += static_cast<T>(g * w * dir);
          pn->grad[3 * j + c] -= static_cast<T>(g * w * dir);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization

enum class NormalizeTarget { UnitCube, UnitSphere };

// Similarity transform: centroid to origin, then scale so the cloud
// fills the unit cube (max coordinate magnitude 0.5) or unit sphere
// (max radius 1).
inline PointCloud normalize(const PointCloud& cloud, NormalizeTarget target) {
  cloud.validate();
  int64_t n = cloud.size();
  std::array<double, 3> centroid = {0, 0, 0};
  for (int64_t c = 0; c < 3; ++c)
    centroid[static_cast<size_t>(c)] =
        sorted_sum_of(cloud.pts.data() + c, static_cast<size_t>(n), 3) / static_cast<double>(n);
  double extent = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (target == NormalizeTarget::UnitCube) {
      for (int64_t c = 0; c < 3; ++c)
        extent = std::max(extent, std::abs(cloud.pts[3 * i + c] - centroid[static_cast<size_t>(c)]));
    } else {
      double r2 = 0;
      for (int64_t c = 0; c < 3; ++c) {
        double d = cloud.pts[3 * i + c] - centroid[static_cast<size_t>(c)];
        r2 += d * d;
      }
      extent = std::max(extent, std::sqrt(r2));
    }
  }
  if (extent <= 0) throw DataError("normalize: zero-extent point cloud");
  double scale = (target == NormalizeTarget::UnitCube ? 0.5 : 1.0) / extent;
  PointCloud out = cloud;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < 3; ++c)
      out.pts[3 * i + c] = (cloud.pts[3 * i + c] - centroid[static_cast<size_t>(c)]) * scale;
  return out;
}

}  // namespace uae
