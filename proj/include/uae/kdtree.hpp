#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "uae/common.hpp"

namespace uae {

// Exact k-d tree over runtime-dimensional points. Search is exact (no
// approximation) and returns the same neighbor sets as a brute-force
// scan: candidates are ordered by (squared distance, index) and ties
// break to the lowest index. Squared distances are accumulated the same
// way a brute-force loop would, so values agree bit-for-bit.
class KdTree {
 public:
  KdTree(const double* pts, int64_t n, int dim) : pts_(pts), n_(n), dim_(dim) {
    idx_.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx_[static_cast<size_t>(i)] = i;
    nodes_.reserve(static_cast<size_t>(2 * n / kLeafSize + 2));
    root_ = build(0, n);
  }

  static double dist2(const double* a, const double* b, int dim) {
    double s = 0;
    for (int d = 0; d < dim; ++d) {
      double t = a[d] - b[d];
      s += t * t;
    }
    return s;
  }

  // k nearest neighbors of q; `exclude` removes one base index (self
  // queries). Results sorted ascending by (dist2, index).
  void knn(const double* q, int64_t k, std::vector<int64_t>& out, int64_t exclude = -1) const {
    if (k < 1 || k > n_ - (exclude >= 0 ? 1 : 0))
      throw ValueError("knn: k=" + std::to_string(k) + " out of range for " + std::to_string(n_) +
                       " points");
    heap_.clear();
    search(root_, q, k, exclude);
    std::sort(heap_.begin(), heap_.end());
    out.resize(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) out[static_cast<size_t>(i)] = heap_[static_cast<size_t>(i)].second;
  }

  // Index of the single nearest neighbor and its squared distance.
  std::pair<int64_t, double> nearest(const double* q, int64_t exclude = -1) const {
    std::vector<int64_t> out;
    knn(q, 1, out, exclude);
    return {out[0], dist2(q, pts_ + out[0] * dim_, dim_)};
  }

 private:
  static constexpr int64_t kLeafSize = 16;
  struct NodeRec {
    int split_dim = -1;  // -1 marks a leaf
    double split_val = 0;
    int64_t left = -1, right = -1;  // children, or [begin,end) into idx_ for leaves
    int64_t begin = 0, end = 0;
  };

  int64_t build(int64_t begin, int64_t end) {
    NodeRec rec;
    rec.begin = begin;
    rec.end = end;
    if (end - begin <= kLeafSize) {
      nodes_.push_back(rec);
      return static_cast<int64_t>(nodes_.size()) - 1;
    }
    // Split on the widest dimension at the median.
    int best_dim = 0;
    double best_spread = -1;
    for (int d = 0; d < dim_; ++d) {
      double lo = pts_[idx_[static_cast<size_t>(begin)] * dim_ + d], hi = lo;
      for (int64_t i = begin + 1; i < end; ++i) {
        double v = pts_[idx_[static_cast<size_t>(i)] * dim_ + d];
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi - lo > best_spread) {
        best_spread = hi - lo;
        best_dim = d;
      }
    }
    int64_t mid = begin + (end - begin) / 2;
    std::nth_element(idx_.begin() + begin, idx_.begin() + mid, idx_.begin() + end,
                     [&](int64_t a, int64_t b) {
                       return pts_[a * dim_ + best_dim] < pts_[b * dim_ + best_dim];
                     });
    rec.split_dim = best_dim;
    rec.split_val = pts_[idx_[static_cast<size_t>(mid)] * dim_ + best_dim];
    nodes_.push_back(rec);
    int64_t self = static_cast<int64_t>(nodes_.size()) - 1;
    int64_t l = build(begin, mid);
    int64_t r = build(mid, end);
    nodes_[static_cast<size_t>(self)].left = l;
    nodes_[static_cast<size_t>(self)].right = r;
    return self;
  }

  bool worse_than_worst(double d2, int64_t i, int64_t k) const {
    if (static_cast<int64_t>(heap_.size()) < k) return false;
    const auto& w = heap_.front();
    return d2 > w.first || (d2 == w.first && i > w.second);
  }

  void consider(double d2, int64_t i, int64_t k) const {
    if (worse_than_worst(d2, i, k)) return;
    if (static_cast<int64_t>(heap_.size()) == k) {
      std::pop_heap(heap_.begin(), heap_.end());
      heap_.pop_back();
    }
    heap_.emplace_back(d2, i);
    std::push_heap(heap_.begin(), heap_.end());
  }

  void search(int64_t node_id, const double* q, int64_t k, int64_t exclude) const {
    const NodeRec& nd = nodes_[static_cast<size_t>(node_id)];
    if (nd.split_dim < 0) {
      for (int64_t i = nd.begin; i < nd.end; ++i) {
        int64_t pi = idx_[static_cast<size_t>(i)];
        if (pi == exclude) continue;
        consider(dist2(q, pts_ + pi * dim_, dim_), pi, k);
      }
      return;
    }
    double delta = q[nd.split_dim] - nd.split_val;
    int64_t near = delta < 0 ? nd.left : nd.right;
    int64_t far = delta < 0 ? nd.right : nd.left;
    search(near, q, k, exclude);
    // The far side can still hold ties, so prune on strict inequality only.
    double ax2 = delta * delta;
    if (static_cast<int64_t>(heap_.size()) < k || ax2 <= heap_.front().first) search(far, q, k, exclude);
  }

  const double* pts_;
  int64_t n_;
  int dim_;
  std::vector<int64_t> idx_;
  std::vector<NodeRec> nodes_;
  int64_t root_;
  mutable std::vector<std::pair<double, int64_t>> heap_;
};

}  // namespace uae
