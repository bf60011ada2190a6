#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "dpshap/common.hpp"

namespace dpshap {

struct Neighbor {
  double sq_distance = 0.0;
  std::size_t index = 0;

  double distance() const { return std::sqrt(sq_distance); }
  friend auto operator<=>(const Neighbor&, const Neighbor&) = default;
};

// Exact Euclidean k-NN over the rows of a matrix. Results are ordered by
// (distance, row index), so ties are broken by the smaller row index. The tree
// keeps its own column-major copy of the coordinates in leaf order, so leaf
// scans run down contiguous columns.
class KdTree {
 public:
  KdTree() = default;

  explicit KdTree(const Matrix& points, std::size_t leaf_size = 32)
      : leaf_size_(leaf_size), dim_(points.cols()) {
    order_.resize(points.rows());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (order_.empty()) return;
    build(points, 0, order_.size());
    const std::size_t n = order_.size();
    coords_.resize(n * dim_);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < dim_; ++j) coords_[j * n + i] = points(order_[i], j);
    }
  }

  std::vector<Neighbor> knn(std::span<const double> query, std::size_t k,
                            std::size_t exclude = std::numeric_limits<std::size_t>::max()) const {
    std::vector<Neighbor> best;
    best.reserve(k + 1);
    if (k > 0 && !nodes_.empty()) {
      std::vector<double> offset(dim_, 0.0);
      search(0, query, k, exclude, 0.0, offset, best);
    }
    return best;
  }

 private:
  struct Node {
    std::size_t begin = 0, end = 0;
    std::size_t dim = 0;
    double split = 0.0;
    std::int64_t left = -1, right = -1;
  };

  std::int64_t build(const Matrix& points, std::size_t begin, std::size_t end) {
    const auto id = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= leaf_size_) return id;

    std::size_t best_dim = 0;
    double best_spread = -1.0;
    for (std::size_t j = 0; j < points.cols(); ++j) {
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      for (std::size_t i = begin; i < end; ++i) {
        const double v = points(order_[i], j);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi - lo > best_spread) {
        best_spread = hi - lo;
        best_dim = j;
      }
    }
    if (best_spread <= 0.0) return id;  // all rows identical: keep as leaf

    const std::size_t mid = begin + (end - begin) / 2;
    auto key = [&](std::size_t r) { return std::pair(points(r, best_dim), r); };
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
    const double split = points(order_[mid], best_dim);

    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.dim = best_dim;
    node.split = split;
    const auto left = build(points, begin, mid);
    const auto right = build(points, mid, end);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
  }

  // `box_sq` is a lower bound on the squared distance from q to the node's
  // cell, accumulated from per-dimension offsets to the split planes.
  void search(std::int64_t id, std::span<const double> q, std::size_t k, std::size_t exclude,
              double box_sq, std::vector<double>& offset, std::vector<Neighbor>& best) const {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.left < 0) {
      scan_leaf(node.begin, node.end, q, k, exclude, best);
      return;
    }
    // Rows left of the median have value <= split, rows right have >= split.
    const double diff = q[node.dim] - node.split;
    const auto near = diff < 0.0 ? node.left : node.right;
    const auto far = diff < 0.0 ? node.right : node.left;
    search(near, q, k, exclude, box_sq, offset, best);
    const double old = offset[node.dim];
    const double far_sq = box_sq - old * old + diff * diff;
    // `<=` keeps equal-distance rows with smaller indices reachable.
    if (best.size() < k || far_sq <= best.back().sq_distance) {
      offset[node.dim] = diff;
      search(far, q, k, exclude, far_sq, offset, best);
      offset[node.dim] = old;
    }
  }

  void scan_leaf(std::size_t begin, std::size_t end, std::span<const double> q, std::size_t k,
                 std::size_t exclude, std::vector<Neighbor>& best) const {
    constexpr std::size_t kChunk = 32;
    const std::size_t n = order_.size();
    std::array<double, kChunk> dist{};
    for (std::size_t lo = begin; lo < end; lo += kChunk) {
      const std::size_t count = std::min(kChunk, end - lo);
      std::fill_n(dist.begin(), count, 0.0);
      // Same per-row summation order as squared_distance.
      for (std::size_t j = 0; j < dim_; ++j) {
        const double* col = coords_.data() + j * n + lo;
        const double qj = q[j];
        for (std::size_t p = 0; p < count; ++p) {
          const double diff = qj - col[p];
          dist[p] += diff * diff;
        }
      }
      for (std::size_t p = 0; p < count; ++p) {
        if (best.size() == k && dist[p] > best.back().sq_distance) continue;
        const std::size_t r = order_[lo + p];
        if (r == exclude) continue;
        const Neighbor cand{dist[p], r};
        // `best` stays sorted; k is small, so insertion beats a heap.
        if (best.size() == k) {
          if (!(cand < best.back())) continue;
          best.pop_back();
        }
        best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
      }
    }
  }

  std::size_t leaf_size_ = 32;
  std::size_t dim_ = 0;
  std::vector<std::size_t> order_;
  std::vector<double> coords_;
  std::vector<Node> nodes_;
};

// Local Outlier Factor in novelty orientation: the fitted model scores
// arbitrary query points against its training set.
class LofModel {
 public:
  LofModel() = default;

  LofModel(Matrix training, std::size_t k) : training_(std::move(training)), k_(k) {
    const std::size_t n = training_.rows();
    if (n == 0 || training_.cols() == 0) throw Error("fit_lof: empty data");
    if (k_ < 1 || k_ >= n) {
      throw Error("fit_lof: k must satisfy 1 <= k < n (k=" + std::to_string(k_) +
                  ", n=" + std::to_string(n) + ")");
    }
    index_ = KdTree(training_);

    std::vector<std::vector<Neighbor>> neighbors(n);
    k_distance_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      neighbors[i] = index_.knn(training_.row(i), k_, i);
      k_distance_[i] = neighbors[i].back().distance();
    }
    lrd_.assign(n, 0.0);
    std::vector<bool> degenerate(n, false);
    double cap = 0.0;
    bool any_finite = false;
    for (std::size_t i = 0; i < n; ++i) {
      const double sum = reach_sum(neighbors[i]);
      if (sum > 0.0) {
        lrd_[i] = static_cast<double>(k_) / sum;
        cap = any_finite ? std::max(cap, lrd_[i]) : lrd_[i];
        any_finite = true;
      } else {
        degenerate[i] = true;
      }
    }
    // A zero reachability sum means all k neighbours are exact duplicates; such
    // points get the densest finite lrd in the model (1 if there is none).
    lrd_cap_ = any_finite ? cap : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (degenerate[i]) lrd_[i] = lrd_cap_;
    }
  }

  // LOF = mean lrd of the query's k nearest training points / lrd of the query.
  double score(std::span<const double> x) const {
    if (x.size() != training_.cols()) {
      throw Error("lof_score: point has " + std::to_string(x.size()) +
                  " features, model expects " + std::to_string(training_.cols()));
    }
    return score_from_neighbors(index_.knn(x, k_));
  }

  std::vector<Neighbor> neighbors(std::span<const double> x) const {
    return index_.knn(x, k_);
  }

  const Matrix& training_points() const { return training_; }
  std::size_t k() const { return k_; }
  std::size_t n_features() const { return training_.cols(); }
  const std::vector<double>& lrd() const { return lrd_; }
  const std::vector<double>& k_distances() const { return k_distance_; }
  double lrd_cap() const { return lrd_cap_; }

 private:
  double score_from_neighbors(const std::vector<Neighbor>& nn) const {
    const double sum = reach_sum(nn);
    const double query_lrd = sum > 0.0 ? static_cast<double>(k_) / sum : lrd_cap_;
    double mean_lrd = 0.0;
    for (const auto& nb : nn) mean_lrd += lrd_[nb.index];
    mean_lrd /= static_cast<double>(nn.size());
    return mean_lrd / query_lrd;
  }

  // Sum over neighbours b of reach-dist(a, b) = max(k_distance(b), d(a, b)).
  double reach_sum(const std::vector<Neighbor>& nn) const {
    double sum = 0.0;
    for (const auto& nb : nn) sum += std::max(k_distance_[nb.index], nb.distance());
    return sum;
  }

  Matrix training_;
  std::size_t k_ = 0;
  KdTree index_;
  std::vector<double> k_distance_;
  std::vector<double> lrd_;
  double lrd_cap_ = 1.0;
};

inline LofModel fit_lof(const Matrix& x, std::size_t k) { return LofModel(x, k); }

}  // namespace dpshap
