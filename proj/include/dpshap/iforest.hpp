#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "dpshap/common.hpp"

namespace dpshap {

inline constexpr double kEulerGamma = 0.5772156649;

// Expected path length of an unsuccessful BST search over m points; used both
// as the score normalizer c(psi) and as the adjustment for unsplit leaves.
inline double average_path_length(std::size_t m) {
  if (m <= 1) return 0.0;
  if (m == 2) return 1.0;
  const double mm = static_cast<double>(m);
  const double harmonic = std::log(mm - 1.0) + kEulerGamma;
  return 2.0 * harmonic - 2.0 * (mm - 1.0) / mm;
}

struct IForestParams {
  std::size_t n_estimators = 100;
  std::size_t max_features = 0;    // 0 = all features
  std::size_t subsample_size = 0;  // 0 = min(256, n)
  std::size_t height_limit = 0;    // 0 = ceil(log2(psi))

  friend bool operator==(const IForestParams&, const IForestParams&) = default;
};

class IsolationTree {
 public:
  struct Node {
    std::int32_t feature = -1;  // -1 marks a leaf
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::uint32_t size = 0;
    std::uint32_t depth = 0;
    double split = 0.0;

    bool is_leaf() const { return feature < 0; }
    friend bool operator==(const Node&, const Node&) = default;
  };

  IsolationTree() = default;
  IsolationTree(std::vector<Node> nodes, std::size_t height_limit)
      : nodes_(std::move(nodes)), height_limit_(height_limit), leaf_path_(nodes_.size(), 0.0) {
    if (nodes_.empty()) throw Error("isolation tree without nodes");
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& n = nodes_[i];
      if (n.is_leaf()) {
        leaf_path_[i] = static_cast<double>(n.depth) + average_path_length(n.size);
      } else if (n.left < 0 || n.right < 0 || static_cast<std::size_t>(n.left) >= nodes_.size() ||
                 static_cast<std::size_t>(n.right) >= nodes_.size()) {
        throw Error("isolation tree node has invalid children");
      }
    }
  }

  // Leaf depth plus c(leaf size) for the leaf reached by `x`.
  double path_length(std::span<const double> x) const {
    std::size_t id = 0;
    while (!nodes_[id].is_leaf()) {
      const Node& node = nodes_[id];
      id = static_cast<std::size_t>(
          x[static_cast<std::size_t>(node.feature)] < node.split ? node.left : node.right);
    }
    return leaf_path_[id];
  }

  // Adds, for every coalition S (bit j set = feature j from x, else from b),
  // the path length of the composite point to h[S].
  void add_coalition_paths(std::span<const double> x, std::span<const double> b,
                           std::span<double> h) const {
    const auto full = static_cast<std::uint64_t>(h.size() - 1);
    add_paths(0, x, b, 0, 0, full, h);
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t height_limit() const { return height_limit_; }

  std::size_t max_leaf_depth() const {
    std::size_t out = 0;
    for (const auto& n : nodes_) {
      if (n.is_leaf()) out = std::max<std::size_t>(out, n.depth);
    }
    return out;
  }

  friend bool operator==(const IsolationTree&, const IsolationTree&) = default;

 private:
  // `in` / `out`: features known to come from x / from b on this path.
  void add_paths(std::size_t id, std::span<const double> x, std::span<const double> b,
                 std::uint64_t in, std::uint64_t out, std::uint64_t full,
                 std::span<double> h) const {
    while (!nodes_[id].is_leaf()) {
      const Node& node = nodes_[id];
      const auto f = static_cast<std::size_t>(node.feature);
      const std::uint64_t bit = std::uint64_t{1} << f;
      const auto x_side = static_cast<std::size_t>(x[f] < node.split ? node.left : node.right);
      const auto b_side = static_cast<std::size_t>(b[f] < node.split ? node.left : node.right);
      if ((in & bit) || x_side == b_side) {
        id = x_side;
      } else if (out & bit) {
        id = b_side;
      } else {
        add_paths(x_side, x, b, in | bit, out, full, h);
        id = b_side;
        out |= bit;
      }
    }
    const double path = leaf_path_[id];
    const std::uint64_t free = full & ~(in | out);
    for (std::uint64_t sub = free;; sub = (sub - 1) & free) {
      h[in | sub] += path;
      if (sub == 0) break;
    }
  }

  std::vector<Node> nodes_;
  std::size_t height_limit_ = 0;
  std::vector<double> leaf_path_;
};

class IsolationForestModel {
 public:
  IsolationForestModel() = default;
  IsolationForestModel(std::vector<IsolationTree> trees, std::size_t n_features,
                       std::size_t subsample_size, std::size_t max_features, std::uint64_t seed)
      : trees_(std::move(trees)),
        n_features_(n_features),
        subsample_size_(subsample_size),
        max_features_(max_features),
        c_norm_(average_path_length(subsample_size)),
        seed_(seed) {}

  // s = 2^(-E[h(x)] / c(psi)); higher means more anomalous.
  double score(std::span<const double> x) const {
    if (x.size() != n_features_) {
      throw Error("iforest_score: point has " + std::to_string(x.size()) +
                  " features, model expects " + std::to_string(n_features_));
    }
    return std::exp2(-expected_path_length(x) / c_norm_);
  }

  double expected_path_length(std::span<const double> x) const {
    double total = 0.0;
    for (const auto& t : trees_) total += t.path_length(x);
    return total / static_cast<double>(trees_.size());
  }

  // v(S) = sum_b w_b score(composite(x, b, S)) for all 2^d coalitions,
  // indexed by bit mask. Each entry matches evaluating score() on the
  // composite point, at the cost of one joint traversal per (tree, b).
  std::vector<double> coalition_values(std::span<const double> x, const Matrix& background,
                                       std::span<const double> weights) const {
    const std::size_t d = n_features_;
    if (x.size() != d || background.cols() != d) {
      throw Error("iforest coalition_values: dimension mismatch");
    }
    if (weights.size() != background.rows()) {
      throw Error("iforest coalition_values: weight count does not match background");
    }
    if (d > 24) throw Error("iforest coalition_values: too many features to tabulate");
    const std::size_t n_masks = std::size_t{1} << d;
    std::vector<double> values(n_masks, 0.0);
    std::vector<double> h(n_masks);
    const auto n_trees = static_cast<double>(trees_.size());
    for (std::size_t r = 0; r < background.rows(); ++r) {
      std::fill(h.begin(), h.end(), 0.0);
      for (const auto& t : trees_) t.add_coalition_paths(x, background.row(r), h);
      for (std::size_t m = 0; m < n_masks; ++m) {
        values[m] += weights[r] * std::exp2(-(h[m] / n_trees) / c_norm_);
      }
    }
    return values;
  }

  const std::vector<IsolationTree>& trees() const { return trees_; }
  std::size_t n_features() const { return n_features_; }
  std::size_t n_estimators() const { return trees_.size(); }
  std::size_t subsample_size() const { return subsample_size_; }
  std::size_t max_features() const { return max_features_; }
  double c_norm() const { return c_norm_; }
  std::uint64_t seed() const { return seed_; }

  friend bool operator==(const IsolationForestModel&, const IsolationForestModel&) = default;

 private:
  std::vector<IsolationTree> trees_;
  std::size_t n_features_ = 0;
  std::size_t subsample_size_ = 0;
  std::size_t max_features_ = 0;
  double c_norm_ = 0.0;
  std::uint64_t seed_ = 0;
};

namespace detail {

// Row indices in lexicographic order of row contents. Subsampling draws
// positions in this order, so the fitted forest does not depend on the order
// in which rows were supplied.
inline std::vector<std::size_t> canonical_row_order(const Matrix& x) {
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    auto ra = x.row(a);
    auto rb = x.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  return order;
}

class TreeGrower {
 public:
  TreeGrower(const Matrix& x, std::span<const std::size_t> features, std::size_t height_limit,
             Rng& rng)
      : x_(x), features_(features), height_limit_(height_limit), rng_(rng) {}

  std::vector<IsolationTree::Node> grow(std::vector<std::size_t> rows) {
    rows_ = std::move(rows);
    nodes_.clear();
    build(0, rows_.size(), 0);
    return std::move(nodes_);
  }

 private:
  std::int32_t build(std::size_t begin, std::size_t end, std::uint32_t depth) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({});
    const std::size_t count = end - begin;
    nodes_[static_cast<std::size_t>(id)].size = static_cast<std::uint32_t>(count);
    nodes_[static_cast<std::size_t>(id)].depth = depth;
    if (depth >= height_limit_ || count <= 1) return id;

    // Only features with spread in this node can split it.
    candidates_.clear();
    lo_.clear();
    hi_.clear();
    for (std::size_t f : features_) {
      double lo = x_(rows_[begin], f);
      double hi = lo;
      for (std::size_t i = begin + 1; i < end; ++i) {
        const double v = x_(rows_[i], f);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      if (hi > lo) {
        candidates_.push_back(f);
        lo_.push_back(lo);
        hi_.push_back(hi);
      }
    }
    if (candidates_.empty()) return id;

    const std::size_t pick = rng_.below(candidates_.size());
    const std::size_t feature = candidates_[pick];
    const double lo = lo_[pick];
    const double hi = hi_[pick];
    double split = lo + rng_.uniform() * (hi - lo);
    if (!(split > lo) || split > hi) split = lo + 0.5 * (hi - lo);

    auto mid_it = std::partition(rows_.begin() + static_cast<std::ptrdiff_t>(begin),
                                 rows_.begin() + static_cast<std::ptrdiff_t>(end),
                                 [&](std::size_t r) { return x_(r, feature) < split; });
    const auto mid = static_cast<std::size_t>(mid_it - rows_.begin());

    nodes_[static_cast<std::size_t>(id)].feature = static_cast<std::int32_t>(feature);
    nodes_[static_cast<std::size_t>(id)].split = split;
    const std::int32_t left = build(begin, mid, depth + 1);
    const std::int32_t right = build(mid, end, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
  }

  const Matrix& x_;
  std::span<const std::size_t> features_;
  std::size_t height_limit_;
  Rng& rng_;
  std::vector<std::size_t> rows_;
  std::vector<IsolationTree::Node> nodes_;
  std::vector<std::size_t> candidates_;
  std::vector<double> lo_, hi_;
};

}  // namespace detail

inline IForestParams resolve_iforest_params(IForestParams p, std::size_t n, std::size_t d) {
  if (p.subsample_size == 0) p.subsample_size = std::min<std::size_t>(256, n);
  if (p.max_features == 0) p.max_features = d;
  if (p.height_limit == 0) {
    p.height_limit = static_cast<std::size_t>(
        std::ceil(std::log2(static_cast<double>(std::max<std::size_t>(p.subsample_size, 2)))));
  }
  return p;
}

// Each tree grows on an independent subsample of psi rows, drawn with a seed
// derived from (seed, tree index). Trees use a random max_features-subset of
// the columns; every split picks one of those columns uniformly (among the
// ones with spread in the node) and a split value uniform in (min, max).
inline IsolationForestModel fit_iforest(const Matrix& x, IForestParams params, std::uint64_t seed) {
  if (x.rows() == 0 || x.cols() == 0) throw Error("fit_iforest: empty data");
  if (params.n_estimators == 0) throw Error("fit_iforest: n_estimators must be >= 1");
  params = resolve_iforest_params(params, x.rows(), x.cols());
  if (params.subsample_size < 2) throw Error("fit_iforest: subsample_size must be >= 2");
  if (params.subsample_size > x.rows()) {
    throw Error("fit_iforest: subsample_size " + std::to_string(params.subsample_size) +
                " exceeds row count " + std::to_string(x.rows()));
  }
  if (params.max_features > x.cols()) throw Error("fit_iforest: max_features exceeds d");

  const auto canonical = detail::canonical_row_order(x);
  std::vector<IsolationTree> trees;
  trees.reserve(params.n_estimators);
  for (std::size_t t = 0; t < params.n_estimators; ++t) {
    Rng rng(derive_seed(seed, "iforest_tree", static_cast<std::uint64_t>(t)));
    std::vector<std::size_t> rows;
    rows.reserve(params.subsample_size);
    for (auto pos : rng.sample_without_replacement(x.rows(), params.subsample_size)) {
      rows.push_back(canonical[pos]);
    }
    auto features = rng.sample_without_replacement(x.cols(), params.max_features);
    std::sort(features.begin(), features.end());
    detail::TreeGrower grower(x, features, params.height_limit, rng);
    trees.emplace_back(grower.grow(std::move(rows)), params.height_limit);
  }
  return IsolationForestModel(std::move(trees), x.cols(), params.subsample_size,
                              params.max_features, seed);
}

}  // namespace dpshap
