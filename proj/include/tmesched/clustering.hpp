#pragma once

// State discretization: Ward-linkage agglomerative clustering of pooled
// embedded windows, cut at a fixed number of clusters.
//
// Ward merges are found with the nearest-neighbor-chain algorithm over a
// condensed matrix of merge costs, updated by the Lance-Williams recurrence.
// Pools larger than `direct_limit` rows are first quantized by Lloyd k-means
// into `mini_centroids` weighted points; every window then inherits the label
// of its mini-centroid.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "tmesched/core.hpp"

namespace tmesched {

struct ClusterOptions {
  int n_clusters = 6;
  Eigen::Index direct_limit = 4000;
  Eigen::Index mini_centroids = 2000;
  int kmeans_iterations = 20;
  std::uint64_t seed = 0;
};

struct Clustering {
  std::vector<int> labels;   // 0-based cluster index per input row
  Eigen::MatrixXd centroids; // n_clusters x dim, per-cluster row means
  bool quantized = false;
};

struct Merge {
  Eigen::Index a;
  Eigen::Index b;
  double cost;
};

namespace detail {

class CondensedMatrix {
 public:
  explicit CondensedMatrix(Eigen::Index n)
      : n_(n), d_(static_cast<std::size_t>(n * (n - 1) / 2)) {}

  double& operator()(Eigen::Index i, Eigen::Index j) {
    return d_[offset(i, j)];
  }
  double operator()(Eigen::Index i, Eigen::Index j) const {
    return d_[offset(i, j)];
  }

 private:
  std::size_t offset(Eigen::Index i, Eigen::Index j) const {
    if (i > j) std::swap(i, j);
    return static_cast<std::size_t>(n_ * i - i * (i + 1) / 2 + (j - i - 1));
  }
  Eigen::Index n_;
  std::vector<double> d_;
};

struct UnionFind {
  explicit UnionFind(std::size_t n) : parent(n) {
    std::iota(parent.begin(), parent.end(), std::size_t{0});
  }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a < b) parent[b] = a;
    else if (b < a) parent[a] = b;
  }
  std::vector<std::size_t> parent;
};

}  // namespace detail

// Ward merge sequence for weighted points (rows of x). Merge cost between
// clusters A and B is |A||B| / (|A| + |B|) * ||c_A - c_B||^2.
inline std::vector<Merge> ward_merges(const Eigen::MatrixXd& x,
                                      const Eigen::VectorXd& weights) {
  const Eigen::Index n = x.rows();
  std::vector<Merge> merges;
  if (n < 2) return merges;
  detail::CondensedMatrix d(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double wi = weights[i], wj = weights[j];
      d(i, j) = wi * wj / (wi + wj) * (x.row(i) - x.row(j)).squaredNorm();
    }
  }
  std::vector<double> size(weights.data(), weights.data() + n);
  std::vector<char> active(static_cast<std::size_t>(n), 1);
  std::vector<Eigen::Index> chain;
  merges.reserve(static_cast<std::size_t>(n - 1));

  for (Eigen::Index remaining = n; remaining > 1; --remaining) {
    if (chain.empty()) {
      Eigen::Index first = 0;
      while (!active[static_cast<std::size_t>(first)]) ++first;
      chain.push_back(first);
    }
    Eigen::Index a = 0, b = 0;
    while (true) {
      a = chain.back();
      // Prefer the previous chain element on ties so the chain terminates.
      Eigen::Index best = chain.size() >= 2 ? chain[chain.size() - 2] : -1;
      double best_d = best >= 0 ? d(a, best) : std::numeric_limits<double>::infinity();
      for (Eigen::Index k = 0; k < n; ++k) {
        if (k == a || !active[static_cast<std::size_t>(k)]) continue;
        if (d(a, k) < best_d) {
          best_d = d(a, k);
          best = k;
        }
      }
      b = best;
      if (chain.size() >= 2 && b == chain[chain.size() - 2]) break;
      chain.push_back(b);
    }
    chain.pop_back();
    chain.pop_back();
    const Eigen::Index keep = std::min(a, b), drop = std::max(a, b);
    const double cost = d(a, b);
    merges.push_back({keep, drop, cost});
    const double sa = size[static_cast<std::size_t>(keep)];
    const double sb = size[static_cast<std::size_t>(drop)];
    for (Eigen::Index k = 0; k < n; ++k) {
      if (k == keep || k == drop || !active[static_cast<std::size_t>(k)]) continue;
      const double sk = size[static_cast<std::size_t>(k)];
      d(keep, k) = ((sa + sk) * d(keep, k) + (sb + sk) * d(drop, k) - sk * cost) /
                   (sa + sb + sk);
    }
    active[static_cast<std::size_t>(drop)] = 0;
    size[static_cast<std::size_t>(keep)] = sa + sb;
  }
  // Ward is reducible, so sorting the chain's merges by cost yields the
  // dendrogram order.
  std::stable_sort(merges.begin(), merges.end(),
                   [](const Merge& l, const Merge& r) { return l.cost < r.cost; });
  return merges;
}

// Applies the first n - k merges. Labels are numbered by first appearance in
// row order.
inline std::vector<int> cut_tree(Eigen::Index n, const std::vector<Merge>& merges,
                                 int k) {
  detail::UnionFind uf(static_cast<std::size_t>(n));
  const Eigen::Index apply = std::max<Eigen::Index>(0, n - k);
  for (Eigen::Index m = 0; m < apply && m < static_cast<Eigen::Index>(merges.size()); ++m) {
    uf.unite(static_cast<std::size_t>(merges[static_cast<std::size_t>(m)].a),
             static_cast<std::size_t>(merges[static_cast<std::size_t>(m)].b));
  }
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::vector<int> root_label(static_cast<std::size_t>(n), -1);
  int next = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& rl = root_label[uf.find(i)];
    if (rl < 0) rl = next++;
    labels[i] = rl;
  }
  return labels;
}

// Index of the nearest centroid (squared Euclidean) for every row; ties go to
// the lower index.
inline std::vector<int> assign_nearest(const Eigen::MatrixXd& x,
                                       const Eigen::MatrixXd& centroids) {
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  const Eigen::VectorXd cn = centroids.rowwise().squaredNorm();
  constexpr Eigen::Index kBlock = 512;
  for (Eigen::Index start = 0; start < x.rows(); start += kBlock) {
    const Eigen::Index len = std::min(kBlock, x.rows() - start);
    // ||x||^2 is constant per row and does not affect the argmin.
    Eigen::MatrixXd score = -2.0 * x.middleRows(start, len) * centroids.transpose();
    score.rowwise() += cn.transpose();
    for (Eigen::Index r = 0; r < len; ++r) {
      Eigen::Index best = 0;
      score.row(r).minCoeff(&best);
      out[static_cast<std::size_t>(start + r)] = static_cast<int>(best);
    }
  }
  return out;
}

inline Eigen::MatrixXd cluster_means(const Eigen::MatrixXd& x,
                                     const std::vector<int>& labels, int k) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(k, x.cols());
  std::vector<double> count(static_cast<std::size_t>(k), 0.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int l = labels[static_cast<std::size_t>(i)];
    c.row(l) += x.row(i);
    count[static_cast<std::size_t>(l)] += 1.0;
  }
  for (int l = 0; l < k; ++l) {
    if (count[static_cast<std::size_t>(l)] > 0) c.row(l) /= count[static_cast<std::size_t>(l)];
  }
  return c;
}

// Lloyd k-means from k distinct seeded rows. Returns non-empty centroids and
// the label of each row.
inline std::pair<Eigen::MatrixXd, std::vector<int>> kmeans(const Eigen::MatrixXd& x,
                                                           Eigen::Index k, int iterations,
                                                           std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  Rng rng(derive_seed(seed, stream::kKMeans, 0));
  rng.shuffle(std::span<Eigen::Index>(idx));
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  Eigen::MatrixXd c(k, x.cols());
  for (Eigen::Index i = 0; i < k; ++i) c.row(i) = x.row(idx[static_cast<std::size_t>(i)]);

  std::vector<int> labels = assign_nearest(x, c);
  for (int it = 0; it < iterations; ++it) {
    Eigen::MatrixXd next = cluster_means(x, labels, static_cast<int>(k));
    // Empty clusters keep their previous position.
    std::vector<char> used(static_cast<std::size_t>(k), 0);
    for (int l : labels) used[static_cast<std::size_t>(l)] = 1;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (!used[static_cast<std::size_t>(i)]) next.row(i) = c.row(i);
    }
    c = std::move(next);
    auto relabeled = assign_nearest(x, c);
    const bool stable = relabeled == labels;
    labels = std::move(relabeled);
    if (stable) break;
  }
  // Drop empty centroids and compact the labels.
  std::vector<int> remap(static_cast<std::size_t>(k), -1);
  int used = 0;
  for (int l : labels) {
    if (remap[static_cast<std::size_t>(l)] < 0) remap[static_cast<std::size_t>(l)] = 0;
  }
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < k; ++i) {
    if (remap[static_cast<std::size_t>(i)] == 0) {
      remap[static_cast<std::size_t>(i)] = used++;
      keep.push_back(i);
    }
  }
  Eigen::MatrixXd kept(used, x.cols());
  for (int i = 0; i < used; ++i) kept.row(i) = c.row(keep[static_cast<std::size_t>(i)]);
  for (int& l : labels) l = remap[static_cast<std::size_t>(l)];
  return {std::move(kept), std::move(labels)};
}

inline Clustering cluster_states(const Eigen::MatrixXd& windows,
                                 const ClusterOptions& opt = {}) {
  const Eigen::Index n = windows.rows();
  if (opt.n_clusters < 1) throw ConfigError("cluster count must be >= 1");
  if (n < opt.n_clusters) {
    throw ConfigError("cannot form " + std::to_string(opt.n_clusters) +
                      " clusters from " + std::to_string(n) + " windows");
  }
  Clustering out;
  if (n <= opt.direct_limit) {
    out.labels = cut_tree(n, ward_merges(windows, Eigen::VectorXd::Ones(n)), opt.n_clusters);
  } else {
    const Eigen::Index m = std::max<Eigen::Index>(opt.mini_centroids, opt.n_clusters);
    auto [mini, mini_labels] = kmeans(windows, std::min(m, n), opt.kmeans_iterations, opt.seed);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(mini.rows());
    for (int l : mini_labels) w[l] += 1.0;
    if (mini.rows() < opt.n_clusters) {
      throw ConfigError("pre-quantization produced fewer centroids than clusters");
    }
    const auto coarse = cut_tree(mini.rows(), ward_merges(mini, w), opt.n_clusters);
    // Renumber by first appearance among the windows.
    std::vector<int> renumber(static_cast<std::size_t>(opt.n_clusters), -1);
    int next = 0;
    out.labels.resize(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < out.labels.size(); ++i) {
      const int c = coarse[static_cast<std::size_t>(mini_labels[i])];
      auto& r = renumber[static_cast<std::size_t>(c)];
      if (r < 0) r = next++;
      out.labels[i] = r;
    }
    out.quantized = true;
  }
  out.centroids = cluster_means(windows, out.labels, opt.n_clusters);
  return out;
}

// Renumbers clusters so that label 0 has the largest key, label 1 the next,
// and so on. Equal keys keep their existing order.
inline void order_clusters_by_key(Clustering& c, const std::vector<double>& key) {
  const int k = static_cast<int>(c.centroids.rows());
  std::vector<int> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return key[static_cast<std::size_t>(a)] > key[static_cast<std::size_t>(b)];
  });
  std::vector<int> rank(static_cast<std::size_t>(k));
  for (int r = 0; r < k; ++r) rank[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = r;
  for (int& l : c.labels) l = rank[static_cast<std::size_t>(l)];
  Eigen::MatrixXd reordered(c.centroids.rows(), c.centroids.cols());
  for (int r = 0; r < k; ++r) reordered.row(r) = c.centroids.row(order[static_cast<std::size_t>(r)]);
  c.centroids = std::move(reordered);
}

}  // namespace tmesched
