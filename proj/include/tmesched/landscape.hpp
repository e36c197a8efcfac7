#pragma once

// Everything downstream of clustering that reads the state landscape:
// per-trajectory state sequences and attractor tagging, cosine 1-NN snapshot
// mapping, the k-NN attractor-basin classifier, and PCA plot coordinates.
//
// State labels are 0-based in code and rendered 1-based (S1..S6) in files.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "tmesched/clustering.hpp"
#include "tmesched/core.hpp"
#include "tmesched/features.hpp"
#include "tmesched/stats.hpp"

namespace tmesched {

enum class StateRole { Attractor, Transient };

struct StateSequence {
  int trajectory_id = 0;
  std::vector<int> labels;  // one per embedded window, in center-step order
};

// Splits pooled labels back into per-trajectory sequences, in first-seen
// trajectory order.
inline std::vector<StateSequence> split_sequences(const std::vector<int>& trajectory_id,
                                                  const std::vector<int>& labels) {
  std::vector<StateSequence> out;
  std::map<int, std::size_t> where;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, fresh] = where.try_emplace(trajectory_id[i], out.size());
    if (fresh) out.push_back({trajectory_id[i], {}});
    out[it->second].labels.push_back(labels[i]);
  }
  return out;
}

// Terminal group of a trajectory: the label of its final window.
inline std::vector<int> terminal_labels(const std::vector<StateSequence>& seqs) {
  std::vector<int> out;
  for (const auto& s : seqs) {
    if (s.labels.empty()) throw InputError("empty state sequence");
    out.push_back(s.labels.back());
  }
  return out;
}

// Attractor when at least `share` of trajectories end in the state, or when
// it is listed in `absorbing` (self-absorbing in some group matrix).
inline std::vector<StateRole> tag_states(const std::vector<int>& terminal, int n_states,
                                         const std::vector<int>& absorbing = {},
                                         double share = 0.25) {
  std::vector<double> ends(static_cast<std::size_t>(n_states), 0.0);
  for (int t : terminal) ends[static_cast<std::size_t>(t)] += 1.0;
  std::vector<StateRole> roles(static_cast<std::size_t>(n_states), StateRole::Transient);
  for (int s = 0; s < n_states; ++s) {
    if (!terminal.empty() &&
        ends[static_cast<std::size_t>(s)] >= share * static_cast<double>(terminal.size())) {
      roles[static_cast<std::size_t>(s)] = StateRole::Attractor;
    }
  }
  for (int s : absorbing) roles[static_cast<std::size_t>(s)] = StateRole::Attractor;
  return roles;
}

// -----------------------------------------------------------------------------
// Snapshot mapping
// -----------------------------------------------------------------------------

inline double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (!(na > 0.0) || !(nb > 0.0)) {
    throw NumericalError("cosine similarity is undefined for a zero-norm vector");
  }
  return a.dot(b) / (na * nb);
}

// Reference set for snapshot mapping: one row per reference window holding
// the center-column slice restricted to the snapshot feature set, unit
// normalized.
class SnapshotReference {
 public:
  SnapshotReference(Eigen::MatrixXd rows, std::vector<int> labels, int n_states)
      : unit_(std::move(rows)), labels_(std::move(labels)), n_states_(n_states) {
    if (unit_.rows() == 0) throw InputError("snapshot reference set is empty");
    for (Eigen::Index i = 0; i < unit_.rows(); ++i) {
      const double n = unit_.row(i).norm();
      if (!(n > 0.0)) {
        throw NumericalError("reference window " + std::to_string(i) +
                             " has a zero-norm center column");
      }
      unit_.row(i) /= n;
    }
  }

  // Center-column slices of pooled windows. `pool_features` is the feature
  // set the windows were built from and `snapshot_features` the subset used
  // for matching. `rows` selects which pooled windows serve as references.
  static SnapshotReference from_pool(const EmbeddedPool& pool, int window_radius,
                                     const FeatureSetSpec& pool_features,
                                     const FeatureSetSpec& snapshot_features,
                                     const std::vector<int>& labels, int n_states,
                                     const std::vector<Eigen::Index>& rows) {
      const auto pos = snapshot_features.positions_in(pool_features);
      const auto m = static_cast<Eigen::Index>(pool_features.size());
      Eigen::MatrixXd ref(static_cast<Eigen::Index>(rows.size()),
                          static_cast<Eigen::Index>(pos.size()));
      std::vector<int> ref_labels;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t j = 0; j < pos.size(); ++j) {
          ref(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) =
              pool.data(rows[r], window_radius * m + pos[j]);
        }
        ref_labels.push_back(labels[static_cast<std::size_t>(rows[r])]);
      }
      return SnapshotReference(std::move(ref), std::move(ref_labels), n_states);
  }

  Eigen::Index size() const { return unit_.rows(); }
  int n_states() const { return n_states_; }

  // Cosine similarity of the query to every reference row.
  Eigen::VectorXd similarities(const Eigen::VectorXd& query) const {
    if (query.size() != unit_.cols()) {
      throw InputError("snapshot has " + std::to_string(query.size()) +
                       " features, reference has " + std::to_string(unit_.cols()));
    }
    const double n = query.norm();
    if (!(n > 0.0)) {
      throw NumericalError("cosine similarity is undefined for a zero-norm snapshot");
    }
    return unit_ * (query / n);
  }

  // Label of the most similar reference; ties go to the lowest index.
  int assign(const Eigen::VectorXd& query) const {
    const Eigen::VectorXd sim = similarities(query);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < sim.size(); ++i) {
      if (sim[i] > sim[best]) best = i;
    }
    return labels_[static_cast<std::size_t>(best)];
  }

  // Per-state score: best similarity among references of that state, -1
  // when the state has no references.
  std::vector<double> state_scores(const Eigen::VectorXd& query) const {
    const Eigen::VectorXd sim = similarities(query);
    std::vector<double> best(static_cast<std::size_t>(n_states_), -1.0);
    for (Eigen::Index i = 0; i < sim.size(); ++i) {
      auto& b = best[static_cast<std::size_t>(labels_[static_cast<std::size_t>(i)])];
      b = std::max(b, sim[i]);
    }
    return best;
  }

 private:
  Eigen::MatrixXd unit_;
  std::vector<int> labels_;
  int n_states_;
};

inline int assign_snapshot(const Eigen::VectorXd& snapshot, const SnapshotReference& ref) {
  return ref.assign(snapshot);
}

struct HoldoutResult {
  OneVsRestAuc mean_auc;               // per-state AUC averaged over repeats
  std::vector<double> repeat_mean_auc; // mean AUC of each repeat
  double accuracy = 0.0;               // 1-NN hit rate pooled over repeats
};

// Synthetic hold-out: in every repeat, a `fraction` of each trajectory's
// windows is withheld; their center columns (restricted to the snapshot
// feature set) are scored against the remaining windows.
inline HoldoutResult holdout_snapshot_experiment(const EmbeddedPool& pool, int window_radius,
                                                 const FeatureSetSpec& pool_features,
                                                 const FeatureSetSpec& snapshot_features,
                                                 const std::vector<int>& labels, int n_states,
                                                 double fraction, int repeats,
                                                 std::uint64_t seed) {
  std::map<int, std::vector<Eigen::Index>> by_traj;
  for (Eigen::Index i = 0; i < pool.data.rows(); ++i) {
    by_traj[pool.trajectory_id[static_cast<std::size_t>(i)]].push_back(i);
  }
  const auto pos = snapshot_features.positions_in(pool_features);
  const auto m = static_cast<Eigen::Index>(pool_features.size());

  HoldoutResult out;
  std::vector<double> auc_sum(static_cast<std::size_t>(n_states), 0.0);
  std::vector<int> auc_n(static_cast<std::size_t>(n_states), 0);
  double hits = 0.0, total = 0.0;
  for (int rep = 0; rep < repeats; ++rep) {
    Rng rng(derive_seed(seed, stream::kHoldout, static_cast<std::uint64_t>(rep)));
    std::vector<char> held(static_cast<std::size_t>(pool.data.rows()), 0);
    for (auto& [tid, rows] : by_traj) {
      auto shuffled = rows;
      rng.shuffle(std::span<Eigen::Index>(shuffled));
      const auto take = static_cast<std::size_t>(
          std::max(1.0, std::round(fraction * static_cast<double>(rows.size()))));
      for (std::size_t i = 0; i < take && i < shuffled.size(); ++i) held[static_cast<std::size_t>(shuffled[i])] = 1;
    }
    std::vector<Eigen::Index> ref_rows, test_rows;
    for (Eigen::Index i = 0; i < pool.data.rows(); ++i) {
      (held[static_cast<std::size_t>(i)] ? test_rows : ref_rows).push_back(i);
    }
    const auto ref = SnapshotReference::from_pool(pool, window_radius, pool_features,
                                                  snapshot_features, labels, n_states, ref_rows);
    std::vector<std::vector<double>> scores;
    std::vector<int> truth;
    Eigen::VectorXd q(static_cast<Eigen::Index>(pos.size()));
    for (Eigen::Index r : test_rows) {
      for (std::size_t j = 0; j < pos.size(); ++j) {
        q[static_cast<Eigen::Index>(j)] = pool.data(r, window_radius * m + pos[j]);
      }
      auto s = ref.state_scores(q);
      const int predicted = static_cast<int>(std::max_element(s.begin(), s.end()) - s.begin());
      hits += predicted == labels[static_cast<std::size_t>(r)] ? 1.0 : 0.0;
      total += 1.0;
      scores.push_back(std::move(s));
      truth.push_back(labels[static_cast<std::size_t>(r)]);
    }
    const auto auc = roc_auc_one_vs_rest(scores, truth, n_states);
    out.repeat_mean_auc.push_back(auc.mean);
    for (int s = 0; s < n_states; ++s) {
      if (auc.per_state[static_cast<std::size_t>(s)]) {
        auc_sum[static_cast<std::size_t>(s)] += *auc.per_state[static_cast<std::size_t>(s)];
        ++auc_n[static_cast<std::size_t>(s)];
      }
    }
  }
  double mean_total = 0.0;
  int defined = 0;
  for (int s = 0; s < n_states; ++s) {
    if (auc_n[static_cast<std::size_t>(s)] > 0) {
      const double v = auc_sum[static_cast<std::size_t>(s)] / auc_n[static_cast<std::size_t>(s)];
      out.mean_auc.per_state.emplace_back(v);
      mean_total += v;
      ++defined;
    } else {
      out.mean_auc.per_state.emplace_back(std::nullopt);
    }
  }
  out.mean_auc.mean = defined ? mean_total / defined : 0.0;
  out.accuracy = total > 0 ? hits / total : 0.0;
  return out;
}

// -----------------------------------------------------------------------------
// Attractor basins
// -----------------------------------------------------------------------------

using BasinPoint = std::array<double, 2>;  // (log10 r_exh, r_adh)

struct BasinModel {
  std::vector<BasinPoint> points;
  std::vector<int> labels;
  int k = 2;
};

inline BasinModel fit_basin_model(std::vector<BasinPoint> points, std::vector<int> labels,
                                  int k = 2) {
  if (k < 1) throw ConfigError("basin classifier needs k >= 1");
  if (points.size() != labels.size()) {
    throw InputError("basin model: point and label counts differ");
  }
  if (points.size() < static_cast<std::size_t>(k)) {
    throw InputError("basin model needs at least k training points");
  }
  return {std::move(points), std::move(labels), k};
}

namespace detail {

// k-NN vote over training points, skipping index `exclude`. Neighbors are
// ordered by (distance, index); a tied vote goes to the label of the nearest
// tied neighbor.
inline int knn_vote(const BasinModel& m, const BasinPoint& q, std::ptrdiff_t exclude) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i = 0; i < m.points.size(); ++i) {
    if (static_cast<std::ptrdiff_t>(i) == exclude) continue;
    const double dx = m.points[i][0] - q[0], dy = m.points[i][1] - q[1];
    d.emplace_back(dx * dx + dy * dy, i);
  }
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(m.k), d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k), d.end());
  std::map<int, int> votes;
  for (std::size_t i = 0; i < k; ++i) ++votes[m.labels[d[i].second]];
  int top = 0;
  for (const auto& [label, v] : votes) top = std::max(top, v);
  for (std::size_t i = 0; i < k; ++i) {
    const int l = m.labels[d[i].second];
    if (votes[l] == top) return l;
  }
  return m.labels[d.front().second];
}

}  // namespace detail

inline int classify_basin(const BasinModel& m, const BasinPoint& q) {
  return detail::knn_vote(m, q, -1);
}

struct LooReport {
  std::vector<int> predictions;
  double accuracy = 0.0;
  // Index pairs sharing a location but carrying different labels.
  std::vector<std::pair<std::size_t, std::size_t>> conflicting_duplicates;
};

inline LooReport loo_cv(const BasinModel& m) {
  if (m.points.size() < static_cast<std::size_t>(m.k) + 1) {
    throw InputError("leave-one-out needs at least k + 1 training points");
  }
  LooReport r;
  double hits = 0.0;
  for (std::size_t i = 0; i < m.points.size(); ++i) {
    const int p = detail::knn_vote(m, m.points[i], static_cast<std::ptrdiff_t>(i));
    r.predictions.push_back(p);
    hits += p == m.labels[i] ? 1.0 : 0.0;
    for (std::size_t j = i + 1; j < m.points.size(); ++j) {
      if (m.points[i] == m.points[j] && m.labels[i] != m.labels[j]) {
        r.conflicting_duplicates.emplace_back(i, j);
      }
    }
  }
  r.accuracy = hits / static_cast<double>(m.points.size());
  return r;
}

inline double loo_cv_accuracy(const BasinModel& m) { return loo_cv(m).accuracy; }

// -----------------------------------------------------------------------------
// PCA plot coordinates
// -----------------------------------------------------------------------------

struct PcaProjection {
  Eigen::MatrixXd coords;          // n x 2
  Eigen::MatrixXd components;      // dim x 2 loadings
  Eigen::Vector2d explained_variance;
  double total_variance = 0.0;
};

// Projection onto the two leading principal components of the pooled rows.
// Each component is signed so its largest-magnitude loading is positive.
inline PcaProjection pca_project(const Eigen::MatrixXd& x) {
  if (x.rows() < 2) throw InputError("PCA needs at least 2 rows");
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / static_cast<double>(x.rows());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::Index d = cov.rows();
  const Eigen::Index take = std::min<Eigen::Index>(2, d);
  PcaProjection p;
  p.components = Eigen::MatrixXd::Zero(d, 2);
  p.explained_variance.setZero();
  for (Eigen::Index c = 0; c < take; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    p.components.col(c) = v;
    p.explained_variance[c] = std::max(0.0, eig.eigenvalues()[d - 1 - c]);
  }
  p.total_variance = cov.trace();
  p.coords = centered * p.components;
  return p;
}

}  // namespace tmesched
