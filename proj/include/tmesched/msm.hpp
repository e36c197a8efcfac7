#pragma once

// Markov state models over discrete state sequences: count-based estimation,
// propagation, absorption and committor analysis, and the three validation
// checks (bootstrap CIs, Chapman-Kolmogorov, KL occupancy divergence).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tmesched/core.hpp"
#include "tmesched/landscape.hpp"

namespace tmesched {

using CountMatrix = Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>;

enum class Provenance { Estimated, Fixture };

struct TransitionMatrix {
  Eigen::MatrixXd entries;
  std::string group = "pooled";
  Provenance provenance = Provenance::Estimated;
  std::optional<CountMatrix> counts;
  std::vector<bool> unvisited;        // rows replaced by a self-loop
  std::vector<double> row_sum_before; // fixture row sums prior to renormalization

  int n_states() const { return static_cast<int>(entries.rows()); }
};

inline constexpr double kRowSumTolerance = 1e-12;
inline constexpr double kAbsorbingTolerance = 1e-9;

inline void check_stochastic(const Eigen::MatrixXd& p, double tol = kRowSumTolerance) {
  if (p.rows() != p.cols() || p.rows() == 0) {
    throw InputError("transition matrix must be square and non-empty");
  }
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      if (!(p(i, j) >= 0.0 && p(i, j) <= 1.0)) {
        throw InputError("transition entry (" + std::to_string(i + 1) + "," +
                         std::to_string(j + 1) + ") outside [0,1]");
      }
    }
    if (std::abs(p.row(i).sum() - 1.0) > tol) {
      throw InputError("row " + std::to_string(i + 1) + " sums to " +
                       fmt_double(p.row(i).sum()) + ", not 1");
    }
  }
}

// Rescales every row to sum to one and records the original sums.
inline TransitionMatrix renormalized(Eigen::MatrixXd raw, std::string group,
                                     Provenance provenance) {
  TransitionMatrix m;
  m.group = std::move(group);
  m.provenance = provenance;
  for (Eigen::Index i = 0; i < raw.rows(); ++i) {
    const double s = raw.row(i).sum();
    if (!(s > 0.0)) throw InputError("row " + std::to_string(i + 1) + " has zero mass");
    m.row_sum_before.push_back(s);
    raw.row(i) /= s;
  }
  m.entries = std::move(raw);
  m.unvisited.assign(static_cast<std::size_t>(m.entries.rows()), false);
  check_stochastic(m.entries);
  return m;
}

// -----------------------------------------------------------------------------
// Estimation
// -----------------------------------------------------------------------------

inline CountMatrix count_transitions(const std::vector<StateSequence>& seqs, int n_states,
                                     int lag = 1) {
  if (n_states < 1) throw ConfigError("state count must be >= 1");
  CountMatrix n = CountMatrix::Zero(n_states, n_states);
  for (const auto& s : seqs) {
    for (std::size_t t = 0; t + static_cast<std::size_t>(lag) < s.labels.size(); ++t) {
      const int a = s.labels[t], b = s.labels[t + static_cast<std::size_t>(lag)];
      if (a < 0 || a >= n_states || b < 0 || b >= n_states) {
        throw InputError("state label outside 1.." + std::to_string(n_states) +
                         " in trajectory " + std::to_string(s.trajectory_id));
      }
      ++n(a, b);
    }
  }
  return n;
}

// Row-normalized counts; rows without observations become self-loops.
inline TransitionMatrix from_counts(const CountMatrix& counts, std::string group = "pooled") {
  TransitionMatrix m;
  m.group = std::move(group);
  m.provenance = Provenance::Estimated;
  const Eigen::Index s = counts.rows();
  m.entries = Eigen::MatrixXd::Zero(s, s);
  m.unvisited.assign(static_cast<std::size_t>(s), false);
  for (Eigen::Index i = 0; i < s; ++i) {
    const auto total = counts.row(i).sum();
    if (total == 0) {
      m.entries(i, i) = 1.0;
      m.unvisited[static_cast<std::size_t>(i)] = true;
      continue;
    }
    for (Eigen::Index j = 0; j < s; ++j) {
      m.entries(i, j) = static_cast<double>(counts(i, j)) / static_cast<double>(total);
    }
  }
  m.counts = counts;
  return m;
}

inline TransitionMatrix estimate_transition_matrix(const std::vector<StateSequence>& seqs,
                                                   int n_states, std::string group = "pooled") {
  if (seqs.empty()) throw InputError("no state sequences to estimate from");
  return from_counts(count_transitions(seqs, n_states), std::move(group));
}

// One matrix per terminal group; groups[i] is the group of seqs[i].
inline std::map<int, TransitionMatrix> estimate_group_matrices(
    const std::vector<StateSequence>& seqs, const std::vector<int>& groups, int n_states) {
  std::map<int, std::vector<StateSequence>> split;
  for (std::size_t i = 0; i < seqs.size(); ++i) split[groups[i]].push_back(seqs[i]);
  std::map<int, TransitionMatrix> out;
  for (const auto& [g, members] : split) {
    out.emplace(g, estimate_transition_matrix(members, n_states, std::to_string(g + 1)));
  }
  return out;
}

// -----------------------------------------------------------------------------
// Propagation, absorption, committors
// -----------------------------------------------------------------------------

inline void check_distribution(const Eigen::RowVectorXd& pi, Eigen::Index n_states) {
  if (pi.size() != n_states) {
    throw InputError("distribution has " + std::to_string(pi.size()) + " entries, expected " +
                     std::to_string(n_states));
  }
  if ((pi.array() < 0.0).any() || std::abs(pi.sum() - 1.0) > 1e-9) {
    throw InputError("initial distribution must be non-negative and sum to 1");
  }
}

inline Eigen::RowVectorXd propagate(const Eigen::RowVectorXd& pi0, const TransitionMatrix& p,
                                    long long k) {
  check_distribution(pi0, p.entries.rows());
  if (k < 0) throw ConfigError("propagation step count must be >= 0");
  Eigen::RowVectorXd pi = pi0;
  for (long long i = 0; i < k; ++i) pi = pi * p.entries;
  return pi;
}

inline Eigen::MatrixXd matrix_power(const Eigen::MatrixXd& p, int n) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Identity(p.rows(), p.cols());
  for (int i = 0; i < n; ++i) out = out * p;
  return out;
}

inline bool is_absorbing(const TransitionMatrix& p, int s, double tol = kAbsorbingTolerance) {
  return p.entries(s, s) >= 1.0 - tol;
}

inline std::vector<int> absorbing_states(const TransitionMatrix& p,
                                         double tol = kAbsorbingTolerance) {
  std::vector<int> out;
  for (int s = 0; s < p.n_states(); ++s) {
    if (is_absorbing(p, s, tol)) out.push_back(s);
  }
  return out;
}

struct AbsorptionResult {
  Eigen::VectorXd q;
  std::vector<int> cannot_reach;  // states from which the target is unreachable (q = 0)
};

// q_i = P(eventually absorbed in target | start in i), by first-step analysis
// restricted to the states that can reach the target.
inline AbsorptionResult absorption_probabilities(const TransitionMatrix& p, int target,
                                                 double tol = kAbsorbingTolerance) {
  const int n = p.n_states();
  if (target < 0 || target >= n) throw ConfigError("absorption target out of range");
  if (!is_absorbing(p, target, tol)) {
    throw NumericalError("state S" + std::to_string(target + 1) +
                         " is not absorbing (self-probability " +
                         fmt_double(p.entries(target, target)) + ")");
  }
  // Backward reachability over positive entries.
  std::vector<char> reach(static_cast<std::size_t>(n), 0);
  reach[static_cast<std::size_t>(target)] = 1;
  for (bool changed = true; changed;) {
    changed = false;
    for (int i = 0; i < n; ++i) {
      if (reach[static_cast<std::size_t>(i)] || is_absorbing(p, i, tol)) continue;
      for (int j = 0; j < n; ++j) {
        if (reach[static_cast<std::size_t>(j)] && p.entries(i, j) > 0.0) {
          reach[static_cast<std::size_t>(i)] = 1;
          changed = true;
          break;
        }
      }
    }
  }
  std::vector<int> solve;
  AbsorptionResult r;
  r.q = Eigen::VectorXd::Zero(n);
  r.q[target] = 1.0;
  for (int i = 0; i < n; ++i) {
    if (i == target) continue;
    if (reach[static_cast<std::size_t>(i)]) solve.push_back(i);
    else r.cannot_reach.push_back(i);
  }
  if (!solve.empty()) {
    const auto m = static_cast<Eigen::Index>(solve.size());
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(m, m);
    Eigen::VectorXd b(m);
    for (Eigen::Index r_ = 0; r_ < m; ++r_) {
      const int i = solve[static_cast<std::size_t>(r_)];
      b[r_] = p.entries(i, target);
      for (Eigen::Index c = 0; c < m; ++c) {
        a(r_, c) -= p.entries(i, solve[static_cast<std::size_t>(c)]);
      }
    }
    const Eigen::VectorXd x = a.partialPivLu().solve(b);
    for (Eigen::Index r_ = 0; r_ < m; ++r_) {
      r.q[solve[static_cast<std::size_t>(r_)]] = std::clamp(x[r_], 0.0, 1.0);
    }
  }
  return r;
}

struct CommittorCurve {
  std::string group;
  std::vector<double> values;      // Q(k), k = 0..K
  std::vector<double> derivative;  // Q(k+1) - Q(k), k = 0..K-1
  std::optional<int> below_25;     // first k with Q(k) < 0.25
  std::optional<int> below_10;     // first k with Q(k) < 0.10
};

inline CommittorCurve committor_curve(const Eigen::RowVectorXd& pi0, const TransitionMatrix& p,
                                      const Eigen::VectorXd& q, int horizon) {
  check_distribution(pi0, p.entries.rows());
  if (horizon < 0) throw ConfigError("committor horizon must be >= 0");
  CommittorCurve c;
  c.group = p.group;
  Eigen::RowVectorXd pi = pi0;
  for (int k = 0; k <= horizon; ++k) {
    const double v = pi.dot(q.transpose());
    c.values.push_back(v);
    if (!c.below_25 && v < 0.25) c.below_25 = k;
    if (!c.below_10 && v < 0.10) c.below_10 = k;
    if (k < horizon) pi = pi * p.entries;
  }
  for (std::size_t k = 0; k + 1 < c.values.size(); ++k) {
    c.derivative.push_back(c.values[k + 1] - c.values[k]);
  }
  return c;
}

// Uniform over the states that are not absorbing under p.
inline Eigen::RowVectorXd uniform_over_transient(const TransitionMatrix& p) {
  Eigen::RowVectorXd pi = Eigen::RowVectorXd::Zero(p.n_states());
  int n = 0;
  for (int s = 0; s < p.n_states(); ++s) {
    if (!is_absorbing(p, s)) {
      pi[s] = 1.0;
      ++n;
    }
  }
  if (n == 0) throw NumericalError("matrix " + p.group + " has no transient states");
  return pi / n;
}

// -----------------------------------------------------------------------------
// Validation
// -----------------------------------------------------------------------------

// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct BootstrapResult {
  Eigen::MatrixXd lower;
  Eigen::MatrixXd upper;
  Eigen::MatrixXd width;
  double max_width = 0.0;
  int n_resamples = 0;
  double level = 0.95;
};

// Percentile intervals from resampling whole sequences with replacement.
// Resample r draws from its own stream derived from (seed, r).
inline BootstrapResult bootstrap_ci(const std::vector<StateSequence>& seqs, int n_states,
                                    int n_resamples = 2000, double level = 0.95,
                                    std::uint64_t seed = 0) {
  if (seqs.size() < 2) throw InputError("bootstrap needs at least 2 sequences");
  if (n_resamples < 1) throw ConfigError("bootstrap needs at least 1 resample");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("confidence level must lie in (0,1)");
  // Per-sequence counts, summed per resample.
  std::vector<CountMatrix> per_seq;
  per_seq.reserve(seqs.size());
  for (const auto& s : seqs) per_seq.push_back(count_transitions({s}, n_states));

  const auto cells = static_cast<std::size_t>(n_states) * static_cast<std::size_t>(n_states);
  std::vector<std::vector<double>> samples(cells);
  for (auto& v : samples) v.reserve(static_cast<std::size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    Rng rng(derive_seed(seed, stream::kBootstrap, static_cast<std::uint64_t>(r)));
    CountMatrix c = CountMatrix::Zero(n_states, n_states);
    for (std::size_t i = 0; i < seqs.size(); ++i) c += per_seq[rng.below(seqs.size())];
    const auto m = from_counts(c);
    for (int i = 0; i < n_states; ++i) {
      for (int j = 0; j < n_states; ++j) {
        samples[static_cast<std::size_t>(i * n_states + j)].push_back(m.entries(i, j));
      }
    }
  }
  BootstrapResult out;
  out.n_resamples = n_resamples;
  out.level = level;
  out.lower.resize(n_states, n_states);
  out.upper.resize(n_states, n_states);
  const double alpha = 0.5 * (1.0 - level);
  for (int i = 0; i < n_states; ++i) {
    for (int j = 0; j < n_states; ++j) {
      auto& v = samples[static_cast<std::size_t>(i * n_states + j)];
      std::sort(v.begin(), v.end());
      out.lower(i, j) = quantile_sorted(v, alpha);
      out.upper(i, j) = quantile_sorted(v, 1.0 - alpha);
    }
  }
  out.width = out.upper - out.lower;
  out.max_width = out.width.maxCoeff();
  return out;
}

struct CkResult {
  int n = 0;
  double discrepancy = 0.0;
  std::vector<int> excluded_rows;  // rows without n-step observations
};

// max_ij |[P^n]_ij - [P^(n)]_ij| with P^(n) estimated from n-step pairs.
inline CkResult chapman_kolmogorov_test(const std::vector<StateSequence>& seqs,
                                        const TransitionMatrix& p, int n) {
  if (n < 1) throw ConfigError("Chapman-Kolmogorov lag must be >= 1");
  const int s = p.n_states();
  const auto direct = from_counts(count_transitions(seqs, s, n));
  const Eigen::MatrixXd power = matrix_power(p.entries, n);
  CkResult r;
  r.n = n;
  for (int i = 0; i < s; ++i) {
    if (direct.unvisited[static_cast<std::size_t>(i)]) {
      r.excluded_rows.push_back(i);
      continue;
    }
    r.discrepancy = std::max(r.discrepancy, (power.row(i) - direct.entries.row(i)).cwiseAbs().maxCoeff());
  }
  return r;
}

// Occupancy at each window index across sequences (sequences shorter than a
// given index drop out of it).
inline std::vector<Eigen::RowVectorXd> empirical_occupancy(const std::vector<StateSequence>& seqs,
                                                           int n_states) {
  std::size_t len = 0;
  for (const auto& s : seqs) len = std::max(len, s.labels.size());
  std::vector<Eigen::RowVectorXd> out;
  for (std::size_t k = 0; k < len; ++k) {
    Eigen::RowVectorXd pi = Eigen::RowVectorXd::Zero(n_states);
    double n = 0.0;
    for (const auto& s : seqs) {
      if (k < s.labels.size()) {
        pi[s.labels[k]] += 1.0;
        n += 1.0;
      }
    }
    out.push_back(pi / n);
  }
  return out;
}

inline constexpr double kKlFloor = 1e-12;

inline double kl_divergence(const Eigen::RowVectorXd& p, const Eigen::RowVectorXd& q,
                            double floor = kKlFloor) {
  double d = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) d += p[i] * std::log(p[i] / std::max(q[i], floor));
  }
  return std::max(0.0, d);
}

struct KlResult {
  std::vector<double> per_step;
  double max = 0.0;
  double floor = kKlFloor;
};

// D_KL(empirical(k) || pi0 P^k) for every step k.
inline KlResult kl_occupancy(const std::vector<Eigen::RowVectorXd>& empirical,
                             const TransitionMatrix& p, const Eigen::RowVectorXd& pi0) {
  KlResult r;
  Eigen::RowVectorXd pred = pi0;
  for (std::size_t k = 0; k < empirical.size(); ++k) {
    check_distribution(empirical[k], p.entries.rows());
    const double d = kl_divergence(empirical[k], pred, r.floor);
    r.per_step.push_back(d);
    r.max = std::max(r.max, d);
    pred = pred * p.entries;
  }
  return r;
}

// -----------------------------------------------------------------------------
// Synthetic chains
// -----------------------------------------------------------------------------

inline std::vector<int> sample_chain(const Eigen::MatrixXd& p, int start, std::size_t length,
                                     Rng& rng) {
  std::vector<int> out;
  out.reserve(length);
  int s = start;
  for (std::size_t t = 0; t < length; ++t) {
    out.push_back(s);
    const Eigen::RowVectorXd row = p.row(s);
    s = static_cast<int>(rng.discrete(std::span<const double>(row.data(), static_cast<std::size_t>(row.size()))));
  }
  return out;
}

}  // namespace tmesched
