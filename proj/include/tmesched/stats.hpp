#pragma once

// Rank statistics: Kruskal-Wallis H with tie correction and ROC AUC through
// the Mann-Whitney U statistic.

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "tmesched/core.hpp"

namespace tmesched {

// Average (mid) ranks, 1-based. Also returns sum over tie groups of t^3 - t.
inline std::vector<double> average_ranks(std::span<const double> values,
                                         double* tie_term = nullptr) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  double ties = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    const double t = static_cast<double>(j - i + 1);
    ties += t * t * t - t;
    i = j + 1;
  }
  if (tie_term) *tie_term = ties;
  return ranks;
}

struct KruskalWallisResult {
  double h = 0.0;
  double p = 1.0;
  int df = 0;
};

// Groups are arbitrary integer labels. p uses the chi-squared approximation
// with (groups - 1) degrees of freedom.
inline KruskalWallisResult kruskal_wallis(std::span<const double> values,
                                          std::span<const int> groups) {
  if (values.size() != groups.size()) {
    throw InputError("kruskal_wallis: values and groups differ in length");
  }
  std::map<int, std::pair<double, double>> per_group;  // label -> (rank sum, n)
  double tie_term = 0.0;
  const auto ranks = average_ranks(values, &tie_term);
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& g = per_group[groups[i]];
    g.first += ranks[i];
    g.second += 1.0;
  }
  if (per_group.size() < 2) {
    throw InputError("kruskal_wallis: at least two non-empty groups are required");
  }
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (const auto& [label, g] : per_group) sum += g.first * g.first / g.second;
  KruskalWallisResult r;
  r.df = static_cast<int>(per_group.size()) - 1;
  const double correction = 1.0 - tie_term / (n * n * n - n);
  if (correction <= 0.0) return r;  // every value tied
  r.h = std::max(0.0, (12.0 / (n * (n + 1.0)) * sum - 3.0 * (n + 1.0)) / correction);
  r.p = boost::math::gamma_q(0.5 * r.df, 0.5 * r.h);
  return r;
}

// AUC = U / (n_pos * n_neg), ties counted as one half. Absent when either
// class is empty.
inline std::optional<double> roc_auc(std::span<const double> scores,
                                     std::span<const std::uint8_t> positive) {
  double n_pos = 0.0, rank_pos = 0.0;
  const auto ranks = average_ranks(scores);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      n_pos += 1.0;
      rank_pos += ranks[i];
    }
  }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  if (n_pos == 0.0 || n_neg == 0.0) return std::nullopt;
  return (rank_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

struct OneVsRestAuc {
  std::vector<std::optional<double>> per_state;
  double mean = 0.0;  // over states with a defined AUC
};

// scores[i][s] is item i's score for state s; truth[i] is 0-based.
inline OneVsRestAuc roc_auc_one_vs_rest(const std::vector<std::vector<double>>& scores,
                                        std::span<const int> truth, int n_states) {
  OneVsRestAuc out;
  std::vector<double> column(scores.size());
  std::vector<std::uint8_t> pos(scores.size());
  double total = 0.0;
  int defined = 0;
  for (int s = 0; s < n_states; ++s) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      column[i] = scores[i][static_cast<std::size_t>(s)];
      pos[i] = truth[i] == s ? 1 : 0;
    }
    auto auc = roc_auc(column, pos);
    if (auc) {
      total += *auc;
      ++defined;
    }
    out.per_state.push_back(auc);
  }
  out.mean = defined > 0 ? total / defined : 0.0;
  return out;
}

}  // namespace tmesched
