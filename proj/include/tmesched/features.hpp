#pragma once

// Observation map from agent configurations to spatial statistics, pooled
// standardization, and delay-coordinate embedding.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <string>
#include <string_view>
#include <vector>

#include "tmesched/core.hpp"
#include "tmesched/sim.hpp"

namespace tmesched {

enum class Feature : std::uint8_t {
  PropTumor = 0,
  PropTNaive,
  PropTEffector,
  PropTExhausted,
  PropM0,
  PropM1,
  PropM2,
  TumorTMixing,          // T-cell partners / all occupied partners of tumor agents
  EffectorInfiltration,  // fraction of effectors touching tumor
  ExhaustedContact,      // fraction of exhausted cells touching tumor
  TumorDegree,           // mean tumor neighbors per tumor agent, raw count 0..8
  TumorComponents,       // 8-connected tumor components / tumor count
  TumorTDistance,        // mean Chebyshev distance tumor -> nearest T cell, / G
  Density,               // agent count / G^2
  EmptyIndicator,        // 1 when the configuration has no agents
};

inline constexpr std::size_t kNumFeatures = 15;

inline constexpr std::array<std::string_view, kNumFeatures> kFeatureNames = {
    "prop_tumor",        "prop_t_naive",          "prop_t_eff",
    "prop_t_exh",        "prop_m0",               "prop_m1",
    "prop_m2",           "tumor_t_mixing",        "effector_infiltration",
    "exhausted_contact", "tumor_degree",          "tumor_components",
    "tumor_t_distance",  "density",               "empty_indicator"};

inline bool is_macrophage_feature(Feature f) {
  return f == Feature::PropM0 || f == Feature::PropM1 || f == Feature::PropM2;
}

struct FeatureSetSpec {
  std::vector<Feature> features;

  std::size_t size() const { return features.size(); }

  static FeatureSetSpec full() {
    FeatureSetSpec s;
    for (std::size_t i = 0; i < kNumFeatures; ++i) {
      s.features.push_back(static_cast<Feature>(i));
    }
    return s;
  }

  // Drops the macrophage-derived features.
  static FeatureSetSpec macrophage_excluded() {
    FeatureSetSpec s;
    for (auto f : full().features) {
      if (!is_macrophage_feature(f)) s.features.push_back(f);
    }
    return s;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (auto f : features) out.emplace_back(kFeatureNames[static_cast<std::size_t>(f)]);
    return out;
  }

  // Positions of this set's features within `superset`.
  std::vector<Eigen::Index> positions_in(const FeatureSetSpec& superset) const {
    std::vector<Eigen::Index> pos;
    for (auto f : features) {
      auto it = std::find(superset.features.begin(), superset.features.end(), f);
      if (it == superset.features.end()) {
        throw ConfigError("feature " +
                          std::string(kFeatureNames[static_cast<std::size_t>(f)]) +
                          " missing from the reference feature set");
      }
      pos.push_back(static_cast<Eigen::Index>(it - superset.features.begin()));
    }
    return pos;
  }
};

struct ObservationVector {
  int step = 0;
  Eigen::VectorXd values;
};

struct ObservationSeries {
  int trajectory_id = 0;
  Eigen::MatrixXd matrix;  // M x K, column k is the observation at step k
};

namespace detail {

// Occupancy grid of cell-type codes, -1 for empty sites.
class TypeGrid {
 public:
  TypeGrid(const AgentConfiguration& config, int grid_size)
      : g_(grid_size), cells_(static_cast<std::size_t>(grid_size) * grid_size, -1) {
    for (const auto& a : config.agents) {
      if (a.x < 0 || a.y < 0 || a.x >= g_ || a.y >= g_) {
        throw InputError("agent at (" + std::to_string(a.x) + "," +
                         std::to_string(a.y) + ") lies outside the " +
                         std::to_string(g_) + "x" + std::to_string(g_) + " lattice");
      }
      auto& c = cells_[index(a.x, a.y)];
      if (c != -1) {
        throw InputError("two agents share site (" + std::to_string(a.x) + "," +
                         std::to_string(a.y) + ") at step " +
                         std::to_string(config.step));
      }
      c = static_cast<int>(a.cell_type);
    }
  }

  int size() const { return g_; }
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * g_ + x; }
  int wrap(int v) const { return ((v % g_) + g_) % g_; }
  int at(int x, int y) const { return cells_[index(wrap(x), wrap(y))]; }

 private:
  int g_;
  std::vector<int> cells_;
};

inline constexpr int kDx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
inline constexpr int kDy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};

}  // namespace detail

// All 15 raw statistics, in Feature order.
inline std::array<double, kNumFeatures> raw_statistics(
    const AgentConfiguration& config, int grid_size) {
  if (grid_size < 3) throw ConfigError("grid_size must be >= 3");
  std::array<double, kNumFeatures> f{};
  const detail::TypeGrid grid(config, grid_size);
  const auto n = config.agents.size();
  const auto g = static_cast<std::size_t>(grid_size);
  if (n == 0) {
    f[static_cast<std::size_t>(Feature::EmptyIndicator)] = 1.0;
    return f;
  }

  std::array<double, kNumCellTypes> counts{};
  for (const auto& a : config.agents) counts[static_cast<std::size_t>(a.cell_type)] += 1.0;
  for (std::size_t c = 0; c < kNumCellTypes; ++c) f[c] = counts[c] / static_cast<double>(n);

  const auto tumor = static_cast<int>(CellType::Tumor);
  auto is_t = [](int code) {
    return code >= 0 && is_t_cell(static_cast<CellType>(code));
  };

  double tumor_pairs = 0.0, tumor_t_pairs = 0.0, tumor_tumor = 0.0;
  double eff_touching = 0.0, exh_touching = 0.0;
  for (const auto& a : config.agents) {
    int tumor_nb = 0;
    for (int k = 0; k < 8; ++k) {
      const int o = grid.at(a.x + detail::kDx[k], a.y + detail::kDy[k]);
      if (o == -1) continue;
      if (o == tumor) ++tumor_nb;
      if (a.cell_type == CellType::Tumor) {
        tumor_pairs += 1.0;
        if (is_t(o)) tumor_t_pairs += 1.0;
      }
    }
    switch (a.cell_type) {
      case CellType::Tumor: tumor_tumor += tumor_nb; break;
      case CellType::TEffector: eff_touching += tumor_nb > 0 ? 1.0 : 0.0; break;
      case CellType::TExhausted: exh_touching += tumor_nb > 0 ? 1.0 : 0.0; break;
      default: break;
    }
  }
  const double n_tumor = counts[static_cast<std::size_t>(CellType::Tumor)];
  const double n_eff = counts[static_cast<std::size_t>(CellType::TEffector)];
  const double n_exh = counts[static_cast<std::size_t>(CellType::TExhausted)];
  f[static_cast<std::size_t>(Feature::TumorTMixing)] =
      tumor_pairs > 0 ? tumor_t_pairs / tumor_pairs : 0.0;
  f[static_cast<std::size_t>(Feature::EffectorInfiltration)] =
      n_eff > 0 ? eff_touching / n_eff : 0.0;
  f[static_cast<std::size_t>(Feature::ExhaustedContact)] =
      n_exh > 0 ? exh_touching / n_exh : 0.0;
  f[static_cast<std::size_t>(Feature::TumorDegree)] =
      n_tumor > 0 ? tumor_tumor / n_tumor : 0.0;

  if (n_tumor > 0) {
    // Tumor components on the torus (8-connectivity) by flood fill, and
    // Chebyshev distances to the nearest T cell by multi-source BFS.
    std::vector<char> seen(g * g, 0);
    std::vector<int> dist(g * g, -1);
    std::deque<std::pair<int, int>> queue;
    for (const auto& a : config.agents) {
      if (is_t_cell(a.cell_type)) {
        dist[grid.index(a.x, a.y)] = 0;
        queue.emplace_back(a.x, a.y);
      }
    }
    const bool any_t = !queue.empty();
    while (!queue.empty()) {
      auto [x, y] = queue.front();
      queue.pop_front();
      const int d = dist[grid.index(x, y)];
      for (int k = 0; k < 8; ++k) {
        const int nx = grid.wrap(x + detail::kDx[k]);
        const int ny = grid.wrap(y + detail::kDy[k]);
        auto& nd = dist[grid.index(nx, ny)];
        if (nd == -1) {
          nd = d + 1;
          queue.emplace_back(nx, ny);
        }
      }
    }

    double components = 0.0, dist_sum = 0.0;
    for (const auto& a : config.agents) {
      if (a.cell_type != CellType::Tumor) continue;
      dist_sum += any_t ? dist[grid.index(a.x, a.y)] : grid_size / 2;
      if (seen[grid.index(a.x, a.y)]) continue;
      components += 1.0;
      seen[grid.index(a.x, a.y)] = 1;
      queue.emplace_back(a.x, a.y);
      while (!queue.empty()) {
        auto [x, y] = queue.front();
        queue.pop_front();
        for (int k = 0; k < 8; ++k) {
          const int nx = grid.wrap(x + detail::kDx[k]);
          const int ny = grid.wrap(y + detail::kDy[k]);
          if (grid.at(nx, ny) == tumor && !seen[grid.index(nx, ny)]) {
            seen[grid.index(nx, ny)] = 1;
            queue.emplace_back(nx, ny);
          }
        }
      }
    }
    f[static_cast<std::size_t>(Feature::TumorComponents)] = components / n_tumor;
    f[static_cast<std::size_t>(Feature::TumorTDistance)] =
        dist_sum / n_tumor / grid_size;
  }
  f[static_cast<std::size_t>(Feature::Density)] =
      static_cast<double>(n) / static_cast<double>(g * g);
  return f;
}

inline ObservationVector observe(const AgentConfiguration& config, int grid_size,
                                 const FeatureSetSpec& feature_set) {
  const auto raw = raw_statistics(config, grid_size);
  ObservationVector out;
  out.step = config.step;
  out.values.resize(static_cast<Eigen::Index>(feature_set.size()));
  for (std::size_t i = 0; i < feature_set.size(); ++i) {
    out.values[static_cast<Eigen::Index>(i)] =
        raw[static_cast<std::size_t>(feature_set.features[i])];
  }
  return out;
}

inline ObservationSeries featurize_trajectory(const Trajectory& traj, int grid_size,
                                              const FeatureSetSpec& feature_set,
                                              int trajectory_id = 0) {
  if (traj.empty()) throw InputError("cannot featurize an empty trajectory");
  ObservationSeries s;
  s.trajectory_id = trajectory_id;
  s.matrix.resize(static_cast<Eigen::Index>(feature_set.size()),
                  static_cast<Eigen::Index>(traj.size()));
  for (std::size_t k = 0; k < traj.size(); ++k) {
    s.matrix.col(static_cast<Eigen::Index>(k)) =
        observe(traj[k], grid_size, feature_set).values;
  }
  return s;
}

// -----------------------------------------------------------------------------
// Standardization
// -----------------------------------------------------------------------------

struct StandardizationTable {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
  std::vector<bool> zero_variance;

  // Zero-variance features are centered only.
  Eigen::MatrixXd apply(const Eigen::MatrixXd& m) const {
    Eigen::MatrixXd out = m.colwise() - mean;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      if (!zero_variance[static_cast<std::size_t>(i)]) out.row(i) /= stddev[i];
    }
    return out;
  }

  ObservationSeries apply(const ObservationSeries& s) const {
    return {s.trajectory_id, apply(s.matrix)};
  }

  // Restriction to a subset of features, given their positions.
  StandardizationTable select(const std::vector<Eigen::Index>& pos) const {
    StandardizationTable t;
    t.mean.resize(static_cast<Eigen::Index>(pos.size()));
    t.stddev.resize(static_cast<Eigen::Index>(pos.size()));
    for (std::size_t i = 0; i < pos.size(); ++i) {
      t.mean[static_cast<Eigen::Index>(i)] = mean[pos[i]];
      t.stddev[static_cast<Eigen::Index>(i)] = stddev[pos[i]];
      t.zero_variance.push_back(zero_variance[static_cast<std::size_t>(pos[i])]);
    }
    return t;
  }
};

// Pooled population mean and standard deviation over every trajectory and
// step.
inline StandardizationTable fit_standardization(
    const std::vector<ObservationSeries>& ensemble) {
  if (ensemble.empty()) throw InputError("cannot standardize an empty ensemble");
  const Eigen::Index m = ensemble.front().matrix.rows();
  double count = 0.0;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(m);
  for (const auto& s : ensemble) {
    if (s.matrix.rows() != m) {
      throw InputError("feature count differs between trajectories");
    }
    sum += s.matrix.rowwise().sum();
    count += static_cast<double>(s.matrix.cols());
  }
  if (count < 2) throw InputError("standardization needs at least 2 time points");
  StandardizationTable t;
  t.mean = sum / count;
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(m);
  for (const auto& s : ensemble) {
    sq += (s.matrix.colwise() - t.mean).array().square().matrix().rowwise().sum();
  }
  t.stddev = (sq / count).array().sqrt();
  for (Eigen::Index i = 0; i < m; ++i) {
    t.zero_variance.push_back(!(t.stddev[i] > 1e-12 * std::max(1.0, std::abs(t.mean[i]))));
  }
  return t;
}

inline std::pair<std::vector<ObservationSeries>, StandardizationTable> standardize(
    const std::vector<ObservationSeries>& ensemble) {
  auto table = fit_standardization(ensemble);
  std::vector<ObservationSeries> out;
  out.reserve(ensemble.size());
  for (const auto& s : ensemble) out.push_back(table.apply(s));
  return {std::move(out), std::move(table)};
}

// -----------------------------------------------------------------------------
// Delay embedding
// -----------------------------------------------------------------------------

struct EmbeddedWindow {
  int trajectory_id = 0;
  int center_step = 0;
  Eigen::VectorXd values;  // columns center-w .. center+w, concatenated
};

inline int window_radius(int window_length) {
  if (window_length < 1 || window_length % 2 == 0) {
    throw ConfigError("embedding window length must be a positive odd number, got " +
                      std::to_string(window_length));
  }
  return (window_length - 1) / 2;
}

inline void check_embeddable(const ObservationSeries& series, int w) {
  if (w < 0) throw ConfigError("window radius must be >= 0");
  if (series.matrix.cols() < 2 * w + 1) {
    throw InputError("trajectory " + std::to_string(series.trajectory_id) +
                     " too short for embedding: " +
                     std::to_string(series.matrix.cols()) + " steps < window " +
                     std::to_string(2 * w + 1));
  }
}

inline std::vector<EmbeddedWindow> delay_embed(const ObservationSeries& series, int w) {
  check_embeddable(series, w);
  const Eigen::Index m = series.matrix.rows();
  const Eigen::Index len = 2 * w + 1;
  std::vector<EmbeddedWindow> out;
  for (Eigen::Index k = w; k + w < series.matrix.cols(); ++k) {
    EmbeddedWindow win;
    win.trajectory_id = series.trajectory_id;
    win.center_step = static_cast<int>(k);
    // Column-major storage makes the window block contiguous.
    win.values = Eigen::Map<const Eigen::VectorXd>(
        series.matrix.data() + (k - w) * m, m * len);
    out.push_back(std::move(win));
  }
  return out;
}

// Pooled embedding as a row-per-window matrix, in (series, center) order.
struct EmbeddedPool {
  Eigen::MatrixXd data;
  std::vector<int> trajectory_id;
  std::vector<int> center_step;
};

inline EmbeddedPool pool_embeddings(const std::vector<ObservationSeries>& ensemble, int w) {
  Eigen::Index rows = 0;
  for (const auto& s : ensemble) {
    check_embeddable(s, w);
    rows += s.matrix.cols() - 2 * w;
  }
  const Eigen::Index dim = ensemble.empty() ? 0 : ensemble.front().matrix.rows() * (2 * w + 1);
  EmbeddedPool pool;
  pool.data.resize(rows, dim);
  Eigen::Index r = 0;
  for (const auto& s : ensemble) {
    for (const auto& win : delay_embed(s, w)) {
      pool.data.row(r++) = win.values.transpose();
      pool.trajectory_id.push_back(win.trajectory_id);
      pool.center_step.push_back(win.center_step);
    }
  }
  return pool;
}

}  // namespace tmesched
