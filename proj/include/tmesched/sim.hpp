#pragma once

// Surrogate agent-based tumor-microenvironment simulator and the Latin
// hypercube ensemble generator that drives it.
//
// The lattice is a G x G torus with 8-neighborhoods and at most one agent per
// site. Each step visits the agents alive at the start of the step in a fresh
// random order; agents created during a step act from the next step on.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tmesched/core.hpp"

namespace tmesched {

enum class CellType : std::uint8_t {
  Tumor = 0,
  TNaive,
  TEffector,
  TExhausted,
  M0,
  M1,
  M2,
};

inline constexpr std::size_t kNumCellTypes = 7;

inline constexpr std::array<std::string_view, kNumCellTypes> kCellTypeTokens = {
    "tumor", "t_naive", "t_eff", "t_exh", "m0", "m1", "m2"};

inline std::string_view to_token(CellType c) {
  return kCellTypeTokens[static_cast<std::size_t>(c)];
}

inline std::optional<CellType> cell_type_from_token(std::string_view token) {
  for (std::size_t i = 0; i < kNumCellTypes; ++i) {
    if (kCellTypeTokens[i] == token) return static_cast<CellType>(i);
  }
  return std::nullopt;
}

inline bool is_t_cell(CellType c) {
  return c == CellType::TNaive || c == CellType::TEffector ||
         c == CellType::TExhausted;
}

inline bool is_macrophage(CellType c) {
  return c == CellType::M0 || c == CellType::M1 || c == CellType::M2;
}

struct Agent {
  int x = 0;
  int y = 0;
  CellType cell_type = CellType::Tumor;

  friend bool operator==(const Agent&, const Agent&) = default;
};

struct AgentConfiguration {
  int step = 0;
  std::vector<Agent> agents;

  friend bool operator==(const AgentConfiguration&,
                         const AgentConfiguration&) = default;
};

using Trajectory = std::vector<AgentConfiguration>;

// -----------------------------------------------------------------------------
// Parameters
// -----------------------------------------------------------------------------

inline constexpr std::size_t kNumParams = 21;

// Index of each sampled parameter in a ParameterVector.
enum Param : std::size_t {
  kMoveTumor = 0,
  kMoveT,
  kMoveMacrophage,
  kTumorProliferation,
  kTumorDeath,
  kKill,
  kExhaustion,  // r_exh
  kAdhesion,    // r_adh
  kActivation,
  kPolarization,
  kM1KillBoost,
  kM2ExhaustionBoost,
  kEffectorExpansion,
  kEffectorDeath,
  kNicheLoss,
  kSecretion1,
  kSecretion2,
  kSecretion3,
  kSecretion4,
  kSecretion5,
  kSecretion6,
};

struct ParamInfo {
  std::string_view name;
  std::string_view meaning;
  double lo;
  double hi;
};

// Default sampling ranges. Secretion proxies drive no rule and serve as
// negative controls for the parameter screen.
inline constexpr std::array<ParamInfo, kNumParams> kParamInfo = {{
    {"p_move_tumor", "tumor motility (per-step move probability)", 0.40, 0.50},
    {"p_move_t", "T cell motility (per-step move probability)", 0.30, 0.40},
    {"p_move_mac", "macrophage motility (per-step move probability)", 0.20, 0.30},
    {"p_prolif", "tumor proliferation (per-step probability)", 0.030, 0.035},
    {"p_death_tumor", "tumor apoptosis (per-step probability)", 0.001, 0.002},
    {"p_kill", "effector kill of an adjacent tumor cell (per-step probability)", 0.15, 0.20},
    {"r_exh", "effector exhaustion under tumor contact (per contact-step probability)", 0.002, 0.080},
    {"r_adh", "tumor self-adhesion (move rejection weight)", 0.0, 1.0},
    {"p_act", "naive T cell activation under tumor contact (per-step probability)", 0.10, 0.15},
    {"p_pol", "M0 polarization (per-step probability)", 0.02, 0.04},
    {"f_m1", "M1 adjacency multiplier on kill probability", 1.05, 1.20},
    {"f_m2", "M2 adjacency multiplier on exhaustion probability", 1.05, 1.20},
    {"p_expand", "effector clonal expansion under tumor contact (per-step probability)", 0.030, 0.035},
    {"p_death_teff", "effector death (per-step probability)", 0.002, 0.003},
    {"p_niche", "death of T cells buried in tumor (per-step probability)", 0.10, 0.12},
    {"s_proxy_1", "secretion proxy (inert)", 0.0, 1.0},
    {"s_proxy_2", "secretion proxy (inert)", 0.0, 1.0},
    {"s_proxy_3", "secretion proxy (inert)", 0.0, 1.0},
    {"s_proxy_4", "secretion proxy (inert)", 0.0, 1.0},
    {"s_proxy_5", "secretion proxy (inert)", 0.0, 1.0},
    {"s_proxy_6", "secretion proxy (inert)", 0.0, 1.0},
}};

struct ParameterVector {
  std::array<double, kNumParams> values{};

  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }

  friend bool operator==(const ParameterVector&,
                         const ParameterVector&) = default;
};

struct Bounds {
  double lo = 0.0;
  double hi = 1.0;

  friend bool operator==(const Bounds&, const Bounds&) = default;
};

inline std::array<Bounds, kNumParams> default_bounds() {
  std::array<Bounds, kNumParams> b{};
  for (std::size_t i = 0; i < kNumParams; ++i) {
    b[i] = {kParamInfo[i].lo, kParamInfo[i].hi};
  }
  return b;
}

// Midpoint of every sampling range.
inline ParameterVector nominal_parameters(
    const std::array<Bounds, kNumParams>& bounds = default_bounds()) {
  ParameterVector p;
  for (std::size_t i = 0; i < kNumParams; ++i) {
    p[i] = 0.5 * (bounds[i].lo + bounds[i].hi);
  }
  return p;
}

// Initial layout: a central tumor disk surrounded by a loosely packed annulus
// of immune agents. Fractions are of grid capacity G*G.
struct InitialLayout {
  double tumor_fraction = 0.08;
  double immune_fraction = 0.10;
  double naive_share = 0.35;
  double effector_share = 0.25;
  double macrophage_share = 0.40;
  double jitter = 1.5;  // lattice units of radial jitter on placement

  friend bool operator==(const InitialLayout&, const InitialLayout&) = default;
};

struct EnsembleSpec {
  int n_params = 50;
  int n_seeds = 3;
  int n_steps = 646;
  int grid_size = 100;
  std::array<Bounds, kNumParams> bounds = default_bounds();
  std::uint64_t rng_seed = 20240601;
  InitialLayout layout{};

  friend bool operator==(const EnsembleSpec&, const EnsembleSpec&) = default;
};

inline void validate_bounds(const std::array<Bounds, kNumParams>& bounds) {
  for (std::size_t i = 0; i < kNumParams; ++i) {
    if (!(bounds[i].lo < bounds[i].hi)) {
      throw ConfigError("invalid bounds for parameter " +
                        std::string(kParamInfo[i].name) + ": lo must be < hi");
    }
    if (bounds[i].lo < 0.0) {
      throw ConfigError("negative lower bound for parameter " +
                        std::string(kParamInfo[i].name));
    }
  }
  if (!(bounds[kExhaustion].lo > 0.0)) {
    throw ConfigError("r_exh sampling range must be strictly positive");
  }
}

inline void validate(const EnsembleSpec& spec) {
  if (spec.n_params < 1) throw ConfigError("n_params must be >= 1");
  if (spec.n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
  if (spec.n_steps < 1) throw ConfigError("n_steps must be >= 1");
  if (spec.grid_size < 3) throw ConfigError("grid_size must be >= 3");
  validate_bounds(spec.bounds);
}

// -----------------------------------------------------------------------------
// Latin hypercube design
// -----------------------------------------------------------------------------

// One sample per equal-width stratum in every dimension, strata paired by
// independent random permutations.
inline std::vector<ParameterVector> latin_hypercube_sample(
    int n, const std::array<Bounds, kNumParams>& bounds, std::uint64_t seed) {
  if (n < 1) throw ConfigError("n_params must be >= 1");
  validate_bounds(bounds);
  Rng rng(derive_seed(seed, stream::kLatinHypercube, 0));
  std::vector<ParameterVector> out(static_cast<std::size_t>(n));
  std::vector<int> strata(static_cast<std::size_t>(n));
  for (std::size_t d = 0; d < kNumParams; ++d) {
    for (int i = 0; i < n; ++i) strata[static_cast<std::size_t>(i)] = i;
    rng.shuffle(std::span<int>(strata));
    const double lo = bounds[d].lo;
    const double width = bounds[d].hi - bounds[d].lo;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const int s = strata[i];
      double v = lo + width * ((s + rng.uniform()) / n);
      // Keep round-off from pushing a sample across its stratum edge.
      const double upper = lo + width * (static_cast<double>(s + 1) / n);
      while (v >= upper) v = std::nextafter(v, lo);
      out[i][d] = v;
    }
  }
  return out;
}

inline std::vector<ParameterVector> latin_hypercube_sample(
    const EnsembleSpec& spec) {
  return latin_hypercube_sample(spec.n_params, spec.bounds, spec.rng_seed);
}

// -----------------------------------------------------------------------------
// Simulator
// -----------------------------------------------------------------------------

class Simulator {
 public:
  Simulator(const ParameterVector& params, std::uint64_t seed, int grid_size,
            const InitialLayout& layout = {})
      : params_(params), grid_(grid_size), rng_(seed) {
    if (grid_size < 3) throw ConfigError("grid_size must be >= 3");
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (!(params_[i] >= 0.0) || !std::isfinite(params_[i])) {
        throw ConfigError("parameter " + std::string(kParamInfo[i].name) +
                          " must be finite and non-negative");
      }
    }
    occupancy_.assign(static_cast<std::size_t>(grid_) * grid_, kEmpty);
    place_initial(layout);
  }

  int grid_size() const { return grid_; }
  int step_index() const { return step_; }

  AgentConfiguration snapshot() const {
    AgentConfiguration c;
    c.step = step_;
    c.agents.reserve(agents_.size());
    // Site order makes the snapshot independent of internal bookkeeping.
    for (std::size_t site = 0; site < occupancy_.size(); ++site) {
      const int id = occupancy_[site];
      if (id != kEmpty) c.agents.push_back(agents_[static_cast<std::size_t>(id)]);
    }
    return c;
  }

  void step() {
    order_.clear();
    for (std::size_t i = 0; i < agents_.size(); ++i) {
      order_.push_back(static_cast<int>(i));
    }
    rng_.shuffle(std::span<int>(order_));
    for (int id : order_) {
      if (!alive_[static_cast<std::size_t>(id)]) continue;
      act(id);
    }
    compact();
    ++step_;
  }

 private:
  static constexpr int kEmpty = -1;
  // Tumor-neighbor counts marking a site as tumor interior: T cells are
  // kept out of such sites by adhesion, and lose their niche deeper in.
  static constexpr int kInteriorContacts = 4;
  static constexpr int kNicheContacts = 5;
  static constexpr int kDx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
  static constexpr int kDy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};

  std::size_t site(int x, int y) const {
    return static_cast<std::size_t>(y) * grid_ + x;
  }
  int wrap(int v) const { return ((v % grid_) + grid_) % grid_; }

  int occupant(int x, int y) const { return occupancy_[site(wrap(x), wrap(y))]; }

  CellType type_of(int id) const {
    return agents_[static_cast<std::size_t>(id)].cell_type;
  }

  int count_neighbors(int x, int y, CellType c, int ignore = kEmpty) const {
    int n = 0;
    for (int k = 0; k < 8; ++k) {
      const int o = occupant(x + kDx[k], y + kDy[k]);
      if (o != kEmpty && o != ignore && type_of(o) == c) ++n;
    }
    return n;
  }

  // T cells buried in tumor die at the niche-loss rate.
  bool lost_niche(int x, int y) {
    return count_neighbors(x, y, CellType::Tumor) >= kNicheContacts &&
           rng_.bernoulli(params_[kNicheLoss]);
  }

  // Random neighbor site satisfying pred, or -1.
  template <typename Pred>
  int random_neighbor(int x, int y, Pred pred) {
    int candidates[8];
    int n = 0;
    for (int k = 0; k < 8; ++k) {
      if (pred(wrap(x + kDx[k]), wrap(y + kDy[k]))) candidates[n++] = k;
    }
    if (n == 0) return -1;
    return candidates[rng_.below(static_cast<std::size_t>(n))];
  }

  int random_empty_neighbor(int x, int y) {
    return random_neighbor(
        x, y, [&](int nx, int ny) { return occupancy_[site(nx, ny)] == kEmpty; });
  }

  void add_agent(int x, int y, CellType c) {
    agents_.push_back({x, y, c});
    alive_.push_back(true);
    occupancy_[site(x, y)] = static_cast<int>(agents_.size() - 1);
  }

  void remove_agent(int id) {
    auto& a = agents_[static_cast<std::size_t>(id)];
    occupancy_[site(a.x, a.y)] = kEmpty;
    alive_[static_cast<std::size_t>(id)] = false;
  }

  void move_to(int id, int nx, int ny) {
    auto& a = agents_[static_cast<std::size_t>(id)];
    occupancy_[site(a.x, a.y)] = kEmpty;
    a.x = nx;
    a.y = ny;
    occupancy_[site(nx, ny)] = id;
  }

  void try_move(int id, double p_move) {
    if (!rng_.bernoulli(p_move)) return;
    const auto a = agents_[static_cast<std::size_t>(id)];
    const int k = random_empty_neighbor(a.x, a.y);
    if (k < 0) return;
    const int nx = wrap(a.x + kDx[k]);
    const int ny = wrap(a.y + kDy[k]);
    if (a.cell_type == CellType::Tumor) {
      const int before = count_neighbors(a.x, a.y, CellType::Tumor);
      const int after = count_neighbors(nx, ny, CellType::Tumor, id);
      if (after < before && rng_.bernoulli(params_[kAdhesion])) return;
    } else if (is_t_cell(a.cell_type)) {
      // Cohesive tumor resists infiltration into its interior.
      if (count_neighbors(nx, ny, CellType::Tumor) >= kInteriorContacts &&
          rng_.bernoulli(params_[kAdhesion])) {
        return;
      }
    }
    move_to(id, nx, ny);
  }

  void divide(int id) {
    const auto a = agents_[static_cast<std::size_t>(id)];
    const int k = random_empty_neighbor(a.x, a.y);
    if (k < 0) return;
    add_agent(wrap(a.x + kDx[k]), wrap(a.y + kDy[k]), a.cell_type);
  }

  void act(int id) {
    const auto a = agents_[static_cast<std::size_t>(id)];
    switch (a.cell_type) {
      case CellType::Tumor:
        if (rng_.bernoulli(params_[kTumorDeath])) {
          remove_agent(id);
          return;
        }
        if (rng_.bernoulli(params_[kTumorProliferation])) divide(id);
        try_move(id, params_[kMoveTumor]);
        return;
      case CellType::TEffector:
        act_effector(id);
        return;
      case CellType::TNaive:
        if (count_neighbors(a.x, a.y, CellType::Tumor) > 0 &&
            rng_.bernoulli(params_[kActivation])) {
          agents_[static_cast<std::size_t>(id)].cell_type = CellType::TEffector;
        }
        try_move(id, params_[kMoveT]);
        return;
      case CellType::TExhausted:
        if (lost_niche(a.x, a.y)) {
          remove_agent(id);
          return;
        }
        try_move(id, params_[kMoveT]);
        return;
      case CellType::M0: {
        if (rng_.bernoulli(params_[kPolarization])) {
          const int eff = count_neighbors(a.x, a.y, CellType::TEffector);
          const int tum = count_neighbors(a.x, a.y, CellType::Tumor);
          if (eff > tum) {
            agents_[static_cast<std::size_t>(id)].cell_type = CellType::M1;
          } else if (tum > eff) {
            agents_[static_cast<std::size_t>(id)].cell_type = CellType::M2;
          }
        }
        try_move(id, params_[kMoveMacrophage]);
        return;
      }
      case CellType::M1:
      case CellType::M2:
        try_move(id, params_[kMoveMacrophage]);
        return;
    }
  }

  void act_effector(int id) {
    const auto a = agents_[static_cast<std::size_t>(id)];
    if (rng_.bernoulli(params_[kEffectorDeath]) || lost_niche(a.x, a.y)) {
      remove_agent(id);
      return;
    }
    if (count_neighbors(a.x, a.y, CellType::Tumor) > 0) {
      const bool m1 = count_neighbors(a.x, a.y, CellType::M1) > 0;
      const bool m2 = count_neighbors(a.x, a.y, CellType::M2) > 0;
      const double p_kill =
          std::min(1.0, params_[kKill] * (m1 ? params_[kM1KillBoost] : 1.0));
      if (rng_.bernoulli(p_kill)) {
        const int k = random_neighbor(a.x, a.y, [&](int nx, int ny) {
          const int o = occupancy_[site(nx, ny)];
          return o != kEmpty && type_of(o) == CellType::Tumor;
        });
        remove_agent(occupant(a.x + kDx[k], a.y + kDy[k]));
      }
      if (rng_.bernoulli(params_[kEffectorExpansion])) divide(id);
      const double r_exh = std::min(
          1.0, params_[kExhaustion] * (m2 ? params_[kM2ExhaustionBoost] : 1.0));
      if (rng_.bernoulli(r_exh)) {
        agents_[static_cast<std::size_t>(id)].cell_type = CellType::TExhausted;
      }
    }
    try_move(id, params_[kMoveT]);
  }

  void compact() {
    std::size_t w = 0;
    for (std::size_t r = 0; r < agents_.size(); ++r) {
      if (!alive_[r]) continue;
      agents_[w] = agents_[r];
      occupancy_[site(agents_[w].x, agents_[w].y)] = static_cast<int>(w);
      ++w;
    }
    agents_.resize(w);
    alive_.assign(w, true);
  }

  void place_initial(const InitialLayout& layout) {
    const std::size_t capacity = occupancy_.size();
    const auto n_tumor =
        static_cast<std::size_t>(std::lround(layout.tumor_fraction * capacity));
    const auto n_immune =
        static_cast<std::size_t>(std::lround(layout.immune_fraction * capacity));
    if (n_tumor + n_immune > capacity) {
      throw ConfigError("initial population (" +
                        std::to_string(n_tumor + n_immune) +
                        ") exceeds lattice capacity (" +
                        std::to_string(capacity) + ")");
    }
    const double c = 0.5 * (grid_ - 1);
    struct Ranked {
      double key;
      std::size_t site;
    };
    std::vector<Ranked> ranked;
    ranked.reserve(capacity);
    for (int y = 0; y < grid_; ++y) {
      for (int x = 0; x < grid_; ++x) {
        const double r = std::hypot(x - c, y - c);
        ranked.push_back({r + layout.jitter * rng_.uniform(), site(x, y)});
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.key < b.key; });
    auto place = [&](std::size_t s, CellType t) {
      add_agent(static_cast<int>(s % grid_), static_cast<int>(s / grid_), t);
    };
    for (std::size_t i = 0; i < n_tumor; ++i) place(ranked[i].site, CellType::Tumor);

    // Immune agents fill a random half of the next 2*n_immune sites.
    const std::size_t pool = std::min(capacity - n_tumor, 2 * n_immune);
    std::vector<std::size_t> candidates;
    candidates.reserve(pool);
    for (std::size_t i = 0; i < pool; ++i) candidates.push_back(ranked[n_tumor + i].site);
    rng_.shuffle(std::span<std::size_t>(candidates));

    const double total_share =
        layout.naive_share + layout.effector_share + layout.macrophage_share;
    const auto n_naive = static_cast<std::size_t>(
        std::lround(n_immune * layout.naive_share / total_share));
    const auto n_eff = static_cast<std::size_t>(
        std::lround(n_immune * layout.effector_share / total_share));
    for (std::size_t i = 0; i < n_immune; ++i) {
      const CellType t = i < n_naive           ? CellType::TNaive
                         : i < n_naive + n_eff ? CellType::TEffector
                                               : CellType::M0;
      place(candidates[i], t);
    }
    compact();
  }

  ParameterVector params_;
  int grid_;
  Rng rng_;
  int step_ = 0;
  std::vector<Agent> agents_;
  std::vector<bool> alive_;
  std::vector<int> occupancy_;
  std::vector<int> order_;
};

// Runs n_steps updates and returns n_steps + 1 configurations, the initial one
// included.
inline Trajectory simulate(const ParameterVector& params, std::uint64_t seed,
                           int n_steps, int grid_size,
                           const InitialLayout& layout = {}) {
  if (n_steps < 0) throw ConfigError("n_steps must be >= 0");
  Simulator sim(params, seed, grid_size, layout);
  Trajectory out;
  out.reserve(static_cast<std::size_t>(n_steps) + 1);
  out.push_back(sim.snapshot());
  for (int k = 0; k < n_steps; ++k) {
    sim.step();
    out.push_back(sim.snapshot());
  }
  return out;
}

// -----------------------------------------------------------------------------
// Ensembles
// -----------------------------------------------------------------------------

struct TrajectoryInfo {
  int trajectory_id = 0;
  int param_index = 0;
  int replicate = 0;
  std::uint64_t seed = 0;
  ParameterVector params;
};

struct EnsembleDataset {
  std::vector<TrajectoryInfo> info;
  std::vector<Trajectory> trajectories;
};

// Trajectory t = param_index * n_seeds + replicate. Its simulation seed
// depends only on (master seed, stream tag, t).
inline std::vector<TrajectoryInfo> plan_ensemble(
    const EnsembleSpec& spec, std::uint64_t stream_tag = stream::kTrajectory,
    std::optional<double> exhaustion_override = std::nullopt) {
  validate(spec);
  const auto samples = latin_hypercube_sample(spec);
  std::vector<TrajectoryInfo> plan;
  for (int p = 0; p < spec.n_params; ++p) {
    for (int r = 0; r < spec.n_seeds; ++r) {
      TrajectoryInfo ti;
      ti.trajectory_id = p * spec.n_seeds + r;
      ti.param_index = p;
      ti.replicate = r;
      ti.seed = derive_seed(spec.rng_seed, stream_tag,
                            static_cast<std::uint64_t>(ti.trajectory_id));
      ti.params = samples[static_cast<std::size_t>(p)];
      if (exhaustion_override) ti.params[kExhaustion] = *exhaustion_override;
      plan.push_back(ti);
    }
  }
  return plan;
}

// Streams each trajectory to the visitor instead of holding the ensemble.
inline void for_each_trajectory(
    const EnsembleSpec& spec, const std::vector<TrajectoryInfo>& plan,
    const std::function<void(const TrajectoryInfo&, const Trajectory&)>& visit) {
  for (const auto& ti : plan) {
    visit(ti, simulate(ti.params, ti.seed, spec.n_steps, spec.grid_size,
                       spec.layout));
  }
}

inline EnsembleDataset generate_ensemble(const EnsembleSpec& spec) {
  EnsembleDataset ds;
  ds.info = plan_ensemble(spec);
  ds.trajectories.reserve(ds.info.size());
  for_each_trajectory(spec, ds.info,
                      [&](const TrajectoryInfo&, const Trajectory& t) {
                        ds.trajectories.push_back(t);
                      });
  return ds;
}

}  // namespace tmesched
