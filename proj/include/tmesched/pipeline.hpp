#pragma once

// Pipeline stages. Each stage has an in-memory core and a file-based wrapper
// that reads its declared inputs from the output tree and writes its
// artifacts there. Only run.json carries a timestamp; every other artifact
// is a pure function of the config and the stage inputs.

#include <Eigen/Dense>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "tmesched/clustering.hpp"
#include "tmesched/config.hpp"
#include "tmesched/core.hpp"
#include "tmesched/features.hpp"
#include "tmesched/io.hpp"
#include "tmesched/landscape.hpp"
#include "tmesched/mdp.hpp"
#include "tmesched/msm.hpp"
#include "tmesched/sim.hpp"
#include "tmesched/stats.hpp"

namespace tmesched::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

// -----------------------------------------------------------------------------
// Output tree
// -----------------------------------------------------------------------------

struct Layout {
  fs::path root;

  fs::path batch(bool drug) const { return drug ? root / "drug" : root; }
  fs::path params(bool drug) const { return batch(drug) / "params.csv"; }
  fs::path trajectories(bool drug) const { return batch(drug) / "trajectories"; }
  fs::path features(bool drug) const { return batch(drug) / "features"; }
  fs::path features_json(bool drug) const { return batch(drug) / "features.json"; }
  fs::path states(bool drug) const { return batch(drug) / "states.csv"; }
  fs::path embedded() const { return root / "embedded.csv"; }
  fs::path model() const { return root / "model.json"; }
  fs::path plot() const { return root / "plot.csv"; }
  fs::path kruskal_wallis() const { return root / "kruskal_wallis.csv"; }
  fs::path basin() const { return root / "basin.json"; }
  fs::path matrices() const { return root / "matrices"; }
  fs::path groups() const { return matrices() / "groups.json"; }
  fs::path validation() const { return root / "validation.json"; }
  fs::path committor_json() const { return root / "committor.json"; }
  fs::path committor_csv() const { return root / "committor.csv"; }
  fs::path mdp() const { return root / "mdp"; }
  fs::path strategies() const { return root / "strategies.json"; }
  fs::path replay() const { return root / "replay.json"; }
  fs::path snapshot() const { return root / "snapshot.json"; }
  fs::path run() const { return root / "run.json"; }
};

inline std::string trajectory_file(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "traj_%05d.csv", id);
  return buf;
}

inline std::string state_name(int s) { return "S" + std::to_string(s + 1); }

struct Context {
  PipelineConfig cfg;
  Layout out;
  std::ostream* log = &std::cerr;

  void note(const std::string& msg) const {
    if (log) *log << "[tmesched] " << msg << '\n';
  }
};

// -----------------------------------------------------------------------------
// Simulation and featurization
// -----------------------------------------------------------------------------

struct Batch {
  std::vector<TrajectoryInfo> plan;
  std::vector<ObservationSeries> features;  // raw, full feature set
};

inline EnsembleSpec batch_spec(const PipelineConfig& cfg, bool drug) {
  return drug ? cfg.drug_ensemble() : cfg.ensemble;
}

inline std::vector<TrajectoryInfo> plan_batch(const PipelineConfig& cfg, bool drug) {
  return drug ? plan_ensemble(cfg.drug_ensemble(), stream::kDrugTrajectory, cfg.drug_exhaustion())
              : plan_ensemble(cfg.ensemble, stream::kTrajectory);
}

inline json batch_sidecar(const PipelineConfig& cfg, bool drug) {
  const auto spec = batch_spec(cfg, drug);
  json j = {{"batch", drug ? "drug" : "untreated"},
            {"n_params", spec.n_params},
            {"n_seeds", spec.n_seeds},
            {"n_steps", spec.n_steps},
            {"grid_size", spec.grid_size},
            {"seed", cfg.seed}};
  if (drug) j["r_exh_override"] = cfg.drug_exhaustion();
  return j;
}

// Simulates a batch and featurizes each trajectory as it is produced.
// `traj_dir`, when set, receives one CSV per trajectory.
inline Batch simulate_batch(const PipelineConfig& cfg, bool drug,
                            const std::optional<fs::path>& traj_dir = std::nullopt,
                            const Context* ctx = nullptr) {
  Batch b;
  const auto spec = batch_spec(cfg, drug);
  b.plan = plan_batch(cfg, drug);
  const auto fs_full = FeatureSetSpec::full();
  for_each_trajectory(spec, b.plan, [&](const TrajectoryInfo& ti, const Trajectory& t) {
    if (traj_dir) io::write_trajectory(*traj_dir / trajectory_file(ti.trajectory_id), t);
    b.features.push_back(featurize_trajectory(t, spec.grid_size, fs_full, ti.trajectory_id));
    if (ctx && (ti.trajectory_id + 1) % 10 == 0) {
      ctx->note(std::string(drug ? "drug" : "untreated") + " trajectory " +
                std::to_string(ti.trajectory_id + 1) + "/" + std::to_string(b.plan.size()));
    }
  });
  return b;
}

inline void write_features(const Layout& out, bool drug, const Batch& b) {
  for (const auto& s : b.features) {
    io::write_features(out.features(drug) / trajectory_file(s.trajectory_id), s);
  }
  json side = {{"features", io::to_json(FeatureSetSpec::full())},
               {"files", out.features(drug).filename().string()}};
  side["standardization"] = io::to_json(fit_standardization(b.features));
  io::write_json(out.features_json(drug), side);
}

inline Batch read_batch(const Layout& out, bool drug) {
  Batch b;
  b.plan = io::read_parameter_table(out.params(drug));
  const auto side = io::read_json(out.features_json(drug));
  const auto names = io::feature_set_from_json(io::field<json>(side, "features", out.features_json(drug)),
                                               out.features_json(drug));
  if (names.features != FeatureSetSpec::full().features) {
    throw InputError(out.features_json(drug).string() + ": field 'features' does not list the full feature set");
  }
  for (const auto& ti : b.plan) {
    b.features.push_back(io::read_features(out.features(drug) / trajectory_file(ti.trajectory_id),
                                           kNumFeatures, ti.trajectory_id));
  }
  return b;
}

// -----------------------------------------------------------------------------
// Landscape
// -----------------------------------------------------------------------------

// Rows of a full-feature series restricted to `subset`.
inline ObservationSeries restrict_features(const ObservationSeries& s, const FeatureSetSpec& subset) {
  const auto pos = subset.positions_in(FeatureSetSpec::full());
  ObservationSeries r;
  r.trajectory_id = s.trajectory_id;
  r.matrix.resize(static_cast<Eigen::Index>(pos.size()), s.matrix.cols());
  for (std::size_t i = 0; i < pos.size(); ++i) r.matrix.row(static_cast<Eigen::Index>(i)) = s.matrix.row(pos[i]);
  return r;
}

struct Landscape {
  FeatureSetSpec features;
  int radius = 25;
  StandardizationTable table;
  EmbeddedPool pool;
  Clustering clustering;  // labels ordered so S1 has the most effectors
  std::vector<StateSequence> sequences;
  std::vector<int> terminal;
};

inline EmbeddedPool embed_batch(const std::vector<ObservationSeries>& raw_full,
                                const FeatureSetSpec& features, const StandardizationTable& table,
                                int radius) {
  std::vector<ObservationSeries> z;
  z.reserve(raw_full.size());
  for (const auto& s : raw_full) z.push_back(table.apply(restrict_features(s, features)));
  return pool_embeddings(z, radius);
}

inline Landscape build_landscape(const PipelineConfig& cfg,
                                 const std::vector<ObservationSeries>& raw_full) {
  Landscape L;
  L.features = cfg.feature_set();
  L.radius = window_radius(cfg.window_length);
  std::vector<ObservationSeries> sub;
  for (const auto& s : raw_full) sub.push_back(restrict_features(s, L.features));
  L.table = fit_standardization(sub);
  L.pool = embed_batch(raw_full, L.features, L.table, L.radius);
  L.clustering = cluster_states(L.pool.data, cfg.cluster_options());
  // Order states by the effector share of the centroid's center column.
  const auto eff = FeatureSetSpec{{Feature::PropTEffector}}.positions_in(L.features).front();
  const Eigen::Index col = static_cast<Eigen::Index>(L.radius) * static_cast<Eigen::Index>(L.features.size()) + eff;
  std::vector<double> key;
  for (Eigen::Index c = 0; c < L.clustering.centroids.rows(); ++c) key.push_back(L.clustering.centroids(c, col));
  order_clusters_by_key(L.clustering, key);
  L.sequences = split_sequences(L.pool.trajectory_id, L.clustering.labels);
  L.terminal = terminal_labels(L.sequences);
  return L;
}

// Windows of another batch assigned to the nearest landscape centroid.
inline std::pair<EmbeddedPool, std::vector<int>> assign_batch(const Landscape& L,
                                                              const std::vector<ObservationSeries>& raw_full) {
  auto pool = embed_batch(raw_full, L.features, L.table, L.radius);
  auto labels = assign_nearest(pool.data, L.clustering.centroids);
  return {std::move(pool), std::move(labels)};
}

inline json model_json(const PipelineConfig& cfg, const Landscape& L) {
  json centroids = json::array();
  for (Eigen::Index r = 0; r < L.clustering.centroids.rows(); ++r) {
    const Eigen::RowVectorXd row = L.clustering.centroids.row(r);
    centroids.push_back(std::vector<double>(row.data(), row.data() + row.size()));
  }
  return {{"features", io::to_json(L.features)},
          {"window_length", cfg.window_length},
          {"n_states", cfg.n_states},
          {"standardization", io::to_json(L.table)},
          {"quantized", L.clustering.quantized},
          {"state_order", "descending center-column prop_t_eff"},
          {"centroids", centroids}};
}

// Landscape rebuilt from the features on disk and the stored model, with
// labels taken from states.csv.
inline Landscape load_landscape(const PipelineConfig& cfg, const Layout& out) {
  const auto mj = io::read_json(out.model());
  Landscape L;
  L.features = io::feature_set_from_json(io::field<json>(mj, "features", out.model()), out.model());
  L.radius = window_radius(io::field<int>(mj, "window_length", out.model()));
  L.table = io::standardization_from_json(io::field<json>(mj, "standardization", out.model()), out.model());
  const auto rows = io::field<std::vector<std::vector<double>>>(mj, "centroids", out.model());
  if (rows.empty()) throw InputError(out.model().string() + ": field 'centroids' is empty");
  L.clustering.centroids.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != rows[0].size()) throw InputError(out.model().string() + ": ragged 'centroids'");
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      L.clustering.centroids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  const auto batch = read_batch(out, false);
  L.pool = embed_batch(batch.features, L.features, L.table, L.radius);
  const auto states = io::read_states(out.states(false), cfg.n_states);
  if (states.labels.size() != static_cast<std::size_t>(L.pool.data.rows()) ||
      states.trajectory_id != L.pool.trajectory_id || states.center_step != L.pool.center_step) {
    throw InputError(out.states(false).string() + ": rows do not match the embedded windows of the features");
  }
  L.clustering.labels = states.labels;
  L.sequences = split_sequences(L.pool.trajectory_id, L.clustering.labels);
  L.terminal = terminal_labels(L.sequences);
  return L;
}

// -----------------------------------------------------------------------------
// Parameter screen and basins
// -----------------------------------------------------------------------------

// Parameter values aligned with `sequences` by trajectory id.
inline std::vector<ParameterVector> aligned_parameters(const std::vector<TrajectoryInfo>& plan,
                                                       const std::vector<StateSequence>& sequences) {
  std::map<int, const ParameterVector*> by_id;
  for (const auto& ti : plan) by_id[ti.trajectory_id] = &ti.params;
  std::vector<ParameterVector> out;
  for (const auto& s : sequences) {
    const auto it = by_id.find(s.trajectory_id);
    if (it == by_id.end()) {
      throw InputError("trajectory " + std::to_string(s.trajectory_id) + " has no parameter row");
    }
    out.push_back(*it->second);
  }
  return out;
}

// Kruskal-Wallis H per parameter across terminal groups, sorted by H
// descending (stable in parameter order).
inline std::vector<io::KwRow> screen_parameters(const std::vector<ParameterVector>& params,
                                                const std::vector<int>& terminal) {
  std::vector<io::KwRow> rows;
  for (std::size_t p = 0; p < kNumParams; ++p) {
    std::vector<double> v;
    for (const auto& pv : params) v.push_back(pv[p]);
    const auto r = kruskal_wallis(v, terminal);
    rows.push_back({std::string(kParamInfo[p].name), r.h, r.p});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const io::KwRow& a, const io::KwRow& b) { return a.h > b.h; });
  return rows;
}

inline BasinModel basin_model(const std::vector<ParameterVector>& params, const std::vector<int>& terminal,
                              int k) {
  std::vector<BasinPoint> pts;
  for (const auto& p : params) pts.push_back({std::log10(p[kExhaustion]), p[kAdhesion]});
  return fit_basin_model(std::move(pts), terminal, k);
}

inline json basin_json(const BasinModel& m, const LooReport& loo,
                       const std::vector<StateSequence>& sequences) {
  json pts = json::array();
  for (std::size_t i = 0; i < m.points.size(); ++i) {
    pts.push_back({{"trajectory_id", sequences[i].trajectory_id},
                   {"log10_r_exh", m.points[i][0]},
                   {"r_adh", m.points[i][1]},
                   {"attractor", state_name(m.labels[i])},
                   {"loo_prediction", state_name(loo.predictions[i])}});
  }
  json dup = json::array();
  for (const auto& [a, b] : loo.conflicting_duplicates) {
    dup.push_back({sequences[a].trajectory_id, sequences[b].trajectory_id});
  }
  return {{"k", m.k},
          {"space", {"log10_r_exh", "r_adh"}},
          {"loo_accuracy", loo.accuracy},
          {"conflicting_duplicates", dup},
          {"points", pts}};
}

// -----------------------------------------------------------------------------
// Markov state models
// -----------------------------------------------------------------------------

inline std::map<int, std::vector<StateSequence>> by_terminal(const std::vector<StateSequence>& seqs) {
  std::map<int, std::vector<StateSequence>> out;
  for (const auto& s : seqs) out[s.labels.back()].push_back(s);
  return out;
}

struct MsmSet {
  std::map<int, TransitionMatrix> groups;  // terminal state -> matrix
  TransitionMatrix pooled;
  std::optional<TransitionMatrix> drug;
  std::vector<StateRole> roles;
  std::vector<int> escape_groups;          // attractor groups other than the target
  std::map<int, int> group_sizes;
};

inline MsmSet estimate_models(const PipelineConfig& cfg, const std::vector<StateSequence>& seqs,
                              const std::vector<StateSequence>* drug_seqs) {
  MsmSet m;
  const auto terminal = terminal_labels(seqs);
  m.groups = estimate_group_matrices(seqs, terminal, cfg.n_states);
  m.pooled = estimate_transition_matrix(seqs, cfg.n_states, "pooled");
  if (drug_seqs && !drug_seqs->empty()) {
    m.drug = estimate_transition_matrix(*drug_seqs, cfg.n_states, "drug");
  }
  std::vector<int> absorbing;
  for (const auto& [g, p] : m.groups) {
    for (int s : absorbing_states(p)) {
      if (!p.unvisited[static_cast<std::size_t>(s)]) absorbing.push_back(s);
    }
  }
  m.roles = tag_states(terminal, cfg.n_states, absorbing, cfg.attractor_share);
  for (int t : terminal) ++m.group_sizes[t];
  for (const auto& [g, n] : m.group_sizes) {
    if (g != cfg.target_state && m.roles[static_cast<std::size_t>(g)] == StateRole::Attractor) {
      m.escape_groups.push_back(g);
    }
  }
  return m;
}

inline std::string matrix_file(int group) { return "group_" + state_name(group) + ".json"; }

inline json groups_json(const MsmSet& m) {
  json roles = json::object();
  for (std::size_t s = 0; s < m.roles.size(); ++s) {
    roles[state_name(static_cast<int>(s))] = m.roles[s] == StateRole::Attractor ? "attractor" : "transient";
  }
  json sizes = json::object();
  for (const auto& [g, n] : m.group_sizes) sizes[state_name(g)] = n;
  json escape = json::array();
  for (int g : m.escape_groups) escape.push_back(state_name(g));
  return {{"roles", roles}, {"terminal_counts", sizes}, {"escape_groups", escape},
          {"has_drug", m.drug.has_value()}};
}

struct MatrixValidation {
  std::string name;
  std::optional<BootstrapResult> bootstrap;
  std::vector<CkResult> ck;
  KlResult kl;
  std::size_t n_sequences = 0;
};

inline MatrixValidation validate_matrix(const PipelineConfig& cfg, const std::string& name,
                                        const TransitionMatrix& p,
                                        const std::vector<StateSequence>& seqs,
                                        std::uint64_t seed) {
  MatrixValidation v;
  v.name = name;
  v.n_sequences = seqs.size();
  if (seqs.size() >= 2) {
    v.bootstrap = bootstrap_ci(seqs, p.n_states(), cfg.bootstrap_resamples, cfg.bootstrap_level, seed);
  }
  for (int n : cfg.ck_lags) v.ck.push_back(chapman_kolmogorov_test(seqs, p, n));
  const auto occ = empirical_occupancy(seqs, p.n_states());
  v.kl = kl_occupancy(occ, p, occ.front());
  return v;
}

struct ValidationSummary {
  std::vector<MatrixValidation> per_matrix;
  double bootstrap_max = 0.0;
  std::map<int, double> ck_max;
  double kl_max = 0.0;
  bool passed = true;
};

inline ValidationSummary summarize(const PipelineConfig& cfg, std::vector<MatrixValidation> items) {
  ValidationSummary s;
  for (int n : cfg.ck_lags) s.ck_max[n] = 0.0;
  for (const auto& v : items) {
    if (v.bootstrap) s.bootstrap_max = std::max(s.bootstrap_max, v.bootstrap->max_width);
    for (const auto& c : v.ck) s.ck_max[c.n] = std::max(s.ck_max[c.n], c.discrepancy);
    s.kl_max = std::max(s.kl_max, v.kl.max);
  }
  s.passed = s.bootstrap_max <= cfg.ci_width_threshold && s.kl_max <= cfg.kl_threshold;
  for (const auto& [n, d] : s.ck_max) s.passed = s.passed && d <= cfg.ck_threshold;
  s.per_matrix = std::move(items);
  return s;
}

inline json validation_json(const PipelineConfig& cfg, const ValidationSummary& s, const std::string& source) {
  json ck = json::object();
  for (const auto& [n, d] : s.ck_max) ck[std::to_string(n)] = d;
  json per = json::object();
  for (const auto& v : s.per_matrix) {
    json cks = json::object();
    json excluded = json::object();
    for (const auto& c : v.ck) {
      cks[std::to_string(c.n)] = c.discrepancy;
      json ex = json::array();
      for (int r : c.excluded_rows) ex.push_back(state_name(r));
      excluded[std::to_string(c.n)] = ex;
    }
    json entry = {{"n_sequences", v.n_sequences},
                  {"ck_discrepancy", cks},
                  {"ck_excluded_rows", excluded},
                  {"kl_max", v.kl.max},
                  {"kl_per_step", v.kl.per_step}};
    if (v.bootstrap) {
      entry["bootstrap_max_ci_width"] = v.bootstrap->max_width;
      std::vector<double> w;
      for (Eigen::Index i = 0; i < v.bootstrap->width.rows(); ++i) {
        for (Eigen::Index j = 0; j < v.bootstrap->width.cols(); ++j) w.push_back(v.bootstrap->width(i, j));
      }
      entry["bootstrap_ci_widths"] = w;
    } else {
      entry["bootstrap_max_ci_width"] = nullptr;
    }
    per[v.name] = entry;
  }
  return {{"source", source},
          {"bootstrap_max_ci_width", s.bootstrap_max},
          {"ck_discrepancy", ck},
          {"kl_max", s.kl_max},
          {"kl_floor", kKlFloor},
          {"bootstrap_resamples", cfg.bootstrap_resamples},
          {"bootstrap_level", cfg.bootstrap_level},
          {"thresholds",
           {{"ci_width", cfg.ci_width_threshold}, {"ck", cfg.ck_threshold}, {"kl", cfg.kl_threshold}}},
          {"passed", s.passed},
          {"per_matrix", per}};
}

// Synthetic sequences sampled from a matrix, started from its uniform
// transient distribution.
inline std::vector<StateSequence> synthetic_sequences(const TransitionMatrix& p, int count, int length,
                                                      std::uint64_t seed, std::uint64_t salt) {
  const auto pi0 = uniform_over_transient(p);
  std::vector<StateSequence> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, stream::kSynthetic, salt * 1000003ULL + static_cast<std::uint64_t>(i)));
    const auto start = static_cast<int>(rng.discrete(std::span<const double>(pi0.data(), static_cast<std::size_t>(pi0.size()))));
    out.push_back({i, sample_chain(p.entries, start, static_cast<std::size_t>(length), rng)});
  }
  return out;
}

// -----------------------------------------------------------------------------
// Committors, MDP, replay
// -----------------------------------------------------------------------------

struct MdpInputs {
  TransitionMatrix drug;
  std::map<int, TransitionMatrix> groups;          // escape group -> untreated matrix
  std::map<int, std::vector<int>> initial_states;  // escape group -> observed starts
  bool override_applied = false;
  std::string source;
};

inline MdpInputs fixture_inputs(const fs::path& dir) {
  MdpInputs in;
  in.source = "fixtures";
  in.drug = io::read_matrix(dir / "P1.json");
  in.groups.emplace(3, io::read_matrix(dir / "P4.json"));
  in.groups.emplace(5, io::read_matrix(dir / "P6.json"));
  return in;
}

inline void apply_absorbing_override(const PipelineConfig& cfg, MdpInputs& in) {
  if (!is_absorbing(in.drug, cfg.target_state) && cfg.absorbing_override) {
    in.drug.entries.row(cfg.target_state).setZero();
    in.drug.entries(cfg.target_state, cfg.target_state) = 1.0;
    in.override_applied = true;
  }
}

inline MdpInputs estimated_inputs(const PipelineConfig& cfg, const MsmSet& m,
                                  const std::vector<StateSequence>& seqs) {
  if (!m.drug) throw InputError("no drug-condition matrix: run the drug batch first");
  MdpInputs in;
  in.source = "estimated";
  in.drug = *m.drug;
  const auto groups = by_terminal(seqs);
  for (int g : m.escape_groups) {
    in.groups.emplace(g, m.groups.at(g));
    for (const auto& s : groups.at(g)) in.initial_states[g].push_back(s.labels.front());
  }
  apply_absorbing_override(cfg, in);
  return in;
}

inline MdpInputs load_mdp_inputs(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  if (cfg.matrices == "fixtures") return fixture_inputs(cfg.fixtures_dir);
  const auto gj = io::read_json(ctx.out.groups());
  MdpInputs in;
  in.source = "estimated";
  in.drug = io::read_matrix(ctx.out.matrices() / "drug.json");
  std::map<int, std::vector<int>> starts;
  if (fs::exists(ctx.out.states(false))) {
    const auto st = io::read_states(ctx.out.states(false), cfg.n_states);
    for (const auto& s : split_sequences(st.trajectory_id, st.labels)) {
      starts[s.labels.back()].push_back(s.labels.front());
    }
  }
  for (const auto& name : io::field<std::vector<std::string>>(gj, "escape_groups", ctx.out.groups())) {
    const int g = parse_state_label(name);
    in.groups.emplace(g, io::read_matrix(ctx.out.matrices() / matrix_file(g)));
    if (starts.count(g)) in.initial_states[g] = starts[g];
  }
  apply_absorbing_override(cfg, in);
  return in;
}

inline Eigen::RowVectorXd resolve_pi0(const PipelineConfig& cfg, const TransitionMatrix& group) {
  const int n = group.n_states();
  switch (cfg.pi0.kind) {
    case Pi0Choice::Kind::UniformTransient: return uniform_over_transient(group);
    case Pi0Choice::Kind::Point: {
      Eigen::RowVectorXd p = Eigen::RowVectorXd::Zero(n);
      p[cfg.pi0.state] = 1.0;
      return p;
    }
    case Pi0Choice::Kind::Vector: {
      Eigen::RowVectorXd p = Eigen::Map<const Eigen::RowVectorXd>(cfg.pi0.weights.data(), n);
      check_distribution(p, n);
      return p;
    }
  }
  throw ConfigError("unknown pi0 choice");
}

inline std::string pi0_label(const PipelineConfig& cfg) {
  const auto j = emit_pi0(cfg.pi0);
  return j.is_string() ? j.get<std::string>() : "vector";
}

inline std::vector<double> to_vector(const Eigen::RowVectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

inline json committor_report(const PipelineConfig& cfg, const MdpInputs& in,
                             std::vector<std::pair<std::string, CommittorCurve>>* curves = nullptr) {
  const auto abs = absorption_probabilities(in.drug, cfg.target_state);
  json groups = json::object();
  for (const auto& [g, p] : in.groups) {
    const auto pi0 = resolve_pi0(cfg, p);
    auto c = committor_curve(pi0, p, abs.q, cfg.horizon);
    groups[state_name(g)] = {{"pi0", to_vector(pi0)},
                             {"Q0", c.values.front()},
                             {"k_below_0.25", c.below_25 ? json(*c.below_25) : json(nullptr)},
                             {"k_below_0.10", c.below_10 ? json(*c.below_10) : json(nullptr)},
                             {"Q_at_horizon", c.values.back()}};
    if (curves) curves->emplace_back(state_name(g), std::move(c));
  }
  json unreachable = json::array();
  for (int s : abs.cannot_reach) unreachable.push_back(state_name(s));
  return {{"target", state_name(cfg.target_state)},
          {"source", in.source},
          {"absorbing_override_applied", in.override_applied},
          {"q", std::vector<double>(abs.q.data(), abs.q.data() + abs.q.size())},
          {"target_unreachable_from", unreachable},
          {"pi0_choice", pi0_label(cfg)},
          {"horizon", cfg.horizon},
          {"groups", groups}};
}

inline MdpSpec mdp_spec(const PipelineConfig& cfg, const MdpInputs& in, int group) {
  MdpSpec spec;
  spec.horizon = cfg.horizon;
  spec.untreated = in.groups.at(group);
  spec.drug = in.drug;
  spec.reward = unit_reward(in.drug.n_states(), cfg.target_state);
  return spec;
}

struct StrategySet {
  MdpSolution optimal;
  FixedPolicies fixed;

  std::vector<std::pair<std::string, const PolicySchedule*>> all() const {
    return {{"none", &fixed.none},
            {"alternating", &fixed.alternating},
            {"immediate", &fixed.immediate},
            {"optimal", &optimal.policy}};
  }
};

inline StrategySet strategies_for(const PipelineConfig& cfg, const MdpSpec& spec) {
  return {backward_induction(spec), make_fixed_policies(spec.n_states(), spec.horizon, cfg.cycle)};
}

inline json strategy_report(const PipelineConfig& cfg, const MdpInputs& in) {
  json groups = json::object();
  for (const auto& [g, p] : in.groups) {
    const auto spec = mdp_spec(cfg, in, g);
    const auto pi0 = resolve_pi0(cfg, p);
    const auto set = strategies_for(cfg, spec);
    json values = json::object();
    for (const auto& [name, policy] : set.all()) values[name] = evaluate_policy(spec, *policy, pi0);
    json entry = {{"pi0", to_vector(pi0)}, {"expected_p_reach_target", values}};
    if (in.initial_states.count(g)) entry["n_trajectories"] = in.initial_states.at(g).size();
    groups[state_name(g) + "-prone"] = entry;
  }
  return {{"target", state_name(cfg.target_state)},
          {"horizon", cfg.horizon},
          {"cycle", cfg.cycle},
          {"pi0_choice", pi0_label(cfg)},
          {"source", in.source},
          {"absorbing_override_applied", in.override_applied},
          {"groups", groups}};
}

// Largest-remainder apportionment of `count` starts over pi0.
inline std::vector<int> starts_from_pi0(const Eigen::RowVectorXd& pi0, int count) {
  std::vector<int> n(static_cast<std::size_t>(pi0.size()));
  std::vector<std::pair<double, int>> rem;
  int used = 0;
  for (Eigen::Index s = 0; s < pi0.size(); ++s) {
    const double exact = pi0[s] * count;
    n[static_cast<std::size_t>(s)] = static_cast<int>(std::floor(exact));
    used += n[static_cast<std::size_t>(s)];
    rem.emplace_back(-(exact - std::floor(exact)), static_cast<int>(s));
  }
  std::sort(rem.begin(), rem.end());
  for (std::size_t i = 0; used < count && i < rem.size(); ++i, ++used) ++n[static_cast<std::size_t>(rem[i].second)];
  std::vector<int> out;
  for (std::size_t s = 0; s < n.size(); ++s) out.insert(out.end(), static_cast<std::size_t>(n[s]), static_cast<int>(s));
  return out;
}

inline json replay_report(const PipelineConfig& cfg, const MdpInputs& in) {
  json groups = json::object();
  std::uint64_t stream_base = 0;
  for (const auto& [g, p] : in.groups) {
    const auto spec = mdp_spec(cfg, in, g);
    std::vector<int> starts;
    std::string start_source;
    if (in.initial_states.count(g) && !in.initial_states.at(g).empty()) {
      starts = in.initial_states.at(g);
      start_source = "observed first windows";
    } else {
      starts = starts_from_pi0(resolve_pi0(cfg, p), 100);
      start_source = "apportioned from pi0";
    }
    const auto set = strategies_for(cfg, spec);
    json per = json::object();
    for (const auto& [name, policy] : set.all()) {
      const auto r = replay_trajectories(starts, *policy, spec, cfg.n_rollouts,
                                         derive_seed(cfg.seed, stream::kRollout, stream_base++));
      const double z = r.standard_error > 0 ? (r.fraction - r.theoretical) / r.standard_error
                                            : (r.fraction == r.theoretical ? 0.0 : INFINITY);
      per[name] = {{"rollouts", r.rollouts},
                   {"reached", r.reached},
                   {"fraction", r.fraction},
                   {"theoretical", r.theoretical},
                   {"standard_error", r.standard_error},
                   {"z", std::isfinite(z) ? json(z) : json(nullptr)},
                   {"within_3_se", std::abs(r.fraction - r.theoretical) <= 3.0 * r.standard_error}};
    }
    groups[state_name(g) + "-prone"] = {{"n_starts", starts.size()},
                                        {"start_source", start_source},
                                        {"strategies", per}};
  }
  return {{"target", state_name(cfg.target_state)},
          {"horizon", cfg.horizon},
          {"n_rollouts_per_start", cfg.n_rollouts},
          {"source", in.source},
          {"groups", groups}};
}

// -----------------------------------------------------------------------------
// Snapshot mapping
// -----------------------------------------------------------------------------

inline HoldoutResult holdout(const PipelineConfig& cfg, const Landscape& L) {
  return holdout_snapshot_experiment(L.pool, L.radius, L.features, FeatureSetSpec::macrophage_excluded(),
                                     L.clustering.labels, cfg.n_states, cfg.holdout_fraction,
                                     cfg.holdout_repeats, cfg.seed);
}

inline json holdout_json(const PipelineConfig& cfg, const HoldoutResult& h) {
  json per = json::object();
  for (std::size_t s = 0; s < h.mean_auc.per_state.size(); ++s) {
    const auto& a = h.mean_auc.per_state[s];
    per[state_name(static_cast<int>(s))] = a ? json(*a) : json(nullptr);
  }
  return {{"feature_set", io::to_json(FeatureSetSpec::macrophage_excluded())},
          {"holdout_fraction", cfg.holdout_fraction},
          {"repeats", cfg.holdout_repeats},
          {"mean_auc", h.mean_auc.mean},
          {"per_state_auc", per},
          {"repeat_mean_auc", h.repeat_mean_auc},
          {"nn_accuracy", h.accuracy}};
}

struct SnapshotAssignment {
  int step = 0;
  int state = 0;
  double similarity = 0.0;
};

// Maps every configuration of `snapshots` onto the landscape by cosine 1-NN
// against the center columns of all reference windows, using the
// macrophage-excluded features.
inline std::vector<SnapshotAssignment> map_snapshots(const PipelineConfig& cfg, const Landscape& L,
                                                     const Trajectory& snapshots) {
  const auto snap = FeatureSetSpec::macrophage_excluded();
  std::vector<Eigen::Index> rows(static_cast<std::size_t>(L.pool.data.rows()));
  std::iota(rows.begin(), rows.end(), Eigen::Index{0});
  const auto ref = SnapshotReference::from_pool(L.pool, L.radius, L.features, snap, L.clustering.labels,
                                                cfg.n_states, rows);
  const auto table = L.table.select(snap.positions_in(L.features));
  std::vector<SnapshotAssignment> out;
  for (const auto& c : snapshots) {
    Eigen::MatrixXd v = observe(c, cfg.ensemble.grid_size, snap).values;
    const Eigen::VectorXd z = table.apply(v).col(0);
    const Eigen::VectorXd sim = ref.similarities(z);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < sim.size(); ++i) {
      if (sim[i] > sim[best]) best = i;
    }
    out.push_back({c.step, ref.assign(z), sim[best]});
  }
  return out;
}

// -----------------------------------------------------------------------------
// File-based stages
// -----------------------------------------------------------------------------

inline bool has_drug_batch(const Layout& out) { return fs::exists(out.params(true)); }

inline void stage_simulate(const Context& ctx) {
  for (bool drug : {false, true}) {
    const auto plan = plan_batch(ctx.cfg, drug);
    io::write_parameter_table(ctx.out.params(drug), plan, batch_spec(ctx.cfg, drug).bounds,
                              batch_sidecar(ctx.cfg, drug));
    simulate_batch(ctx.cfg, drug, ctx.out.trajectories(drug), &ctx);
  }
}

inline void stage_featurize(const Context& ctx) {
  for (bool drug : {false, true}) {
    if (drug && !has_drug_batch(ctx.out)) continue;
    Batch b;
    b.plan = io::read_parameter_table(ctx.out.params(drug));
    const int grid = batch_spec(ctx.cfg, drug).grid_size;
    for (const auto& ti : b.plan) {
      const auto t = io::read_trajectory(ctx.out.trajectories(drug) / trajectory_file(ti.trajectory_id));
      b.features.push_back(featurize_trajectory(t, grid, FeatureSetSpec::full(), ti.trajectory_id));
    }
    write_features(ctx.out, drug, b);
  }
}

inline void stage_embed(const Context& ctx) {
  const auto b = read_batch(ctx.out, false);
  const auto features = ctx.cfg.feature_set();
  std::vector<ObservationSeries> sub;
  for (const auto& s : b.features) sub.push_back(restrict_features(s, features));
  const auto table = fit_standardization(sub);
  io::write_embedded(ctx.out.embedded(), embed_batch(b.features, features, table, window_radius(ctx.cfg.window_length)));
}

inline Landscape write_landscape(const Context& ctx, const Batch& untreated, const Batch* drug) {
  auto L = build_landscape(ctx.cfg, untreated.features);
  ctx.note("clustered " + std::to_string(L.pool.data.rows()) + " windows into " +
           std::to_string(ctx.cfg.n_states) + " states");
  io::write_states(ctx.out.states(false), L.pool.trajectory_id, L.pool.center_step, L.clustering.labels);
  io::write_json(ctx.out.model(), model_json(ctx.cfg, L));
  io::write_plot(ctx.out.plot(), L.pool, pca_project(L.pool.data).coords, L.clustering.labels);
  if (drug) {
    const auto [pool, labels] = assign_batch(L, drug->features);
    io::write_states(ctx.out.states(true), pool.trajectory_id, pool.center_step, labels);
  }
  return L;
}

inline void stage_cluster(const Context& ctx) {
  const auto b = read_batch(ctx.out, false);
  std::optional<Batch> d;
  if (has_drug_batch(ctx.out)) d = read_batch(ctx.out, true);
  write_landscape(ctx, b, d ? &*d : nullptr);
}

struct LabeledRun {
  std::vector<TrajectoryInfo> plan;
  std::vector<StateSequence> sequences;
};

inline LabeledRun read_labeled(const Context& ctx, bool drug) {
  LabeledRun r;
  r.plan = io::read_parameter_table(ctx.out.params(drug));
  const auto st = io::read_states(ctx.out.states(drug), ctx.cfg.n_states);
  r.sequences = split_sequences(st.trajectory_id, st.labels);
  return r;
}

inline void stage_screen(const Context& ctx) {
  const auto r = read_labeled(ctx, false);
  io::write_kruskal_wallis(ctx.out.kruskal_wallis(),
                           screen_parameters(aligned_parameters(r.plan, r.sequences), terminal_labels(r.sequences)));
}

inline void stage_basin(const Context& ctx) {
  const auto r = read_labeled(ctx, false);
  const auto m = basin_model(aligned_parameters(r.plan, r.sequences), terminal_labels(r.sequences), ctx.cfg.basin_k);
  io::write_json(ctx.out.basin(), basin_json(m, loo_cv(m), r.sequences));
}

inline MsmSet stage_estimate(const Context& ctx) {
  const auto r = read_labeled(ctx, false);
  std::optional<LabeledRun> d;
  if (fs::exists(ctx.out.states(true))) d = read_labeled(ctx, true);
  auto m = estimate_models(ctx.cfg, r.sequences, d ? &d->sequences : nullptr);
  for (const auto& [g, p] : m.groups) io::write_matrix(ctx.out.matrices() / matrix_file(g), p);
  io::write_matrix(ctx.out.matrices() / "pooled.json", m.pooled);
  if (m.drug) io::write_matrix(ctx.out.matrices() / "drug.json", *m.drug);
  io::write_json(ctx.out.groups(), groups_json(m));
  return m;
}

// Returns whether every validation metric met its threshold.
inline bool stage_validate(const Context& ctx, bool use_fixtures) {
  const auto& cfg = ctx.cfg;
  std::vector<MatrixValidation> items;
  std::string source;
  std::uint64_t salt = 0;
  if (use_fixtures) {
    source = "synthetic sequences from fixture matrices";
    const auto in = fixture_inputs(cfg.fixtures_dir);
    std::vector<std::pair<std::string, const TransitionMatrix*>> mats = {{"P1", &in.drug}};
    for (const auto& [g, p] : in.groups) mats.emplace_back("P" + std::to_string(g + 1), &p);
    for (const auto& [name, p] : mats) {
      const auto seqs = synthetic_sequences(*p, 50, cfg.horizon, cfg.seed, salt);
      const auto est = estimate_transition_matrix(seqs, p->n_states(), name);
      items.push_back(validate_matrix(cfg, name, est, seqs, derive_seed(cfg.seed, stream::kBootstrap, ++salt)));
    }
  } else {
    source = "estimated matrices";
    const auto r = read_labeled(ctx, false);
    for (const auto& [g, seqs] : by_terminal(r.sequences)) {
      const auto p = io::read_matrix(ctx.out.matrices() / matrix_file(g));
      items.push_back(validate_matrix(cfg, state_name(g), p, seqs, derive_seed(cfg.seed, stream::kBootstrap, ++salt)));
    }
    if (fs::exists(ctx.out.states(true))) {
      const auto d = read_labeled(ctx, true);
      const auto p = io::read_matrix(ctx.out.matrices() / "drug.json");
      items.push_back(validate_matrix(cfg, "drug", p, d.sequences, derive_seed(cfg.seed, stream::kBootstrap, ++salt)));
    }
  }
  const auto s = summarize(cfg, std::move(items));
  io::write_json(ctx.out.validation(), validation_json(cfg, s, source));
  return s.passed;
}

inline void stage_committor(const Context& ctx) {
  const auto in = load_mdp_inputs(ctx);
  std::vector<std::pair<std::string, CommittorCurve>> curves;
  io::write_json(ctx.out.committor_json(), committor_report(ctx.cfg, in, &curves));
  auto out = io::open_out(ctx.out.committor_csv());
  out << "group,k,Q,dQ\n";
  for (const auto& [name, c] : curves) {
    for (std::size_t k = 0; k < c.values.size(); ++k) {
      out << name << ',' << k << ',' << fmt_double(c.values[k]) << ','
          << (k < c.derivative.size() ? fmt_double(c.derivative[k]) : std::string()) << '\n';
    }
  }
}

inline void stage_solve_mdp(const Context& ctx) {
  const auto in = load_mdp_inputs(ctx);
  for (const auto& [g, p] : in.groups) {
    const auto sol = backward_induction(mdp_spec(ctx.cfg, in, g));
    io::write_policy(ctx.out.mdp() / ("policy_" + state_name(g) + ".csv"), sol.policy.actions);
    io::write_values(ctx.out.mdp() / ("value_" + state_name(g) + ".csv"), sol.value.values);
  }
  io::write_json(ctx.out.strategies(), strategy_report(ctx.cfg, in));
}

inline void stage_evaluate(const Context& ctx) {
  io::write_json(ctx.out.strategies(), strategy_report(ctx.cfg, load_mdp_inputs(ctx)));
}

inline void stage_replay(const Context& ctx) {
  io::write_json(ctx.out.replay(), replay_report(ctx.cfg, load_mdp_inputs(ctx)));
}

// Without `input`, runs the hold-out experiment; with it, maps every
// configuration in that trajectory CSV and writes `<stem>_states.csv`.
inline void stage_map_snapshot(const Context& ctx, const std::optional<fs::path>& input) {
  const auto L = load_landscape(ctx.cfg, ctx.out);
  if (!input) {
    io::write_json(ctx.out.snapshot(), holdout_json(ctx.cfg, holdout(ctx.cfg, L)));
    return;
  }
  const auto snaps = io::read_trajectory(*input);
  auto out = io::open_out(ctx.out.root / (input->stem().string() + "_states.csv"));
  out << "step,state,similarity\n";
  for (const auto& a : map_snapshots(ctx.cfg, L, snaps)) {
    out << a.step << ',' << a.state + 1 << ',' << fmt_double(a.similarity) << '\n';
  }
}

inline void write_run_metadata(const Context& ctx, const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  io::write_json(ctx.out.run(), {{"command", command}, {"config", emit(ctx.cfg)}, {"metadata", {{"timestamp", buf}}}});
}

// Every stage in order. Trajectories are featurized as they are simulated
// and only written to disk when the config asks for them.
inline bool run_all(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  std::optional<Batch> untreated, drugged;
  for (bool drug : {false, true}) {
    const auto plan = plan_batch(cfg, drug);
    io::write_parameter_table(ctx.out.params(drug), plan, batch_spec(cfg, drug).bounds, batch_sidecar(cfg, drug));
    std::optional<fs::path> traj_dir;
    if (cfg.write_trajectories) traj_dir = ctx.out.trajectories(drug);
    auto& b = drug ? drugged : untreated;
    b = simulate_batch(cfg, drug, traj_dir, &ctx);
    write_features(ctx.out, drug, *b);
  }
  if (cfg.write_embedded) stage_embed(ctx);
  write_landscape(ctx, *untreated, &*drugged);
  stage_screen(ctx);
  stage_basin(ctx);
  stage_estimate(ctx);
  const bool valid = stage_validate(ctx, false);
  stage_committor(ctx);
  stage_solve_mdp(ctx);
  stage_replay(ctx);
  stage_map_snapshot(ctx, std::nullopt);
  return valid;
}

}  // namespace tmesched::pipeline
