#pragma once

// Pipeline configuration and its JSON form. Parsing fills unspecified fields
// with defaults and rejects unknown keys; emit(parse(c)) reproduces any
// config that was itself produced by emit.

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tmesched/clustering.hpp"
#include "tmesched/core.hpp"
#include "tmesched/features.hpp"
#include "tmesched/sim.hpp"

namespace tmesched {

// Initial distribution for committors, strategy values and replays.
struct Pi0Choice {
  enum class Kind { UniformTransient, Point, Vector };
  Kind kind = Kind::UniformTransient;
  int state = 0;               // 0-based, for Point
  std::vector<double> weights; // for Vector

  friend bool operator==(const Pi0Choice&, const Pi0Choice&) = default;
};

struct PipelineConfig {
  std::uint64_t seed = 20240601;
  std::string output_dir = "out";

  EnsembleSpec ensemble{};
  // Drug batch: r_exh pinned (to the bottom of its sampling range unless set).
  int drug_n_params = 11;
  int drug_n_seeds = 1;
  std::optional<double> drug_r_exh;

  bool write_trajectories = false;
  bool write_embedded = false;

  bool macrophage_excluded = false;  // feature set used for clustering
  int window_length = 51;
  int n_states = 6;
  Eigen::Index direct_limit = 4000;
  Eigen::Index mini_centroids = 2000;
  int kmeans_iterations = 20;

  double attractor_share = 0.25;
  int basin_k = 2;

  double holdout_fraction = 0.15;
  int holdout_repeats = 50;

  int bootstrap_resamples = 2000;
  double bootstrap_level = 0.95;
  std::vector<int> ck_lags{2, 5};
  double ck_threshold = 1.2e-3;
  double kl_threshold = 0.16;
  double ci_width_threshold = 0.10;

  int horizon = 646;
  int cycle = 50;
  int target_state = 0;  // S1
  Pi0Choice pi0{};
  std::string matrices = "estimated";  // or "fixtures"
  std::string fixtures_dir = "data/fixtures";
  // Treat the target row of an estimated drug matrix as absorbing.
  bool absorbing_override = true;
  int n_rollouts = 100;

  double drug_exhaustion() const { return drug_r_exh.value_or(ensemble.bounds[kExhaustion].lo); }

  FeatureSetSpec feature_set() const {
    return macrophage_excluded ? FeatureSetSpec::macrophage_excluded() : FeatureSetSpec::full();
  }

  ClusterOptions cluster_options() const {
    ClusterOptions o;
    o.n_clusters = n_states;
    o.direct_limit = direct_limit;
    o.mini_centroids = mini_centroids;
    o.kmeans_iterations = kmeans_iterations;
    o.seed = seed;
    return o;
  }

  EnsembleSpec drug_ensemble() const {
    EnsembleSpec d = ensemble;
    d.n_params = drug_n_params;
    d.n_seeds = drug_n_seeds;
    return d;
  }

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

inline void validate(const PipelineConfig& c) {
  validate(c.ensemble);
  validate(c.drug_ensemble());
  if (c.drug_r_exh && !(*c.drug_r_exh >= 0.0)) throw ConfigError("drug r_exh must be >= 0");
  window_radius(c.window_length);
  if (c.n_states < 2) throw ConfigError("n_states must be >= 2");
  if (c.target_state < 0 || c.target_state >= c.n_states) throw ConfigError("target_state out of range");
  if (c.basin_k < 1) throw ConfigError("basin_k must be >= 1");
  if (!(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction must lie in (0,1)");
  }
  if (c.holdout_repeats < 1) throw ConfigError("holdout_repeats must be >= 1");
  if (c.bootstrap_resamples < 1) throw ConfigError("bootstrap_resamples must be >= 1");
  if (!(c.bootstrap_level > 0.0 && c.bootstrap_level < 1.0)) {
    throw ConfigError("bootstrap_level must lie in (0,1)");
  }
  for (int n : c.ck_lags) {
    if (n < 1) throw ConfigError("ck_lags entries must be >= 1");
  }
  if (c.horizon < 1) throw ConfigError("horizon must be >= 1");
  if (c.cycle < 1) throw ConfigError("cycle must be >= 1");
  if (c.matrices != "estimated" && c.matrices != "fixtures") {
    throw ConfigError("matrices must be 'estimated' or 'fixtures'");
  }
  if (c.n_rollouts < 1) throw ConfigError("n_rollouts must be >= 1");
  if (c.pi0.kind == Pi0Choice::Kind::Point &&
      (c.pi0.state < 0 || c.pi0.state >= c.n_states)) {
    throw ConfigError("pi0 point state out of range");
  }
  if (c.pi0.kind == Pi0Choice::Kind::Vector &&
      c.pi0.weights.size() != static_cast<std::size_t>(c.n_states)) {
    throw ConfigError("pi0 vector must have n_states entries");
  }
}

// -----------------------------------------------------------------------------
// JSON
// -----------------------------------------------------------------------------

// "S2", "s2" or "2" -> 1.
inline int parse_state_label(std::string label) {
  const std::string original = label;
  if (!label.empty() && (label[0] == 'S' || label[0] == 's')) label = label.substr(1);
  int v = 0;
  const auto [ptr, ec] = std::from_chars(label.data(), label.data() + label.size(), v);
  if (label.empty() || ec != std::errc{} || ptr != label.data() + label.size() || v < 1) {
    throw ConfigError("not a state label: '" + original + "'");
  }
  return v - 1;
}

// "uniform_transient", "point:S2" (or "point:2"), or a JSON array.
inline Pi0Choice parse_pi0(const nlohmann::json& j) {
  Pi0Choice p;
  if (j.is_array()) {
    p.kind = Pi0Choice::Kind::Vector;
    for (const auto& v : j) {
      if (!v.is_number()) throw ConfigError("pi0 vector entries must be numbers");
      p.weights.push_back(v.get<double>());
    }
    return p;
  }
  if (!j.is_string()) throw ConfigError("pi0 must be a string or an array");
  const auto s = j.get<std::string>();
  if (s == "uniform_transient") return p;
  if (s.rfind("point:", 0) == 0) {
    p.kind = Pi0Choice::Kind::Point;
    p.state = parse_state_label(s.substr(6));
    return p;
  }
  throw ConfigError("pi0 must be 'uniform_transient', 'point:<state>' or an array, got '" + s + "'");
}

inline nlohmann::json emit_pi0(const Pi0Choice& p) {
  switch (p.kind) {
    case Pi0Choice::Kind::UniformTransient: return "uniform_transient";
    case Pi0Choice::Kind::Point: return "point:S" + std::to_string(p.state + 1);
    case Pi0Choice::Kind::Vector: return p.weights;
  }
  return nullptr;
}

inline nlohmann::json emit(const PipelineConfig& c) {
  using json = nlohmann::json;
  json bounds = json::object();
  for (std::size_t i = 0; i < kNumParams; ++i) {
    bounds[std::string(kParamInfo[i].name)] = {c.ensemble.bounds[i].lo, c.ensemble.bounds[i].hi};
  }
  const auto& l = c.ensemble.layout;
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["ensemble"] = {{"n_params", c.ensemble.n_params},
                   {"n_seeds", c.ensemble.n_seeds},
                   {"n_steps", c.ensemble.n_steps},
                   {"grid_size", c.ensemble.grid_size},
                   {"bounds", bounds},
                   {"layout",
                    {{"tumor_fraction", l.tumor_fraction},
                     {"immune_fraction", l.immune_fraction},
                     {"naive_share", l.naive_share},
                     {"effector_share", l.effector_share},
                     {"macrophage_share", l.macrophage_share},
                     {"jitter", l.jitter}}},
                   {"write_trajectories", c.write_trajectories}};
  j["drug"] = {{"n_params", c.drug_n_params},
               {"n_seeds", c.drug_n_seeds},
               {"r_exh", c.drug_r_exh ? json(*c.drug_r_exh) : json("range_min")}};
  j["features"] = {{"macrophage_excluded", c.macrophage_excluded},
                   {"window_length", c.window_length},
                   {"write_embedded", c.write_embedded}};
  j["landscape"] = {{"n_states", c.n_states},
                    {"direct_limit", c.direct_limit},
                    {"mini_centroids", c.mini_centroids},
                    {"kmeans_iterations", c.kmeans_iterations},
                    {"attractor_share", c.attractor_share},
                    {"basin_k", c.basin_k},
                    {"holdout_fraction", c.holdout_fraction},
                    {"holdout_repeats", c.holdout_repeats}};
  j["msm"] = {{"bootstrap_resamples", c.bootstrap_resamples},
              {"bootstrap_level", c.bootstrap_level},
              {"ck_lags", c.ck_lags},
              {"ck_threshold", c.ck_threshold},
              {"kl_threshold", c.kl_threshold},
              {"ci_width_threshold", c.ci_width_threshold}};
  j["mdp"] = {{"horizon", c.horizon},
              {"cycle", c.cycle},
              {"target_state", "S" + std::to_string(c.target_state + 1)},
              {"pi0", emit_pi0(c.pi0)},
              {"matrices", c.matrices},
              {"fixtures_dir", c.fixtures_dir},
              {"absorbing_override", c.absorbing_override},
              {"n_rollouts", c.n_rollouts}};
  return j;
}

namespace detail {

// Reads known keys from an object section and rejects everything else.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  // Call after the last get/sub.
  void done() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + path(key) + "'");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + path(key) + "' has the wrong type");
    }
  }

  const nlohmann::json* sub(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const {
    return name_.empty() ? key : name_ + "." + key;
  }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline PipelineConfig parse_config(const nlohmann::json& j) {
  PipelineConfig c;
  {
    detail::Section top(j, "");
    top.get("seed", c.seed);
    top.get("output_dir", c.output_dir);
    if (const auto* e = top.sub("ensemble")) {
      detail::Section s(*e, "ensemble");
      s.get("n_params", c.ensemble.n_params);
      s.get("n_seeds", c.ensemble.n_seeds);
      s.get("n_steps", c.ensemble.n_steps);
      s.get("grid_size", c.ensemble.grid_size);
      s.get("write_trajectories", c.write_trajectories);
      if (const auto* b = s.sub("bounds")) {
        detail::Section bs(*b, "ensemble.bounds");
        for (std::size_t i = 0; i < kNumParams; ++i) {
          std::vector<double> pair;
          const std::string name(kParamInfo[i].name);
          bs.get(name, pair);
          if (pair.empty()) continue;
          if (pair.size() != 2) throw ConfigError("bounds for " + name + " must be [lo, hi]");
          c.ensemble.bounds[i] = {pair[0], pair[1]};
        }
        bs.done();
      }
      if (const auto* l = s.sub("layout")) {
        detail::Section ls(*l, "ensemble.layout");
        auto& lay = c.ensemble.layout;
        ls.get("tumor_fraction", lay.tumor_fraction);
        ls.get("immune_fraction", lay.immune_fraction);
        ls.get("naive_share", lay.naive_share);
        ls.get("effector_share", lay.effector_share);
        ls.get("macrophage_share", lay.macrophage_share);
        ls.get("jitter", lay.jitter);
        ls.done();
      }
      s.done();
    }
    if (const auto* d = top.sub("drug")) {
      detail::Section s(*d, "drug");
      s.get("n_params", c.drug_n_params);
      s.get("n_seeds", c.drug_n_seeds);
      if (const auto* r = s.sub("r_exh")) {
        if (r->is_number()) {
          c.drug_r_exh = r->get<double>();
        } else if (!(r->is_string() && r->get<std::string>() == "range_min")) {
          throw ConfigError("drug.r_exh must be a number or \"range_min\"");
        }
      }
      s.done();
    }
    if (const auto* f = top.sub("features")) {
      detail::Section s(*f, "features");
      s.get("macrophage_excluded", c.macrophage_excluded);
      s.get("window_length", c.window_length);
      s.get("write_embedded", c.write_embedded);
      s.done();
    }
    if (const auto* l = top.sub("landscape")) {
      detail::Section s(*l, "landscape");
      s.get("n_states", c.n_states);
      s.get("direct_limit", c.direct_limit);
      s.get("mini_centroids", c.mini_centroids);
      s.get("kmeans_iterations", c.kmeans_iterations);
      s.get("attractor_share", c.attractor_share);
      s.get("basin_k", c.basin_k);
      s.get("holdout_fraction", c.holdout_fraction);
      s.get("holdout_repeats", c.holdout_repeats);
      s.done();
    }
    if (const auto* m = top.sub("msm")) {
      detail::Section s(*m, "msm");
      s.get("bootstrap_resamples", c.bootstrap_resamples);
      s.get("bootstrap_level", c.bootstrap_level);
      s.get("ck_lags", c.ck_lags);
      s.get("ck_threshold", c.ck_threshold);
      s.get("kl_threshold", c.kl_threshold);
      s.get("ci_width_threshold", c.ci_width_threshold);
      s.done();
    }
    if (const auto* m = top.sub("mdp")) {
      detail::Section s(*m, "mdp");
      s.get("horizon", c.horizon);
      s.get("cycle", c.cycle);
      if (const auto* t = s.sub("target_state")) {
        c.target_state = parse_state_label(t->is_string() ? t->get<std::string>() : t->dump());
      }
      if (const auto* p = s.sub("pi0")) c.pi0 = parse_pi0(*p);
      s.get("matrices", c.matrices);
      s.get("fixtures_dir", c.fixtures_dir);
      s.get("absorbing_override", c.absorbing_override);
      s.get("n_rollouts", c.n_rollouts);
      s.done();
    }
    top.done();
  }
  c.ensemble.rng_seed = c.seed;
  validate(c);
  return c;
}

inline PipelineConfig default_config() {
  PipelineConfig c;
  c.ensemble.rng_seed = c.seed;
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("missing config file: " + path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

}  // namespace tmesched
