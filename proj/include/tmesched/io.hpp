#pragma once

// File formats. CSVs are plain comma-separated numeric tables with a header
// row; doubles are written with 17 significant digits. Readers validate the
// header and raise InputError naming the file and the offending column.

#include <Eigen/Dense>
#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "tmesched/core.hpp"
#include "tmesched/features.hpp"
#include "tmesched/landscape.hpp"
#include "tmesched/msm.hpp"
#include "tmesched/sim.hpp"

namespace tmesched::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  return out;
}

inline std::ifstream open_in(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("missing input file: " + path.string());
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  return in;
}

inline json read_json(const fs::path& path) {
  auto in = open_in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

// Field lookup that reports the file and field on failure.
template <typename T>
T field(const json& j, const std::string& key, const fs::path& path) {
  if (!j.is_object() || !j.contains(key)) {
    throw InputError(path.string() + ": missing field '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw InputError(path.string() + ": field '" + key + "' has the wrong type");
  }
}

// -----------------------------------------------------------------------------
// CSV
// -----------------------------------------------------------------------------

inline std::vector<std::string_view> split(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

class CsvReader {
 public:
  // Opens `path` and checks that its header equals `expected` exactly.
  CsvReader(const fs::path& path, const std::vector<std::string>& expected)
      : path_(path), in_(open_in(path)) {
    std::string header;
    if (!std::getline(in_, header)) throw InputError(path_.string() + ": empty file");
    strip_cr(header);
    const auto cols = split(header);
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (i >= cols.size()) {
        throw InputError(path_.string() + ": missing column '" + expected[i] + "'");
      }
      if (cols[i] != expected[i]) {
        throw InputError(path_.string() + ": expected column '" + expected[i] +
                         "' at position " + std::to_string(i + 1) + ", found '" +
                         std::string(cols[i]) + "'");
      }
    }
    if (cols.size() > expected.size()) {
      throw InputError(path_.string() + ": unexpected column '" +
                       std::string(cols[expected.size()]) + "'");
    }
    columns_ = expected;
  }

  // Next row split into fields; false at end of file.
  bool next(std::vector<std::string_view>& fields) {
    while (std::getline(in_, line_)) {
      ++line_no_;
      strip_cr(line_);
      if (line_.empty()) continue;
      fields = split(line_);
      if (fields.size() != columns_.size()) {
        throw InputError(where() + ": expected " + std::to_string(columns_.size()) +
                         " fields, found " + std::to_string(fields.size()));
      }
      return true;
    }
    return false;
  }

  double number(const std::vector<std::string_view>& f, std::size_t col) const {
    double v = 0.0;
    const auto s = f[col];
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
      throw InputError(where() + ": column '" + columns_[col] + "' is not a number: '" +
                       std::string(s) + "'");
    }
    return v;
  }

  long long integer(const std::vector<std::string_view>& f, std::size_t col) const {
    long long v = 0;
    const auto s = f[col];
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
      throw InputError(where() + ": column '" + columns_[col] + "' is not an integer: '" +
                       std::string(s) + "'");
    }
    return v;
  }

  std::string where() const { return path_.string() + ":" + std::to_string(line_no_ + 1); }
  const std::string& column(std::size_t i) const { return columns_[i]; }

 private:
  static void strip_cr(std::string& s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
  }

  fs::path path_;
  std::ifstream in_;
  std::vector<std::string> columns_;
  std::string line_;
  std::size_t line_no_ = 0;
};

inline std::string join_header(const std::vector<std::string>& cols) {
  std::string s;
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i) s += ',';
    s += cols[i];
  }
  return s;
}

inline std::vector<std::string> numbered(std::string_view prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i <= n; ++i) out.push_back(std::string(prefix) + std::to_string(i));
  return out;
}

// -----------------------------------------------------------------------------
// Trajectories and parameter tables
// -----------------------------------------------------------------------------

inline const std::vector<std::string> kTrajectoryColumns = {"step", "x", "y", "cell_type"};

inline void write_trajectory(const fs::path& path, const Trajectory& traj) {
  auto out = open_out(path);
  out << join_header(kTrajectoryColumns) << '\n';
  for (const auto& c : traj) {
    for (const auto& a : c.agents) {
      out << c.step << ',' << a.x << ',' << a.y << ',' << to_token(a.cell_type) << '\n';
    }
  }
}

// Steps without agents do not appear in the file; they come back as empty
// configurations so step indices stay contiguous.
inline Trajectory read_trajectory(const fs::path& path) {
  CsvReader r(path, kTrajectoryColumns);
  Trajectory traj;
  std::vector<std::string_view> f;
  while (r.next(f)) {
    const auto step = r.integer(f, 0);
    if (step < 0 || (!traj.empty() && step < traj.back().step)) {
      throw InputError(r.where() + ": steps must be non-negative and non-decreasing");
    }
    while (traj.empty() || traj.back().step < step) {
      traj.push_back({traj.empty() ? 0 : traj.back().step + 1, {}});
    }
    const auto type = cell_type_from_token(f[3]);
    if (!type) {
      throw InputError(r.where() + ": column 'cell_type' has unknown token '" +
                       std::string(f[3]) + "'");
    }
    traj.back().agents.push_back(
        {static_cast<int>(r.integer(f, 1)), static_cast<int>(r.integer(f, 2)), *type});
  }
  if (traj.empty()) throw InputError(path.string() + ": trajectory has no rows");
  return traj;
}

inline std::vector<std::string> parameter_columns() {
  auto cols = std::vector<std::string>{"trajectory_id", "seed"};
  for (auto& p : numbered("p", kNumParams)) cols.push_back(p);
  return cols;
}

inline json parameter_sidecar(const std::array<Bounds, kNumParams>& bounds) {
  json cols = json::object();
  for (std::size_t i = 0; i < kNumParams; ++i) {
    cols["p" + std::to_string(i + 1)] = {{"name", kParamInfo[i].name},
                                         {"meaning", kParamInfo[i].meaning},
                                         {"lo", bounds[i].lo},
                                         {"hi", bounds[i].hi}};
  }
  return cols;
}

// Writes `<stem>.csv` and its `<stem>.json` sidecar; `extra` is merged into
// the sidecar.
inline void write_parameter_table(const fs::path& csv_path, const std::vector<TrajectoryInfo>& plan,
                                  const std::array<Bounds, kNumParams>& bounds,
                                  const json& extra = json::object()) {
  {
    auto out = open_out(csv_path);
    out << join_header(parameter_columns()) << '\n';
    for (const auto& ti : plan) {
      out << ti.trajectory_id << ',' << ti.seed;
      for (double v : ti.params.values) out << ',' << fmt_double(v);
      out << '\n';
    }
  }
  json side = extra;
  side["columns"] = parameter_sidecar(bounds);
  auto json_path = csv_path;
  write_json(json_path.replace_extension(".json"), side);
}

inline std::vector<TrajectoryInfo> read_parameter_table(const fs::path& path) {
  CsvReader r(path, parameter_columns());
  std::vector<TrajectoryInfo> out;
  std::vector<std::string_view> f;
  while (r.next(f)) {
    TrajectoryInfo ti;
    ti.trajectory_id = static_cast<int>(r.integer(f, 0));
    std::uint64_t seed = 0;
    const auto s = f[1];
    if (std::from_chars(s.data(), s.data() + s.size(), seed).ec != std::errc{}) {
      throw InputError(r.where() + ": column 'seed' is not an unsigned integer");
    }
    ti.seed = seed;
    for (std::size_t i = 0; i < kNumParams; ++i) ti.params[i] = r.number(f, i + 2);
    out.push_back(ti);
  }
  if (out.empty()) throw InputError(path.string() + ": parameter table has no rows");
  return out;
}

// -----------------------------------------------------------------------------
// Features and embeddings
// -----------------------------------------------------------------------------

inline json to_json(const StandardizationTable& t) {
  json z = json::array();
  for (bool b : t.zero_variance) z.push_back(b);
  return {{"mean", std::vector<double>(t.mean.data(), t.mean.data() + t.mean.size())},
          {"std", std::vector<double>(t.stddev.data(), t.stddev.data() + t.stddev.size())},
          {"zero_variance", z}};
}

inline StandardizationTable standardization_from_json(const json& j, const fs::path& path) {
  const auto mean = field<std::vector<double>>(j, "mean", path);
  const auto sd = field<std::vector<double>>(j, "std", path);
  const auto zero = field<std::vector<bool>>(j, "zero_variance", path);
  if (mean.size() != sd.size() || mean.size() != zero.size()) {
    throw InputError(path.string() + ": standardization arrays differ in length");
  }
  StandardizationTable t;
  t.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  t.stddev = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
  t.zero_variance = zero;
  return t;
}

inline json to_json(const FeatureSetSpec& fs_) {
  return fs_.names();
}

inline FeatureSetSpec feature_set_from_json(const json& j, const fs::path& path) {
  if (!j.is_array()) throw InputError(path.string() + ": feature list must be an array");
  FeatureSetSpec s;
  for (const auto& n : j) {
    const auto name = n.get<std::string>();
    const auto it = std::find(kFeatureNames.begin(), kFeatureNames.end(), name);
    if (it == kFeatureNames.end()) {
      throw InputError(path.string() + ": unknown feature '" + name + "'");
    }
    s.features.push_back(static_cast<Feature>(it - kFeatureNames.begin()));
  }
  return s;
}

// Raw (unstandardized) observation series: `step,f1..fM`.
inline void write_features(const fs::path& path, const ObservationSeries& s) {
  auto out = open_out(path);
  auto cols = std::vector<std::string>{"step"};
  for (auto& c : numbered("f", static_cast<std::size_t>(s.matrix.rows()))) cols.push_back(c);
  out << join_header(cols) << '\n';
  for (Eigen::Index k = 0; k < s.matrix.cols(); ++k) {
    out << k;
    for (Eigen::Index i = 0; i < s.matrix.rows(); ++i) out << ',' << fmt_double(s.matrix(i, k));
    out << '\n';
  }
}

inline ObservationSeries read_features(const fs::path& path, std::size_t n_features,
                                       int trajectory_id) {
  auto cols = std::vector<std::string>{"step"};
  for (auto& c : numbered("f", n_features)) cols.push_back(c);
  CsvReader r(path, cols);
  std::vector<std::vector<double>> columns;
  std::vector<std::string_view> f;
  while (r.next(f)) {
    if (r.integer(f, 0) != static_cast<long long>(columns.size())) {
      throw InputError(r.where() + ": column 'step' must count up from 0");
    }
    std::vector<double> col(n_features);
    for (std::size_t i = 0; i < n_features; ++i) col[i] = r.number(f, i + 1);
    columns.push_back(std::move(col));
  }
  if (columns.empty()) throw InputError(path.string() + ": feature file has no rows");
  ObservationSeries s;
  s.trajectory_id = trajectory_id;
  s.matrix.resize(static_cast<Eigen::Index>(n_features), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t k = 0; k < columns.size(); ++k) {
    for (std::size_t i = 0; i < n_features; ++i) {
      s.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = columns[k][i];
    }
  }
  return s;
}

inline void write_embedded(const fs::path& path, const EmbeddedPool& pool) {
  auto out = open_out(path);
  auto cols = std::vector<std::string>{"trajectory_id", "center_step"};
  for (auto& c : numbered("v", static_cast<std::size_t>(pool.data.cols()))) cols.push_back(c);
  out << join_header(cols) << '\n';
  for (Eigen::Index r = 0; r < pool.data.rows(); ++r) {
    out << pool.trajectory_id[static_cast<std::size_t>(r)] << ','
        << pool.center_step[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < pool.data.cols(); ++c) out << ',' << fmt_double(pool.data(r, c));
    out << '\n';
  }
}

// -----------------------------------------------------------------------------
// States, screens, plot data
// -----------------------------------------------------------------------------

inline const std::vector<std::string> kStateColumns = {"trajectory_id", "center_step", "state"};

inline void write_states(const fs::path& path, const std::vector<int>& trajectory_id,
                         const std::vector<int>& center_step, const std::vector<int>& labels) {
  auto out = open_out(path);
  out << join_header(kStateColumns) << '\n';
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out << trajectory_id[i] << ',' << center_step[i] << ',' << labels[i] + 1 << '\n';
  }
}

struct StateTable {
  std::vector<int> trajectory_id;
  std::vector<int> center_step;
  std::vector<int> labels;  // 0-based
};

inline StateTable read_states(const fs::path& path, int n_states) {
  CsvReader r(path, kStateColumns);
  StateTable t;
  std::vector<std::string_view> f;
  while (r.next(f)) {
    const auto s = r.integer(f, 2);
    if (s < 1 || s > n_states) {
      throw InputError(r.where() + ": column 'state' outside 1.." + std::to_string(n_states));
    }
    t.trajectory_id.push_back(static_cast<int>(r.integer(f, 0)));
    t.center_step.push_back(static_cast<int>(r.integer(f, 1)));
    t.labels.push_back(static_cast<int>(s - 1));
  }
  if (t.labels.empty()) throw InputError(path.string() + ": state table has no rows");
  return t;
}

struct KwRow {
  std::string parameter;
  double h = 0.0;
  double p = 1.0;
};

// Rows sorted by H descending; rank is 1-based.
inline void write_kruskal_wallis(const fs::path& path, const std::vector<KwRow>& rows) {
  auto out = open_out(path);
  out << "parameter,H,p,rank\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].parameter << ',' << fmt_double(rows[i].h) << ',' << fmt_double(rows[i].p)
        << ',' << i + 1 << '\n';
  }
}

inline void write_plot(const fs::path& path, const EmbeddedPool& pool, const Eigen::MatrixXd& coords,
                       const std::vector<int>& labels) {
  auto out = open_out(path);
  out << "trajectory_id,center_step,pc1,pc2,state\n";
  for (Eigen::Index r = 0; r < coords.rows(); ++r) {
    out << pool.trajectory_id[static_cast<std::size_t>(r)] << ','
        << pool.center_step[static_cast<std::size_t>(r)] << ',' << fmt_double(coords(r, 0)) << ','
        << fmt_double(coords(r, 1)) << ',' << labels[static_cast<std::size_t>(r)] + 1 << '\n';
  }
}

// -----------------------------------------------------------------------------
// Transition matrices
// -----------------------------------------------------------------------------

inline std::vector<std::string> state_names(int n) {
  std::vector<std::string> out;
  for (int i = 1; i <= n; ++i) out.push_back("S" + std::to_string(i));
  return out;
}

inline json to_json(const TransitionMatrix& m) {
  const int n = m.n_states();
  json j;
  j["states"] = state_names(n);
  j["group"] = m.group;
  j["provenance"] = m.provenance == Provenance::Fixture ? "fixture" : "estimated";
  std::vector<double> e;
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < n; ++k) e.push_back(m.entries(i, k));
  }
  j["entries"] = e;
  if (m.counts) {
    std::vector<std::int64_t> c;
    for (int i = 0; i < n; ++i) {
      for (int k = 0; k < n; ++k) c.push_back((*m.counts)(i, k));
    }
    j["counts"] = c;
  }
  json unvisited = json::array();
  for (int i = 0; i < n; ++i) {
    if (!m.unvisited.empty() && m.unvisited[static_cast<std::size_t>(i)]) {
      unvisited.push_back("S" + std::to_string(i + 1));
    }
  }
  if (!unvisited.empty()) j["unvisited"] = unvisited;
  if (!m.row_sum_before.empty()) j["row_sum_before_normalization"] = m.row_sum_before;
  return j;
}

inline void write_matrix(const fs::path& path, const TransitionMatrix& m) {
  write_json(path, to_json(m));
}

// Fixture matrices are renormalized row-wise on load; estimated ones must
// already be stochastic.
inline TransitionMatrix read_matrix(const fs::path& path) {
  const auto j = read_json(path);
  const auto states = field<std::vector<std::string>>(j, "states", path);
  const auto entries = field<std::vector<double>>(j, "entries", path);
  const auto group = field<std::string>(j, "group", path);
  const auto prov = field<std::string>(j, "provenance", path);
  const auto n = static_cast<Eigen::Index>(states.size());
  if (n == 0) throw InputError(path.string() + ": field 'states' is empty");
  if (entries.size() != static_cast<std::size_t>(n * n)) {
    throw InputError(path.string() + ": field 'entries' has " + std::to_string(entries.size()) +
                     " values, expected " + std::to_string(n * n));
  }
  Eigen::MatrixXd e(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < n; ++k) e(i, k) = entries[static_cast<std::size_t>(i * n + k)];
  }
  if ((e.array() < 0.0).any()) throw InputError(path.string() + ": negative entry in 'entries'");
  TransitionMatrix m;
  if (prov == "fixture") {
    try {
      m = renormalized(e, group, Provenance::Fixture);
    } catch (const InputError& err) {
      throw InputError(path.string() + ": " + err.what());
    }
  } else if (prov == "estimated") {
    m.entries = e;
    m.group = group;
    m.provenance = Provenance::Estimated;
    m.unvisited.assign(static_cast<std::size_t>(n), false);
    try {
      check_stochastic(m.entries, 1e-9);
    } catch (const InputError& err) {
      throw InputError(path.string() + ": " + err.what());
    }
    if (j.contains("counts")) {
      const auto c = field<std::vector<std::int64_t>>(j, "counts", path);
      if (c.size() != entries.size()) throw InputError(path.string() + ": field 'counts' has the wrong length");
      CountMatrix cm(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index k = 0; k < n; ++k) cm(i, k) = c[static_cast<std::size_t>(i * n + k)];
      }
      m.counts = cm;
    }
  } else {
    throw InputError(path.string() + ": field 'provenance' must be 'fixture' or 'estimated'");
  }
  return m;
}

// -----------------------------------------------------------------------------
// MDP tables
// -----------------------------------------------------------------------------

inline void write_policy(const fs::path& path,
                         const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& actions) {
  auto out = open_out(path);
  out << "state,k,action\n";
  for (Eigen::Index s = 0; s < actions.rows(); ++s) {
    for (Eigen::Index k = 0; k < actions.cols(); ++k) {
      out << s + 1 << ',' << k << ',' << static_cast<int>(actions(s, k)) << '\n';
    }
  }
}

inline void write_values(const fs::path& path, const Eigen::MatrixXd& v) {
  auto out = open_out(path);
  out << "state,k,value\n";
  for (Eigen::Index s = 0; s < v.rows(); ++s) {
    for (Eigen::Index k = 0; k < v.cols(); ++k) {
      out << s + 1 << ',' << k << ',' << fmt_double(v(s, k)) << '\n';
    }
  }
}

}  // namespace tmesched::io
