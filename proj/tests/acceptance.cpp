// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "tmesched/config.hpp"
#include "tmesched/pipeline.hpp"

using namespace tmesched;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = TMESCHED_SOURCE_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

char buf[512];

template <typename... A>
std::string fmt(const char* f, A... a) {
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

TransitionMatrix fixture(const char* name) {
  return io::read_matrix(kSource / "data/fixtures" / (std::string(name) + ".json"));
}

Eigen::RowVectorXd random_simplex(Rng& rng, int n) {
  Eigen::RowVectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = -std::log(1.0 - rng.uniform());
  return v / v.sum();
}

MdpSpec fixture_spec(const char* group) {
  MdpSpec s;
  s.horizon = 646;
  s.untreated = fixture(group);
  s.drug = fixture("P1");
  s.reward = unit_reward(6, 0);
  return s;
}

// ---------------------------------------------------------------------------

Outcome fixture_absorption() {
  const auto q = absorption_probabilities(fixture("P1"), 0).q;
  const double want[] = {1, 1, 0, 0, 0, 0};
  double err = 0.0;
  for (int i = 0; i < 6; ++i) err = std::max(err, std::abs(q[i] - want[i]));
  return {err <= 1e-9, fmt("q = [%.6g %.6g %.6g %.6g %.6g %.6g], max error %.2e", q[0], q[1], q[2], q[3], q[4], q[5], err)};
}

Outcome fixture_absorbing_structure() {
  const auto drug_q = absorption_probabilities(fixture("P1"), 0).q;
  bool ok = true;
  std::string detail;
  Rng rng(202);
  for (const auto& [name, sink] : {std::pair{"P4", 3}, std::pair{"P6", 5}}) {
    const auto p = fixture(name);
    const auto abs = absorbing_states(p);
    ok = ok && abs == std::vector<int>{sink} && p.entries(sink, sink) == 1.0;
    // P^(10^5) by repeated squaring.
    Eigen::MatrixXd pw = Eigen::MatrixXd::Identity(6, 6), base = p.entries;
    for (long long e = 100000; e > 0; e >>= 1) {
      if (e & 1) pw = pw * base;
      base = base * base;
    }
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) worst = std::max(worst, (random_simplex(rng, 6) * pw).dot(drug_q.transpose()));
    ok = ok && worst < 1e-3;
    detail += fmt("%s absorbing {S%d} self %.3f, max Q(1e5) %.2e; ", name, abs.empty() ? 0 : abs[0] + 1,
                  p.entries(sink, sink), worst);
  }
  return {ok, detail};
}

Outcome mdp_dominance() {
  bool ok = true;
  double margin = 1e300;
  std::string order;
  Rng rng(303);
  for (const char* g : {"P4", "P6"}) {
    const auto spec = fixture_spec(g);
    const auto opt = backward_induction(spec).policy;
    const auto fixed = make_fixed_policies(6, 646, 50);
    for (int t = 0; t < 100; ++t) {
      const auto pi0 = random_simplex(rng, 6);
      const double best = evaluate_policy(spec, opt, pi0);
      for (const auto* p : {&fixed.none, &fixed.alternating, &fixed.immediate}) {
        margin = std::min(margin, best - evaluate_policy(spec, *p, pi0));
      }
    }
    const auto pi0 = uniform_over_transient(spec.untreated);
    const double vo = evaluate_policy(spec, opt, pi0), vi = evaluate_policy(spec, fixed.immediate, pi0),
                 va = evaluate_policy(spec, fixed.alternating, pi0), vn = evaluate_policy(spec, fixed.none, pi0);
    ok = ok && vo >= vi - 1e-9 && vi >= va && va >= vn;
    order += fmt("%s opt %.4f imm %.4f alt %.4f none %.4f; ", g, vo, vi, va, vn);
  }
  ok = ok && margin >= -1e-9;
  return {ok, fmt("min margin %.2e; ", margin) + order};
}

// Forward-in-time table filled from k = K down to 0 with plain arrays.
std::vector<double> brute_force_values(const MdpSpec& s) {
  const int n = s.n_states();
  std::vector<std::vector<double>> p0(n, std::vector<double>(n)), p1 = p0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      p0[i][j] = s.untreated.entries(i, j);
      p1[i][j] = s.drug.entries(i, j);
    }
  }
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = s.reward[i];
  for (int k = s.horizon - 1; k >= 0; --k) {
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) {
      double a = 0, b = 0;
      for (int j = 0; j < n; ++j) {
        a += p0[i][j] * v[j];
        b += p1[i][j] * v[j];
      }
      w[i] = a > b ? a : b;
    }
    v = w;
  }
  return v;
}

Outcome backward_induction_oracle() {
  double err = 0.0;
  for (const char* g : {"P4", "P6"}) {
    const auto spec = fixture_spec(g);
    const auto v = backward_induction(spec).value.values.col(0);
    const auto o = brute_force_values(spec);
    for (int i = 0; i < 6; ++i) err = std::max(err, std::abs(v[i] - o[static_cast<std::size_t>(i)]));
  }
  return {err <= 1e-9, fmt("max |V - oracle| %.2e", err)};
}

Eigen::MatrixXd six_state_generator() {
  Eigen::MatrixXd p(6, 6);
  p << 0.50, 0.10, 0.10, 0.10, 0.10, 0.10,
       0.20, 0.40, 0.20, 0.10, 0.05, 0.05,
       0.05, 0.15, 0.60, 0.10, 0.05, 0.05,
       0.10, 0.10, 0.10, 0.40, 0.20, 0.10,
       0.05, 0.05, 0.10, 0.20, 0.50, 0.10,
       0.15, 0.05, 0.05, 0.05, 0.20, 0.50;
  return p;
}

std::vector<StateSequence> sample_sequences(const Eigen::MatrixXd& p, int count, int length, std::uint64_t seed) {
  std::vector<StateSequence> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, stream::kSynthetic, static_cast<std::uint64_t>(i)));
    const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.rows())));
    out.push_back({i, sample_chain(p, start, static_cast<std::size_t>(length), rng)});
  }
  return out;
}

Outcome msm_estimator() {
  const auto gen = six_state_generator();
  const auto seqs = sample_sequences(gen, 50, 1000, 505);
  const auto est = estimate_transition_matrix(seqs, 6);
  const double err = (est.entries - gen).cwiseAbs().maxCoeff();
  const double ck2 = chapman_kolmogorov_test(seqs, est, 2).discrepancy;
  const double ck5 = chapman_kolmogorov_test(seqs, est, 5).discrepancy;
  return {err < 0.02 && ck2 < 0.01 && ck5 < 0.01, fmt("max entry error %.4f, CK(2) %.4f, CK(5) %.4f", err, ck2, ck5)};
}

Outcome bootstrap_sanity() {
  const auto one = sample_sequences(six_state_generator(), 1, 200, 606).front();
  const std::vector<StateSequence> same(11, one);
  const auto b0 = bootstrap_ci(same, 6, 2000, 0.95, 1);
  Eigen::MatrixXd noisy(3, 3);
  noisy << 0.6, 0.3, 0.1,
           0.2, 0.5, 0.3,
           0.3, 0.3, 0.4;
  auto median = [](const Eigen::MatrixXd& w) {
    std::vector<double> v(w.data(), w.data() + w.size());
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const auto b11 = bootstrap_ci(sample_sequences(noisy, 11, 60, 607), 3, 2000, 0.95, 2);
  const auto b44 = bootstrap_ci(sample_sequences(noisy, 44, 60, 607), 3, 2000, 0.95, 3);
  const double m11 = median(b11.width), m44 = median(b44.width);
  const bool finite = b11.width.allFinite() && b44.width.allFinite();
  return {b0.max_width == 0.0 && finite && m44 < m11,
          fmt("identical: max width %.3g; median width 11 seqs %.4f, 44 seqs %.4f", b0.max_width, m11, m44)};
}

Outcome statistical_oracles() {
  Rng rng(707);
  double kw_err = 0.0, auc_err = 0.0;
  for (int t = 0; t < 50; ++t) {
    const int n = 4 + static_cast<int>(rng.below(17));
    const bool ties = t % 2 == 0;
    std::vector<double> v;
    std::vector<int> g;
    for (int i = 0; i < n; ++i) {
      v.push_back(ties ? static_cast<double>(rng.below(5)) : rng.uniform());
      g.push_back(i < 2 ? i : static_cast<int>(rng.below(3)));
    }
    if (std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; })) v[0] += 1.0;
    // Brute-force midranks and the variance form of H.
    std::vector<double> r(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      double less = 0, eq = 0;
      for (int j = 0; j < n; ++j) {
        less += v[static_cast<std::size_t>(j)] < v[static_cast<std::size_t>(i)];
        eq += v[static_cast<std::size_t>(j)] == v[static_cast<std::size_t>(i)];
      }
      r[static_cast<std::size_t>(i)] = less + (eq + 1) / 2;
    }
    const double rbar = (n + 1) / 2.0;
    std::map<int, std::pair<double, double>> grp;
    for (int i = 0; i < n; ++i) {
      grp[g[static_cast<std::size_t>(i)]].first += r[static_cast<std::size_t>(i)];
      grp[g[static_cast<std::size_t>(i)]].second += 1;
    }
    double num = 0, den = 0;
    for (auto& [k, s] : grp) num += s.second * std::pow(s.first / s.second - rbar, 2);
    for (double x : r) den += (x - rbar) * (x - rbar);
    kw_err = std::max(kw_err, std::abs(kruskal_wallis(v, g).h - (n - 1) * num / den));
  }
  for (int t = 0; t < 50; ++t) {
    const int n = 2 + static_cast<int>(rng.below(99));
    std::vector<double> s;
    std::vector<std::uint8_t> pos;
    for (int i = 0; i < n; ++i) {
      s.push_back(t % 2 ? static_cast<double>(rng.below(8)) : rng.uniform());
      pos.push_back(i == 0 ? 1 : i == 1 ? 0 : static_cast<std::uint8_t>(rng.below(2)));
    }
    double wins = 0, pairs = 0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (!pos[static_cast<std::size_t>(i)] || pos[static_cast<std::size_t>(j)]) continue;
        pairs += 1;
        const double a = s[static_cast<std::size_t>(i)], b = s[static_cast<std::size_t>(j)];
        wins += a > b ? 1.0 : a == b ? 0.5 : 0.0;
      }
    }
    auc_err = std::max(auc_err, std::abs(*roc_auc(s, pos) - wins / pairs));
  }
  return {kw_err <= 1e-9 && auc_err <= 1e-12, fmt("max KW error %.2e, max AUC error %.2e", kw_err, auc_err)};
}

std::optional<pipeline::Landscape> desk_landscape;
PipelineConfig desk_cfg;

Outcome desk_reproduction() {
  desk_cfg = load_config(kSource / "configs/desk.json");
  const auto batch = pipeline::simulate_batch(desk_cfg, false);
  desk_landscape = pipeline::build_landscape(desk_cfg, batch.features);
  const auto& L = *desk_landscape;
  const std::set<int> used(L.clustering.labels.begin(), L.clustering.labels.end());
  const auto params = pipeline::aligned_parameters(batch.plan, L.sequences);
  const auto kw = pipeline::screen_parameters(params, L.terminal);
  const std::set<std::string> top2 = {kw[0].parameter, kw[1].parameter};
  const double loo = loo_cv(pipeline::basin_model(params, L.terminal, desk_cfg.basin_k)).accuracy;
  const bool ok = used.size() == 6 && top2 == std::set<std::string>{"r_exh", "r_adh"} && loo >= 0.80;
  return {ok, fmt("%zu trajectories, %zu states used; KW top: %s H=%.1f, %s H=%.1f, third %s H=%.1f; LOO %.3f",
                  batch.plan.size(), used.size(), kw[0].parameter.c_str(), kw[0].h, kw[1].parameter.c_str(),
                  kw[1].h, kw[2].parameter.c_str(), kw[2].h, loo)};
}

Outcome snapshot_mapping() {
  if (!desk_landscape) return {false, "desk landscape unavailable"};
  auto cfg = desk_cfg;
  cfg.holdout_fraction = 0.15;
  cfg.holdout_repeats = 50;
  const auto h = pipeline::holdout(cfg, *desk_landscape);
  return {h.mean_auc.mean >= 0.85, fmt("mean one-vs-rest AUC %.4f over %zu repeats, 1-NN accuracy %.3f",
                                       h.mean_auc.mean, h.repeat_mean_auc.size(), h.accuracy)};
}

Outcome replay_consistency() {
  bool ok = true;
  double worst_z = 0.0;
  long long rollouts = 0;
  std::uint64_t stream_index = 0;
  for (const char* g : {"P4", "P6"}) {
    const auto spec = fixture_spec(g);
    const auto starts = pipeline::starts_from_pi0(uniform_over_transient(spec.untreated), 100);
    const auto fixed = make_fixed_policies(6, 646, 50);
    const auto opt = backward_induction(spec).policy;
    for (const auto* p : {&fixed.none, &fixed.alternating, &fixed.immediate, &opt}) {
      const auto r = replay_trajectories(starts, *p, spec, 100, derive_seed(1010, stream::kRollout, stream_index++));
      rollouts = r.rollouts;
      const double diff = std::abs(r.fraction - r.theoretical);
      ok = ok && r.rollouts == 10000 && diff <= 3.0 * r.standard_error;
      if (r.standard_error > 0) worst_z = std::max(worst_z, diff / r.standard_error);
    }
  }
  return {ok, fmt("%lld rollouts per strategy and group, worst |z| %.2f", rollouts, worst_z)};
}

Outcome embedding_and_features() {
  Rng rng(1111);
  bool shape = true;
  for (int t = 0; t < 50; ++t) {
    const int m = 1 + static_cast<int>(rng.below(15));
    const int w = static_cast<int>(rng.below(10));
    const int k = 2 * w + 1 + static_cast<int>(rng.below(40));
    ObservationSeries s;
    s.matrix = Eigen::MatrixXd::Random(m, k);
    const auto win = delay_embed(s, w);
    shape = shape && win.size() == static_cast<std::size_t>(k - 2 * w);
    for (const auto& x : win) shape = shape && x.values.size() == m * (2 * w + 1);
  }
  double trans = 0.0, closure = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int g = 5 + static_cast<int>(rng.below(20));
    AgentConfiguration c;
    for (int y = 0; y < g; ++y) {
      for (int x = 0; x < g; ++x) {
        if (rng.uniform() < 0.5) c.agents.push_back({x, y, static_cast<CellType>(rng.below(kNumCellTypes))});
      }
    }
    if (c.agents.empty()) c.agents.push_back({0, 0, CellType::Tumor});
    auto shifted = c;
    const int dx = static_cast<int>(rng.below(static_cast<std::uint64_t>(g)));
    const int dy = static_cast<int>(rng.below(static_cast<std::uint64_t>(g)));
    for (auto& a : shifted.agents) a = {(a.x + dx) % g, (a.y + dy) % g, a.cell_type};
    const auto f = raw_statistics(c, g), h = raw_statistics(shifted, g);
    for (std::size_t i = 0; i < kNumFeatures; ++i) trans = std::max(trans, std::abs(f[i] - h[i]));
    double sum = 0.0;
    for (std::size_t i = 0; i < kNumCellTypes; ++i) sum += f[i];
    closure = std::max(closure, std::abs(sum - 1.0));
  }
  return {shape && trans <= 1e-12 && closure <= 1e-12,
          fmt("shape law %s; max translation difference %.2e; max |sum of proportions - 1| %.2e",
              shape ? "holds" : "violated", trans, closure)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const Criterion criteria[] = {
      {1, "fixture absorption vector", 1, fixture_absorption},
      {2, "fixture absorbing structure and committor decay", 5, fixture_absorbing_structure},
      {3, "MDP dominance and strategy ordering", 10, mdp_dominance},
      {4, "backward induction matches brute-force oracle", 5, backward_induction_oracle},
      {5, "MSM estimator recovers a known chain", 10, msm_estimator},
      {6, "bootstrap sanity", 30, bootstrap_sanity},
      {7, "Kruskal-Wallis and ROC AUC oracles", 5, statistical_oracles},
      {8, "desk-scale directional reproduction", 600, desk_reproduction},
      {9, "snapshot mapping hold-out AUC", 300, snapshot_mapping},
      {10, "replay consistency", 30, replay_consistency},
      {11, "embedding and feature properties", 5, embedding_and_features},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_s;
    while (!o.detail.empty() && (o.detail.back() == ' ' || o.detail.back() == ';')) o.detail.pop_back();
    const bool pass = o.pass && in_time;
    failed += pass ? 0 : 1;
    std::printf("%s criterion %d: %s | %s | %.2f s (budget %.0f s)%s\n", pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs, c.budget_s, in_time ? "" : " over budget");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(std::size(criteria)) - failed, std::size(criteria));
  return failed == 0 ? 0 : 1;
}
