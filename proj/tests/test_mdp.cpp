#include <gtest/gtest.h>

#include <cmath>

#include "tmesched/io.hpp"
#include "tmesched/mdp.hpp"

using namespace tmesched;

namespace {

TransitionMatrix fixture(const std::string& name) {
  return io::read_matrix(std::filesystem::path(TMESCHED_SOURCE_DIR) / "data/fixtures" / (name + ".json"));
}

TransitionMatrix wrap(Eigen::MatrixXd m) {
  TransitionMatrix t;
  t.entries = std::move(m);
  t.unvisited.assign(static_cast<std::size_t>(t.entries.rows()), false);
  return t;
}

MdpSpec fixture_spec(const std::string& group, int horizon) {
  MdpSpec s;
  s.horizon = horizon;
  s.untreated = fixture(group);
  s.drug = fixture("P1");
  s.reward = unit_reward(6, 0);
  return s;
}

using Table = std::vector<std::vector<double>>;

// Memoized top-down recursion on plain nested vectors.
struct RecursiveOracle {
  Table p0, p1;
  std::vector<double> reward;
  int horizon;
  std::vector<std::vector<double>> memo;

  RecursiveOracle(const MdpSpec& s) : horizon(s.horizon) {
    const int n = s.n_states();
    p0.assign(n, std::vector<double>(n));
    p1 = p0;
    for (int i = 0; i < n; ++i) {
      reward.push_back(s.reward[i]);
      for (int j = 0; j < n; ++j) {
        p0[i][j] = s.untreated.entries(i, j);
        p1[i][j] = s.drug.entries(i, j);
      }
    }
    memo.assign(horizon + 1, std::vector<double>(n, -1.0));
  }

  double value(int s, int k) {
    if (k == horizon) return reward[s];
    double& m = memo[k][s];
    if (m >= 0.0) return m;
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < p0.size(); ++j) {
      if (p0[s][j] != 0.0) a += p0[s][j] * value(static_cast<int>(j), k + 1);
      if (p1[s][j] != 0.0) b += p1[s][j] * value(static_cast<int>(j), k + 1);
    }
    return m = std::max(a, b);
  }
};

Eigen::RowVectorXd random_simplex(Rng& rng, int n) {
  Eigen::RowVectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = -std::log(1.0 - rng.uniform());
  return v / v.sum();
}

}  // namespace

TEST(BackwardInduction, IdentityTieKeepsNoDrug) {
  MdpSpec s;
  s.horizon = 1;
  s.untreated = s.drug = wrap(Eigen::MatrixXd::Identity(3, 3));
  s.reward = unit_reward(3, 0);
  const auto sol = backward_induction(s);
  EXPECT_EQ(sol.value.values.col(0), s.reward);
  EXPECT_EQ(sol.policy.actions.cast<int>().sum(), 0);
}

TEST(BackwardInduction, DominantDrugAction) {
  MdpSpec s;
  s.horizon = 1;
  s.untreated = wrap(Eigen::MatrixXd::Identity(3, 3));
  Eigen::MatrixXd to_first = Eigen::MatrixXd::Zero(3, 3);
  to_first.col(0).setOnes();
  s.drug = wrap(to_first);
  s.reward = unit_reward(3, 0);
  const auto sol = backward_induction(s);
  EXPECT_EQ(sol.value.values.col(0), Eigen::Vector3d::Ones());
  EXPECT_EQ(sol.policy.action(0, 0), 0);
  EXPECT_EQ(sol.policy.action(1, 0), 1);
  EXPECT_EQ(sol.policy.action(2, 0), 1);
}

TEST(BackwardInduction, MatchesRecursiveOracleOnFixtures) {
  for (const char* g : {"P4", "P6"}) {
    const auto spec = fixture_spec(g, 646);
    const auto sol = backward_induction(spec);
    RecursiveOracle oracle(spec);
    for (int s = 0; s < 6; ++s) EXPECT_NEAR(sol.value.values(s, 0), oracle.value(s, 0), 1e-9) << g;
    EXPECT_EQ(sol.value.values.col(646), spec.reward);
    EXPECT_GE(sol.value.values.minCoeff(), 0.0);
    EXPECT_LE(sol.value.values.maxCoeff(), 1.0 + 1e-12);
  }
}

TEST(BackwardInduction, ShiftInvariantInHorizon) {
  const auto a = backward_induction(fixture_spec("P4", 100));
  const auto b = backward_induction(fixture_spec("P4", 101));
  for (int k = 0; k <= 100; ++k) {
    EXPECT_LT((a.value.values.col(k) - b.value.values.col(k + 1)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(BackwardInduction, RejectsBadSpecs) {
  auto s = fixture_spec("P4", 0);
  EXPECT_THROW(backward_induction(s), ConfigError);
  s.horizon = 3;
  s.reward[2] = 1.5;
  EXPECT_THROW(backward_induction(s), ConfigError);
  s.reward = unit_reward(6, 0);
  s.drug = wrap(Eigen::MatrixXd::Identity(5, 5));
  EXPECT_THROW(backward_induction(s), InputError);
}

TEST(FixedPolicies, AlternatingStartsWithDrug) {
  const auto p = make_fixed_policies(2, 4, 1);
  for (int k = 0; k < 4; ++k) EXPECT_EQ(p.alternating.action(1, k), k % 2 == 0 ? 1 : 0);
  const auto long_cycle = alternating_policy(3, 10, 10);
  EXPECT_EQ(long_cycle.actions, make_fixed_policies(3, 10).immediate.actions);
  EXPECT_EQ(p.none.actions.cast<int>().sum(), 0);
  EXPECT_THROW(alternating_policy(2, 4, 0), ConfigError);
}

TEST(EvaluatePolicy, OneStepUnderGroupFixture) {
  const auto spec = fixture_spec("P4", 1);
  const auto none = make_fixed_policies(6, 1).none;
  EXPECT_NEAR(evaluate_policy(spec, none, unit_reward(6, 0).transpose()), 0.997, 1e-12);
}

TEST(EvaluatePolicy, ZeroRewardGivesZero) {
  auto spec = fixture_spec("P6", 50);
  spec.reward.setZero();
  Rng rng(3);
  EXPECT_EQ(evaluate_policy(spec, make_fixed_policies(6, 50).immediate, random_simplex(rng, 6)), 0.0);
}

TEST(EvaluatePolicy, ImmediateFromS2IsGeometric) {
  const auto spec = fixture_spec("P4", 646);
  const auto v = evaluate_policy(spec, make_fixed_policies(6, 646).immediate, unit_reward(6, 1).transpose());
  const double want = 1.0 - std::pow(0.993 / (0.993 + 0.007), 646);
  EXPECT_NEAR(v, want, 1e-9);
  EXPECT_NEAR(v, 0.989, 1e-3);
}

TEST(EvaluatePolicy, OptimalDominatesFixedSchedules) {
  Rng rng(17);
  for (const char* g : {"P4", "P6"}) {
    const auto spec = fixture_spec(g, 646);
    const auto sol = backward_induction(spec);
    const auto fixed = make_fixed_policies(6, 646, 50);
    for (int t = 0; t < 100; ++t) {
      const auto pi0 = random_simplex(rng, 6);
      const double best = evaluate_policy(spec, sol.policy, pi0);
      EXPECT_NEAR(best, pi0.dot(sol.value.values.col(0).transpose()), 1e-9);
      for (const auto* p : {&fixed.none, &fixed.alternating, &fixed.immediate}) {
        EXPECT_GE(best, evaluate_policy(spec, *p, pi0) - 1e-9);
      }
    }
  }
}

TEST(EvaluatePolicy, StrategyOrderingUnderUniformTransientStart) {
  for (const char* g : {"P4", "P6"}) {
    const auto spec = fixture_spec(g, 646);
    const auto pi0 = uniform_over_transient(spec.untreated);
    const auto fixed = make_fixed_policies(6, 646, 50);
    const double none = evaluate_policy(spec, fixed.none, pi0);
    const double alt = evaluate_policy(spec, fixed.alternating, pi0);
    const double imm = evaluate_policy(spec, fixed.immediate, pi0);
    const double opt = evaluate_policy(spec, backward_induction(spec).policy, pi0);
    EXPECT_GE(opt, imm - 1e-12) << g;
    EXPECT_GE(imm, alt) << g;
    EXPECT_GE(alt, none) << g;
  }
}

TEST(Replay, DeterministicChainIsExact) {
  MdpSpec s;
  s.horizon = 5;
  s.untreated = wrap((Eigen::MatrixXd(3, 3) << 0, 1, 0, 0, 0, 1, 1, 0, 0).finished());
  s.drug = s.untreated;
  s.reward = unit_reward(3, 2);
  const auto r = replay_trajectories({0, 1, 2}, make_fixed_policies(3, 5).none, s, 20, 1);
  EXPECT_EQ(r.rollouts, 60);
  EXPECT_DOUBLE_EQ(r.fraction, r.theoretical);
  EXPECT_DOUBLE_EQ(r.fraction, 1.0 / 3.0);
}

TEST(Replay, WithinThreeStandardErrors) {
  const auto spec = fixture_spec("P6", 646);
  const auto policy = backward_induction(spec).policy;
  std::vector<int> starts;
  for (int i = 0; i < 20; ++i) starts.push_back(i % 5);
  const auto r = replay_trajectories(starts, policy, spec, 100, 8);
  EXPECT_EQ(r.rollouts, 2000);
  EXPECT_LT(std::abs(r.fraction - r.theoretical), 3 * r.standard_error);
  const auto again = replay_trajectories(starts, policy, spec, 100, 8);
  EXPECT_EQ(again.reached, r.reached);
}

TEST(Replay, DrugFromS2ApproachesGeometricLimit) {
  const auto spec = fixture_spec("P4", 646);
  const auto r = replay_trajectories({1}, make_fixed_policies(6, 646).immediate, spec, 2000, 4);
  EXPECT_NEAR(r.theoretical, 1.0 - std::pow(0.993, 646), 1e-4);
  EXPECT_LT(std::abs(r.fraction - r.theoretical), 3 * r.standard_error + 1e-12);
}
