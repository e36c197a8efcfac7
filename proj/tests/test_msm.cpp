#include <gtest/gtest.h>

#include <cmath>

#include "tmesched/io.hpp"
#include "tmesched/msm.hpp"

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

Eigen::RowVectorXd random_simplex(Rng& rng, int n) {
  Eigen::RowVectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = -std::log(1.0 - rng.uniform());
  return v / v.sum();
}

std::vector<StateSequence> sample(const Eigen::MatrixXd& p, int count, std::size_t length,
                                  std::uint64_t seed) {
  std::vector<StateSequence> out;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, stream::kSynthetic, static_cast<std::uint64_t>(i)));
    out.push_back({i, sample_chain(p, static_cast<int>(rng.below(static_cast<std::uint64_t>(p.rows()))), length, rng)});
  }
  return out;
}

Eigen::MatrixXd noisy_chain() {
  Eigen::MatrixXd p(3, 3);
  p << 0.6, 0.3, 0.1,
       0.2, 0.5, 0.3,
       0.3, 0.3, 0.4;
  return p;
}

}  // namespace

TEST(Estimate, CountsAndRowNormalization) {
  const auto m = estimate_transition_matrix({{0, {0, 0, 1, 1}}}, 2);
  EXPECT_DOUBLE_EQ(m.entries(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(m.entries(0, 1), 0.5);
  EXPECT_DOUBLE_EQ(m.entries(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(m.entries(1, 1), 1.0);
  EXPECT_EQ((*m.counts)(0, 1), 1);
  EXPECT_FALSE(m.unvisited[1]);
}

TEST(Estimate, UnvisitedRowBecomesIdentity) {
  const auto m = estimate_transition_matrix({{0, {0, 1, 0, 1}}}, 3);
  EXPECT_TRUE(m.unvisited[2]);
  EXPECT_EQ(m.entries.row(2), Eigen::RowVector3d(0, 0, 1));
  check_stochastic(m.entries);
}

TEST(Estimate, LabelOutOfRangeIsAnInputError) {
  EXPECT_THROW(estimate_transition_matrix({{0, {0, 4}}}, 3), InputError);
  EXPECT_THROW(estimate_transition_matrix({}, 3), InputError);
}

TEST(Estimate, ConvergesToTheGenerator) {
  const Eigen::MatrixXd p = noisy_chain();
  const auto m = estimate_transition_matrix(sample(p, 50, 1000, 3), 3);
  EXPECT_LT((m.entries - p).cwiseAbs().maxCoeff(), 0.02);
}

TEST(Estimate, GroupMatricesSplitByTerminal) {
  const std::vector<StateSequence> seqs = {{0, {0, 1}}, {1, {1, 1}}, {2, {1, 0}}};
  const auto g = estimate_group_matrices(seqs, {1, 1, 0}, 2);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g.at(0).group, "1");
  EXPECT_DOUBLE_EQ(g.at(0).entries(1, 0), 1.0);
  EXPECT_DOUBLE_EQ(g.at(1).entries(1, 1), 1.0);
}

TEST(Propagate, TwoCycleAlternates) {
  const auto p = wrap((Eigen::MatrixXd(2, 2) << 0, 1, 1, 0).finished());
  const Eigen::RowVector2d e0(1, 0);
  EXPECT_EQ(propagate(e0, p, 3), Eigen::RowVector2d(0, 1));
  EXPECT_EQ(propagate(e0, p, 4), e0);
  EXPECT_THROW(propagate(Eigen::RowVector2d(0.5, 0.4), p, 1), InputError);
}

TEST(Propagate, ComposesAcrossSteps) {
  const auto p = fixture("P4");
  Rng rng(1);
  const auto pi = random_simplex(rng, 6);
  EXPECT_LT((propagate(pi, p, 30) - propagate(propagate(pi, p, 12), p, 18)).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::MatrixXd pw = matrix_power(p.entries, 500);
  EXPECT_LT((pw.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-9);
}

TEST(Fixtures, RenormalizationIsSmallAndRecorded) {
  for (const char* name : {"P1", "P4", "P6"}) {
    const auto p = fixture(name);
    EXPECT_EQ(p.provenance, Provenance::Fixture);
    check_stochastic(p.entries);
    for (double s : p.row_sum_before) EXPECT_LE(std::abs(s - 1.0), 0.002) << name;
  }
}

TEST(Absorption, DrugFixture) {
  const auto q = absorption_probabilities(fixture("P1"), 0);
  const Eigen::VectorXd want = (Eigen::VectorXd(6) << 1, 1, 0, 0, 0, 0).finished();
  EXPECT_LT((q.q - want).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(q.cannot_reach, (std::vector<int>{2, 3, 4, 5}));
}

TEST(Absorption, IdentityMatrixOnlyTargetReaches) {
  const auto q = absorption_probabilities(wrap(Eigen::MatrixXd::Identity(4, 4)), 2);
  EXPECT_EQ(q.q, Eigen::Vector4d(0, 0, 1, 0));
}

TEST(Absorption, ChainFeedingASingleSink) {
  Eigen::MatrixXd p(3, 3);
  p << 1.0, 0.0, 0.0,
       0.5, 0.5, 0.0,
       0.0, 0.3, 0.7;
  const auto q = absorption_probabilities(wrap(p), 0);
  EXPECT_LT((q.q - Eigen::Vector3d(1, 1, 1)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Absorption, SatisfiesFirstStepEquations) {
  Eigen::MatrixXd p(4, 4);
  p << 1.0, 0.0, 0.0, 0.0,
       0.2, 0.3, 0.4, 0.1,
       0.1, 0.3, 0.2, 0.4,
       0.0, 0.0, 0.0, 1.0;
  const auto q = absorption_probabilities(wrap(p), 0).q;
  for (int i : {1, 2}) EXPECT_NEAR(q[i], p.row(i).dot(q), 1e-12);
  EXPECT_EQ(q[3], 0.0);
  EXPECT_THROW(absorption_probabilities(wrap(p), 1), NumericalError);
}

TEST(Fixtures, GroupFixturesHaveOneAbsorbingState) {
  EXPECT_EQ(absorbing_states(fixture("P4")), std::vector<int>{3});
  EXPECT_EQ(absorbing_states(fixture("P6")), std::vector<int>{5});
}

TEST(Committor, DecaysUnderGroupFixture) {
  const auto q = absorption_probabilities(fixture("P1"), 0).q;
  for (const char* name : {"P4", "P6"}) {
    const auto p = fixture(name);
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
      const auto pi0 = random_simplex(rng, 6);
      const auto c = committor_curve(pi0, p, q, 3000);
      EXPECT_NEAR(c.values.front(), pi0.dot(q.transpose()), 1e-15);
      EXPECT_LT(c.values.back(), c.values.front());
      EXPECT_EQ(c.derivative.size(), 3000u);
    }
  }
}

TEST(Committor, UniformOverTransientSkipsAbsorbing) {
  const auto pi = uniform_over_transient(fixture("P4"));
  EXPECT_DOUBLE_EQ(pi[3], 0.0);
  EXPECT_DOUBLE_EQ(pi[0], 0.2);
  EXPECT_THROW(uniform_over_transient(wrap(Eigen::MatrixXd::Identity(2, 2))), NumericalError);
}

TEST(Bootstrap, IdenticalSequencesGiveZeroWidth) {
  std::vector<StateSequence> seqs(11, StateSequence{0, {0, 1, 2, 1, 0, 0, 2, 2, 1}});
  const auto b = bootstrap_ci(seqs, 3, 200, 0.95, 4);
  EXPECT_EQ(b.max_width, 0.0);
}

TEST(Bootstrap, WidthsShrinkWithMoreSequences) {
  const Eigen::MatrixXd p = noisy_chain();
  auto median_width = [&](int count) {
    const auto b = bootstrap_ci(sample(p, count, 40, 9), 3, 500, 0.95, 2);
    std::vector<double> w(b.width.data(), b.width.data() + b.width.size());
    std::sort(w.begin(), w.end());
    return w[w.size() / 2];
  };
  const double w11 = median_width(11), w44 = median_width(44);
  EXPECT_TRUE(std::isfinite(w11));
  EXPECT_LT(w44, w11);
}

TEST(Bootstrap, DeterministicGivenSeed) {
  const auto seqs = sample(noisy_chain(), 6, 30, 1);
  EXPECT_EQ(bootstrap_ci(seqs, 3, 100, 0.9, 5).width, bootstrap_ci(seqs, 3, 100, 0.9, 5).width);
  EXPECT_THROW(bootstrap_ci({seqs[0]}, 3), InputError);
}

TEST(ChapmanKolmogorov, DeterministicCycleIsExact) {
  const Eigen::MatrixXd cyc = (Eigen::MatrixXd(3, 3) << 0, 1, 0, 0, 0, 1, 1, 0, 0).finished();
  std::vector<StateSequence> seqs;
  for (int i = 0; i < 3; ++i) {
    Rng rng(static_cast<std::uint64_t>(i));
    seqs.push_back({i, sample_chain(cyc, i, 20, rng)});
  }
  const auto p = estimate_transition_matrix(seqs, 3);
  for (int n : {2, 5}) EXPECT_EQ(chapman_kolmogorov_test(seqs, p, n).discrepancy, 0.0);
}

TEST(ChapmanKolmogorov, SmallForAMarkovChainAndReportsExcludedRows) {
  const auto seqs = sample(noisy_chain(), 50, 1000, 21);
  const auto p = estimate_transition_matrix(seqs, 3);
  for (int n : {2, 5}) EXPECT_LT(chapman_kolmogorov_test(seqs, p, n).discrepancy, 0.01);
  const auto sparse = estimate_transition_matrix({{0, {0, 1, 0, 1}}}, 3);
  EXPECT_EQ(chapman_kolmogorov_test({{0, {0, 1, 0, 1}}}, sparse, 2).excluded_rows, std::vector<int>{2});
}

TEST(Kl, KnownValuesAndNonNegativity) {
  EXPECT_NEAR(kl_divergence(Eigen::RowVector2d(1, 0), Eigen::RowVector2d(0.5, 0.5)), std::log(2.0), 1e-15);
  EXPECT_EQ(kl_divergence(Eigen::RowVector2d(0.3, 0.7), Eigen::RowVector2d(0.3, 0.7)), 0.0);
  // Floor keeps zero predictions finite.
  EXPECT_NEAR(kl_divergence(Eigen::RowVector2d(1, 0), Eigen::RowVector2d(0, 1)), -std::log(kKlFloor), 1e-9);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    EXPECT_GE(kl_divergence(random_simplex(rng, 4), random_simplex(rng, 4)), 0.0);
  }
}

TEST(Kl, OccupancyOfTheGeneratingChainIsSmall) {
  const auto p = wrap(noisy_chain());
  const auto seqs = sample(p.entries, 400, 20, 6);
  const auto emp = empirical_occupancy(seqs, 3);
  const auto kl = kl_occupancy(emp, p, emp.front());
  EXPECT_EQ(kl.per_step.size(), 20u);
  EXPECT_EQ(kl.per_step.front(), 0.0);
  EXPECT_LT(kl.max, 0.02);
}

TEST(Quantile, LinearInterpolation) {
  EXPECT_DOUBLE_EQ(quantile_sorted({0, 10}, 0.25), 2.5);
  EXPECT_DOUBLE_EQ(quantile_sorted({1, 2, 3}, 1.0), 3.0);
}
