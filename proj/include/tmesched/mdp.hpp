#pragma once

// Finite-horizon treatment MDP with a binary action (0 = no drug, 1 = drug)
// and terminal-only reward, solved by backward induction.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "tmesched/core.hpp"
#include "tmesched/msm.hpp"

namespace tmesched {

struct MdpSpec {
  int horizon = 646;
  TransitionMatrix untreated;  // action 0
  TransitionMatrix drug;       // action 1
  Eigen::VectorXd reward;      // terminal reward per state, in [0,1]

  int n_states() const { return untreated.n_states(); }
};

inline void validate(const MdpSpec& spec) {
  if (spec.horizon < 1) throw ConfigError("MDP horizon must be >= 1");
  check_stochastic(spec.untreated.entries, 1e-9);
  check_stochastic(spec.drug.entries, 1e-9);
  if (spec.untreated.n_states() != spec.drug.n_states()) {
    throw InputError("untreated and drug matrices differ in state count");
  }
  if (spec.reward.size() != spec.n_states()) {
    throw InputError("reward vector length does not match the state count");
  }
  if ((spec.reward.array() < 0.0).any() || (spec.reward.array() > 1.0).any()) {
    throw ConfigError("terminal rewards must lie in [0,1]");
  }
}

inline Eigen::VectorXd unit_reward(int n_states, int target) {
  Eigen::VectorXd r = Eigen::VectorXd::Zero(n_states);
  r[target] = 1.0;
  return r;
}

enum class PolicyKind { None, Alternating, Immediate, Optimal };

inline std::string policy_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::None: return "none";
    case PolicyKind::Alternating: return "alternating";
    case PolicyKind::Immediate: return "immediate";
    case PolicyKind::Optimal: return "optimal";
  }
  return "unknown";
}

struct PolicySchedule {
  PolicyKind kind = PolicyKind::Optimal;
  int cycle = 0;  // L for alternating schedules
  // actions(s, k) in {0, 1}, k = 0..K-1
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> actions;

  int action(int s, int k) const { return actions(s, k); }
  int horizon() const { return static_cast<int>(actions.cols()); }
};

struct ValueTable {
  Eigen::MatrixXd values;  // V(s, k), k = 0..K
};

struct MdpSolution {
  ValueTable value;
  PolicySchedule policy;
};

// V(s,K) = reward(s); V(s,k) = max_a sum_s' P^a(s,s') V(s',k+1). Equal
// action values resolve to action 0.
inline MdpSolution backward_induction(const MdpSpec& spec) {
  validate(spec);
  const int n = spec.n_states();
  const int horizon = spec.horizon;
  MdpSolution sol;
  sol.value.values.resize(n, horizon + 1);
  sol.value.values.col(horizon) = spec.reward;
  sol.policy.kind = PolicyKind::Optimal;
  sol.policy.actions.resize(n, horizon);
  for (int k = horizon - 1; k >= 0; --k) {
    const Eigen::VectorXd next = sol.value.values.col(k + 1);
    const Eigen::VectorXd v0 = spec.untreated.entries * next;
    const Eigen::VectorXd v1 = spec.drug.entries * next;
    for (int s = 0; s < n; ++s) {
      const bool treat = v1[s] > v0[s];
      sol.policy.actions(s, k) = treat ? 1 : 0;
      sol.value.values(s, k) = treat ? v1[s] : v0[s];
    }
  }
  return sol;
}

inline PolicySchedule constant_policy(int n_states, int horizon, int action, PolicyKind kind) {
  PolicySchedule p;
  p.kind = kind;
  p.actions = decltype(p.actions)::Constant(n_states, horizon, static_cast<std::uint8_t>(action));
  return p;
}

// Drug during the first `cycle` windows of every 2*cycle block.
inline PolicySchedule alternating_policy(int n_states, int horizon, int cycle) {
  if (cycle < 1) throw ConfigError("alternating cycle length must be >= 1");
  PolicySchedule p;
  p.kind = PolicyKind::Alternating;
  p.cycle = cycle;
  p.actions.resize(n_states, horizon);
  for (int k = 0; k < horizon; ++k) {
    p.actions.col(k).setConstant(k % (2 * cycle) < cycle ? 1 : 0);
  }
  return p;
}

struct FixedPolicies {
  PolicySchedule none;
  PolicySchedule alternating;
  PolicySchedule immediate;
};

inline FixedPolicies make_fixed_policies(int n_states, int horizon, int cycle = 50) {
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  return {constant_policy(n_states, horizon, 0, PolicyKind::None),
          alternating_policy(n_states, horizon, cycle),
          constant_policy(n_states, horizon, 1, PolicyKind::Immediate)};
}

// pi(K) . reward under the policy's action-dependent dynamics.
inline double evaluate_policy(const MdpSpec& spec, const PolicySchedule& policy,
                              const Eigen::RowVectorXd& pi0) {
  validate(spec);
  check_distribution(pi0, spec.n_states());
  if (policy.horizon() < spec.horizon || policy.actions.rows() != spec.n_states()) {
    throw InputError("policy does not cover the MDP horizon and state space");
  }
  const int n = spec.n_states();
  Eigen::RowVectorXd pi = pi0;
  Eigen::RowVectorXd next(n);
  for (int k = 0; k < spec.horizon; ++k) {
    next.setZero();
    for (int s = 0; s < n; ++s) {
      if (pi[s] == 0.0) continue;
      const auto& p = policy.action(s, k) ? spec.drug.entries : spec.untreated.entries;
      next += pi[s] * p.row(s);
    }
    pi = next;
  }
  return pi.dot(spec.reward.transpose());
}

struct ReplayResult {
  long long rollouts = 0;
  long long reached = 0;            // rollouts ending in a rewarded state
  double fraction = 0.0;
  double theoretical = 0.0;         // evaluate_policy on the empirical start distribution
  double standard_error = 0.0;      // sqrt(v (1 - v) / n) at the theoretical value
  std::map<int, std::pair<long long, long long>> per_start;  // start -> (reached, rollouts)
};

// Monte Carlo closed-loop rollouts. Rollout r of start i uses the stream
// derived from (seed, i * n_rollouts + r). A rollout counts as reaching the
// target when its terminal state has reward 1.
inline ReplayResult replay_trajectories(const std::vector<int>& initial_states,
                                        const PolicySchedule& policy, const MdpSpec& spec,
                                        int n_rollouts, std::uint64_t seed) {
  validate(spec);
  if (n_rollouts < 1) throw ConfigError("n_rollouts must be >= 1");
  if (initial_states.empty()) throw InputError("replay needs at least one initial state");
  const int n = spec.n_states();
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor untreated = spec.untreated.entries;
  const RowMajor drug = spec.drug.entries;
  ReplayResult out;
  Eigen::RowVectorXd pi0 = Eigen::RowVectorXd::Zero(n);
  for (std::size_t i = 0; i < initial_states.size(); ++i) {
    const int start = initial_states[i];
    if (start < 0 || start >= n) throw InputError("initial state out of range");
    pi0[start] += 1.0;
    auto& tally = out.per_start[start];
    for (int r = 0; r < n_rollouts; ++r) {
      Rng rng(derive_seed(seed, stream::kRollout,
                          static_cast<std::uint64_t>(i) * static_cast<std::uint64_t>(n_rollouts) +
                              static_cast<std::uint64_t>(r)));
      int s = start;
      for (int k = 0; k < spec.horizon; ++k) {
        const RowMajor& p = policy.action(s, k) ? drug : untreated;
        s = static_cast<int>(rng.discrete(
            std::span<const double>(p.data() + static_cast<std::ptrdiff_t>(s) * n,
                                    static_cast<std::size_t>(n))));
      }
      const bool hit = spec.reward[s] >= 1.0;
      out.reached += hit ? 1 : 0;
      tally.first += hit ? 1 : 0;
      ++tally.second;
      ++out.rollouts;
    }
  }
  pi0 /= static_cast<double>(initial_states.size());
  out.fraction = static_cast<double>(out.reached) / static_cast<double>(out.rollouts);
  out.theoretical = evaluate_policy(spec, policy, pi0);
  out.standard_error = std::sqrt(out.theoretical * (1.0 - out.theoretical) /
                                 static_cast<double>(out.rollouts));
  return out;
}

}  // namespace tmesched
