// Loads the shipped fixture matrices, computes the absorption vector into S1
// under the drug matrix, and compares the four treatment strategies for each
// escape group.
//
//   ./quickstart [fixtures_dir]

#include <cstdio>
#include <string>

#include "tmesched/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace tmesched;
  const std::string dir = argc > 1 ? argv[1] : "data/fixtures";
  try {
    auto cfg = default_config();
    cfg.matrices = "fixtures";
    cfg.fixtures_dir = dir;
    const auto in = pipeline::fixture_inputs(dir);

    const auto q = absorption_probabilities(in.drug, 0).q;
    std::printf("q =");
    for (Eigen::Index i = 0; i < q.size(); ++i) std::printf(" %.3f", q[i]);
    std::printf("\n\n%-10s %-8s %-12s %-10s %-8s\n", "group", "none", "alternating", "immediate", "optimal");
    for (const auto& [g, p] : in.groups) {
      const auto spec = pipeline::mdp_spec(cfg, in, g);
      const auto pi0 = uniform_over_transient(p);
      const auto set = pipeline::strategies_for(cfg, spec);
      std::printf("S%d-prone ", g + 1);
      for (const auto& [name, policy] : set.all()) std::printf("  %.4f", evaluate_policy(spec, *policy, pi0));
      std::printf("\n");
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
}
