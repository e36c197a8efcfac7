// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 input-data error, 4 numerical-validation failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "tmesched/config.hpp"
#include "tmesched/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitInput = 3;
constexpr int kExitNumerical = 4;

}  // namespace

int main(int argc, char** argv) {
  using namespace tmesched;
  CLI::App app{"Tumor-microenvironment landscape, Markov state model and treatment scheduling pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  bool quiet = false;
  app.add_option("--config", config_path, "pipeline config JSON (defaults apply when omitted)");
  app.add_option("--seed", seed, "master seed, overrides the config");
  app.add_option("--out", out_dir, "output directory, overrides the config");
  app.add_flag("--quiet", quiet, "suppress progress messages");

  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"simulate", "simulate the untreated and drug batches, writing trajectories and parameter tables"},
      {"featurize", "compute spatial feature series from trajectory files"},
      {"embed", "write the standardized delay-embedded windows"},
      {"cluster", "cluster windows into states; assign the drug batch to the nearest state"},
      {"screen-params", "Kruskal-Wallis screen of parameters against terminal attractors"},
      {"basin-map", "2-NN attractor basin classifier with leave-one-out accuracy"},
      {"estimate-msm", "estimate group, pooled and drug transition matrices"},
      {"validate-msm", "bootstrap, Chapman-Kolmogorov and KL validation"},
      {"committor", "absorption vector and group committor curves"},
      {"solve-mdp", "backward induction, policy and value tables, strategy report"},
      {"evaluate-strategies", "expected target probability of each treatment strategy"},
      {"replay", "Monte Carlo closed-loop replay of each strategy"},
      {"map-snapshot", "map static snapshots onto states; hold-out experiment without --input"},
      {"pipeline", "run every stage in order"},
      {"print-config", "print the effective configuration with every default"},
  };
  std::map<std::string, CLI::App*> cmd;
  for (const auto& s : subs) cmd[s.name] = app.add_subcommand(s.name, s.help);

  bool strict = false, fixtures_validation = false;
  cmd["validate-msm"]->add_flag("--strict", strict, "exit 4 when any metric exceeds its threshold");
  cmd["validate-msm"]->add_flag("--fixtures", fixtures_validation,
                                "validate on sequences sampled from the fixture matrices");
  bool use_fixtures = false;
  std::optional<std::string> fixtures_dir;
  for (const char* name : {"committor", "solve-mdp", "evaluate-strategies", "replay"}) {
    cmd[name]->add_flag("--fixtures", use_fixtures, "use the shipped fixture matrices");
  }
  app.add_option("--fixtures-dir", fixtures_dir, "directory holding P1.json, P4.json, P6.json");
  std::optional<std::string> snapshot_input;
  cmd["map-snapshot"]->add_option("--input", snapshot_input, "trajectory-format CSV of snapshots to map");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    PipelineConfig cfg = config_path.empty() ? default_config() : load_config(config_path);
    if (seed) cfg.seed = cfg.ensemble.rng_seed = *seed;
    if (out_dir) cfg.output_dir = *out_dir;
    if (fixtures_dir) cfg.fixtures_dir = *fixtures_dir;
    if (use_fixtures) cfg.matrices = "fixtures";
    validate(cfg);

    pipeline::Context ctx{cfg, {cfg.output_dir}, quiet ? nullptr : &std::cerr};
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "print-config") {
      std::cout << emit(cfg).dump(2) << '\n';
      return 0;
    }

    bool valid = true;
    if (name == "simulate") pipeline::stage_simulate(ctx);
    else if (name == "featurize") pipeline::stage_featurize(ctx);
    else if (name == "embed") pipeline::stage_embed(ctx);
    else if (name == "cluster") pipeline::stage_cluster(ctx);
    else if (name == "screen-params") pipeline::stage_screen(ctx);
    else if (name == "basin-map") pipeline::stage_basin(ctx);
    else if (name == "estimate-msm") pipeline::stage_estimate(ctx);
    else if (name == "validate-msm") valid = pipeline::stage_validate(ctx, fixtures_validation);
    else if (name == "committor") pipeline::stage_committor(ctx);
    else if (name == "solve-mdp") pipeline::stage_solve_mdp(ctx);
    else if (name == "evaluate-strategies") pipeline::stage_evaluate(ctx);
    else if (name == "replay") pipeline::stage_replay(ctx);
    else if (name == "map-snapshot") pipeline::stage_map_snapshot(ctx, snapshot_input);
    else if (name == "pipeline") valid = pipeline::run_all(ctx);
    pipeline::write_run_metadata(ctx, name);

    if (!valid) {
      const auto msg = "validation metrics exceed thresholds (see " + ctx.out.validation().string() + ")";
      if (strict) {
        std::cerr << "error: " << msg << '\n';
        return kExitNumerical;
      }
      ctx.note("warning: " + msg);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kExitInput;
  }
}
