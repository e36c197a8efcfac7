#include <gtest/gtest.h>

#include <fstream>

#include "tmesched/config.hpp"
#include "tmesched/io.hpp"

using namespace tmesched;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = TMESCHED_SOURCE_DIR;

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("tmesched_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

  fs::path dir_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Config, ShippedConfigsRoundTrip) {
  for (const char* name : {"default.json", "desk.json"}) {
    const auto path = kSource / "configs" / name;
    const auto cfg = load_config(path);
    EXPECT_EQ(parse_config(emit(cfg)), cfg) << name;
    EXPECT_EQ(emit(cfg).dump(2) + "\n", slurp(path)) << name;
  }
  EXPECT_EQ(load_config(kSource / "configs/default.json"), default_config());
}

TEST(Config, DeskConfigIsTheReducedEnsemble) {
  const auto c = load_config(kSource / "configs/desk.json");
  EXPECT_EQ(c.ensemble.n_params, 20);
  EXPECT_EQ(c.ensemble.n_seeds, 2);
  EXPECT_EQ(c.ensemble.n_steps, 200);
  EXPECT_EQ(c.ensemble.grid_size, 60);
  EXPECT_EQ(c.n_states, 6);
}

TEST(Config, DefaultsMatchTheDocumentedPipeline) {
  const auto c = default_config();
  EXPECT_EQ(c.ensemble.n_params, 50);
  EXPECT_EQ(c.ensemble.n_seeds, 3);
  EXPECT_EQ(c.ensemble.n_steps, 646);
  EXPECT_EQ(c.horizon, 646);
  EXPECT_EQ(c.cycle, 50);
  EXPECT_EQ(c.target_state, 0);
  EXPECT_EQ(c.ensemble.rng_seed, c.seed);
}

TEST(Config, UnknownKeysAreRejected) {
  auto j = emit(default_config());
  j["msm"]["lagtime"] = 3;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = emit(default_config());
  j["extra_section"] = {};
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, InvalidValuesAreRejected) {
  auto j = emit(default_config());
  j["features"]["window_length"] = 50;
  EXPECT_THROW(parse_config(j), ConfigError);
  j = emit(default_config());
  j["mdp"]["matrices"] = "learned";
  EXPECT_THROW(parse_config(j), ConfigError);
  j = emit(default_config());
  j["ensemble"]["n_steps"] = "many";
  EXPECT_THROW(parse_config(j), ConfigError);
}

TEST(Config, Pi0Forms) {
  EXPECT_EQ(parse_pi0("uniform_transient").kind, Pi0Choice::Kind::UniformTransient);
  const auto p = parse_pi0("point:S3");
  EXPECT_EQ(p.kind, Pi0Choice::Kind::Point);
  EXPECT_EQ(p.state, 2);
  EXPECT_EQ(emit_pi0(p), "point:S3");
  const auto v = parse_pi0(nlohmann::json::array({0.5, 0.5, 0, 0, 0, 0}));
  EXPECT_EQ(v.weights.size(), 6u);
  EXPECT_THROW(parse_pi0("point:S0"), ConfigError);
  EXPECT_THROW(parse_pi0("everywhere"), ConfigError);
}

TEST(Config, MissingFileIsAConfigError) {
  EXPECT_THROW(load_config("/nonexistent/cfg.json"), ConfigError);
}

TEST_F(TempDir, MalformedConfigIsAConfigError) {
  write(dir_ / "bad.json", "{ \"seed\": ");
  EXPECT_THROW(load_config(dir_ / "bad.json"), ConfigError);
}

TEST_F(TempDir, TrajectoryRoundTripFillsEmptySteps) {
  Trajectory t(3);
  for (int k = 0; k < 3; ++k) t[static_cast<std::size_t>(k)].step = k;
  t[0].agents = {{1, 2, CellType::Tumor}, {3, 4, CellType::M2}};
  t[2].agents = {{0, 0, CellType::TExhausted}};
  io::write_trajectory(dir_ / "t.csv", t);
  EXPECT_EQ(io::read_trajectory(dir_ / "t.csv"), t);
}

TEST_F(TempDir, CsvSchemaErrorNamesTheColumn) {
  write(dir_ / "t.csv", "step,x,z,cell_type\n0,1,2,tumor\n");
  try {
    io::read_trajectory(dir_ / "t.csv");
    FAIL() << "expected an InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos) << e.what();
  }
  write(dir_ / "u.csv", "step,x,y,cell_type\n0,1,2,dragon\n");
  try {
    io::read_trajectory(dir_ / "u.csv");
    FAIL() << "expected an InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("cell_type"), std::string::npos) << e.what();
  }
  write(dir_ / "v.csv", "step,x,y,cell_type\n1,1,2,tumor\n0,1,1,tumor\n");
  EXPECT_THROW(io::read_trajectory(dir_ / "v.csv"), InputError);
  EXPECT_THROW(io::read_trajectory(dir_ / "missing.csv"), InputError);
}

TEST_F(TempDir, MatrixRoundTrip) {
  auto p = estimate_transition_matrix({{0, {0, 1, 1, 0, 2}}}, 3, "2");
  io::write_matrix(dir_ / "m.json", p);
  const auto q = io::read_matrix(dir_ / "m.json");
  EXPECT_EQ(q.entries, p.entries);
  EXPECT_EQ(q.group, "2");
  EXPECT_EQ(*q.counts, *p.counts);
  EXPECT_EQ(q.provenance, Provenance::Estimated);
}

TEST_F(TempDir, MatrixValidation) {
  write(dir_ / "bad.json", R"({"states":["S1","S2"],"entries":[0.5,0.4,0,1],"group":"x","provenance":"estimated"})");
  EXPECT_THROW(io::read_matrix(dir_ / "bad.json"), InputError);
  write(dir_ / "short.json", R"({"states":["S1","S2"],"entries":[1,0,0],"group":"x","provenance":"fixture"})");
  EXPECT_THROW(io::read_matrix(dir_ / "short.json"), InputError);
  write(dir_ / "nofield.json", R"({"states":["S1"],"group":"x","provenance":"fixture"})");
  EXPECT_THROW(io::read_matrix(dir_ / "nofield.json"), InputError);
  // Rounded fixture rows are rescaled.
  write(dir_ / "fx.json", R"({"states":["S1","S2"],"entries":[0.5,0.501,0,1],"group":"x","provenance":"fixture"})");
  const auto m = io::read_matrix(dir_ / "fx.json");
  EXPECT_NEAR(m.entries.row(0).sum(), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(m.row_sum_before[0], 1.001);
}

TEST_F(TempDir, StatesAndFeaturesRoundTrip) {
  const std::vector<int> tid = {0, 0, 1}, center = {25, 26, 25}, labels = {0, 5, 3};
  io::write_states(dir_ / "s.csv", tid, center, labels);
  const auto st = io::read_states(dir_ / "s.csv", 6);
  EXPECT_EQ(st.labels, labels);
  EXPECT_EQ(st.trajectory_id, tid);
  EXPECT_THROW(io::read_states(dir_ / "s.csv", 4), InputError);

  ObservationSeries s;
  s.trajectory_id = 7;
  s.matrix = Eigen::MatrixXd::Random(3, 5);
  io::write_features(dir_ / "f.csv", s);
  const auto back = io::read_features(dir_ / "f.csv", 3, 7);
  EXPECT_EQ(back.matrix, s.matrix);  // 17 significant digits round-trip exactly
}
