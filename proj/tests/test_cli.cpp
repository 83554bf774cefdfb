#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diglm/diglm.hpp"
#include "oracles.hpp"

using namespace diglm;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("diglm_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::vector<std::vector<std::string>> read_csv_rows(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(detail::split_csv_line(line));
  return rows;
}

json moons_config(std::size_t epochs = 30) {
  return {{"seed", 3},
          {"data", {{"generator", "half_moons"}, {"n", 200}, {"noise", 0.1}}},
          {"model",
           {{"flow", {{{"kind", "coupling"}, {"hidden", {16, 16}}, {"repeat", 2}}}},
            {"head", {{"kind", "softmax"}, {"classes", 2}}}}},
          {"train", {{"epochs", epochs}, {"batch_size", 32}, {"learning_rate", 0.005}}}};
}

json ood_config() {
  return {{"seed", 1},
          {"data", {{"generator", "two_gaussians_ood"}, {"n", 200}, {"separation", 20.0}}},
          {"model",
           {{"flow", {{{"kind", "coupling"}, {"hidden", {16}}, {"repeat", 2}}}},
            {"head", {{"kind", "softmax"}, {"classes", 2}}}}},
          {"train", {{"epochs", 20}, {"batch_size", 32}, {"learning_rate", 0.005}}}};
}

json cubic_config() {
  return {{"seed", 0},
          {"data", {{"generator", "gmm_cubic"}, {"n", 250}, {"test_fraction", 0.0}}},
          {"model",
           {{"flow", {{{"kind", "planar"}, {"repeat", 3}}}},
            {"head", {{"kind", "bayes_linear"}}}}},
          {"train", {{"epochs", 40}, {"batch_size", 50}, {"learning_rate", 0.01}}}};
}

FitResult fit_from(const json& j) {
  const auto cfg = parse_config(j);
  const auto data = load_run_data(cfg.data, cfg.seed);
  return fit_model(cfg, data.train, nullptr, cfg.train);
}

const char* cli_path() { return std::getenv("DIGLM_CLI"); }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(cli_path()) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config validation

TEST(Config, UnknownKeysAreRejected) {
  json j = moons_config();
  j["train"]["epocs"] = 5;
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    ASSERT_EQ(e.problems().size(), 1u);
    EXPECT_NE(e.problems()[0].find("train.epocs"), std::string::npos);
  }
}

TEST(Config, EveryProblemIsListed) {
  json j = moons_config();
  j["train"]["batch_size"] = 0;
  j["train"]["learning_rate"] = -1.0;
  j["model"]["head"]["kind"] = "gaussian";
  j["rejection"] = {{"slack_c", -2.0}};
  j["data"]["generator"] = "spirals";
  try {
    parse_config(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string all = e.what();
    for (const char* key : {"train.batch_size", "train.learning_rate", "rejection.slack_c", "data.generator"})
      EXPECT_NE(all.find(key), std::string::npos) << key;
    EXPECT_GE(e.problems().size(), 4u);
  }
}

TEST(Config, HeadMustSuitGenerator) {
  json j = cubic_config();
  j["model"]["head"]["kind"] = "softmax";
  EXPECT_THROW(parse_config(j), ConfigError);
  json k = moons_config();
  k["data"].erase("generator");
  EXPECT_THROW(parse_config(k), ConfigError);
}

TEST(Config, ShippedConfigsParse) {
  std::size_t count = 0;
  for (const auto& entry : fs::directory_iterator(DIGLM_CONFIGS_DIR)) {
    if (entry.path().extension() != ".json") continue;
    EXPECT_NO_THROW(load_config(entry.path())) << entry.path();
    ++count;
  }
  EXPECT_GE(count, 5u);
}

TEST(Config, DefaultsAndSeedPropagation) {
  const auto c = parse_config({{"seed", 9}, {"data", {{"generator", "half_moons"}}}});
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.slack_c, 0.0);
  EXPECT_EQ(c.model.head.kind, "softmax");
  EXPECT_EQ(c.data.n, 500u);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto fit = fit_from(moons_config(5));
  const std::string text = checkpoint_text(fit.trained);
  const auto back = trained_model_from_json(json::parse(text));
  EXPECT_EQ(checkpoint_text(back), text);

  const auto planar = fit_from(cubic_config());
  const std::string ptext = checkpoint_text(planar.trained);
  EXPECT_EQ(checkpoint_text(trained_model_from_json(json::parse(ptext))), ptext);
}

TEST(Checkpoint, RoundTripReproducesOutputsBitForBit) {
  const auto dir = scratch_dir("roundtrip");
  json j = moons_config(5);
  j["model"]["flow"] = {{{"kind", "linear"}}, {{"kind", "coupling"}, {"hidden", {8}}}, {{"kind", "permutation"}}};
  const auto fit = fit_from(j);
  save_checkpoint(dir / "c.json", fit.trained);
  const auto back = load_checkpoint(dir / "c.json");
  Rng rng(4);
  Matrix probe(100, 2);
  for (Eigen::Index i = 0; i < probe.size(); ++i) probe.data()[i] = rng.normal(0.0, 2.0);
  const auto a = model_outputs(fit.trained, probe), b = model_outputs(back, probe);
  EXPECT_EQ(a.log_px, b.log_px);
  for (std::size_t i = 0; i < 100; ++i)
    EXPECT_EQ(std::get<Categorical>(a.predictions[i]).probs, std::get<Categorical>(b.predictions[i]).probs);
  EXPECT_EQ(back.rule->tau, fit.trained.rule->tau);
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsMalformedDocuments) {
  const auto fit = fit_from(moons_config(1));
  json j = to_json(fit.trained);
  j["format_version"] = 99;
  EXPECT_THROW(trained_model_from_json(j), DataError);
  json k = to_json(fit.trained);
  k["parameters"].erase("head");
  EXPECT_THROW(trained_model_from_json(k), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/checkpoint.json"), IoError);
}

TEST(Checkpoint, ZeroEpochsKeepsInitialization) {
  const auto cfg = parse_config(moons_config(0));
  const auto fit = fit_from(moons_config(0));
  Rng model_rng = Rng(cfg.seed).split("model");
  const auto init = build_model(cfg.model, 2, model_rng);
  EXPECT_EQ(flatten_params(fit.trained.model), flatten_params(init));
  EXPECT_EQ(fit.trace.size(), 1u);
}

TEST(Checkpoint, RestartsKeepTheBestFinalObjective) {
  json j = moons_config(5);
  const auto one = fit_from(j);
  j["train"]["restarts"] = 3;
  const auto three = fit_from(j);
  EXPECT_GE(three.trace.back().objective, one.trace.back().objective);
  j["train"]["restarts"] = 0;
  EXPECT_THROW(parse_config(j), ConfigError);
}

// ---------------------------------------------------------------------------
// Commands

TEST(Commands, TrainIsDeterministic) {
  const auto d1 = scratch_dir("det1"), d2 = scratch_dir("det2");
  const auto cfg = parse_config(moons_config(10));
  std::ostringstream log;
  cmd_train(cfg, d1, log);
  cmd_train(cfg, d2, log);
  for (const char* f : {"checkpoint.json", "trace.csv", "metrics.json"}) EXPECT_EQ(read_file(d1 / f), read_file(d2 / f)) << f;
  EXPECT_FALSE(read_file(d1 / "metrics.json").empty());
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Commands, ToyRegressionDensityIntegratesToOne) {
  const auto fit = fit_from(cubic_config());
  const int n = 40001;
  const double lo = -30.0, hi = 30.0, dx = (hi - lo) / (n - 1);
  Matrix x(n, 1);
  for (int i = 0; i < n; ++i) x(i, 0) = lo + i * dx;
  const Vector lp = model_outputs(fit.trained, x).log_px;
  EXPECT_NEAR(oracle::trapezoid_exp({lp.data(), lp.data() + lp.size()}, dx), 1.0, 0.01);
}

TEST(Commands, EvalReportsBitsPerDimensionAndNoTrainingRejection) {
  const auto dir = scratch_dir("eval");
  const auto cfg = parse_config(moons_config(10));
  const auto data = load_run_data(cfg.data, cfg.seed);
  const auto fit = fit_model(cfg, data.train, nullptr, cfg.train);
  const auto metrics = cmd_eval(fit.trained, {{"train", data.train}}, dir);
  const auto rows = read_csv_rows(dir / "log_px.csv");
  ASSERT_EQ(rows.size(), data.train.size() + 1);
  double sum = 0.0;
  std::size_t rejected = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    sum += std::stod(rows[i][2]);
    rejected += rows[i][3] == "1" ? 1 : 0;
  }
  const double bpd = -sum / static_cast<double>(rows.size() - 1) / (2.0 * std::log(2.0));
  EXPECT_NEAR(metrics["train"]["bits_per_dim"].get<double>(), bpd, 1e-9);
  EXPECT_EQ(rejected, 0u);
  EXPECT_EQ(metrics["train"]["selective"]["rejection_rate"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(dir / "histogram.csv"));
  EXPECT_THROW(cmd_eval(fit.trained, {{"train", data.train.subset({})}}, dir), DataError);
  fs::remove_all(dir);
}

TEST(Commands, ScoreRejectsFarClusterAndKeepsTrainingRows) {
  const auto dir = scratch_dir("score");
  const auto cfg = parse_config(ood_config());
  const auto data = load_run_data(cfg.data, cfg.seed);
  const auto fit = fit_model(cfg, data.train, nullptr, cfg.train);
  cmd_score(fit.trained, *data.ood, dir);
  auto rows = read_csv_rows(dir / "score.csv");
  ASSERT_EQ(rows.size(), data.ood->size() + 1);
  const auto& header = rows[0];
  const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), "reject") - header.begin());
  ASSERT_LT(col, header.size());
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][col], "true");
  cmd_score(fit.trained, data.train, dir);
  rows = read_csv_rows(dir / "score.csv");
  ASSERT_EQ(rows.size(), data.train.size() + 1);
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i][col], "false");
  fs::remove_all(dir);
}

TEST(Commands, SslDegenerateVariantsCoincideAndReportHasTwoRowsPerSeed) {
  const auto dir = scratch_dir("ssl");
  json j = moons_config(5);
  j["train"]["lambda"] = 0.0;
  j["ssl"] = {{"labeled_count", 10}, {"entropy_weight", 0.0}, {"seeds", {0, 1}}};
  const auto cfg = parse_config(j);
  std::ostringstream log;
  const auto summary = cmd_ssl_train(cfg, dir, log);
  EXPECT_EQ(summary["mean_labels_only_error"].get<double>(), summary["mean_ssl_error"].get<double>());
  const auto rows = read_csv_rows(dir / "ssl_report.csv");
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"seed", "variant", "test_error", "test_nll"}));
  EXPECT_EQ(rows[1][1], "labels_only");
  EXPECT_EQ(rows[2][1], "ssl");
  EXPECT_EQ(rows[1][2], rows[2][2]);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.json"));
  fs::remove_all(dir);
}

TEST(Commands, SampleAndInterpolate) {
  const auto fit = fit_from(moons_config(3));
  const std::string empty = sample_csv(fit.trained, 0, 1);
  EXPECT_EQ(empty, "x0,x1\n");
  Vector x1(2), x2(2);
  x1 << 0.3, -0.2;
  x2 << 1.5, 0.7;
  const auto dir = scratch_dir("interp");
  cmd_interpolate(fit.trained, x1, x2, 2, dir);
  const auto rows = read_csv_rows(dir / "interpolation.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"alpha", "x0", "x1"}));
  EXPECT_NEAR(std::stod(rows[1][1]), 0.3, 1e-9);
  EXPECT_NEAR(std::stod(rows[1][2]), -0.2, 1e-9);
  EXPECT_NEAR(std::stod(rows[2][1]), 1.5, 1e-9);
  EXPECT_NEAR(std::stod(rows[2][2]), 0.7, 1e-9);
  EXPECT_THROW(interpolate_csv(fit.trained, x1, x2, 1), ShapeError);
  fs::remove_all(dir);

  const auto planar = fit_from(cubic_config());
  EXPECT_THROW(sample_csv(planar.trained, 5, 0), NotInvertibleError);
  EXPECT_THROW(interpolate_csv(planar.trained, Vector::Zero(1), Vector::Ones(1), 3), NotInvertibleError);
}

TEST(Commands, SampleMomentsMatchTrainingData) {
  json j = {{"seed", 2},
            {"data", {{"generator", "gmm_2d"}, {"n", 1000}, {"test_fraction", 0.0}}},
            {"model",
             {{"flow", {{{"kind", "linear"}}, {{"kind", "coupling"}, {"hidden", {32, 32}}, {"repeat", 4}}}},
              {"head", {{"kind", "softmax"}, {"classes", 3}}}}},
            {"train", {{"epochs", 60}, {"batch_size", 100}, {"learning_rate", 0.005}}}};
  const auto cfg = parse_config(j);
  const auto data = load_run_data(cfg.data, cfg.seed);
  const auto fit = fit_model(cfg, data.train, nullptr, cfg.train);
  const auto text = sample_csv(fit.trained, 4000, 7);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  Matrix s(4000, 2);
  for (Eigen::Index i = 0; std::getline(in, line); ++i) {
    const auto cells = detail::split_csv_line(line);
    s(i, 0) = std::stod(cells[0]);
    s(i, 1) = std::stod(cells[1]);
  }
  const Eigen::RowVector2d mean_s = s.colwise().mean(), mean_d = data.train.features.colwise().mean();
  const Matrix cs = s.rowwise() - mean_s, cd = data.train.features.rowwise() - mean_d;
  const Matrix cov_s = cs.transpose() * cs / 4000.0, cov_d = cd.transpose() * cd / 1000.0;
  EXPECT_LT((mean_s - mean_d).cwiseAbs().maxCoeff(), 0.25);
  EXPECT_LT((cov_s - cov_d).cwiseAbs().maxCoeff(), 0.35);
}

TEST(Commands, GenDataWritesSplits) {
  const auto dir = scratch_dir("gen");
  const auto cfg = parse_config(ood_config());
  const auto counts = cmd_gen_data(cfg.data, cfg.seed, dir);
  EXPECT_EQ(counts["train"].get<std::size_t>() + counts["test"].get<std::size_t>(), 200u);
  EXPECT_EQ(counts["ood"].get<std::size_t>(), 200u);
  EXPECT_EQ(read_csv_rows(dir / "ood.csv")[0], (std::vector<std::string>{"x0", "x1"}));
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Executable: exit codes and end-to-end runs

TEST(Executable, ExitCodes) {
  if (!cli_path()) GTEST_SKIP() << "DIGLM_CLI not set";
  const auto dir = scratch_dir("exit");
  const std::string d = dir.string();

  write_file(dir / "good.json", moons_config(2).dump());
  EXPECT_EQ(run_cli("train --config " + d + "/good.json --out " + d + "/run"), 0);
  EXPECT_TRUE(fs::exists(dir / "run" / "checkpoint.json"));

  json bad = moons_config(2);
  bad["train"]["bogus"] = 1;
  write_file(dir / "bad.json", bad.dump());
  EXPECT_EQ(run_cli("train --config " + d + "/bad.json --out " + d + "/bad"), 2);
  write_file(dir / "broken.json", "{ not json");
  EXPECT_EQ(run_cli("train --config " + d + "/broken.json --out " + d + "/broken"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);

  EXPECT_EQ(run_cli("score --checkpoint " + d + "/run/checkpoint.json --data " + d + "/missing.csv --out " + d + "/s"), 4);
  write_file(dir / "garbled.csv", "x0,x1\n1,2\n3,oops\n");
  EXPECT_EQ(run_cli("score --checkpoint " + d + "/run/checkpoint.json --data " + d + "/garbled.csv --out " + d + "/s"), 4);

  write_file(dir / "huge.csv", "x0,x1,label\n1e200,1,0\n2,1e200,1\n-1e200,3,0\n4,-1e200,1\n");
  json huge = moons_config(2);
  huge["data"] = {{"csv", {{"path", d + "/huge.csv"}, {"label", "label"}}}, {"standardize", false},
                  {"test_fraction", 0.0}};
  write_file(dir / "huge.json", huge.dump());
  EXPECT_EQ(run_cli("train --config " + d + "/huge.json --out " + d + "/huge"), 3);
  fs::remove_all(dir);
}

TEST(Executable, EndToEndCommandsAndDeterminism) {
  if (!cli_path()) GTEST_SKIP() << "DIGLM_CLI not set";
  const auto dir = scratch_dir("e2e");
  const std::string d = dir.string();
  write_file(dir / "ood.json", ood_config().dump());
  ASSERT_EQ(run_cli("train --config " + d + "/ood.json --out " + d + "/a"), 0);
  ASSERT_EQ(run_cli("train --config " + d + "/ood.json --out " + d + "/b"), 0);
  EXPECT_EQ(read_file(dir / "a" / "metrics.json"), read_file(dir / "b" / "metrics.json"));
  EXPECT_EQ(read_file(dir / "a" / "checkpoint.json"), read_file(dir / "b" / "checkpoint.json"));
  const std::string ck = " --checkpoint " + d + "/a/checkpoint.json";
  EXPECT_EQ(run_cli("eval" + ck + " --config " + d + "/ood.json --out " + d + "/eval"), 0);
  EXPECT_TRUE(fs::exists(dir / "eval" / "confidence_accuracy.csv"));
  EXPECT_EQ(run_cli("gen-data --config " + d + "/ood.json --out " + d + "/data"), 0);
  EXPECT_EQ(run_cli("score" + ck + " --data " + d + "/data/ood.csv --out " + d + "/score"), 0);
  const auto rows = read_csv_rows(dir / "score" / "score.csv");
  EXPECT_EQ(rows.size(), 201u);
  EXPECT_EQ(run_cli("sample" + ck + " --n 5 --seed 1 --out " + d + "/sample"), 0);
  EXPECT_EQ(read_csv_rows(dir / "sample" / "samples.csv").size(), 6u);
  EXPECT_EQ(run_cli("interpolate" + ck + " --x1 0,0 --x2 1,1 --steps 4 --out " + d + "/interp"), 0);
  EXPECT_EQ(read_csv_rows(dir / "interp" / "interpolation.csv").size(), 5u);
  EXPECT_EQ(run_cli("eval" + ck + " --data " + d + "/data/train.csv --slack-c 1.5 --out " + d + "/eval2"), 0);
  fs::remove_all(dir);
}
