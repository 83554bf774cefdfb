// diglm: train, evaluate and query hybrid flow + GLM models.
//
// Exit codes: 0 success, 2 config or usage error, 3 numeric divergence,
// 4 I/O error.

#include <cstdint>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diglm/diglm.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitIo = 4;

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<double> slack_c;
  std::string data;
  std::size_t n = 0;
  std::vector<double> x1, x2;
  std::size_t steps = 11;
  std::size_t bins = 30;
};

diglm::RunConfig load_config(const Options& o) {
  auto cfg = diglm::load_config(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.train.seed = *o.seed;
  }
  if (o.slack_c) {
    if (!(*o.slack_c >= 0.0)) throw diglm::ConfigError({"--slack-c must be >= 0"});
    cfg.slack_c = *o.slack_c;
  }
  if (o.n > 0) cfg.data.n = o.n;
  return cfg;
}

std::string out_dir(const Options& o, const diglm::RunConfig* cfg) {
  if (!o.out.empty()) return o.out;
  return cfg ? cfg->output_dir : std::string("out");
}

diglm::TrainedModel load_model(const Options& o) {
  auto tm = diglm::load_checkpoint(o.checkpoint);
  if (o.slack_c) {
    if (!(*o.slack_c >= 0.0)) throw diglm::ConfigError({"--slack-c must be >= 0"});
    if (!tm.rule) throw diglm::DataError("checkpoint has no rejection rule to adjust");
    tm.rule->tau += tm.rule->slack_c - *o.slack_c;
    tm.rule->slack_c = *o.slack_c;
  }
  return tm;
}

// Evaluation data: a CSV given by --data, or the splits regenerated from --config.
std::map<std::string, diglm::Dataset> eval_sources(const Options& o, const diglm::TrainedModel& tm) {
  std::map<std::string, diglm::Dataset> sources;
  if (!o.data.empty()) {
    sources["data"] = diglm::load_csv_for(tm, o.data);
  } else if (!o.config.empty()) {
    const auto cfg = load_config(o);
    auto b = diglm::load_run_data(cfg.data, cfg.seed);
    sources["train"] = std::move(b.train);
    if (!b.test.empty()) sources["test"] = std::move(b.test);
    if (b.ood) sources["ood"] = std::move(*b.ood);
  } else {
    throw diglm::ConfigError({"give --data CSV or --config to choose evaluation data"});
  }
  return sources;
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid invertible-flow generalized linear models"};
  app.require_subcommand(1);
  Options o;

  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Override the config seed"); };
  auto add_slack = [&](CLI::App* c) { c->add_option("--slack-c", o.slack_c, "Rejection slack in nats")->check(CLI::NonNegativeNumber); };

  auto* train = app.add_subcommand("train", "Train a model from a config");
  train->add_option("--config", o.config, "Config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "Output directory");
  add_seed(train);
  add_slack(train);

  auto* eval = app.add_subcommand("eval", "Metrics, per-point log p(x) and histograms");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", o.data, "CSV with the checkpoint's feature columns");
  eval->add_option("--config", o.config, "Regenerate data splits from this config");
  eval->add_option("--out", o.out, "Output directory");
  eval->add_option("--bins", o.bins, "Histogram bins")->check(CLI::PositiveNumber);
  add_seed(eval);
  add_slack(eval);

  auto* score = app.add_subcommand("score", "Per-point log p(x), rejection and safe prediction");
  score->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  score->add_option("--data", o.data, "CSV with the checkpoint's feature columns")->required();
  score->add_option("--out", o.out, "Output directory");
  add_slack(score);

  auto* ssl = app.add_subcommand("ssl-train", "Labels-only versus semi-supervised comparison");
  ssl->add_option("--config", o.config, "Config JSON with an ssl block")->required()->check(CLI::ExistingFile);
  ssl->add_option("--out", o.out, "Output directory");
  add_seed(ssl);
  add_slack(ssl);

  auto* sample = app.add_subcommand("sample", "Draw samples from the learned density");
  sample->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  sample->add_option("--n", o.n, "Number of samples")->required();
  sample->add_option("--out", o.out, "Output directory");
  add_seed(sample);

  auto* interp = app.add_subcommand("interpolate", "Latent-space interpolation between two inputs");
  interp->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  interp->add_option("--x1", o.x1, "First endpoint")->required()->delimiter(',');
  interp->add_option("--x2", o.x2, "Second endpoint")->required()->delimiter(',');
  interp->add_option("--steps", o.steps, "Number of points including endpoints");
  interp->add_option("--out", o.out, "Output directory");

  auto* gen = app.add_subcommand("gen-data", "Write the configured dataset to CSV");
  gen->add_option("--config", o.config, "Config JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--n", o.n, "Override data.n");
  gen->add_option("--out", o.out, "Output directory");
  add_seed(gen);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) {
      const auto cfg = load_config(o);
      diglm::cmd_train(cfg, out_dir(o, &cfg), std::cout);
    } else if (*eval) {
      const auto tm = load_model(o);
      const auto metrics = diglm::cmd_eval(tm, eval_sources(o, tm), out_dir(o, nullptr), o.bins);
      std::cout << metrics.dump(2) << "\n";
    } else if (*score) {
      const auto tm = load_model(o);
      diglm::cmd_score(tm, diglm::load_csv_for(tm, o.data), out_dir(o, nullptr));
    } else if (*ssl) {
      const auto cfg = load_config(o);
      auto run_cfg = cfg;
      if (o.seed && run_cfg.ssl) run_cfg.ssl->seeds = {*o.seed};
      const auto summary = diglm::cmd_ssl_train(run_cfg, out_dir(o, &cfg), std::cout);
      std::cout << summary.dump(2) << "\n";
    } else if (*sample) {
      diglm::cmd_sample(load_model(o), o.n, o.seed.value_or(0), out_dir(o, nullptr));
    } else if (*interp) {
      diglm::cmd_interpolate(load_model(o), to_vector(o.x1), to_vector(o.x2), o.steps, out_dir(o, nullptr));
    } else if (*gen) {
      const auto cfg = load_config(o);
      std::cout << diglm::cmd_gen_data(cfg.data, cfg.seed, out_dir(o, &cfg)).dump(2) << "\n";
    }
  } catch (const diglm::DivergedError& e) {
    std::cerr << "error: " << e.what() << " (epoch " << e.epoch() << ")\n";
    return kExitDiverged;
  } catch (const diglm::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const diglm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const diglm::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const diglm::ParseError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const diglm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitOk;
}
