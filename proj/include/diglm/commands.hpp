#pragma once

// The CLI verbs as library functions. Each writes its artifacts under an
// output directory and returns a JSON summary; nothing here parses argv.

#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "diglm/checkpoint.hpp"
#include "diglm/config.hpp"
#include "diglm/pipeline.hpp"
#include "diglm/selective.hpp"

namespace diglm {

namespace fs = std::filesystem;

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json metrics_json(const EvalMetrics& m) {
  return {{"count", m.count},
          {"error_rate", optional_json(m.error_rate)},
          {"rmse", optional_json(m.rmse)},
          {"mean_nll", optional_json(m.mean_nll)},
          {"mean_entropy", m.mean_entropy},
          {"bits_per_dim", m.bits_per_dim},
          {"mean_log_px", m.mean_log_px}};
}

inline json selective_json(const SelectiveReport& r) {
  return {{"count", r.count}, {"rejected", r.rejected}, {"rejection_rate", r.rejection_rate},
          {"safe_metrics", metrics_json(r.metrics)}};
}

/// Reads a CSV whose columns are the checkpoint's feature names; the label
/// column is used when present.
inline Dataset load_csv_for(const TrainedModel& tm, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open data file '" + path.string() + "'");
  std::string header;
  std::getline(in, header);
  bool has_label = false;
  for (const auto& cell : detail::split_csv_line(header))
    if (detail::trim(cell) == tm.label_name) has_label = true;
  CsvSchema schema;
  schema.feature_columns = tm.feature_names;
  if (has_label && tm.label_kind != LabelKind::none) {
    schema.label_column = tm.label_name;
    schema.label_kind = tm.label_kind;
    schema.class_count = tm.class_count;
  }
  return load_csv(path.string(), schema);
}

// ---------------------------------------------------------------------------
// train

inline json cmd_train(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  const auto data = load_run_data(cfg.data, cfg.seed);
  log << "training on " << data.train.size() << " rows (" << data.train.dim() << " features) for "
      << cfg.train.epochs << " epochs\n";
  auto fit = fit_model(cfg, data.train, nullptr, cfg.train);
  const auto& tm = fit.trained;
  ensure_dir(out_dir);
  save_checkpoint(out_dir / "checkpoint.json", tm);
  write_text(out_dir / "trace.csv", trace_csv(fit.trace));

  json metrics;
  metrics["train"] = metrics_json(evaluate(tm, data.train));
  metrics["train_selective"] = selective_json(evaluate_selective(tm, *tm.rule, data.train, tm.dim()));
  if (!data.test.empty()) {
    metrics["test"] = metrics_json(evaluate(tm, data.test));
    metrics["test_selective"] = selective_json(evaluate_selective(tm, *tm.rule, data.test, tm.dim()));
  }
  if (data.ood) metrics["ood_selective"] = selective_json(evaluate_selective(tm, *tm.rule, *data.ood, tm.dim()));
  metrics["tau"] = tm.rule->tau;
  metrics["final_objective"] = tm.digest.final_objective;
  write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
  log << metrics.dump(2) << "\n";
  return metrics;
}

// ---------------------------------------------------------------------------
// eval / score

inline json cmd_eval(const TrainedModel& tm, const std::map<std::string, Dataset>& sources, const fs::path& out_dir,
                     std::size_t bins = 30) {
  if (sources.empty()) throw DataError("eval: no data");
  ensure_dir(out_dir);
  json metrics;
  std::map<std::string, Vector> scores;
  std::ostringstream per_point;
  per_point << "source,index,log_px,rejected\n";
  for (const auto& [name, d] : sources) {
    if (d.empty()) throw DataError("eval: source '" + name + "' is empty");
    tm.check_dim(d.features);
    const auto out = model_outputs(tm, d.features);
    scores[name] = out.log_px;
    json m = metrics_json(metrics_from(out.predictions, d.has_labels() ? d.labels : Vector(), out.log_px, tm.dim()));
    if (tm.rule) m["selective"] = selective_json(evaluate_selective(tm, *tm.rule, d, tm.dim()));
    metrics[name] = m;
    for (Eigen::Index i = 0; i < out.log_px.size(); ++i)
      per_point << name << ',' << i << ',' << format_double(out.log_px[i]) << ','
                << (tm.rule && should_reject(*tm.rule, out.log_px[i]) ? 1 : 0) << '\n';
  }
  write_text(out_dir / "metrics.json", metrics.dump(2) + "\n");
  write_text(out_dir / "log_px.csv", per_point.str());
  std::ostringstream hist;
  write_histogram_csv(hist, histogram_from_scores(scores, bins));
  write_text(out_dir / "histogram.csv", hist.str());

  const auto in_it = sources.count("test") ? sources.find("test") : sources.begin();
  if (tm.rule && sources.count("ood") && in_it->first != "ood" && in_it->second.has_labels() &&
      is_classifier(tm.model.head)) {
    std::ostringstream curve;
    write_curve_csv(curve, confidence_accuracy_curve(tm, *tm.rule, in_it->second, sources.at("ood").features));
    write_text(out_dir / "confidence_accuracy.csv", curve.str());
  }
  return metrics;
}

inline std::string score_csv(const TrainedModel& tm, const Dataset& d) {
  if (d.empty()) throw DataError("score: empty dataset");
  tm.check_dim(d.features);
  if (!tm.rule) throw DataError("score: checkpoint has no rejection rule");
  const auto out = model_outputs(tm, d.features);
  const auto safe = safe_predictions(*tm.rule, out);
  std::ostringstream os;
  const bool cls = is_classifier(tm.model.head);
  const std::size_t c = cls ? head_classes(tm.model.head) : 0;
  os << "index,log_px,reject";
  if (cls) {
    for (std::size_t k = 0; k < c; ++k) os << ",prob_" << k;
    os << ",prediction,entropy";
  } else {
    os << ",mean,variance";
  }
  os << '\n';
  for (std::size_t i = 0; i < safe.size(); ++i) {
    os << i << ',' << format_double(safe[i].log_px) << ',' << (safe[i].rejected ? "true" : "false");
    if (const auto* p = std::get_if<Categorical>(&safe[i].prediction)) {
      Eigen::Index best;
      p->probs.maxCoeff(&best);
      for (Eigen::Index k = 0; k < p->probs.size(); ++k) os << ',' << format_double(p->probs[k]);
      os << ',' << best << ',' << format_double(categorical_entropy(p->probs));
    } else {
      const auto& g = std::get<GaussianPrediction>(safe[i].prediction);
      os << ',' << format_double(g.mean) << ',' << format_double(g.variance);
    }
    os << '\n';
  }
  return os.str();
}

inline void cmd_score(const TrainedModel& tm, const Dataset& d, const fs::path& out_dir) {
  ensure_dir(out_dir);
  write_text(out_dir / "score.csv", score_csv(tm, d));
}

// ---------------------------------------------------------------------------
// ssl-train

struct SslRun {
  std::uint64_t seed = 0;
  double labels_only_error = 0.0;
  double ssl_error = 0.0;
  double labels_only_nll = 0.0;
  double ssl_nll = 0.0;
};

/// Labels-only and semi-supervised fits on the same split for one seed.
inline std::pair<SslRun, TrainedModel> ssl_compare(const RunConfig& cfg, std::uint64_t seed) {
  if (!cfg.ssl) throw ConfigError({"ssl block is required for ssl-train"});
  RunConfig c = cfg;
  c.seed = seed;
  c.train.seed = seed;
  const auto data = load_run_data(c.data, seed);
  if (data.test.empty()) throw ConfigError({"ssl-train needs data.test_fraction > 0 to report test error"});
  Rng split_rng = Rng(seed).split("ssl");
  const auto split = ssl_split(data.train, cfg.ssl->labeled_count, cfg.ssl->stratified, split_rng);

  const auto base = fit_model(c, split.labeled, nullptr, c.train);
  TrainConfig ssl_train = c.train;
  ssl_train.entropy_weight = cfg.ssl->entropy_weight;
  // With both weights at zero the unlabeled terms vanish; the variants coincide.
  const bool uses_unlabeled = ssl_train.effective_lambda(data.train.dim()) > 0.0 || cfg.ssl->entropy_weight > 0.0;
  auto ssl = fit_model(c, split.labeled, uses_unlabeled ? &split.unlabeled : nullptr, ssl_train);

  const auto mb = evaluate(base.trained, data.test);
  const auto ms = evaluate(ssl.trained, data.test);
  SslRun run{seed, mb.error_rate.value_or(0.0), ms.error_rate.value_or(0.0), mb.mean_nll.value_or(0.0),
             ms.mean_nll.value_or(0.0)};
  return {run, std::move(ssl.trained)};
}

inline json cmd_ssl_train(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  if (!cfg.ssl) throw ConfigError({"ssl block is required for ssl-train"});
  ensure_dir(out_dir);
  std::ostringstream report;
  report << "seed,variant,test_error,test_nll\n";
  json summary;
  double sum_base = 0.0, sum_ssl = 0.0;
  for (std::size_t i = 0; i < cfg.ssl->seeds.size(); ++i) {
    auto [run, model] = ssl_compare(cfg, cfg.ssl->seeds[i]);
    report << run.seed << ",labels_only," << format_double(run.labels_only_error) << ','
           << format_double(run.labels_only_nll) << '\n';
    report << run.seed << ",ssl," << format_double(run.ssl_error) << ',' << format_double(run.ssl_nll) << '\n';
    log << "seed " << run.seed << ": labels-only error " << run.labels_only_error << ", ssl error " << run.ssl_error
        << "\n";
    sum_base += run.labels_only_error;
    sum_ssl += run.ssl_error;
    if (i == 0) save_checkpoint(out_dir / "checkpoint.json", model);
  }
  const double n = static_cast<double>(cfg.ssl->seeds.size());
  summary["mean_labels_only_error"] = sum_base / n;
  summary["mean_ssl_error"] = sum_ssl / n;
  summary["seeds"] = cfg.ssl->seeds;
  write_text(out_dir / "ssl_report.csv", report.str());
  write_text(out_dir / "metrics.json", summary.dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// sample / interpolate / gen-data

inline std::string header_line(const std::vector<std::string>& names, const char* lead = nullptr) {
  std::string h = lead ? std::string(lead) : std::string();
  for (const auto& n : names) h += (h.empty() ? "" : ",") + n;
  return h + "\n";
}

inline std::string sample_csv(const TrainedModel& tm, std::size_t n, std::uint64_t seed) {
  if (!tm.model.flow.invertible()) throw NotInvertibleError("sample: flow contains a planar layer and has no inverse");
  Rng rng = Rng(seed).split("sample");
  Matrix z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(tm.dim()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) = tm.model.prior.sample(rng).transpose();
  const Matrix x = tm.input.inverse_transform(tm.model.flow.inverse(z));
  std::ostringstream os;
  os << header_line(tm.feature_names);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) os << (j ? "," : "") << format_double(x(i, j));
    os << '\n';
  }
  return os.str();
}

inline void cmd_sample(const TrainedModel& tm, std::size_t n, std::uint64_t seed, const fs::path& out_dir) {
  const auto text = sample_csv(tm, n, seed);
  ensure_dir(out_dir);
  write_text(out_dir / "samples.csv", text);
}

/// `steps` points on the latent segment from x1 (alpha = 1) to x2 (alpha = 0).
inline std::string interpolate_csv(const TrainedModel& tm, const Vector& x1, const Vector& x2, std::size_t steps) {
  if (!tm.model.flow.invertible())
    throw NotInvertibleError("interpolate: flow contains a planar layer and has no inverse");
  if (steps < 2) throw ShapeError("interpolate: steps must be >= 2");
  if (static_cast<std::size_t>(x1.size()) != tm.dim() || static_cast<std::size_t>(x2.size()) != tm.dim())
    throw ShapeError("interpolate: endpoints must have " + std::to_string(tm.dim()) + " coordinates");
  std::vector<double> alphas(steps);
  for (std::size_t i = 0; i < steps; ++i) alphas[i] = 1.0 - static_cast<double>(i) / static_cast<double>(steps - 1);
  const Vector s1 = tm.input.transform(x1.transpose()).row(0).transpose();
  const Vector s2 = tm.input.transform(x2.transpose()).row(0).transpose();
  const auto path = interpolate_latent(tm.model.flow, s1, s2, alphas);
  std::ostringstream os;
  os << header_line(tm.feature_names, "alpha");
  for (std::size_t i = 0; i < steps; ++i) {
    const Vector x = tm.input.inverse_transform(path[i].transpose()).row(0).transpose();
    os << format_double(alphas[i]);
    for (Eigen::Index j = 0; j < x.size(); ++j) os << ',' << format_double(x[j]);
    os << '\n';
  }
  return os.str();
}

inline void cmd_interpolate(const TrainedModel& tm, const Vector& x1, const Vector& x2, std::size_t steps,
                            const fs::path& out_dir) {
  const auto text = interpolate_csv(tm, x1, x2, steps);
  ensure_dir(out_dir);
  write_text(out_dir / "interpolation.csv", text);
}

inline json cmd_gen_data(const DataSpec& spec, std::uint64_t seed, const fs::path& out_dir) {
  const auto data = load_run_data(spec, seed);
  ensure_dir(out_dir);
  json j;
  save_csv((out_dir / "train.csv").string(), data.train);
  j["train"] = data.train.size();
  if (!data.test.empty()) {
    save_csv((out_dir / "test.csv").string(), data.test);
    j["test"] = data.test.size();
  }
  if (data.ood) {
    save_csv((out_dir / "ood.csv").string(), *data.ood);
    j["ood"] = data.ood->size();
  }
  return j;
}

}  // namespace diglm
