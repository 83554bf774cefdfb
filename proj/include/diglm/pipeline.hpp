#pragma once

// End-to-end plumbing: data loading from a run config, a trained model bundled
// with its standardizers and rejection rule, and the fit routine shared by the
// train and ssl-train commands. Densities and predictions are reported in the
// raw (unstandardized) data space.

#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "diglm/config.hpp"
#include "diglm/datagen.hpp"
#include "diglm/hybrid.hpp"
#include "diglm/selective.hpp"

namespace diglm {

struct DataBundle {
  Dataset train;
  Dataset test;
  std::optional<Dataset> ood;
};

inline DataBundle load_run_data(const DataSpec& spec, std::uint64_t seed) {
  Rng root(seed);
  Rng gen_rng = root.split("data");
  Rng split_rng = root.split("split");
  DataBundle b;
  auto split = [&](const Dataset& all) {
    if (spec.test_fraction > 0.0) {
      auto tt = split_train_test(all, spec.test_fraction, split_rng);
      b.train = std::move(tt.train);
      b.test = std::move(tt.test);
    } else {
      b.train = all;
      b.test = all.subset({});
    }
  };
  if (!spec.csv_path.empty()) {
    split(load_csv(spec.csv_path, spec.schema));
  } else if (spec.generator == "gmm_cubic") {
    GmmCubicOptions o;
    o.noise_free = spec.noise_free;
    o.noise_param_is_std = spec.noise_is_std;
    split(gen_gmm_cubic(spec.n, gen_rng, o));
  } else if (spec.generator == "half_moons") {
    split(gen_half_moons(spec.n, spec.noise, gen_rng));
  } else if (spec.generator == "two_gaussians_ood") {
    auto p = gen_two_gaussians_ood(spec.n, spec.separation, gen_rng);
    split(p.in_set);
    b.ood = std::move(p.ood_set);
  } else if (spec.generator == "gmm_2d") {
    split(gen_gmm_2d(spec.n, gen_rng));
  } else if (spec.generator == "covariate_shift") {
    auto p = gen_covariate_shift(spec.n, spec.n_test ? spec.n_test : spec.n, spec.shift, gen_rng);
    b.train = std::move(p.train);
    b.test = std::move(p.test);
  } else {
    throw ConfigError({"data.generator '" + spec.generator + "' is not a known generator"});
  }
  return b;
}

struct TraceDigest {
  std::string fnv1a64;  // hex digest of the trace CSV text
  double final_objective = 0.0;
  std::size_t epochs = 0;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  os << "epoch,objective,predictive,generative,entropy\n";
  for (const auto& r : trace)
    os << r.epoch << ',' << format_double(r.objective) << ',' << format_double(r.predictive) << ','
       << format_double(r.generative) << ',' << format_double(r.entropy) << '\n';
  return os.str();
}

inline TraceDigest digest_trace(const std::vector<TraceRow>& trace) {
  TraceDigest d;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a64(trace_csv(trace))));
  d.fnv1a64 = buf;
  d.final_objective = trace.empty() ? 0.0 : trace.back().objective;
  d.epochs = trace.empty() ? 0 : trace.back().epoch;
  return d;
}

struct TrainedModel {
  ModelSpec spec;
  HybridModel model;
  Standardizer input;
  std::optional<Standardizer> target;  // real labels only
  std::vector<std::string> feature_names;
  std::string label_name = "y";
  LabelKind label_kind = LabelKind::none;
  std::size_t class_count = 0;
  std::optional<RejectionRule> rule;
  TraceDigest digest;

  std::size_t dim() const { return input.dim(); }

  void check_dim(const Matrix& x) const {
    if (static_cast<std::size_t>(x.cols()) != dim())
      throw ShapeError("data has " + std::to_string(x.cols()) + " features, model expects " + std::to_string(dim()));
  }

  /// Features and real labels mapped into the space the model was trained in.
  Dataset to_model_space(const Dataset& d) const {
    check_dim(d.features);
    Dataset out = d;
    out.features = input.transform(d.features);
    if (target && d.label_kind == LabelKind::real) out.labels = target->transform(Matrix(d.labels)).col(0);
    return out;
  }
};

/// Raw-space outputs: log p(x) includes the standardizer's log-Jacobian and
/// regression predictions are mapped back to the raw label scale.
inline ModelOutputs model_outputs(const TrainedModel& tm, const Matrix& raw_x) {
  tm.check_dim(raw_x);
  ModelOutputs out = model_outputs(tm.model, tm.input.transform(raw_x));
  out.log_px.array() += tm.input.log_abs_det();
  if (tm.target) {
    const double mu = tm.target->mean[0], sd = tm.target->stddev[0];
    for (auto& p : out.predictions)
      if (auto* g = std::get_if<GaussianPrediction>(&p)) {
        g->mean = g->mean * sd + mu;
        g->variance *= sd * sd;
      }
  }
  return out;
}

inline EvalMetrics evaluate(const TrainedModel& tm, const Dataset& raw) {
  if (raw.empty()) throw DataError("evaluate: empty dataset");
  const auto out = model_outputs(tm, raw.features);
  return metrics_from(out.predictions, raw.has_labels() ? raw.labels : Vector(), out.log_px, tm.dim());
}

struct FitResult {
  TrainedModel trained;
  std::vector<TraceRow> trace;
};

inline std::vector<std::size_t> class_counts(const Dataset& d) {
  if (d.label_kind != LabelKind::categorical) return {};
  return d.label_counts();
}

/// Standardize, build, train, fit the rejection rule on the training inputs.
/// `unlabeled` enables the semi-supervised objective.
inline FitResult fit_model(const RunConfig& cfg, const Dataset& labeled, const Dataset* unlabeled,
                           const TrainConfig& train_cfg) {
  if (labeled.empty() && (!unlabeled || unlabeled->empty())) throw DataError("fit: no training data");
  const std::size_t dim = labeled.empty() ? unlabeled->dim() : labeled.dim();
  Matrix all_x = labeled.features;
  if (unlabeled && !unlabeled->empty()) {
    all_x.conservativeResize(labeled.features.rows() + unlabeled->features.rows(), static_cast<Eigen::Index>(dim));
    all_x.bottomRows(unlabeled->features.rows()) = unlabeled->features;
  }

  TrainedModel tm;
  tm.spec = cfg.model;
  tm.input = cfg.data.standardize ? Standardizer::fit(all_x) : Standardizer::identity(dim);
  if (cfg.data.standardize && labeled.label_kind == LabelKind::real && !labeled.empty())
    tm.target = Standardizer::fit(Matrix(labeled.labels));
  tm.feature_names = labeled.feature_names.empty() ? default_feature_names(dim) : labeled.feature_names;
  tm.label_name = labeled.label_name;
  tm.label_kind = labeled.label_kind;
  tm.class_count = labeled.class_count;

  const Dataset lab = tm.to_model_space(labeled);
  std::optional<Dataset> unl;
  if (unlabeled && !unlabeled->empty()) unl = tm.to_model_space(*unlabeled);

  std::optional<TrainResult> result;
  Rng model_root = Rng(cfg.seed).split("model");
  for (std::size_t r = 0; r < std::max<std::size_t>(train_cfg.restarts, 1); ++r) {
    Rng model_rng = r == 0 ? model_root : model_root.split(r);
    HybridModel init = build_model(cfg.model, dim, model_rng);
    if (is_classifier(init.head) && labeled.label_kind == LabelKind::categorical &&
        head_classes(init.head) != labeled.class_count)
      throw ConfigError({"model.head.classes is " + std::to_string(head_classes(init.head)) + " but the data has " +
                         std::to_string(labeled.class_count) + " classes"});
    auto attempt = train(std::move(init), lab.empty() ? nullptr : &lab, unl ? &*unl : nullptr, train_cfg);
    if (!result || attempt.trace.back().objective > result->trace.back().objective) result = std::move(attempt);
  }
  tm.model = std::move(result->model);
  tm.digest = digest_trace(result->trace);
  tm.rule = fit_threshold(tm, all_x, cfg.slack_c, class_counts(labeled));
  return {std::move(tm), std::move(result->trace)};
}

}  // namespace diglm
