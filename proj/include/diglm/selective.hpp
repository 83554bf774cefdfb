#pragma once

// Density-threshold rejection: inputs whose log p(x) falls strictly below a
// threshold fitted on the training set get the class prior instead of the
// head's prediction. Also log p(x) histograms and confidence/accuracy curves.
//
// Every function here is generic over the model: anything with an overload
// model_outputs(const M&, const Matrix&) -> ModelOutputs found by lookup.

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "diglm/datagen.hpp"
#include "diglm/error.hpp"
#include "diglm/heads.hpp"
#include "diglm/hybrid.hpp"

namespace diglm {

template <class M>
concept ScoringModel = requires(const M& m, const Matrix& x) {
  { model_outputs(m, x) } -> std::same_as<ModelOutputs>;
};

struct RejectionRule {
  double tau = 0.0;      // log-density threshold, nats
  double slack_c = 0.0;  // nats subtracted from the minimum training log-density
  Vector class_prior;    // fallback distribution for rejected inputs; empty for regression

  void validate() const {
    if (!std::isfinite(tau)) throw ShapeError("RejectionRule: tau must be finite");
    if (!(slack_c >= 0.0)) throw ShapeError("RejectionRule: slack_c must be >= 0");
    if (class_prior.size() > 0) {
      if ((class_prior.array() < 0.0).any()) throw ShapeError("RejectionRule: negative class prior");
      if (std::abs(class_prior.sum() - 1.0) > 1e-12) throw ShapeError("RejectionRule: class prior must sum to 1");
    }
  }
};

/// Normalized label counts; empty input gives an empty prior.
inline Vector class_prior_from_counts(const std::vector<std::size_t>& counts) {
  Vector p(static_cast<Eigen::Index>(counts.size()));
  double total = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) total += static_cast<double>(counts[k]);
  if (!counts.empty() && total <= 0.0) throw DataError("class prior: all label counts are zero");
  for (std::size_t k = 0; k < counts.size(); ++k) p[static_cast<Eigen::Index>(k)] = static_cast<double>(counts[k]) / total;
  return p;
}

/// tau = min_n log p(x_n) - slack_c.
inline RejectionRule rule_from_scores(const Vector& train_log_px, double slack_c,
                                      const std::vector<std::size_t>& label_counts) {
  if (train_log_px.size() == 0) throw DataError("fit_threshold: empty training set");
  if (!(slack_c >= 0.0)) throw ShapeError("fit_threshold: slack_c must be >= 0");
  if (!train_log_px.allFinite()) throw NumericError("fit_threshold: non-finite training log-density", -1);
  RejectionRule r;
  r.slack_c = slack_c;
  r.tau = train_log_px.minCoeff() - slack_c;
  r.class_prior = class_prior_from_counts(label_counts);
  r.validate();
  return r;
}

template <ScoringModel M>
RejectionRule fit_threshold(const M& model, const Matrix& train_x, double slack_c,
                            const std::vector<std::size_t>& label_counts) {
  if (train_x.rows() == 0) throw DataError("fit_threshold: empty training set");
  return rule_from_scores(model_outputs(model, train_x).log_px, slack_c, label_counts);
}

inline bool should_reject(const RejectionRule& rule, double log_px) { return log_px < rule.tau; }

template <ScoringModel M>
bool should_reject(const RejectionRule& rule, const M& model, const Vector& x) {
  return should_reject(rule, model_outputs(model, Matrix(x.transpose())).log_px[0]);
}

struct SafePrediction {
  Prediction prediction;
  double log_px = 0.0;
  bool rejected = false;
};

/// Head prediction for accepted inputs, the rule's class prior for rejected ones.
inline std::vector<SafePrediction> safe_predictions(const RejectionRule& rule, const ModelOutputs& out) {
  std::vector<SafePrediction> res;
  res.reserve(out.predictions.size());
  for (std::size_t i = 0; i < out.predictions.size(); ++i) {
    const double lp = out.log_px[static_cast<Eigen::Index>(i)];
    const bool rej = should_reject(rule, lp);
    if (rej && std::holds_alternative<Categorical>(out.predictions[i])) {
      const auto& c = std::get<Categorical>(out.predictions[i]);
      if (rule.class_prior.size() != c.probs.size())
        throw ShapeError("safe_predict: class prior has " + std::to_string(rule.class_prior.size()) +
                         " entries, head has " + std::to_string(c.probs.size()) + " classes");
      res.push_back({Categorical{rule.class_prior}, lp, true});
    } else {
      res.push_back({out.predictions[i], lp, rej});
    }
  }
  return res;
}

template <ScoringModel M>
std::vector<SafePrediction> safe_predict(const RejectionRule& rule, const M& model, const Matrix& x) {
  return safe_predictions(rule, model_outputs(model, x));
}

template <ScoringModel M>
Categorical safe_predict(const RejectionRule& rule, const M& model, const Vector& x) {
  auto p = safe_predict(rule, model, Matrix(x.transpose())).front().prediction;
  if (!std::holds_alternative<Categorical>(p)) throw ShapeError("safe_predict: needs a classification head");
  return std::get<Categorical>(p);
}

// ---------------------------------------------------------------------------
// Histograms

struct DensityHistogram {
  std::vector<double> bin_edges;  // bins() + 1 sorted edges
  std::map<std::string, std::vector<std::size_t>> counts;

  std::size_t bins() const { return bin_edges.empty() ? 0 : bin_edges.size() - 1; }

  /// Bin index for a value inside the edge range; the last bin is closed.
  std::size_t bin_of(double v) const {
    if (v <= bin_edges.front()) return 0;
    if (v >= bin_edges.back()) return bins() - 1;
    auto it = std::upper_bound(bin_edges.begin(), bin_edges.end(), v);
    return static_cast<std::size_t>(it - bin_edges.begin()) - 1;
  }
};

/// Shared edges spanning the pooled range of every source.
inline DensityHistogram histogram_from_scores(const std::map<std::string, Vector>& sources, std::size_t bins) {
  if (sources.empty()) throw DataError("density_histogram: no sources");
  if (bins < 1) throw ShapeError("density_histogram: bins must be >= 1");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [name, s] : sources) {
    if (s.size() == 0) throw DataError("density_histogram: source '" + name + "' is empty");
    if (!s.allFinite()) throw NumericError("density_histogram: non-finite log-density in '" + name + "'", -1);
    lo = std::min(lo, s.minCoeff());
    hi = std::max(hi, s.maxCoeff());
  }
  if (hi == lo) {
    lo -= 0.5;
    hi += 0.5;
  }
  DensityHistogram h;
  h.bin_edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i)
    h.bin_edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  h.bin_edges.back() = hi;
  for (const auto& [name, s] : sources) {
    auto& c = h.counts[name];
    c.assign(bins, 0);
    for (Eigen::Index i = 0; i < s.size(); ++i) ++c[h.bin_of(s[i])];
  }
  return h;
}

template <ScoringModel M>
DensityHistogram density_histogram(const M& model, const std::map<std::string, Matrix>& sources, std::size_t bins) {
  std::map<std::string, Vector> scores;
  for (const auto& [name, x] : sources) {
    if (x.rows() == 0) throw DataError("density_histogram: source '" + name + "' is empty");
    scores[name] = model_outputs(model, x).log_px;
  }
  return histogram_from_scores(scores, bins);
}

// ---------------------------------------------------------------------------
// Confidence versus accuracy

struct ConfidenceAccuracyCurve {
  std::vector<double> thresholds;
  std::vector<double> coverage;
  std::vector<double> accuracy;  // 1 where nothing is covered
};

inline std::vector<double> default_confidence_thresholds(std::size_t steps = 100) {
  std::vector<double> t(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) t[i] = static_cast<double>(i) / static_cast<double>(steps);
  return t;
}

/// Pools in-set and OOD points; a point is covered at threshold t when its
/// safe prediction's max probability is >= t. Covered OOD points count as errors.
inline ConfidenceAccuracyCurve curve_from_predictions(const std::vector<SafePrediction>& in_preds, const Vector& in_labels,
                                                      const std::vector<SafePrediction>& ood_preds,
                                                      std::vector<double> thresholds) {
  if (in_preds.empty() && ood_preds.empty()) throw DataError("confidence_accuracy_curve: empty pools");
  if (static_cast<Eigen::Index>(in_preds.size()) != in_labels.size())
    throw ShapeError("confidence_accuracy_curve: labels do not match in-set size");
  std::sort(thresholds.begin(), thresholds.end());
  std::vector<double> conf;
  std::vector<char> correct;
  auto add = [&](const SafePrediction& p, std::optional<double> label) {
    if (!std::holds_alternative<Categorical>(p.prediction))
      throw ShapeError("confidence_accuracy_curve: needs a classification head");
    const auto& probs = std::get<Categorical>(p.prediction).probs;
    Eigen::Index best;
    conf.push_back(probs.maxCoeff(&best));
    correct.push_back(label && static_cast<double>(best) == *label ? 1 : 0);
  };
  for (std::size_t i = 0; i < in_preds.size(); ++i) add(in_preds[i], in_labels[static_cast<Eigen::Index>(i)]);
  for (const auto& p : ood_preds) add(p, std::nullopt);

  ConfidenceAccuracyCurve c;
  c.thresholds = thresholds;
  const double total = static_cast<double>(conf.size());
  for (double t : thresholds) {
    std::size_t covered = 0, right = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      if (conf[i] >= t) {
        ++covered;
        right += static_cast<std::size_t>(correct[i]);
      }
    }
    c.coverage.push_back(static_cast<double>(covered) / total);
    c.accuracy.push_back(covered ? static_cast<double>(right) / static_cast<double>(covered) : 1.0);
  }
  return c;
}

template <ScoringModel M>
ConfidenceAccuracyCurve confidence_accuracy_curve(const M& model, const RejectionRule& rule, const Dataset& in_set,
                                                  const Matrix& ood_x,
                                                  std::vector<double> thresholds = default_confidence_thresholds()) {
  if (!in_set.has_labels()) throw DataError("confidence_accuracy_curve: in-set needs labels");
  const auto in_preds = in_set.empty() ? std::vector<SafePrediction>{} : safe_predict(rule, model, in_set.features);
  const auto ood_preds = ood_x.rows() == 0 ? std::vector<SafePrediction>{} : safe_predict(rule, model, ood_x);
  return curve_from_predictions(in_preds, in_set.labels, ood_preds, std::move(thresholds));
}

// ---------------------------------------------------------------------------
// Summary and export

struct SelectiveReport {
  std::size_t count = 0;
  std::size_t rejected = 0;
  double rejection_rate = 0.0;
  EvalMetrics metrics;  // computed on safe predictions
};

template <ScoringModel M>
SelectiveReport evaluate_selective(const M& model, const RejectionRule& rule, const Dataset& data, std::size_t dim) {
  if (data.empty()) throw DataError("evaluate_selective: empty dataset");
  const auto out = model_outputs(model, data.features);
  const auto safe = safe_predictions(rule, out);
  SelectiveReport r;
  r.count = safe.size();
  std::vector<Prediction> preds;
  preds.reserve(safe.size());
  for (const auto& s : safe) {
    r.rejected += s.rejected ? 1 : 0;
    preds.push_back(s.prediction);
  }
  r.rejection_rate = static_cast<double>(r.rejected) / static_cast<double>(r.count);
  r.metrics = metrics_from(preds, data.has_labels() ? data.labels : Vector(), out.log_px, dim);
  return r;
}

inline void write_histogram_csv(std::ostream& os, const DensityHistogram& h) {
  os << "bin_left,bin_right";
  for (const auto& [name, c] : h.counts) os << ",count_" << name;
  os << '\n';
  for (std::size_t b = 0; b < h.bins(); ++b) {
    os << format_double(h.bin_edges[b]) << ',' << format_double(h.bin_edges[b + 1]);
    for (const auto& [name, c] : h.counts) os << ',' << c[b];
    os << '\n';
  }
}

inline void write_curve_csv(std::ostream& os, const ConfidenceAccuracyCurve& c) {
  os << "threshold,coverage,accuracy\n";
  for (std::size_t i = 0; i < c.thresholds.size(); ++i)
    os << format_double(c.thresholds[i]) << ',' << format_double(c.coverage[i]) << ','
       << format_double(c.accuracy[i]) << '\n';
}

}  // namespace diglm
