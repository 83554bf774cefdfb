#pragma once

// The hybrid model: an invertible flow whose output feeds a GLM head, giving
// log p(x), log p(y|x) and log p(x, y) from one forward pass; the weighted
// training objective, its exact gradient, the semi-supervised objective, the
// training loop and the evaluation metrics.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diglm/datagen.hpp"
#include "diglm/error.hpp"
#include "diglm/flow.hpp"
#include "diglm/heads.hpp"
#include "diglm/numerics.hpp"
#include "diglm/random.hpp"

namespace diglm {

/// Fixed-order pairwise summation; the result does not depend on how the
/// caller chunked the work, only on element order.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t h = v.size() / 2;
  return pairwise_sum(v.first(h)) + pairwise_sum(v.subspan(h));
}
inline double pairwise_sum(const Vector& v) { return pairwise_sum(as_span(v)); }
inline double pairwise_mean(const Vector& v) { return v.size() ? pairwise_sum(v) / static_cast<double>(v.size()) : 0.0; }

struct HybridModel {
  FlowStack flow;
  LatentPrior prior;
  GlmHead head;
  double lambda_gen = 1.0;  // weight on log p(x) in the training objective
  double dropout_rate = 0.0;

  std::size_t dim() const { return flow.dim(); }

  void validate() const {
    if (prior.dim() != flow.dim()) throw ShapeError("HybridModel: prior dimension differs from flow dimension");
    if (head_dim(head) != flow.dim()) throw ShapeError("HybridModel: head input dimension differs from flow output");
    if (!(lambda_gen >= 0.0)) throw ShapeError("HybridModel: lambda must be >= 0");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ShapeError("HybridModel: dropout rate must be in [0, 1)");
  }

  HybridModel zeros_like() const {
    HybridModel g = *this;
    g.flow = flow.zeros_like();
    g.prior = prior.zeros_like();
    g.head = std::visit([](const auto& h) -> GlmHead { return h.zeros_like(); }, head);
    return g;
  }

  template <class F>
  void visit_params(F&& f) {
    flow.visit_params(f);
    prior.visit_params(f);
    std::visit([&](auto& h) { h.visit_params(f); }, head);
  }
  template <class F>
  void visit_params(F&& f) const {
    flow.visit_params(f);
    prior.visit_params(f);
    std::visit([&](const auto& h) { h.visit_params(f); }, head);
  }
};

/// Everything the model says about a batch of inputs.
struct ModelOutputs {
  Matrix z;
  Vector log_det;
  Vector log_px;
  std::vector<Prediction> predictions;
};

inline ModelOutputs model_outputs(const HybridModel& model, const Matrix& x) {
  auto r = model.flow.forward(x);
  ModelOutputs out;
  out.log_px = model.prior.log_prob(r.z) + r.log_det;
  out.predictions = head_predict_batch(model.head, r.z);
  out.z = std::move(r.z);
  out.log_det = std::move(r.log_det);
  return out;
}

inline Vector model_log_px(const HybridModel& model, const Matrix& x) {
  return log_px(model.flow, model.prior, x);
}

/// log p(y | f(x)) + log p_z(f(x)) + log|df/dx| per row.
inline Vector joint_log_lik(const HybridModel& model, const Matrix& x, const Vector& y) {
  auto r = model.flow.forward(x);
  return head_log_lik(model.head, r.z, y) + model.prior.log_prob(r.z) + r.log_det;
}
inline double joint_log_lik(const HybridModel& model, const Vector& x, double y) {
  return joint_log_lik(model, Matrix(x.transpose()), Vector::Constant(1, y))[0];
}

// ---------------------------------------------------------------------------
// Objectives

struct ObjectiveTerms {
  double predictive = 0.0;  // sum log p(y|x), or the batch evidence for a Bayesian head
  double generative = 0.0;  // sum log p(x) over every input that entered the objective
  double entropy = 0.0;     // sum of predictive entropies over unlabeled inputs
  double total = 0.0;
};

/// Labeled and unlabeled inputs for one evaluation of the semi-supervised objective.
struct SslBatch {
  Matrix labeled_x;
  Vector labeled_y;
  Matrix unlabeled_x;

  bool has_labeled() const { return labeled_x.rows() > 0; }
  bool has_unlabeled() const { return unlabeled_x.rows() > 0; }
};

namespace detail {

inline double predictive_term(const HybridModel& model, const Matrix& z, const Vector& y) {
  if (const auto* b = std::get_if<BayesLinearHead>(&model.head)) return bayes_marginal_log_lik(*b, z, y);
  return pairwise_sum(head_log_lik(model.head, z, y));
}

inline void check_input(const HybridModel& model, const Matrix& x) {
  if (static_cast<std::size_t>(x.cols()) != model.dim())
    throw ShapeError("hybrid: input has " + std::to_string(x.cols()) + " features, model expects " +
                     std::to_string(model.dim()));
}

}  // namespace detail

/// Terms of sum_n [log p(y_n | x_n) + lambda log p(x_n)] plus, for unlabeled
/// inputs, lambda log p(x) - lambda_em H[p(y|x)].
inline ObjectiveTerms ssl_objective_terms(const HybridModel& model, const SslBatch& batch, double lambda_gen,
                                          double lambda_em) {
  if (!batch.has_labeled() && !batch.has_unlabeled()) throw DataError("objective: empty batch");
  ObjectiveTerms t;
  if (batch.has_labeled()) {
    detail::check_input(model, batch.labeled_x);
    auto r = model.flow.forward(batch.labeled_x);
    t.predictive = detail::predictive_term(model, r.z, batch.labeled_y);
    t.generative += pairwise_sum(model.prior.log_prob(r.z) + r.log_det);
  }
  if (batch.has_unlabeled()) {
    detail::check_input(model, batch.unlabeled_x);
    auto r = model.flow.forward(batch.unlabeled_x);
    t.generative += pairwise_sum(model.prior.log_prob(r.z) + r.log_det);
    if (lambda_em != 0.0) {
      const auto* sm = std::get_if<SoftmaxHead>(&model.head);
      if (!sm) throw ShapeError("entropy minimization needs a classification head");
      t.entropy = pairwise_sum(sm->entropy(r.z));
    }
  }
  t.total = t.predictive + lambda_gen * t.generative - lambda_em * t.entropy;
  return t;
}

inline double ssl_objective(const HybridModel& model, const SslBatch& batch, double lambda_gen, double lambda_em) {
  return ssl_objective_terms(model, batch, lambda_gen, lambda_em).total;
}

inline ObjectiveTerms weighted_objective_terms(const HybridModel& model, const Matrix& x, const Vector& y) {
  return ssl_objective_terms(model, SslBatch{x, y, Matrix(0, x.cols())}, model.lambda_gen, 0.0);
}

/// sum_n [log p(y_n | x_n) + lambda log p(x_n)] with lambda = model.lambda_gen.
inline double weighted_objective(const HybridModel& model, const Matrix& x, const Vector& y) {
  return weighted_objective_terms(model, x, y).total;
}
inline double weighted_objective(const HybridModel& model, const Dataset& d) {
  if (!d.has_labels()) throw DataError("weighted_objective: dataset has no labels");
  return weighted_objective(model, d.features, d.labels);
}

struct GradientOptions {
  double lambda_gen = 1.0;
  double lambda_em = 0.0;
  double labeled_scale = 1.0;    // multiplies every labeled term
  double unlabeled_scale = 1.0;  // multiplies every unlabeled term
  Rng* dropout_rng = nullptr;    // dropout on z before the head when set and rate > 0
  double dropout_rate = 0.0;
};

namespace detail {

// Inverted dropout mask (entries 0 or 1/keep) or an all-ones matrix.
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, const GradientOptions& opt) {
  if (!opt.dropout_rng || opt.dropout_rate <= 0.0) return Matrix::Ones(rows, cols);
  const double keep = 1.0 - opt.dropout_rate;
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = opt.dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
  return m;
}

// Gradient of sum_n w_n log p(y_n|z_n) (or w * evidence); returns value and d/dZ.
inline std::pair<double, Matrix> head_term_backward(const HybridModel& model, const Matrix& z, const Vector& y,
                                                    double scale, HybridModel& grads) {
  return std::visit(
      [&](const auto& head) -> std::pair<double, Matrix> {
        using H = std::decay_t<decltype(head)>;
        if constexpr (std::is_same_v<H, BayesLinearHead>) {
          auto e = bayes_evidence_with_grad(head, z, y);
          return {e.value, scale * e.grad_z};
        } else {
          auto& g = std::get<H>(grads.head);
          const Vector w = Vector::Constant(z.rows(), scale);
          const double value = pairwise_sum(head.log_lik(z, y));
          return {value, head.backward_log_lik(z, y, w, g)};
        }
      },
      model.head);
}

}  // namespace detail

/// Value of the scaled objective
///   labeled_scale * (sum log p(y|x) + lambda sum log p(x))
///   + unlabeled_scale * (lambda sum log p(x) - lambda_em sum H[p(y|x)])
/// and its exact gradient, accumulated into `grads` (shaped like `model`).
inline ObjectiveTerms objective_gradient(const HybridModel& model, const SslBatch& batch, const GradientOptions& opt,
                                         HybridModel& grads) {
  if (!batch.has_labeled() && !batch.has_unlabeled()) throw DataError("objective_gradient: empty batch");
  ObjectiveTerms t;
  auto generative_part = [&](const Matrix& x, double scale, FlowTrace& trace, FlowBatchResult& r) {
    r = model.flow.forward(x, &trace);
    const Vector lp = model.prior.log_prob(r.z) + r.log_det;
    const Vector w = Vector::Constant(x.rows(), scale * opt.lambda_gen);
    Matrix gz = model.prior.backward(r.z, w, grads.prior);
    return std::pair{pairwise_sum(lp), std::move(gz)};
  };

  if (batch.has_labeled()) {
    detail::check_input(model, batch.labeled_x);
    FlowTrace trace;
    FlowBatchResult r;
    auto [gen, gz] = generative_part(batch.labeled_x, opt.labeled_scale, trace, r);
    const Matrix mask = detail::dropout_mask(r.z.rows(), r.z.cols(), opt);
    const Matrix zh = r.z.cwiseProduct(mask);
    auto [pred, gzh] = detail::head_term_backward(model, zh, batch.labeled_y, opt.labeled_scale, grads);
    gz += gzh.cwiseProduct(mask);
    const Vector gld = Vector::Constant(r.z.rows(), opt.labeled_scale * opt.lambda_gen);
    model.flow.backward(trace, gz, gld, grads.flow);
    t.predictive += pred;
    t.generative += gen;
    t.total += opt.labeled_scale * (pred + opt.lambda_gen * gen);
  }
  if (batch.has_unlabeled()) {
    detail::check_input(model, batch.unlabeled_x);
    FlowTrace trace;
    FlowBatchResult r;
    auto [gen, gz] = generative_part(batch.unlabeled_x, opt.unlabeled_scale, trace, r);
    double ent = 0.0;
    if (opt.lambda_em != 0.0) {
      const auto* sm = std::get_if<SoftmaxHead>(&model.head);
      if (!sm) throw ShapeError("entropy minimization needs a classification head");
      const Matrix mask = detail::dropout_mask(r.z.rows(), r.z.cols(), opt);
      const Matrix zh = r.z.cwiseProduct(mask);
      ent = pairwise_sum(sm->entropy(zh));
      const Vector w = Vector::Constant(zh.rows(), -opt.unlabeled_scale * opt.lambda_em);
      gz += sm->backward_entropy(zh, w, std::get<SoftmaxHead>(grads.head)).cwiseProduct(mask);
    }
    const Vector gld = Vector::Constant(r.z.rows(), opt.unlabeled_scale * opt.lambda_gen);
    model.flow.backward(trace, gz, gld, grads.flow);
    t.generative += gen;
    t.entropy += ent;
    t.total += opt.unlabeled_scale * (opt.lambda_gen * gen - opt.lambda_em * ent);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double lambda_gen = 1.0;
  bool lambda_per_dim = false;           // lambda_gen / D, the "c / D" convention
  std::optional<double> entropy_weight;  // lambda_em for unlabeled inputs
  std::uint64_t seed = 0;
  bool standardize = true;
  bool learn_prior = true;           // train the latent log-variances
  bool temper_prior = false;         // scale prior variances by 1 / lambda
  bool full_batch_evidence = false;  // Bayesian head: evidence over all labeled rows per step
  std::size_t restarts = 1;          // independent initializations; the best final objective is kept

  double effective_lambda(std::size_t dim) const {
    return lambda_per_dim ? lambda_gen / static_cast<double>(dim) : lambda_gen;
  }
  void validate() const {
    std::vector<std::string> p;
    if (batch_size < 1) p.push_back("train.batch_size must be >= 1");
    if (restarts < 1) p.push_back("train.restarts must be >= 1");
    if (!(learning_rate >= 0.0)) p.push_back("train.learning_rate must be >= 0");
    if (!(lambda_gen >= 0.0)) p.push_back("train.lambda must be >= 0");
    if (entropy_weight && !(*entropy_weight >= 0.0)) p.push_back("train.entropy_weight must be >= 0");
    if (temper_prior && !(lambda_gen > 0.0)) p.push_back("train.temper_prior needs lambda > 0");
    if (!p.empty()) throw ConfigError(p);
  }
};

struct TraceRow {
  std::size_t epoch = 0;
  double objective = 0.0;
  double predictive = 0.0;
  double generative = 0.0;
  double entropy = 0.0;
};

struct TrainResult {
  HybridModel model;
  std::vector<TraceRow> trace;  // row 0 is the initialization
};

namespace detail {

inline Matrix take_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}
inline Vector take_rows(const Vector& v, std::span<const std::size_t> rows) {
  Vector out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(rows[i])];
  return out;
}

// Cycles through a shuffled index set, reshuffling on every pass.
class BatchCursor {
 public:
  BatchCursor(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(std::min(batch, n)), rng_(rng) {
    order_.resize(n);
    reshuffle();
  }
  std::size_t batches_per_pass() const { return n_ == 0 ? 0 : (n_ + batch_ - 1) / batch_; }
  std::vector<std::size_t> next() {
    if (pos_ >= n_) reshuffle();
    const std::size_t end = std::min(n_, pos_ + batch_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return out;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    rng_.shuffle(order_);
    pos_ = 0;
  }
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

inline void zero_frozen(HybridModel& grads, bool learn_prior) {
  if (!learn_prior) grads.prior.log_variance.setZero();
}

}  // namespace detail

/// Full-data objective used for the trace: Eq.-5 terms on labeled rows plus
/// generative and entropy terms on unlabeled rows, no dropout.
inline ObjectiveTerms dataset_objective(const HybridModel& model, const Dataset* labeled, const Dataset* unlabeled,
                                        double lambda_em) {
  SslBatch b;
  b.labeled_x = labeled ? labeled->features : Matrix(0, static_cast<Eigen::Index>(model.dim()));
  b.labeled_y = labeled ? labeled->labels : Vector();
  b.unlabeled_x = unlabeled ? unlabeled->features : Matrix(0, static_cast<Eigen::Index>(model.dim()));
  return ssl_objective_terms(model, b, model.lambda_gen, lambda_em);
}

/// Gradient ascent with Adam on the mean mini-batch objective. With both
/// labeled and unlabeled data, every step uses one batch of each.
inline TrainResult train(HybridModel model, const Dataset* labeled, const Dataset* unlabeled, const TrainConfig& cfg) {
  cfg.validate();
  const bool has_l = labeled && !labeled->empty();
  const bool has_u = unlabeled && !unlabeled->empty();
  if (!has_l && !has_u) throw DataError("train: no training data");
  if (has_l && !labeled->has_labels()) throw DataError("train: labeled set has no labels");
  model.lambda_gen = cfg.effective_lambda(model.dim());
  if (cfg.temper_prior) model.prior.variance_scale = 1.0 / model.lambda_gen;
  model.validate();
  const double lambda_em = cfg.entropy_weight.value_or(0.0);
  const bool bayes = std::holds_alternative<BayesLinearHead>(model.head);

  Rng root(cfg.seed);
  Rng dropout_rng = root.split("dropout");
  std::size_t lab_batch = cfg.batch_size;
  if (has_l && bayes && cfg.full_batch_evidence) lab_batch = labeled->size();
  detail::BatchCursor lab_cursor(has_l ? labeled->size() : 0, lab_batch, root.split("labeled"));
  detail::BatchCursor unl_cursor(has_u ? unlabeled->size() : 0, cfg.batch_size, root.split("unlabeled"));
  const std::size_t steps = std::max(lab_cursor.batches_per_pass(), unl_cursor.batches_per_pass());

  TrainResult result;
  auto record = [&](std::size_t epoch) {
    const auto t = dataset_objective(model, has_l ? labeled : nullptr, has_u ? unlabeled : nullptr, lambda_em);
    if (!std::isfinite(t.total)) throw DivergedError("training diverged at epoch " + std::to_string(epoch), epoch);
    result.trace.push_back({epoch, t.total, t.predictive, t.generative, t.entropy});
  };
  try {
    record(0);
  } catch (const NumericError& e) {
    throw DivergedError(std::string("non-finite initial objective: ") + e.what(), 0);
  }

  AdamState adam = AdamState::for_size(param_count(model), cfg.learning_rate);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    try {
      for (std::size_t s = 0; s < steps; ++s) {
        SslBatch batch;
        if (has_l) {
          const auto rows = lab_cursor.next();
          batch.labeled_x = detail::take_rows(labeled->features, rows);
          batch.labeled_y = detail::take_rows(labeled->labels, rows);
        }
        if (has_u) batch.unlabeled_x = detail::take_rows(unlabeled->features, unl_cursor.next());
        GradientOptions opt;
        opt.lambda_gen = model.lambda_gen;
        opt.lambda_em = lambda_em;
        opt.labeled_scale = batch.has_labeled() ? 1.0 / static_cast<double>(batch.labeled_x.rows()) : 0.0;
        opt.unlabeled_scale = batch.has_unlabeled() ? 1.0 / static_cast<double>(batch.unlabeled_x.rows()) : 0.0;
        opt.dropout_rng = &dropout_rng;
        opt.dropout_rate = model.dropout_rate;
        HybridModel grads = model.zeros_like();
        objective_gradient(model, batch, opt, grads);
        detail::zero_frozen(grads, cfg.learn_prior);
        Vector params = flatten_params(model);
        // Adam descends; the objective is maximized.
        const Vector g = -flatten_params(grads);
        adam_step(adam, params, g);
        assign_params(model, params);
      }
      record(epoch);
    } catch (const NumericError& e) {
      throw DivergedError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what(), epoch);
    } catch (const OptimizationError& e) {
      throw DivergedError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what(), epoch);
    }
  }
  if (bayes && has_l) {
    const auto& head = std::get<BayesLinearHead>(model.head);
    model.head = bayes_posterior_update(head, model.flow.forward(labeled->features).z, labeled->labels);
  }
  result.model = std::move(model);
  return result;
}

inline TrainResult train(HybridModel model, const Dataset& data, const TrainConfig& cfg) {
  return train(std::move(model), &data, nullptr, cfg);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalMetrics {
  std::size_t count = 0;
  std::optional<double> error_rate;  // classification heads
  std::optional<double> rmse;        // regression heads
  std::optional<double> mean_nll;  // labeled data only
  double mean_entropy = 0.0;
  double bits_per_dim = 0.0;
  double mean_log_px = 0.0;
};

/// Metrics from predictions already in hand; `labels` may be empty, in which
/// case only the density and entropy fields are filled.
inline EvalMetrics metrics_from(const std::vector<Prediction>& preds, const Vector& labels, const Vector& log_px,
                                std::size_t dim) {
  if (preds.empty()) throw DataError("evaluate: empty dataset");
  const auto n = static_cast<Eigen::Index>(preds.size());
  EvalMetrics m;
  m.count = preds.size();
  Vector ent(n);
  for (Eigen::Index i = 0; i < n; ++i) ent[i] = entropy(preds[static_cast<std::size_t>(i)]);
  m.mean_entropy = pairwise_mean(ent);
  m.mean_log_px = pairwise_mean(log_px);
  m.bits_per_dim = -m.mean_log_px / (static_cast<double>(dim) * std::numbers::ln2);
  if (labels.size() == n) {
    Vector nll(n), err(n);
    const bool classification = std::holds_alternative<Categorical>(preds.front());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& p = preds[static_cast<std::size_t>(i)];
      nll[i] = -prediction_log_prob(p, labels[i]);
      if (classification) {
        Eigen::Index best;
        std::get<Categorical>(p).probs.maxCoeff(&best);
        err[i] = static_cast<double>(best) == labels[i] ? 0.0 : 1.0;
      } else {
        const double r = labels[i] - std::get<GaussianPrediction>(p).mean;
        err[i] = r * r;
      }
    }
    m.mean_nll = pairwise_mean(nll);
    if (classification)
      m.error_rate = pairwise_mean(err);
    else
      m.rmse = std::sqrt(pairwise_mean(err));
  }
  return m;
}

inline EvalMetrics evaluate(const HybridModel& model, const Dataset& data) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  if (!data.has_labels()) throw DataError("evaluate: dataset has no labels");
  const auto out = model_outputs(model, data.features);
  return metrics_from(out.predictions, data.labels, out.log_px, model.dim());
}

}  // namespace diglm
