#pragma once

// Generalized linear heads p(y | z; beta) and the conjugate Bayesian linear
// head with closed-form posterior and evidence.
//
// Labels are passed as a Vector for every head; categorical labels hold exact
// integer values 0..C-1.

#include <cmath>
#include <cstddef>
#include <string>
#include <variant>

#include "diglm/error.hpp"
#include "diglm/flow.hpp"
#include "diglm/numerics.hpp"

namespace diglm {

struct Categorical {
  Vector probs;
};

struct GaussianPrediction {
  double mean = 0.0;
  double variance = 1.0;
};

using Prediction = std::variant<Categorical, GaussianPrediction>;

inline double categorical_entropy(const Vector& p) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) h -= p[i] * std::log(p[i]);
  return h;
}

/// Shannon entropy for categorical predictions, differential entropy for Gaussian ones.
inline double entropy(const Prediction& p) {
  if (const auto* c = std::get_if<Categorical>(&p)) return categorical_entropy(c->probs);
  const auto& g = std::get<GaussianPrediction>(p);
  return 0.5 * (kLog2Pi + 1.0 + std::log(g.variance));
}

namespace detail {

inline int class_label(double y, std::size_t classes) {
  const double r = std::round(y);
  if (r != y || r < 0.0 || r >= static_cast<double>(classes))
    throw DataError("categorical label " + std::to_string(y) + " outside {0.." + std::to_string(classes - 1) + "}");
  return static_cast<int>(r);
}

inline void check_inputs(const Matrix& z, std::size_t dim, const char* who) {
  if (static_cast<std::size_t>(z.cols()) != dim)
    throw ShapeError(std::string(who) + ": expected " + std::to_string(dim) + " features, got " +
                     std::to_string(z.cols()));
}

inline void check_labels(const Matrix& z, const Vector& y, const char* who) {
  if (z.rows() != y.size()) throw ShapeError(std::string(who) + ": row count differs from label count");
}

}  // namespace detail

// ---------------------------------------------------------------------------

/// Multinomial logistic regression: p(y|z) = softmax(W z + b).
class SoftmaxHead {
 public:
  Matrix weights;  // C x D
  Vector bias;     // C

  static SoftmaxHead zeros(std::size_t dim, std::size_t classes) {
    return {Matrix::Zero(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim)),
            Vector::Zero(static_cast<Eigen::Index>(classes))};
  }
  static SoftmaxHead build(std::size_t dim, std::size_t classes, Rng& rng, double stddev = 0.01) {
    auto h = zeros(dim, classes);
    for (Eigen::Index i = 0; i < h.weights.size(); ++i) h.weights.data()[i] = rng.normal(0.0, stddev);
    return h;
  }

  std::size_t dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t classes() const { return static_cast<std::size_t>(weights.rows()); }

  Matrix logits(const Matrix& z) const {
    detail::check_inputs(z, dim(), "SoftmaxHead");
    Matrix l = z * weights.transpose();
    l.rowwise() += bias.transpose();
    return l;
  }

  Matrix probabilities(const Matrix& z) const {
    Matrix l = logits(z);
    for (Eigen::Index n = 0; n < l.rows(); ++n) {
      const double lse = log_sum_exp(l.row(n));
      l.row(n) = (l.row(n).array() - lse).exp().matrix();
    }
    return l;
  }

  Vector log_lik(const Matrix& z, const Vector& y) const {
    detail::check_labels(z, y, "SoftmaxHead");
    const Matrix l = logits(z);
    Vector out(z.rows());
    for (Eigen::Index n = 0; n < l.rows(); ++n)
      out[n] = l(n, detail::class_label(y[n], classes())) - log_sum_exp(l.row(n));
    return out;
  }

  Vector entropy(const Matrix& z) const {
    const Matrix p = probabilities(z);
    Vector h(p.rows());
    for (Eigen::Index n = 0; n < p.rows(); ++n) h[n] = categorical_entropy(p.row(n).transpose());
    return h;
  }

  /// Gradient of sum_n w_n log p(y_n | z_n); accumulates into grads, returns d/dZ.
  Matrix backward_log_lik(const Matrix& z, const Vector& y, const Vector& row_weights, SoftmaxHead& grads) const {
    Matrix g = -probabilities(z);
    for (Eigen::Index n = 0; n < g.rows(); ++n) g(n, detail::class_label(y[n], classes())) += 1.0;
    g.array().colwise() *= row_weights.array();
    return accumulate(z, g, grads);
  }

  /// Gradient of sum_n w_n H[p(y | z_n)].
  Matrix backward_entropy(const Matrix& z, const Vector& row_weights, SoftmaxHead& grads) const {
    const Matrix p = probabilities(z);
    Matrix g(p.rows(), p.cols());
    for (Eigen::Index n = 0; n < p.rows(); ++n) {
      const double h = categorical_entropy(p.row(n).transpose());
      for (Eigen::Index k = 0; k < p.cols(); ++k) {
        const double lp = p(n, k) > 0.0 ? std::log(p(n, k)) : 0.0;
        g(n, k) = -p(n, k) * (lp + h) * row_weights[n];
      }
    }
    return accumulate(z, g, grads);
  }

  SoftmaxHead zeros_like() const { return zeros(dim(), classes()); }

  template <class F>
  void visit_params(F&& f) {
    f(as_span(weights));
    f(as_span(bias));
  }
  template <class F>
  void visit_params(F&& f) const {
    f(as_span(weights));
    f(as_span(bias));
  }

 private:
  Matrix accumulate(const Matrix& z, const Matrix& g_logits, SoftmaxHead& grads) const {
    grads.weights += g_logits.transpose() * z;
    grads.bias += g_logits.colwise().sum().transpose();
    return g_logits * weights;
  }
};

// ---------------------------------------------------------------------------

/// Linear regression with homoscedastic noise sigma_0 = exp(log_noise).
class GaussianHead {
 public:
  Vector weights;
  double bias = 0.0;
  double log_noise = 0.0;

  static GaussianHead zeros(std::size_t dim) { return {Vector::Zero(static_cast<Eigen::Index>(dim)), 0.0, 0.0}; }

  std::size_t dim() const { return static_cast<std::size_t>(weights.size()); }
  double noise_variance() const { return std::exp(2.0 * log_noise); }

  Vector mean(const Matrix& z) const {
    detail::check_inputs(z, dim(), "GaussianHead");
    return (z * weights).array() + bias;
  }

  Vector log_lik(const Matrix& z, const Vector& y) const {
    detail::check_labels(z, y, "GaussianHead");
    const Vector r = y - mean(z);
    return (-0.5 * kLog2Pi - log_noise - r.array().square() / (2.0 * noise_variance())).matrix();
  }

  Matrix backward_log_lik(const Matrix& z, const Vector& y, const Vector& row_weights, GaussianHead& grads) const {
    const Vector r = y - mean(z);
    const double var = noise_variance();
    const Vector g_mu = (r.array() / var * row_weights.array()).matrix();
    grads.weights += z.transpose() * g_mu;
    grads.bias += g_mu.sum();
    grads.log_noise += (row_weights.array() * (-1.0 + r.array().square() / var)).sum();
    return g_mu * weights.transpose();
  }

  GaussianHead zeros_like() const { return zeros(dim()); }

  template <class F>
  void visit_params(F&& f) {
    f(as_span(weights));
    f(as_span(bias));
    f(as_span(log_noise));
  }
  template <class F>
  void visit_params(F&& f) const {
    f(as_span(weights));
    f(as_span(bias));
    f(as_span(log_noise));
  }
};

// ---------------------------------------------------------------------------

/// Two-headed regression: mean and variance are both linear in z; the
/// variance branch goes through softplus with a 1e-6 floor.
class HeteroscedasticHead {
 public:
  static constexpr double kVarianceFloor = 1e-6;

  Vector mean_weights;
  Vector var_weights;
  double mean_bias = 0.0;
  double var_bias = 0.0;

  static HeteroscedasticHead zeros(std::size_t dim) {
    const auto d = static_cast<Eigen::Index>(dim);
    // softplus(0.5413) ~= 1, so the initial predictive variance is ~1.
    return {Vector::Zero(d), Vector::Zero(d), 0.0, 0.5413248546129181};
  }

  std::size_t dim() const { return static_cast<std::size_t>(mean_weights.size()); }

  Vector mean(const Matrix& z) const {
    detail::check_inputs(z, dim(), "HeteroscedasticHead");
    return (z * mean_weights).array() + mean_bias;
  }
  Vector variance(const Matrix& z) const {
    detail::check_inputs(z, dim(), "HeteroscedasticHead");
    const Vector a = (z * var_weights).array() + var_bias;
    return a.unaryExpr([](double v) { return softplus(v) + kVarianceFloor; });
  }

  Vector log_lik(const Matrix& z, const Vector& y) const {
    detail::check_labels(z, y, "HeteroscedasticHead");
    const Vector r = y - mean(z);
    const Vector var = variance(z);
    return (-0.5 * (kLog2Pi + var.array().log()) - r.array().square() / (2.0 * var.array())).matrix();
  }

  Matrix backward_log_lik(const Matrix& z, const Vector& y, const Vector& row_weights,
                          HeteroscedasticHead& grads) const {
    const Vector r = y - mean(z);
    const Vector a = (z * var_weights).array() + var_bias;
    const Vector var = a.unaryExpr([](double v) { return softplus(v) + kVarianceFloor; });
    const Vector g_mu = (r.array() / var.array() * row_weights.array()).matrix();
    const Vector g_var = (-0.5 / var.array() + r.array().square() / (2.0 * var.array().square()));
    const Vector g_a =
        (g_var.array() * a.unaryExpr([](double v) { return sigmoid(v); }).array() * row_weights.array()).matrix();
    grads.mean_weights += z.transpose() * g_mu;
    grads.mean_bias += g_mu.sum();
    grads.var_weights += z.transpose() * g_a;
    grads.var_bias += g_a.sum();
    return g_mu * mean_weights.transpose() + g_a * var_weights.transpose();
  }

  HeteroscedasticHead zeros_like() const {
    auto h = zeros(dim());
    h.var_bias = 0.0;
    return h;
  }

  template <class F>
  void visit_params(F&& f) {
    f(as_span(mean_weights));
    f(as_span(var_weights));
    f(as_span(mean_bias));
    f(as_span(var_bias));
  }
  template <class F>
  void visit_params(F&& f) const {
    f(as_span(mean_weights));
    f(as_span(var_weights));
    f(as_span(mean_bias));
    f(as_span(var_bias));
  }
};

// ---------------------------------------------------------------------------

/// Conjugate Bayesian linear regression: beta ~ N(0, Lambda^-1),
/// y | z, beta ~ N(beta^T z, sigma_0^2). With `intercept`, a constant-1
/// feature is appended to z and Lambda covers it.
///
/// The posterior is the standard conjugate result
///   Sigma = (Lambda + Z^T Z / sigma_0^2)^-1,  m = Sigma Z^T y / sigma_0^2,
/// which is the same as writing mean (Z^T Z + sigma_0^2 Lambda)^-1 Z^T y and
/// covariance sigma_0^2 (Z^T Z + sigma_0^2 Lambda)^-1. Nothing here is
/// trained by gradient descent; the head has no visited parameters.
class BayesLinearHead {
 public:
  Matrix prior_precision;
  double noise_variance = 1.0;
  bool intercept = true;
  Vector posterior_mean;
  Matrix posterior_cov;

  static BayesLinearHead isotropic(std::size_t dim, double precision = 1.0, double noise_variance = 1.0,
                                   bool intercept = true) {
    const auto p = static_cast<Eigen::Index>(dim + (intercept ? 1 : 0));
    BayesLinearHead h;
    h.prior_precision = precision * Matrix::Identity(p, p);
    h.noise_variance = noise_variance;
    h.intercept = intercept;
    h.posterior_mean = Vector::Zero(p);
    h.posterior_cov = Matrix::Identity(p, p) / precision;
    return h;
  }

  std::size_t dim() const { return static_cast<std::size_t>(prior_precision.rows()) - (intercept ? 1 : 0); }
  std::size_t design_dim() const { return static_cast<std::size_t>(prior_precision.rows()); }

  Matrix design(const Matrix& z) const {
    detail::check_inputs(z, dim(), "BayesLinearHead");
    if (!intercept) return z;
    Matrix d(z.rows(), z.cols() + 1);
    d.leftCols(z.cols()) = z;
    d.col(z.cols()).setOnes();
    return d;
  }

  Vector predictive_mean(const Matrix& z) const { return design(z) * posterior_mean; }
  Vector predictive_variance(const Matrix& z) const {
    const Matrix d = design(z);
    return ((d * posterior_cov).cwiseProduct(d).rowwise().sum()).array() + noise_variance;
  }

  Vector log_lik(const Matrix& z, const Vector& y) const {
    detail::check_labels(z, y, "BayesLinearHead");
    const Vector r = y - predictive_mean(z);
    const Vector var = predictive_variance(z);
    return (-0.5 * (kLog2Pi + var.array().log()) - r.array().square() / (2.0 * var.array())).matrix();
  }

  BayesLinearHead zeros_like() const { return *this; }

  template <class F>
  void visit_params(F&&) {}
  template <class F>
  void visit_params(F&&) const {}
};

using GlmHead = std::variant<SoftmaxHead, GaussianHead, HeteroscedasticHead, BayesLinearHead>;

inline std::string head_kind(const GlmHead& h) {
  switch (h.index()) {
    case 0: return "softmax";
    case 1: return "gaussian";
    case 2: return "heteroscedastic";
    default: return "bayes_linear";
  }
}

inline bool is_classifier(const GlmHead& h) { return std::holds_alternative<SoftmaxHead>(h); }

inline std::size_t head_dim(const GlmHead& h) {
  return std::visit([](const auto& head) { return head.dim(); }, h);
}

inline std::size_t head_classes(const GlmHead& h) {
  if (const auto* s = std::get_if<SoftmaxHead>(&h)) return s->classes();
  return 0;
}

/// log p(y_n | z_n) per row.
inline Vector head_log_lik(const GlmHead& h, const Matrix& z, const Vector& y) {
  return std::visit([&](const auto& head) { return head.log_lik(z, y); }, h);
}

inline std::vector<Prediction> head_predict_batch(const GlmHead& h, const Matrix& z) {
  std::vector<Prediction> out;
  out.reserve(static_cast<std::size_t>(z.rows()));
  std::visit(
      [&](const auto& head) {
        using H = std::decay_t<decltype(head)>;
        if constexpr (std::is_same_v<H, SoftmaxHead>) {
          const Matrix p = head.probabilities(z);
          for (Eigen::Index n = 0; n < p.rows(); ++n) out.emplace_back(Categorical{p.row(n).transpose()});
        } else if constexpr (std::is_same_v<H, GaussianHead>) {
          const Vector mu = head.mean(z);
          for (Eigen::Index n = 0; n < mu.size(); ++n)
            out.emplace_back(GaussianPrediction{mu[n], head.noise_variance()});
        } else if constexpr (std::is_same_v<H, HeteroscedasticHead>) {
          const Vector mu = head.mean(z);
          const Vector var = head.variance(z);
          for (Eigen::Index n = 0; n < mu.size(); ++n) out.emplace_back(GaussianPrediction{mu[n], var[n]});
        } else {
          const Vector mu = head.predictive_mean(z);
          const Vector var = head.predictive_variance(z);
          for (Eigen::Index n = 0; n < mu.size(); ++n) out.emplace_back(GaussianPrediction{mu[n], var[n]});
        }
      },
      h);
  return out;
}

inline Prediction head_predict(const GlmHead& h, const Vector& z) {
  return head_predict_batch(h, z.transpose()).front();
}

inline double head_nll(const GlmHead& h, const Vector& z, double y) {
  return -head_log_lik(h, z.transpose(), Vector::Constant(1, y))[0];
}

/// log-probability of y under an already computed prediction.
inline double prediction_log_prob(const Prediction& p, double y) {
  if (const auto* c = std::get_if<Categorical>(&p)) {
    const int k = detail::class_label(y, static_cast<std::size_t>(c->probs.size()));
    return std::log(c->probs[k]);
  }
  const auto& g = std::get<GaussianPrediction>(p);
  const double r = y - g.mean;
  return -0.5 * (kLog2Pi + std::log(g.variance)) - r * r / (2.0 * g.variance);
}

// ---------------------------------------------------------------------------
// Conjugate posterior and evidence

/// Posterior given (Z, y) under the head's prior; returns a new head.
inline BayesLinearHead bayes_posterior_update(const BayesLinearHead& head, const Matrix& z, const Vector& y) {
  detail::check_labels(z, y, "bayes_posterior_update");
  if (!(head.noise_variance > 0.0)) throw NumericError("bayes_posterior_update: noise variance must be positive");
  const Matrix d = head.design(z);
  Matrix a = head.prior_precision + d.transpose() * d / head.noise_variance;
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) throw NumericError("bayes_posterior_update: posterior precision not PD");
  BayesLinearHead out = head;
  const auto p = a.rows();
  out.posterior_cov = llt.solve(Matrix::Identity(p, p));
  out.posterior_cov = 0.5 * (out.posterior_cov + out.posterior_cov.transpose());
  out.posterior_mean = llt.solve(d.transpose() * y / head.noise_variance);
  return out;
}

namespace detail {

inline double llt_log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// Evidence via the P x P posterior precision (matrix determinant lemma + Woodbury).
inline double evidence_weight_space(const BayesLinearHead& head, const Matrix& d, const Vector& y) {
  const double s2 = head.noise_variance;
  const auto n = static_cast<double>(d.rows());
  Eigen::LLT<Matrix> prior(head.prior_precision);
  Eigen::LLT<Matrix> post(head.prior_precision + d.transpose() * d / s2);
  if (prior.info() != Eigen::Success || post.info() != Eigen::Success)
    throw NumericError("bayes_marginal_log_lik: covariance not positive definite");
  const Vector b = d.transpose() * y;
  const double quad = y.squaredNorm() / s2 - b.dot(post.solve(b)) / (s2 * s2);
  return -0.5 * (n * kLog2Pi + n * std::log(s2) + llt_log_det(post) - llt_log_det(prior) + quad);
}

/// Evidence via the N x N marginal covariance sigma_0^2 I + Z Lambda^-1 Z^T.
inline double evidence_function_space(const BayesLinearHead& head, const Matrix& d, const Vector& y) {
  Eigen::LLT<Matrix> prior(head.prior_precision);
  if (prior.info() != Eigen::Success) throw NumericError("bayes_marginal_log_lik: prior precision not PD");
  const Matrix c = head.noise_variance * Matrix::Identity(d.rows(), d.rows()) + d * prior.solve(d.transpose());
  Eigen::LLT<Matrix> llt(c);
  if (llt.info() != Eigen::Success) throw NumericError("bayes_marginal_log_lik: covariance not positive definite");
  const auto n = static_cast<double>(d.rows());
  return -0.5 * (n * kLog2Pi + llt_log_det(llt) + y.dot(llt.solve(y)));
}

}  // namespace detail

/// log N(y; 0, sigma_0^2 I + Z Lambda^-1 Z^T), computed in whichever of the
/// weight-space and function-space forms is smaller.
inline double bayes_marginal_log_lik(const BayesLinearHead& head, const Matrix& z, const Vector& y) {
  detail::check_labels(z, y, "bayes_marginal_log_lik");
  if (z.rows() < 1) throw DataError("bayes_marginal_log_lik: need at least one observation");
  const Matrix d = head.design(z);
  if (d.rows() > d.cols()) return detail::evidence_weight_space(head, d, y);
  return detail::evidence_function_space(head, d, y);
}

struct EvidenceGradient {
  double value = 0.0;
  Matrix grad_z;  // d evidence / dZ, N x D (intercept column excluded)
};

/// Evidence and its gradient with respect to the features:
/// dE/dZ = (r m^T - Z Sigma) / sigma_0^2, with (m, Sigma) the posterior and r = y - Z m.
inline EvidenceGradient bayes_evidence_with_grad(const BayesLinearHead& head, const Matrix& z, const Vector& y) {
  EvidenceGradient out;
  out.value = bayes_marginal_log_lik(head, z, y);
  const BayesLinearHead post = bayes_posterior_update(head, z, y);
  const Matrix d = head.design(z);
  const Vector r = y - d * post.posterior_mean;
  const Matrix g = (r * post.posterior_mean.transpose() - d * post.posterior_cov) / head.noise_variance;
  out.grad_z = g.leftCols(z.cols());
  return out;
}

/// k(x_i, x_j) = f(x_i)^T Lambda^-1 f(x_j) on flow features (with the constant
/// feature appended when the head has an intercept). For Lambda = lambda I and
/// no intercept this is lambda^-1 f(x_i)^T f(x_j).
inline double implied_kernel(const BayesLinearHead& head, const FlowStack& flow, const Vector& xi,
                             const Vector& xj) {
  const Matrix di = head.design(flow_forward(flow, xi).z.transpose());
  const Matrix dj = head.design(flow_forward(flow, xj).z.transpose());
  Eigen::LLT<Matrix> prior(head.prior_precision);
  return (di * prior.solve(dj.transpose()))(0, 0);
}

}  // namespace diglm
