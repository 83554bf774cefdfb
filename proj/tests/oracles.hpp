#pragma once

// Reference computations used only by tests. Each one reaches its answer by a
// different route than the library code it checks: dense Jacobians instead of
// per-layer log-dets, grids and Monte Carlo instead of conjugate formulas,
// explicit inverses instead of Cholesky solves.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

namespace oracle {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Central differences of a scalar function, written out coordinate by coordinate.
inline Vec central_gradient(const std::function<double(const Vec&)>& f, const Vec& p, double h = 1e-6) {
  Vec g(p.size());
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    Vec a = p, b = p;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

/// Relative error with an absolute floor, coordinate-wise maximum.
inline double max_rel_error(const Vec& a, const Vec& b, double abs_floor = 1e-7) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double e = std::abs(a[i] - b[i]);
    if (e <= abs_floor) continue;
    worst = std::max(worst, e / std::max(std::abs(a[i]), std::abs(b[i])));
  }
  return worst;
}

/// log|det J| of a map R^D -> R^D from a finite-difference Jacobian.
inline double fd_log_abs_det(const std::function<Vec(const Vec&)>& f, const Vec& x, double h = 1e-5) {
  const auto d = x.size();
  Mat j(d, d);
  for (Eigen::Index c = 0; c < d; ++c) {
    Vec a = x, b = x;
    a[c] += h;
    b[c] -= h;
    j.col(c) = (f(a) - f(b)) / (2.0 * h);
  }
  return std::log(std::abs(j.fullPivLu().determinant()));
}

/// Trapezoid rule of exp(log_f) on a uniform 1-D grid.
inline double trapezoid_exp(const std::vector<double>& log_f, double dx) {
  double s = 0.0;
  for (std::size_t i = 0; i < log_f.size(); ++i) {
    const double w = (i == 0 || i + 1 == log_f.size()) ? 0.5 : 1.0;
    s += w * std::exp(log_f[i]);
  }
  return s * dx;
}

/// Plain two-layer tanh network evaluated scalar by scalar:
/// y = W2 tanh(W1 x + b1) + b2.
inline std::vector<double> two_layer_tanh(const std::vector<std::vector<double>>& w1, const std::vector<double>& b1,
                                          const std::vector<std::vector<double>>& w2, const std::vector<double>& b2,
                                          const std::vector<double>& x) {
  std::vector<double> h(b1.size());
  for (std::size_t i = 0; i < b1.size(); ++i) {
    double a = b1[i];
    for (std::size_t j = 0; j < x.size(); ++j) a += w1[i][j] * x[j];
    h[i] = std::tanh(a);
  }
  std::vector<double> y(b2.size());
  for (std::size_t i = 0; i < b2.size(); ++i) {
    double a = b2[i];
    for (std::size_t j = 0; j < h.size(); ++j) a += w2[i][j] * h[j];
    y[i] = a;
  }
  return y;
}

// ---------------------------------------------------------------------------
// Bayesian linear regression: prior beta ~ N(0, prec^-1), y | beta ~ N(X beta, noise I).

/// Log evidence as the sum of one-step-ahead predictive log densities, each
/// from a posterior rebuilt with explicit matrix inverses.
inline double chain_rule_evidence(const Mat& x, const Vec& y, const Mat& prior_precision, double noise) {
  Mat cov = prior_precision.inverse();
  Vec mean = Vec::Zero(x.cols());
  double total = 0.0;
  for (Eigen::Index n = 0; n < x.rows(); ++n) {
    const Vec xn = x.row(n).transpose();
    const double pm = xn.dot(mean);
    const double pv = xn.dot(cov * xn) + noise;
    total += -0.5 * (kLog2Pi + std::log(pv)) - 0.5 * (y[n] - pm) * (y[n] - pm) / pv;
    // Rank-one update of the Gaussian posterior after observing (xn, y_n).
    const Mat prec = cov.inverse() + xn * xn.transpose() / noise;
    const Vec rhs = cov.inverse() * mean + xn * y[n] / noise;
    cov = prec.inverse();
    mean = cov * rhs;
  }
  return total;
}

/// Gaussian-process marginal likelihood with Gram matrix K = X prec^-1 X^T.
inline double gp_evidence(const Mat& x, const Vec& y, const Mat& prior_precision, double noise) {
  const Mat k = x * prior_precision.inverse() * x.transpose();
  const Mat c = k + noise * Mat::Identity(x.rows(), x.rows());
  Eigen::LDLT<Mat> ldlt(c);
  const Vec alpha = ldlt.solve(y);
  const double logdet = ldlt.vectorD().array().log().sum();
  return -0.5 * (static_cast<double>(y.size()) * kLog2Pi + logdet + y.dot(alpha));
}

struct McEstimate {
  double log_mean = 0.0;
  double log_se = 0.0;  // standard error of log_mean by the delta method
};

/// log E_{beta ~ prior}[p(y | beta)] by plain Monte Carlo.
inline McEstimate mc_evidence(const Mat& x, const Vec& y, double prior_precision, double noise, std::size_t samples,
                              std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const double sd = 1.0 / std::sqrt(prior_precision);
  std::vector<double> logs(samples);
  Vec beta(x.cols());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < samples; ++s) {
    for (Eigen::Index j = 0; j < beta.size(); ++j) beta[j] = sd * nd(gen);
    const Vec r = y - x * beta;
    logs[s] = -0.5 * static_cast<double>(y.size()) * (kLog2Pi + std::log(noise)) - 0.5 * r.squaredNorm() / noise;
    mx = std::max(mx, logs[s]);
  }
  double m1 = 0.0, m2 = 0.0;
  for (double l : logs) {
    const double w = std::exp(l - mx);
    m1 += w;
    m2 += w * w;
  }
  const double n = static_cast<double>(samples);
  m1 /= n;
  m2 /= n;
  const double var = std::max(m2 - m1 * m1, 0.0);
  return {mx + std::log(m1), std::sqrt(var / n) / m1};
}

/// Total variation between the closed-form Gaussian posterior and the
/// grid-normalized prior x likelihood, both evaluated on the same 2-D grid.
inline double grid_posterior_tv_2d(const Mat& x, const Vec& y, double prior_precision, double noise,
                                   const Vec& post_mean, const Mat& post_cov, int points = 401, double half_width = 7.0) {
  const Eigen::SelfAdjointEigenSolver<Mat> es(post_cov);
  const double radius = half_width * std::sqrt(es.eigenvalues().maxCoeff());
  const double lo0 = post_mean[0] - radius, lo1 = post_mean[1] - radius;
  const double step = 2.0 * radius / (points - 1);
  const Mat prec = post_cov.inverse();
  std::vector<double> lp, lq;
  lp.reserve(static_cast<std::size_t>(points * points));
  lq.reserve(static_cast<std::size_t>(points * points));
  double mp = -1e300, mq = -1e300;
  for (int i = 0; i < points; ++i)
    for (int j = 0; j < points; ++j) {
      Vec b(2);
      b << lo0 + i * step, lo1 + j * step;
      const Vec r = y - x * b;
      const double a = -0.5 * prior_precision * b.squaredNorm() - 0.5 * r.squaredNorm() / noise;
      const Vec d = b - post_mean;
      const double q = -0.5 * d.dot(prec * d);
      lp.push_back(a);
      lq.push_back(q);
      mp = std::max(mp, a);
      mq = std::max(mq, q);
    }
  double sp = 0.0, sq = 0.0;
  for (std::size_t k = 0; k < lp.size(); ++k) {
    sp += std::exp(lp[k] - mp);
    sq += std::exp(lq[k] - mq);
  }
  double tv = 0.0;
  for (std::size_t k = 0; k < lp.size(); ++k) tv += std::abs(std::exp(lp[k] - mp) / sp - std::exp(lq[k] - mq) / sq);
  return 0.5 * tv;
}

/// 1-D analogue: grid over beta for a single-feature model without intercept.
inline double grid_posterior_tv_1d(const Vec& x, const Vec& y, double prior_precision, double noise, double post_mean,
                                   double post_var, int points = 20001, double half_width = 10.0) {
  const double sd = std::sqrt(post_var);
  const double lo = post_mean - half_width * sd, step = 2.0 * half_width * sd / (points - 1);
  std::vector<double> lp(static_cast<std::size_t>(points)), lq(static_cast<std::size_t>(points));
  double mp = -1e300;
  for (int i = 0; i < points; ++i) {
    const double b = lo + i * step;
    const Vec r = y - x * b;
    lp[static_cast<std::size_t>(i)] = -0.5 * prior_precision * b * b - 0.5 * r.squaredNorm() / noise;
    lq[static_cast<std::size_t>(i)] = -0.5 * (b - post_mean) * (b - post_mean) / post_var;
    mp = std::max(mp, lp[static_cast<std::size_t>(i)]);
  }
  double sp = 0.0, sq = 0.0;
  for (int i = 0; i < points; ++i) {
    sp += std::exp(lp[static_cast<std::size_t>(i)] - mp);
    sq += std::exp(lq[static_cast<std::size_t>(i)]);
  }
  double tv = 0.0;
  for (int i = 0; i < points; ++i)
    tv += std::abs(std::exp(lp[static_cast<std::size_t>(i)] - mp) / sp - std::exp(lq[static_cast<std::size_t>(i)]) / sq);
  return 0.5 * tv;
}

/// Strict local maxima of a sampled curve (plateaus count once, at their left edge).
inline std::vector<std::size_t> local_maxima(const std::vector<double>& f) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i + 1 < f.size(); ++i) {
    if (!(f[i] > f[i - 1])) continue;
    std::size_t j = i;
    while (j + 1 < f.size() && f[j + 1] == f[i]) ++j;
    if (j + 1 < f.size() && f[j + 1] < f[i]) out.push_back(i);
    i = j;
  }
  return out;
}

}  // namespace oracle
