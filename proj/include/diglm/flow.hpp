#pragma once

// Invertible transformations with exact log-determinants, the factorized
// Gaussian latent prior, and the change-of-variables density.
//
// All layers act on row batches: X is B x D, and log-determinants are
// accumulated per row.

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "diglm/error.hpp"
#include "diglm/numerics.hpp"
#include "diglm/random.hpp"

namespace diglm {

// ---------------------------------------------------------------------------
// Affine coupling

enum class CouplingOrientation { copy_first, copy_second };

/// Affine coupling layer. The conditioning block is copied; the other block is
/// mapped to t(cond) + x * exp(s(cond)) where s = s_max * tanh(s_raw / s_max).
class CouplingLayer {
 public:
  struct Cache {
    MlpCache t_cache;
    MlpCache s_cache;
    Matrix transformed_in;  // the transformed block of the input
    Matrix s_raw;
    Matrix scale;  // exp(s)
  };

  CouplingLayer() = default;

  CouplingLayer(std::size_t dim, std::size_t split, CouplingOrientation orientation, MlpNetwork t_net,
                MlpNetwork s_net, double s_max = 5.0)
      : dim_(dim), split_(split), orientation_(orientation), t_net_(std::move(t_net)),
        s_net_(std::move(s_net)), s_max_(s_max) {
    if (split_ < 1 || split_ >= dim_)
      throw ShapeError("CouplingLayer: split index must satisfy 1 <= d < D (d=" + std::to_string(split_) +
                       ", D=" + std::to_string(dim_) + ")");
    const auto [co, cn] = cond_range();
    const auto [to, tn] = trans_range();
    (void)co;
    (void)to;
    if (t_net_.input_dim() != cn || s_net_.input_dim() != cn || t_net_.output_dim() != tn ||
        s_net_.output_dim() != tn)
      throw ShapeError("CouplingLayer: t/s networks must map R^" + std::to_string(cn) + " -> R^" +
                       std::to_string(tn));
    if (!(s_max_ > 0.0)) throw ShapeError("CouplingLayer: s_max must be positive");
  }

  /// Output layers of both nets start at N(0, output_std^2), so the layer is
  /// close to the identity at initialization.
  static CouplingLayer build(std::size_t dim, std::size_t split, CouplingOrientation orientation,
                             std::span<const std::size_t> hidden, Activation act, Rng& rng,
                             double output_std = 0.01, double s_max = 5.0) {
    const std::size_t cn = orientation == CouplingOrientation::copy_first ? split : dim - split;
    const std::size_t tn = dim - cn;
    if (split < 1 || split >= dim)
      throw ShapeError("CouplingLayer: split index must satisfy 1 <= d < D");
    Rng t_rng = rng.split("t_net");
    Rng s_rng = rng.split("s_net");
    rng.next_u64();
    return CouplingLayer(dim, split, orientation, MlpNetwork::build(cn, hidden, tn, act, t_rng, output_std),
                         MlpNetwork::build(cn, hidden, tn, act, s_rng, output_std), s_max);
  }

  std::size_t dim() const { return dim_; }
  std::size_t split() const { return split_; }
  CouplingOrientation orientation() const { return orientation_; }
  const MlpNetwork& t_net() const { return t_net_; }
  const MlpNetwork& s_net() const { return s_net_; }
  double s_max() const { return s_max_; }

  /// (offset, count) of the copied block.
  std::pair<std::size_t, std::size_t> cond_range() const {
    return orientation_ == CouplingOrientation::copy_first ? std::pair{std::size_t{0}, split_}
                                                            : std::pair{split_, dim_ - split_};
  }
  /// (offset, count) of the transformed block.
  std::pair<std::size_t, std::size_t> trans_range() const {
    return orientation_ == CouplingOrientation::copy_first ? std::pair{split_, dim_ - split_}
                                                            : std::pair{std::size_t{0}, split_};
  }

  /// The squashed log-scales s(x_cond) for each row; their row sums are the log-determinants.
  Matrix log_scale(const Matrix& x) const {
    const auto [co, cn] = cond_range();
    Matrix s = mlp_forward_batch(s_net_, x.middleCols(idx(co), idx(cn)));
    return squash(s);
  }

  Matrix forward(const Matrix& x, Vector& log_det, Cache* cache) const {
    const auto [co, cn] = cond_range();
    const auto [to, tn] = trans_range();
    const Matrix cond = x.middleCols(idx(co), idx(cn));
    Matrix t = mlp_forward_batch(t_net_, cond, cache ? &cache->t_cache : nullptr);
    Matrix s_raw = mlp_forward_batch(s_net_, cond, cache ? &cache->s_cache : nullptr);
    const Matrix s = squash(s_raw);
    const Matrix scale = s.array().exp().matrix();
    Matrix y = x;
    y.middleCols(idx(to), idx(tn)) = t + x.middleCols(idx(to), idx(tn)).cwiseProduct(scale);
    log_det += s.rowwise().sum();
    if (cache) {
      cache->transformed_in = x.middleCols(idx(to), idx(tn));
      cache->s_raw = std::move(s_raw);
      cache->scale = scale;
    }
    return y;
  }

  Matrix backward(const Cache& cache, const Matrix& grad_y, const Vector& grad_log_det,
                  CouplingLayer& grads) const {
    const auto [co, cn] = cond_range();
    const auto [to, tn] = trans_range();
    const Matrix gy_trans = grad_y.middleCols(idx(to), idx(tn));
    Matrix gx = grad_y;
    gx.middleCols(idx(to), idx(tn)) = gy_trans.cwiseProduct(cache.scale);
    // d/ds of (x*exp(s)) plus the log-det term, then through the squashing.
    Matrix gs = gy_trans.cwiseProduct(cache.transformed_in).cwiseProduct(cache.scale);
    gs.colwise() += grad_log_det;
    const Matrix inner = (cache.s_raw.array() / s_max_).tanh().matrix();
    gs.array() *= 1.0 - inner.array().square();
    Matrix g_cond = mlp_backward_batch(t_net_, cache.t_cache, gy_trans, grads.t_net_);
    g_cond += mlp_backward_batch(s_net_, cache.s_cache, gs, grads.s_net_);
    gx.middleCols(idx(co), idx(cn)) += g_cond;
    return gx;
  }

  Matrix inverse(const Matrix& y) const {
    const auto [co, cn] = cond_range();
    const auto [to, tn] = trans_range();
    const Matrix cond = y.middleCols(idx(co), idx(cn));
    const Matrix t = mlp_forward_batch(t_net_, cond);
    const Matrix s = squash(mlp_forward_batch(s_net_, cond));
    Matrix x = y;
    x.middleCols(idx(to), idx(tn)) =
        (y.middleCols(idx(to), idx(tn)) - t).cwiseProduct((-s).array().exp().matrix());
    return x;
  }

  CouplingLayer zeros_like() const {
    CouplingLayer z = *this;
    z.t_net_ = t_net_.zeros_like();
    z.s_net_ = s_net_.zeros_like();
    return z;
  }

  template <class F>
  void visit_params(F&& f) {
    t_net_.visit_params(f);
    s_net_.visit_params(f);
  }
  template <class F>
  void visit_params(F&& f) const {
    t_net_.visit_params(f);
    s_net_.visit_params(f);
  }

 private:
  static Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }
  Matrix squash(const Matrix& s_raw) const { return s_max_ * (s_raw.array() / s_max_).tanh().matrix(); }

  std::size_t dim_ = 0;
  std::size_t split_ = 0;
  CouplingOrientation orientation_ = CouplingOrientation::copy_first;
  MlpNetwork t_net_;
  MlpNetwork s_net_;
  double s_max_ = 5.0;
};

// ---------------------------------------------------------------------------
// Fixed permutation

namespace detail {
inline void check_permutation(const std::vector<std::size_t>& perm, std::size_t dim) {
  if (perm.size() != dim) throw ShapeError("permutation has wrong length");
  std::vector<bool> seen(dim, false);
  for (std::size_t p : perm) {
    if (p >= dim || seen[p]) throw ShapeError("permutation is not a bijection");
    seen[p] = true;
  }
}

inline std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}
}  // namespace detail

/// y[:, i] = x[:, perm[i]].
class PermutationLayer {
 public:
  struct Cache {};

  PermutationLayer() = default;
  explicit PermutationLayer(std::vector<std::size_t> perm) : perm_(std::move(perm)) {
    detail::check_permutation(perm_, perm_.size());
  }

  static PermutationLayer reverse(std::size_t dim) {
    std::vector<std::size_t> p(dim);
    for (std::size_t i = 0; i < dim; ++i) p[i] = dim - 1 - i;
    return PermutationLayer(std::move(p));
  }

  std::size_t dim() const { return perm_.size(); }
  const std::vector<std::size_t>& perm() const { return perm_; }
  PermutationLayer inverted() const { return PermutationLayer(detail::invert_permutation(perm_)); }

  Matrix forward(const Matrix& x, Vector& /*log_det*/, Cache* /*cache*/) const {
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < perm_.size(); ++i) y.col(idx(i)) = x.col(idx(perm_[i]));
    return y;
  }

  Matrix backward(const Cache&, const Matrix& grad_y, const Vector&, PermutationLayer&) const {
    Matrix gx(grad_y.rows(), grad_y.cols());
    for (std::size_t i = 0; i < perm_.size(); ++i) gx.col(idx(perm_[i])) = grad_y.col(idx(i));
    return gx;
  }

  Matrix inverse(const Matrix& y) const {
    Matrix x(y.rows(), y.cols());
    for (std::size_t i = 0; i < perm_.size(); ++i) x.col(idx(perm_[i])) = y.col(idx(i));
    return x;
  }

  PermutationLayer zeros_like() const { return *this; }
  template <class F>
  void visit_params(F&&) {}
  template <class F>
  void visit_params(F&&) const {}

 private:
  static Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }
  std::vector<std::size_t> perm_;
};

// ---------------------------------------------------------------------------
// Dense invertible linear map in LU form

/// y = W x with W = P L U: P a fixed permutation, L unit lower triangular,
/// U upper triangular with diagonal sign * exp(log_magnitude). Signs and P are
/// fixed; the strictly triangular entries and log-magnitudes are trained.
class InvertibleLinearLayer {
 public:
  struct Cache {
    Matrix input;
  };

  InvertibleLinearLayer() = default;

  InvertibleLinearLayer(std::vector<std::size_t> perm, Vector lower, Vector upper, Vector log_magnitude,
                        Vector sign)
      : perm_(std::move(perm)), lower_(std::move(lower)), upper_(std::move(upper)),
        log_mag_(std::move(log_magnitude)), sign_(std::move(sign)) {
    const std::size_t d = perm_.size();
    detail::check_permutation(perm_, d);
    const auto tri = static_cast<Eigen::Index>(d * (d - 1) / 2);
    if (lower_.size() != tri || upper_.size() != tri || log_mag_.size() != idx(d) || sign_.size() != idx(d))
      throw ShapeError("InvertibleLinearLayer: parameter sizes do not match dimension");
    for (Eigen::Index i = 0; i < sign_.size(); ++i)
      if (sign_[i] != 1.0 && sign_[i] != -1.0) throw ShapeError("InvertibleLinearLayer: signs must be +-1");
  }

  static InvertibleLinearLayer identity(std::size_t dim) {
    std::vector<std::size_t> p(dim);
    std::iota(p.begin(), p.end(), std::size_t{0});
    const auto tri = static_cast<Eigen::Index>(dim * (dim - 1) / 2);
    return {std::move(p), Vector::Zero(tri), Vector::Zero(tri), Vector::Zero(idx(dim)),
            Vector::Ones(idx(dim))};
  }

  /// LU factorization of a random rotation.
  static InvertibleLinearLayer random_rotation(std::size_t dim, Rng& rng) {
    const auto n = idx(dim);
    Matrix g(n, n);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
    Eigen::HouseholderQR<Matrix> qr(g);
    const Matrix q = qr.householderQ() * Matrix::Identity(n, n);
    return from_matrix(q);
  }

  /// Factorizes an invertible matrix via partial-pivot LU.
  static InvertibleLinearLayer from_matrix(const Matrix& w) {
    const auto n = w.rows();
    if (w.cols() != n) throw ShapeError("InvertibleLinearLayer: matrix must be square");
    Eigen::PartialPivLU<Matrix> lu(w);
    const Matrix packed = lu.matrixLU();
    // Eigen: P_e W = L U  =>  W = P_e^T L U.
    const Matrix p_mat = Matrix(lu.permutationP()).transpose();
    std::vector<std::size_t> perm(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index j;
      p_mat.row(i).maxCoeff(&j);
      perm[static_cast<std::size_t>(i)] = static_cast<std::size_t>(j);
    }
    const auto tri = n * (n - 1) / 2;
    Vector lower(tri), upper(tri), log_mag(n), sign(n);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < i; ++j) lower[k++] = packed(i, j);
    k = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = i + 1; j < n; ++j) upper[k++] = packed(i, j);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (packed(i, i) == 0.0) throw NotInvertibleError("InvertibleLinearLayer: singular matrix");
      log_mag[i] = std::log(std::abs(packed(i, i)));
      sign[i] = packed(i, i) > 0.0 ? 1.0 : -1.0;
    }
    return {std::move(perm), std::move(lower), std::move(upper), std::move(log_mag), std::move(sign)};
  }

  std::size_t dim() const { return perm_.size(); }
  const std::vector<std::size_t>& perm() const { return perm_; }
  const Vector& lower_params() const { return lower_; }
  const Vector& upper_params() const { return upper_; }
  const Vector& log_magnitude() const { return log_mag_; }
  const Vector& sign() const { return sign_; }

  Matrix lower() const {
    const auto n = idx(dim());
    Matrix l = Matrix::Identity(n, n);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < i; ++j) l(i, j) = lower_[k++];
    return l;
  }
  Matrix upper() const {
    const auto n = idx(dim());
    Matrix u = Matrix::Zero(n, n);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      u(i, i) = sign_[i] * std::exp(log_mag_[i]);
      for (Eigen::Index j = i + 1; j < n; ++j) u(i, j) = upper_[k++];
    }
    return u;
  }
  Matrix permutation_matrix() const {
    const auto n = idx(dim());
    Matrix p = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) p(i, idx(perm_[static_cast<std::size_t>(i)])) = 1.0;
    return p;
  }
  Matrix weight() const { return permutation_matrix() * lower() * upper(); }
  double log_abs_det() const { return log_mag_.sum(); }

  Matrix forward(const Matrix& x, Vector& log_det, Cache* cache) const {
    Matrix y = x * weight().transpose();
    log_det.array() += log_abs_det();
    if (cache) cache->input = x;
    return y;
  }

  Matrix backward(const Cache& cache, const Matrix& grad_y, const Vector& grad_log_det,
                  InvertibleLinearLayer& grads) const {
    const Matrix l = lower();
    const Matrix u = upper();
    const Matrix p = permutation_matrix();
    const Matrix w = p * l * u;
    const Matrix gw = grad_y.transpose() * cache.input;
    const Matrix m = p.transpose() * gw;
    const Matrix gl = m * u.transpose();
    const Matrix gu = l.transpose() * m;
    const auto n = idx(dim());
    const double gld = grad_log_det.sum();
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < i; ++j) grads.lower_[k++] += gl(i, j);
    k = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      grads.log_mag_[i] += gu(i, i) * u(i, i) + gld;
      for (Eigen::Index j = i + 1; j < n; ++j) grads.upper_[k++] += gu(i, j);
    }
    return grad_y * w;
  }

  Matrix inverse(const Matrix& y) const {
    // x = U^-1 L^-1 P^T y, applied to columns of y^T.
    Matrix rhs = permutation_matrix().transpose() * y.transpose();
    lower().triangularView<Eigen::UnitLower>().solveInPlace(rhs);
    upper().triangularView<Eigen::Upper>().solveInPlace(rhs);
    return rhs.transpose();
  }

  InvertibleLinearLayer zeros_like() const {
    InvertibleLinearLayer z = *this;
    z.lower_.setZero();
    z.upper_.setZero();
    z.log_mag_.setZero();
    return z;
  }

  template <class F>
  void visit_params(F&& f) {
    f(as_span(lower_));
    f(as_span(upper_));
    f(as_span(log_mag_));
  }
  template <class F>
  void visit_params(F&& f) const {
    f(as_span(lower_));
    f(as_span(upper_));
    f(as_span(log_mag_));
  }

 private:
  static Eigen::Index idx(std::size_t i) { return static_cast<Eigen::Index>(i); }
  std::vector<std::size_t> perm_;
  Vector lower_;
  Vector upper_;
  Vector log_mag_;
  Vector sign_;
};

// ---------------------------------------------------------------------------
// Planar flow

/// y = x + u_hat * tanh(w.x + b), with u_hat = u + (m(w.u) - w.u) w / |w|^2 and
/// m(a) = -1 + softplus(a). Then w.u_hat > -1, so 1 + tanh'(.) w.u_hat > 0 and
/// the map is a bijection. No closed-form inverse: density evaluation only.
class PlanarLayer {
 public:
  struct Cache {
    Matrix input;
    Vector h;
  };

  PlanarLayer() = default;
  PlanarLayer(Vector u, Vector w, double b) : u_(std::move(u)), w_(std::move(w)), b_(b) {
    if (u_.size() != w_.size()) throw ShapeError("PlanarLayer: u and w must have equal length");
  }

  static PlanarLayer build(std::size_t dim, Rng& rng, double stddev = 0.1) {
    Vector u(static_cast<Eigen::Index>(dim)), w(static_cast<Eigen::Index>(dim));
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = rng.normal(0.0, stddev);
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
    return {std::move(u), std::move(w), 0.0};
  }

  std::size_t dim() const { return static_cast<std::size_t>(u_.size()); }
  const Vector& u() const { return u_; }
  const Vector& w() const { return w_; }
  double b() const { return b_; }

  /// The reparameterized u actually applied.
  Vector u_hat() const {
    const double w2 = w_.squaredNorm();
    if (w2 == 0.0) return u_;
    const double a = w_.dot(u_);
    return u_ + ((-1.0 + softplus(a)) - a) / w2 * w_;
  }

  Matrix forward(const Matrix& x, Vector& log_det, Cache* cache) const {
    const Vector uh = u_hat();
    const double m = w_.squaredNorm() == 0.0 ? 0.0 : -1.0 + softplus(w_.dot(u_));
    const Vector v = (x * w_).array() + b_;
    const Vector h = v.array().tanh();
    const Vector hp = 1.0 - h.array().square();
    Matrix y = x + h * uh.transpose();
    log_det.array() += (1.0 + hp.array() * m).log();
    if (cache) {
      cache->input = x;
      cache->h = h;
    }
    return y;
  }

  Matrix backward(const Cache& cache, const Matrix& grad_y, const Vector& grad_log_det,
                  PlanarLayer& grads) const {
    const double w2 = w_.squaredNorm();
    const double a = w_.dot(u_);
    const bool reparam = w2 != 0.0;
    const double m = reparam ? -1.0 + softplus(a) : 0.0;
    const Vector uh = u_hat();
    const Vector& h = cache.h;
    const Vector hp = 1.0 - h.array().square();
    const Vector det = 1.0 + hp.array() * m;

    const Vector gy_uh = grad_y * uh;
    const Vector g_v = gy_uh.array() * hp.array() +
                       grad_log_det.array() * m * (-2.0 * h.array() * hp.array()) / det.array();
    Matrix gx = grad_y + g_v * w_.transpose();

    const Vector g_uh = grad_y.transpose() * h;
    Vector g_w = cache.input.transpose() * g_v;
    Vector g_u = g_uh;
    if (reparam) {
      const double gw_dot = g_uh.dot(w_);
      const double g_m = (grad_log_det.array() * hp.array() / det.array()).sum() + gw_dot / w2;
      const double g_a = g_m * sigmoid(a) - gw_dot / w2;
      g_u += g_a * w_;
      g_w += g_a * u_ + (m - a) * (g_uh / w2 - 2.0 * gw_dot / (w2 * w2) * w_);
    }
    grads.u_ += g_u;
    grads.w_ += g_w;
    grads.b_ += g_v.sum();
    return gx;
  }

  PlanarLayer zeros_like() const {
    return {Vector::Zero(u_.size()), Vector::Zero(w_.size()), 0.0};
  }

  template <class F>
  void visit_params(F&& f) {
    f(as_span(u_));
    f(as_span(w_));
    f(as_span(b_));
  }
  template <class F>
  void visit_params(F&& f) const {
    f(as_span(u_));
    f(as_span(w_));
    f(as_span(b_));
  }

 private:
  Vector u_;
  Vector w_;
  double b_ = 0.0;
};

// ---------------------------------------------------------------------------
// Stack

using FlowLayer = std::variant<CouplingLayer, PermutationLayer, InvertibleLinearLayer, PlanarLayer>;
using FlowLayerCache =
    std::variant<CouplingLayer::Cache, PermutationLayer::Cache, InvertibleLinearLayer::Cache, PlanarLayer::Cache>;

inline std::size_t layer_dim(const FlowLayer& layer) {
  return std::visit([](const auto& l) { return l.dim(); }, layer);
}

inline std::string layer_kind(const FlowLayer& layer) {
  switch (layer.index()) {
    case 0: return "coupling";
    case 1: return "permutation";
    case 2: return "linear";
    default: return "planar";
  }
}

struct FlowResult {
  Vector z;
  double log_det = 0.0;
};

struct FlowBatchResult {
  Matrix z;
  Vector log_det;
};

/// Per-layer activations recorded by a forward pass, consumed by backward.
struct FlowTrace {
  std::vector<FlowLayerCache> caches;
};

class FlowStack {
 public:
  FlowStack() = default;
  FlowStack(std::size_t dim, std::vector<FlowLayer> layers) : dim_(dim), layers_(std::move(layers)) {
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layer_dim(layers_[i]) != dim_)
        throw ShapeError("FlowStack: layer " + std::to_string(i) + " has dimension " +
                         std::to_string(layer_dim(layers_[i])) + ", stack has " + std::to_string(dim_));
  }

  std::size_t dim() const { return dim_; }
  std::size_t depth() const { return layers_.size(); }
  const std::vector<FlowLayer>& layers() const { return layers_; }

  bool invertible() const {
    for (const auto& l : layers_)
      if (std::holds_alternative<PlanarLayer>(l)) return false;
    return true;
  }

  FlowBatchResult forward(const Matrix& x, FlowTrace* trace = nullptr) const {
    check_cols(x, "flow_forward");
    FlowBatchResult out{x, Vector::Zero(x.rows())};
    if (!x.allFinite()) throw NumericError("flow_forward: non-finite input", -1);
    if (trace) trace->caches.clear();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      std::visit(
          [&](const auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            if (trace) {
              typename L::Cache c;
              out.z = layer.forward(out.z, out.log_det, &c);
              trace->caches.emplace_back(std::move(c));
            } else {
              out.z = layer.forward(out.z, out.log_det, nullptr);
            }
          },
          layers_[i]);
      if (!out.z.allFinite() || !out.log_det.allFinite())
        throw NumericError("flow_forward: non-finite value after layer " + std::to_string(i) + " (" +
                               layer_kind(layers_[i]) + ")",
                           static_cast<std::ptrdiff_t>(i));
    }
    return out;
  }

  /// Backprop through the stack. Accumulates into `grads` (shaped like this
  /// stack) and returns the gradient with respect to the input batch.
  Matrix backward(const FlowTrace& trace, const Matrix& grad_z, const Vector& grad_log_det,
                  FlowStack& grads) const {
    if (trace.caches.size() != layers_.size())
      throw ConsistencyError("flow backward: trace does not match stack depth");
    Matrix g = grad_z;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      std::visit(
          [&](const auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            const auto* cache = std::get_if<typename L::Cache>(&trace.caches[i]);
            auto* lg = std::get_if<L>(&grads.layers_[i]);
            if (!cache || !lg) throw ConsistencyError("flow backward: layer kind mismatch");
            g = layer.backward(*cache, g, grad_log_det, *lg);
          },
          layers_[i]);
    }
    return g;
  }

  Matrix inverse(const Matrix& z) const {
    check_cols(z, "flow_inverse");
    if (!invertible())
      throw NotInvertibleError("flow_inverse: stack contains a planar layer, which has no closed-form inverse");
    Matrix x = z;
    for (std::size_t i = layers_.size(); i-- > 0;)
      x = std::visit([&](const auto& layer) -> Matrix {
        if constexpr (std::is_same_v<std::decay_t<decltype(layer)>, PlanarLayer>) {
          throw NotInvertibleError("flow_inverse: planar layer");
        } else {
          return layer.inverse(x);
        }
      }, layers_[i]);
    return x;
  }

  FlowStack zeros_like() const {
    FlowStack z;
    z.dim_ = dim_;
    for (const auto& l : layers_)
      z.layers_.push_back(std::visit([](const auto& layer) -> FlowLayer { return layer.zeros_like(); }, l));
    return z;
  }

  template <class F>
  void visit_params(F&& f) {
    for (auto& l : layers_) std::visit([&](auto& layer) { layer.visit_params(f); }, l);
  }
  template <class F>
  void visit_params(F&& f) const {
    for (const auto& l : layers_) std::visit([&](const auto& layer) { layer.visit_params(f); }, l);
  }

 private:
  void check_cols(const Matrix& m, const char* what) const {
    if (static_cast<std::size_t>(m.cols()) != dim_)
      throw ShapeError(std::string(what) + ": expected dimension " + std::to_string(dim_) + ", got " +
                       std::to_string(m.cols()));
  }

  std::size_t dim_ = 0;
  std::vector<FlowLayer> layers_;
};

/// RealNVP-style stack: `depth` coupling layers with split ceil(D/2) and
/// alternating orientation, optionally each preceded by an LU linear layer.
inline FlowStack make_coupling_stack(std::size_t dim, std::size_t depth, std::span<const std::size_t> hidden,
                                     Activation act, Rng& rng, bool with_linear = false,
                                     double output_std = 0.01, double s_max = 5.0) {
  if (dim < 2) throw ShapeError("make_coupling_stack: coupling layers need D >= 2");
  std::vector<FlowLayer> layers;
  const std::size_t split = (dim + 1) / 2;
  for (std::size_t l = 0; l < depth; ++l) {
    Rng layer_rng = rng.split(l);
    if (with_linear) {
      Rng lin_rng = layer_rng.split("linear");
      layers.emplace_back(InvertibleLinearLayer::random_rotation(dim, lin_rng));
    }
    const auto orient = l % 2 == 0 ? CouplingOrientation::copy_first : CouplingOrientation::copy_second;
    layers.emplace_back(CouplingLayer::build(dim, split, orient, hidden, act, layer_rng, output_std, s_max));
  }
  rng.next_u64();
  return FlowStack(dim, std::move(layers));
}

inline FlowStack make_planar_stack(std::size_t dim, std::size_t depth, Rng& rng, double stddev = 0.1) {
  std::vector<FlowLayer> layers;
  for (std::size_t l = 0; l < depth; ++l) {
    Rng layer_rng = rng.split(l);
    layers.emplace_back(PlanarLayer::build(dim, layer_rng, stddev));
  }
  rng.next_u64();
  return FlowStack(dim, std::move(layers));
}

// ---------------------------------------------------------------------------
// Latent prior

/// Factorized zero-mean Gaussian. Variances are stored as log-variances; the
/// fixed `variance_scale` multiplies every variance (1/lambda when the prior is
/// tempered by the generative weight).
struct LatentPrior {
  Vector log_variance;
  double variance_scale = 1.0;

  static LatentPrior standard(std::size_t dim) { return {Vector::Zero(static_cast<Eigen::Index>(dim)), 1.0}; }

  std::size_t dim() const { return static_cast<std::size_t>(log_variance.size()); }
  Vector variance() const { return log_variance.array().exp() * variance_scale; }

  Vector log_prob(const Matrix& z) const {
    if (static_cast<std::size_t>(z.cols()) != dim()) throw ShapeError("LatentPrior: dimension mismatch");
    const Vector var = variance();
    const double log_norm = -0.5 * (static_cast<double>(dim()) * kLog2Pi + var.array().log().sum());
    return (-0.5 * (z.array().square().rowwise() / var.transpose().array()).rowwise().sum()).matrix().array() +
           log_norm;
  }
  double log_prob(const Vector& z) const { return log_prob(Matrix(z.transpose()))[0]; }

  /// Accumulates d(sum_n w_n log p(z_n))/d(log_variance) into grads and returns d/dZ.
  Matrix backward(const Matrix& z, const Vector& row_weights, LatentPrior& grads) const {
    const Vector var = variance();
    const Matrix z2 = z.array().square().matrix();
    const Vector per_dim = (z2.transpose() * row_weights).array() / (2.0 * var.array()) -
                           0.5 * row_weights.sum();
    grads.log_variance += per_dim;
    Matrix gz = -(z.array().rowwise() / var.transpose().array()).matrix();
    gz.array().colwise() *= row_weights.array();
    return gz;
  }

  Vector sample(Rng& rng) const {
    const Vector sd = variance().array().sqrt();
    Vector z(sd.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal() * sd[i];
    return z;
  }

  LatentPrior zeros_like() const { return {Vector::Zero(log_variance.size()), variance_scale}; }

  template <class F>
  void visit_params(F&& f) {
    f(as_span(log_variance));
  }
  template <class F>
  void visit_params(F&& f) const {
    f(as_span(log_variance));
  }
};

// ---------------------------------------------------------------------------
// Single-point operations

inline FlowResult flow_forward(const FlowStack& stack, const Vector& x) {
  auto r = stack.forward(x.transpose());
  return {r.z.row(0).transpose(), r.log_det[0]};
}

inline Vector flow_inverse(const FlowStack& stack, const Vector& z) {
  return stack.inverse(z.transpose()).row(0).transpose();
}

/// log p_z(f(x)) + log|df/dx| for each row of x.
inline Vector log_px(const FlowStack& stack, const LatentPrior& prior, const Matrix& x) {
  auto r = stack.forward(x);
  return prior.log_prob(r.z) + r.log_det;
}
inline double log_px(const FlowStack& stack, const LatentPrior& prior, const Vector& x) {
  return log_px(stack, prior, Matrix(x.transpose()))[0];
}

inline Vector flow_sample(const FlowStack& stack, const LatentPrior& prior, Rng& rng) {
  if (!stack.invertible()) throw NotInvertibleError("flow_sample: stack contains a planar layer");
  return flow_inverse(stack, prior.sample(rng));
}

/// f^-1(alpha f(x1) + (1 - alpha) f(x2)) for each alpha.
inline std::vector<Vector> interpolate_latent(const FlowStack& stack, const Vector& x1, const Vector& x2,
                                              std::span<const double> alphas) {
  if (!stack.invertible()) throw NotInvertibleError("interpolate_latent: stack contains a planar layer");
  const Vector z1 = flow_forward(stack, x1).z;
  const Vector z2 = flow_forward(stack, x2).z;
  Matrix zs(static_cast<Eigen::Index>(alphas.size()), z1.size());
  for (std::size_t i = 0; i < alphas.size(); ++i)
    zs.row(static_cast<Eigen::Index>(i)) = (alphas[i] * z1 + (1.0 - alphas[i]) * z2).transpose();
  const Matrix xs = stack.inverse(zs);
  std::vector<Vector> out;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) out.emplace_back(xs.row(i).transpose());
  return out;
}

}  // namespace diglm
