#pragma once

// Dense linear algebra aliases, small feed-forward networks with exact
// layer-wise backprop, Adam, and the central-difference gradient oracle.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "diglm/error.hpp"
#include "diglm/random.hpp"

namespace diglm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

inline constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

inline double softplus(double a) {
  return a > 0.0 ? a + std::log1p(std::exp(-a)) : std::log1p(std::exp(a));
}

inline double sigmoid(double a) {
  if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

template <class Derived>
double log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// ---------------------------------------------------------------------------
// Parameter visiting
//
// Parametric types expose visit_params(f) in const and non-const form; f is
// called once per contiguous parameter block, always in the same order. The
// helpers below flatten any such type into one vector and back, which is all
// the optimizer and the gradient oracle need.

template <class T>
concept Parametric = requires(T& t, const T& ct) {
  t.visit_params([](std::span<double>) {});
  ct.visit_params([](std::span<const double>) {});
};

template <Parametric T>
std::size_t param_count(const T& obj) {
  std::size_t n = 0;
  obj.visit_params([&](std::span<const double> s) { n += s.size(); });
  return n;
}

template <Parametric T>
Vector flatten_params(const T& obj) {
  Vector out(static_cast<Eigen::Index>(param_count(obj)));
  Eigen::Index k = 0;
  obj.visit_params([&](std::span<const double> s) {
    for (double v : s) out[k++] = v;
  });
  return out;
}

template <Parametric T>
void assign_params(T& obj, const Vector& values) {
  if (static_cast<std::size_t>(values.size()) != param_count(obj))
    throw ShapeError("assign_params: expected " + std::to_string(param_count(obj)) +
                     " values, got " + std::to_string(values.size()));
  Eigen::Index k = 0;
  obj.visit_params([&](std::span<double> s) {
    for (double& v : s) v = values[k++];
  });
}

template <Parametric T>
void fill_params(T& obj, double value) {
  obj.visit_params([&](std::span<double> s) { std::fill(s.begin(), s.end(), value); });
}

/// Overwrites every parameter with an independent N(0, stddev^2) draw.
template <Parametric T>
void randomize_params(T& obj, Rng& rng, double stddev) {
  obj.visit_params([&](std::span<double> s) {
    for (double& v : s) v = rng.normal(0.0, stddev);
  });
}

inline std::span<double> as_span(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
inline std::span<const double> as_span(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
inline std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}
inline std::span<double> as_span(double& x) { return {&x, 1}; }
inline std::span<const double> as_span(const double& x) { return {&x, 1}; }

// ---------------------------------------------------------------------------
// Feed-forward networks

enum class Activation { tanh, relu, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError({"unknown activation '" + s + "'"});
}

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::identity;
};

namespace detail {
inline std::uint64_t next_param_version() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace detail

/// Multi-layer perceptron acting on row-batches: X is B x input_dim.
///
/// Every mutable access to the parameters stamps a fresh version; caches
/// remember the version they were recorded under so backprop can refuse a
/// stale cache.
class MlpNetwork {
 public:
  MlpNetwork() = default;

  explicit MlpNetwork(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ShapeError("MlpNetwork: at least one layer required");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      if (L.bias.size() != L.weight.rows())
        throw ShapeError("MlpNetwork: bias/weight mismatch in layer " + std::to_string(l));
      if (l > 0 && L.weight.cols() != layers_[l - 1].weight.rows())
        throw ShapeError("MlpNetwork: layer " + std::to_string(l) + " does not chain");
    }
    if (layers_.back().activation != Activation::identity)
      throw ShapeError("MlpNetwork: final activation must be identity");
  }

  /// Hidden layers get Glorot-normal weights; the output layer gets
  /// N(0, output_std^2) when output_std >= 0, Glorot otherwise. Biases start at 0.
  static MlpNetwork build(std::size_t input_dim, std::span<const std::size_t> hidden,
                          std::size_t output_dim, Activation act, Rng& rng,
                          double output_std = -1.0) {
    std::vector<DenseLayer> layers;
    std::size_t in = input_dim;
    auto make = [&](std::size_t out, Activation a, double std) {
      DenseLayer L;
      L.weight = Matrix(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
      if (std < 0.0) std = std::sqrt(2.0 / static_cast<double>(in + out));
      for (Eigen::Index i = 0; i < L.weight.size(); ++i) L.weight.data()[i] = rng.normal(0.0, std);
      L.bias = Vector::Zero(static_cast<Eigen::Index>(out));
      L.activation = a;
      layers.push_back(std::move(L));
      in = out;
    };
    for (std::size_t h : hidden) make(h, act, -1.0);
    make(output_dim, Activation::identity, output_std);
    return MlpNetwork(std::move(layers));
  }

  std::size_t input_dim() const { return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.front().weight.cols()); }
  std::size_t output_dim() const { return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.back().weight.rows()); }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::uint64_t version() const { return version_; }

  MlpNetwork zeros_like() const {
    MlpNetwork z = *this;
    fill_params(z, 0.0);
    return z;
  }

  template <class F>
  void visit_params(F&& f) {
    version_ = detail::next_param_version();
    for (auto& L : layers_) {
      f(as_span(L.weight));
      f(as_span(L.bias));
    }
  }
  template <class F>
  void visit_params(F&& f) const {
    for (const auto& L : layers_) {
      f(as_span(L.weight));
      f(as_span(L.bias));
    }
  }

 private:
  std::vector<DenseLayer> layers_;
  std::uint64_t version_ = detail::next_param_version();
};

struct MlpCache {
  std::vector<Matrix> inputs;   // input to each layer
  std::vector<Matrix> preacts;  // pre-activation of each layer
  std::uint64_t version = 0;
};

namespace detail {

inline void apply_activation(Matrix& a, Activation act) {
  switch (act) {
    case Activation::tanh: a = a.array().tanh().matrix(); break;
    case Activation::relu: a = a.cwiseMax(0.0); break;
    case Activation::identity: break;
  }
}

// Multiplies g in place by act'(pre).
inline void scale_by_derivative(Matrix& g, const Matrix& pre, Activation act) {
  switch (act) {
    case Activation::tanh:
      g.array() *= 1.0 - pre.array().tanh().square();
      break;
    case Activation::relu:
      g.array() *= (pre.array() > 0.0).cast<double>();
      break;
    case Activation::identity: break;
  }
}

}  // namespace detail

/// Batched forward pass. Pass a cache to enable mlp_backward_batch.
inline Matrix mlp_forward_batch(const MlpNetwork& net, const Matrix& x, MlpCache* cache = nullptr) {
  if (static_cast<std::size_t>(x.cols()) != net.input_dim())
    throw ShapeError("mlp_forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                     std::to_string(net.input_dim()));
  if (cache) {
    cache->inputs.clear();
    cache->preacts.clear();
    cache->version = net.version();
  }
  Matrix h = x;
  for (const auto& L : net.layers()) {
    Matrix a = h * L.weight.transpose();
    a.rowwise() += L.bias.transpose();
    if (cache) {
      cache->inputs.push_back(std::move(h));
      cache->preacts.push_back(a);
    }
    detail::apply_activation(a, L.activation);
    h = std::move(a);
  }
  return h;
}

/// Batched backprop. Accumulates parameter gradients into `grads` (shaped like
/// `net`) and returns the gradient with respect to the input batch.
inline Matrix mlp_backward_batch(const MlpNetwork& net, const MlpCache& cache, const Matrix& upstream,
                                 MlpNetwork& grads) {
  if (cache.version != net.version() || cache.inputs.size() != net.layers().size())
    throw ConsistencyError("mlp_backward: cache was recorded under different parameters");
  if (static_cast<std::size_t>(upstream.cols()) != net.output_dim() ||
      upstream.rows() != cache.inputs.front().rows())
    throw ShapeError("mlp_backward: upstream gradient has the wrong shape");
  Matrix g = upstream;
  std::size_t l = net.layers().size();
  std::vector<std::pair<Matrix, Vector>> blocks(net.layers().size());
  while (l-- > 0) {
    const auto& L = net.layers()[l];
    detail::scale_by_derivative(g, cache.preacts[l], L.activation);
    blocks[l].first = g.transpose() * cache.inputs[l];
    blocks[l].second = g.colwise().sum().transpose();
    g = g * L.weight;
  }
  std::size_t b = 0;
  grads.visit_params([&](std::span<double> s) {
    const auto& src = (b % 2 == 0) ? as_span(blocks[b / 2].first) : as_span(blocks[b / 2].second);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += src[i];
    ++b;
  });
  return g;
}

/// Single-example forward pass.
inline std::pair<Vector, MlpCache> mlp_forward(const MlpNetwork& net, const Vector& x) {
  MlpCache cache;
  Matrix y = mlp_forward_batch(net, x.transpose(), &cache);
  return {y.row(0).transpose(), std::move(cache)};
}

struct MlpGradients {
  MlpNetwork params;
  Vector input;
};

inline MlpGradients mlp_backward(const MlpNetwork& net, const MlpCache& cache, const Vector& upstream) {
  MlpGradients out{net.zeros_like(), {}};
  out.input = mlp_backward_batch(net, cache, upstream.transpose(), out.params).row(0).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Vector first_moment;
  Vector second_moment;
  std::size_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_size(std::size_t n, double learning_rate) {
    AdamState s;
    s.first_moment = Vector::Zero(static_cast<Eigen::Index>(n));
    s.second_moment = Vector::Zero(static_cast<Eigen::Index>(n));
    s.learning_rate = learning_rate;
    return s;
  }
};

/// One bias-corrected Adam step, descending on `grads`.
inline void adam_step(AdamState& state, Vector& params, const Vector& grads) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size())
    throw ShapeError("adam_step: parameter, gradient and moment shapes differ");
  for (Eigen::Index i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw OptimizationError("adam_step: non-finite gradient at coordinate " + std::to_string(i),
                              static_cast<std::size_t>(i));
  ++state.step;
  const double t = static_cast<double>(state.step);
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
  state.second_moment =
      state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

// ---------------------------------------------------------------------------
// Gradient oracle

/// Central-difference gradient of f at params.
template <class F>
  requires std::invocable<F&, const Vector&>
Vector finite_diff_grad(F&& f, const Vector& params, double step = 1e-6) {
  Vector g(params.size());
  Vector p = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + step;
    const double fp = f(std::as_const(p));
    p[i] = orig - step;
    const double fm = f(std::as_const(p));
    p[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw OracleError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    g[i] = (fp - fm) / (2.0 * step);
  }
  return g;
}

struct GradCheckReport {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

/// Coordinates whose absolute error is within abs_floor pass regardless of
/// relative error; max_rel_error only counts the remaining ones.
inline GradCheckReport compare_gradients(const Vector& analytic, const Vector& numeric,
                                         double rel_tol = 1e-4, double abs_floor = 1e-7) {
  if (analytic.size() != numeric.size()) throw ShapeError("compare_gradients: size mismatch");
  GradCheckReport r;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double abs_err = std::abs(analytic[i] - numeric[i]);
    if (abs_err > r.max_abs_error) r.max_abs_error = abs_err;
    if (abs_err <= abs_floor) continue;
    const double scale = std::max(std::abs(analytic[i]), std::abs(numeric[i]));
    const double rel = abs_err / scale;
    if (rel > r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = static_cast<std::size_t>(i);
    }
  }
  r.passed = r.max_rel_error <= rel_tol;
  return r;
}

template <class F>
GradCheckReport check_gradient(F&& f, const Vector& params, const Vector& analytic, double step = 1e-6,
                               double rel_tol = 1e-4, double abs_floor = 1e-7) {
  return compare_gradients(analytic, finite_diff_grad(f, params, step), rel_tol, abs_floor);
}

}  // namespace diglm
