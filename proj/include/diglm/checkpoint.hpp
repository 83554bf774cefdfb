#pragma once

// Checkpoint files: one JSON document with sorted keys and shortest
// round-trip decimal floats, so save -> load -> save is byte-identical and a
// loaded model reproduces every density and prediction bit for bit.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "diglm/error.hpp"
#include "diglm/pipeline.hpp"

namespace diglm {

inline constexpr int kCheckpointFormatVersion = 1;

namespace ckpt {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DataError("checkpoint: " + what);
}

inline json vec(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    require(std::isfinite(v[i]), "non-finite parameter");
    a.push_back(v[i]);
  }
  return a;
}
inline Vector vec(const json& j) {
  require(j.is_array(), "expected an array of numbers");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    require(j[i].is_number(), "expected a number");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

// Row-major flattening.
inline json mat(const Matrix& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      require(std::isfinite(m(r, c)), "non-finite parameter");
      a.push_back(m(r, c));
    }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", a}};
}
inline Matrix mat(const json& j) {
  require(j.is_object() && j.contains("rows") && j.contains("cols") && j.contains("data"), "malformed matrix");
  const auto rows = j.at("rows").get<Eigen::Index>(), cols = j.at("cols").get<Eigen::Index>();
  const Vector flat = vec(j.at("data"));
  require(flat.size() == rows * cols, "matrix data length mismatch");
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = flat[r * cols + c];
  return m;
}

inline json indices(const std::vector<std::size_t>& p) { return json(p); }
inline std::vector<std::size_t> indices(const json& j) {
  require(j.is_array(), "expected an index array");
  return j.get<std::vector<std::size_t>>();
}

inline json mlp(const MlpNetwork& net) {
  json a = json::array();
  for (const auto& L : net.layers())
    a.push_back({{"activation", to_string(L.activation)}, {"weight", mat(L.weight)}, {"bias", vec(L.bias)}});
  return a;
}
inline MlpNetwork mlp(const json& j) {
  require(j.is_array(), "malformed network");
  std::vector<DenseLayer> layers;
  for (const auto& l : j)
    layers.push_back({mat(l.at("weight")), vec(l.at("bias")), activation_from_string(l.at("activation").get<std::string>())});
  return MlpNetwork(std::move(layers));
}

inline json layer(const FlowLayer& l) {
  return std::visit(
      [](const auto& x) -> json {
        using L = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<L, CouplingLayer>) {
          return {{"kind", "coupling"},
                  {"dim", x.dim()},
                  {"split", x.split()},
                  {"orientation", x.orientation() == CouplingOrientation::copy_first ? "copy_first" : "copy_second"},
                  {"s_max", x.s_max()},
                  {"t_net", mlp(x.t_net())},
                  {"s_net", mlp(x.s_net())}};
        } else if constexpr (std::is_same_v<L, PermutationLayer>) {
          return {{"kind", "permutation"}, {"perm", indices(x.perm())}};
        } else if constexpr (std::is_same_v<L, InvertibleLinearLayer>) {
          return {{"kind", "linear"},
                  {"perm", indices(x.perm())},
                  {"lower", vec(x.lower_params())},
                  {"upper", vec(x.upper_params())},
                  {"log_magnitude", vec(x.log_magnitude())},
                  {"sign", vec(x.sign())}};
        } else {
          return {{"kind", "planar"}, {"u", vec(x.u())}, {"w", vec(x.w())}, {"b", x.b()}};
        }
      },
      l);
}

inline FlowLayer layer(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "coupling") {
    const auto o = j.at("orientation").get<std::string>();
    require(o == "copy_first" || o == "copy_second", "unknown coupling orientation");
    return CouplingLayer(j.at("dim").get<std::size_t>(), j.at("split").get<std::size_t>(),
                         o == "copy_first" ? CouplingOrientation::copy_first : CouplingOrientation::copy_second,
                         mlp(j.at("t_net")), mlp(j.at("s_net")), j.at("s_max").get<double>());
  }
  if (kind == "permutation") return PermutationLayer(indices(j.at("perm")));
  if (kind == "linear")
    return InvertibleLinearLayer(indices(j.at("perm")), vec(j.at("lower")), vec(j.at("upper")),
                                 vec(j.at("log_magnitude")), vec(j.at("sign")));
  if (kind == "planar") return PlanarLayer(vec(j.at("u")), vec(j.at("w")), j.at("b").get<double>());
  throw DataError("checkpoint: unknown layer kind '" + kind + "'");
}

inline json head(const GlmHead& h) {
  return std::visit(
      [](const auto& x) -> json {
        using H = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<H, SoftmaxHead>) {
          return {{"kind", "softmax"}, {"weights", mat(x.weights)}, {"bias", vec(x.bias)}};
        } else if constexpr (std::is_same_v<H, GaussianHead>) {
          return {{"kind", "gaussian"}, {"weights", vec(x.weights)}, {"bias", x.bias}, {"log_noise", x.log_noise}};
        } else if constexpr (std::is_same_v<H, HeteroscedasticHead>) {
          return {{"kind", "heteroscedastic"},
                  {"mean_weights", vec(x.mean_weights)},
                  {"var_weights", vec(x.var_weights)},
                  {"mean_bias", x.mean_bias},
                  {"var_bias", x.var_bias}};
        } else {
          return {{"kind", "bayes_linear"},
                  {"prior_precision", mat(x.prior_precision)},
                  {"noise_variance", x.noise_variance},
                  {"intercept", x.intercept},
                  {"posterior_mean", vec(x.posterior_mean)},
                  {"posterior_cov", mat(x.posterior_cov)}};
        }
      },
      h);
}

inline GlmHead head(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "softmax") return SoftmaxHead{mat(j.at("weights")), vec(j.at("bias"))};
  if (kind == "gaussian")
    return GaussianHead{vec(j.at("weights")), j.at("bias").get<double>(), j.at("log_noise").get<double>()};
  if (kind == "heteroscedastic")
    return HeteroscedasticHead{vec(j.at("mean_weights")), vec(j.at("var_weights")), j.at("mean_bias").get<double>(),
                               j.at("var_bias").get<double>()};
  if (kind == "bayes_linear") {
    BayesLinearHead b;
    b.prior_precision = mat(j.at("prior_precision"));
    b.noise_variance = j.at("noise_variance").get<double>();
    b.intercept = j.at("intercept").get<bool>();
    b.posterior_mean = vec(j.at("posterior_mean"));
    b.posterior_cov = mat(j.at("posterior_cov"));
    return b;
  }
  throw DataError("checkpoint: unknown head kind '" + kind + "'");
}

inline json standardizer(const Standardizer& s) { return {{"mean", vec(s.mean)}, {"stddev", vec(s.stddev)}}; }
inline Standardizer standardizer(const json& j) { return {vec(j.at("mean")), vec(j.at("stddev"))}; }

}  // namespace ckpt

inline json to_json(const TrainedModel& tm) {
  json layers = json::array();
  for (const auto& l : tm.model.flow.layers()) layers.push_back(ckpt::layer(l));
  json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["model_spec"] = to_json(tm.spec);
  j["parameters"] = {{"flow", {{"dim", tm.model.flow.dim()}, {"layers", layers}}},
                     {"prior", {{"log_variance", ckpt::vec(tm.model.prior.log_variance)},
                                {"variance_scale", tm.model.prior.variance_scale}}},
                     {"head", ckpt::head(tm.model.head)},
                     {"lambda", tm.model.lambda_gen},
                     {"dropout", tm.model.dropout_rate}};
  j["input_standardizer"] = ckpt::standardizer(tm.input);
  j["target_standardizer"] = tm.target ? ckpt::standardizer(*tm.target) : json(nullptr);
  j["data"] = {{"feature_names", tm.feature_names},
               {"label_name", tm.label_name},
               {"label_kind", to_string(tm.label_kind)},
               {"class_count", tm.class_count}};
  if (tm.rule)
    j["rejection_rule"] = {
        {"tau", tm.rule->tau}, {"slack_c", tm.rule->slack_c}, {"class_prior", ckpt::vec(tm.rule->class_prior)}};
  else
    j["rejection_rule"] = nullptr;
  j["trace_digest"] = {{"fnv1a64", tm.digest.fnv1a64},
                       {"final_objective", tm.digest.final_objective},
                       {"epochs", tm.digest.epochs}};
  return j;
}

inline TrainedModel trained_model_from_json(const json& j) {
  try {
    ckpt::require(j.is_object(), "document must be an object");
    const int version = j.at("format_version").get<int>();
    ckpt::require(version == kCheckpointFormatVersion,
                  "unsupported format_version " + std::to_string(version));
    TrainedModel tm;
    tm.spec = model_spec_from_json(j.at("model_spec"));
    const auto& p = j.at("parameters");
    std::vector<FlowLayer> layers;
    for (const auto& l : p.at("flow").at("layers")) layers.push_back(ckpt::layer(l));
    tm.model.flow = FlowStack(p.at("flow").at("dim").get<std::size_t>(), std::move(layers));
    tm.model.prior.log_variance = ckpt::vec(p.at("prior").at("log_variance"));
    tm.model.prior.variance_scale = p.at("prior").at("variance_scale").get<double>();
    tm.model.head = ckpt::head(p.at("head"));
    tm.model.lambda_gen = p.at("lambda").get<double>();
    tm.model.dropout_rate = p.at("dropout").get<double>();
    tm.model.validate();
    tm.input = ckpt::standardizer(j.at("input_standardizer"));
    if (!j.at("target_standardizer").is_null()) tm.target = ckpt::standardizer(j.at("target_standardizer"));
    const auto& d = j.at("data");
    tm.feature_names = d.at("feature_names").get<std::vector<std::string>>();
    tm.label_name = d.at("label_name").get<std::string>();
    const auto lk = d.at("label_kind").get<std::string>();
    tm.label_kind = lk == "categorical" ? LabelKind::categorical : lk == "real" ? LabelKind::real : LabelKind::none;
    tm.class_count = d.at("class_count").get<std::size_t>();
    if (!j.at("rejection_rule").is_null()) {
      const auto& r = j.at("rejection_rule");
      tm.rule = RejectionRule{r.at("tau").get<double>(), r.at("slack_c").get<double>(), ckpt::vec(r.at("class_prior"))};
      tm.rule->validate();
    }
    const auto& t = j.at("trace_digest");
    tm.digest = {t.at("fnv1a64").get<std::string>(), t.at("final_objective").get<double>(),
                 t.at("epochs").get<std::size_t>()};
    if (tm.input.dim() != tm.model.dim() || tm.feature_names.size() != tm.model.dim())
      throw DataError("checkpoint: standardizer or feature names do not match the model dimension");
    return tm;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: malformed document: ") + e.what());
  } catch (const ShapeError& e) {
    throw DataError(std::string("checkpoint: inconsistent shapes: ") + e.what());
  }
}

inline std::string checkpoint_text(const TrainedModel& tm) { return to_json(tm).dump(2) + "\n"; }

inline void save_checkpoint(const std::filesystem::path& path, const TrainedModel& tm) {
  const std::string text = checkpoint_text(tm);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

inline TrainedModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("checkpoint '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return trained_model_from_json(j);
}

}  // namespace diglm
