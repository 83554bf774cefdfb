#pragma once

// Run configuration: a single JSON document describing data, model, training,
// rejection and semi-supervised settings. Parsing collects every problem
// (unknown keys, wrong types, out-of-range values) before failing.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diglm/datagen.hpp"
#include "diglm/error.hpp"
#include "diglm/flow.hpp"
#include "diglm/heads.hpp"
#include "diglm/hybrid.hpp"
#include "diglm/random.hpp"

namespace diglm {

using json = nlohmann::json;

struct LayerSpec {
  std::string kind = "coupling";  // coupling | linear | permutation | planar
  std::vector<std::size_t> hidden = {32, 32};
  Activation activation = Activation::relu;
  std::string init = "rotation";  // linear: rotation | identity
  std::string order = "reverse";  // permutation: reverse | random
  std::size_t repeat = 1;
};

struct HeadSpec {
  std::string kind = "softmax";  // softmax | gaussian | heteroscedastic | bayes_linear
  std::size_t classes = 2;
  double prior_precision = 1.0;
  double noise_variance = 1.0;
  bool intercept = true;
};

struct ModelSpec {
  std::vector<LayerSpec> flow = {LayerSpec{.repeat = 4}};
  HeadSpec head;
  double dropout = 0.0;
  double s_max = 5.0;
  double coupling_output_std = 0.01;
  double planar_init_std = 0.1;
  std::optional<double> prior_variance;  // initial latent variance, 1 when unset
};

struct DataSpec {
  std::string generator;  // empty when reading CSV
  std::size_t n = 500;
  std::size_t n_test = 0;  // covariate_shift only; 0 means "same as n"
  double noise = 0.1;
  double separation = 20.0;
  double shift = 2.0;
  bool noise_is_std = false;
  bool noise_free = false;
  std::string csv_path;
  CsvSchema schema;
  double test_fraction = 0.2;
  bool standardize = true;
};

struct SslSpec {
  std::size_t labeled_count = 10;
  double entropy_weight = 1.0;
  bool stratified = true;
  std::vector<std::uint64_t> seeds = {0};
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataSpec data;
  ModelSpec model;
  TrainConfig train;
  double slack_c = 0.0;
  std::optional<SslSpec> ssl;
  std::string output_dir = "out";
};

inline const std::vector<std::string>& known_generators() {
  static const std::vector<std::string> g = {"gmm_cubic", "half_moons", "two_gaussians_ood", "gmm_2d",
                                             "covariate_shift"};
  return g;
}

namespace detail {

// Walks one JSON object, remembering which keys were read so the rest can be
// reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path, std::vector<std::string>& problems)
      : j_(j), path_(std::move(path)), problems_(problems) {
    if (!j_.is_object()) problems_.push_back(where() + " must be an object");
  }
  ~ObjectReader() { finish(); }
  ObjectReader(const ObjectReader&) = delete;
  ObjectReader& operator=(const ObjectReader&) = delete;

  bool ok() const { return j_.is_object(); }
  bool has(const std::string& key) {
    seen_.insert(key);
    return ok() && j_.contains(key);
  }
  const json* raw(const std::string& key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }
  std::string child_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void number(const std::string& key, double& out, double lo, double hi, bool lo_open = false) {
    const json* v = raw(key);
    if (!v) return;
    if (!v->is_number()) return bad(key, "must be a number");
    const double x = v->get<double>();
    if (!(lo_open ? x > lo : x >= lo) || !(x <= hi)) return bad(key, "must be in " + range(lo, hi, lo_open));
    out = x;
  }
  void number(const std::string& key, std::optional<double>& out, double lo, double hi, bool lo_open = false) {
    if (!has(key)) return;
    double x = 0.0;
    const std::size_t before = problems_.size();
    number(key, x, lo, hi, lo_open);
    if (problems_.size() == before) out = x;
  }
  void count(const std::string& key, std::size_t& out, std::size_t lo, std::size_t hi = 100000000) {
    const json* v = raw(key);
    if (!v) return;
    if (!v->is_number_integer() || v->get<long long>() < 0) return bad(key, "must be a non-negative integer");
    const auto x = v->get<unsigned long long>();
    if (x < lo || x > hi) return bad(key, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    out = static_cast<std::size_t>(x);
  }
  void seed(const std::string& key, std::uint64_t& out) {
    const json* v = raw(key);
    if (!v) return;
    if (!v->is_number_integer() || v->get<long long>() < 0) return bad(key, "must be a non-negative integer");
    out = v->get<std::uint64_t>();
  }
  void boolean(const std::string& key, bool& out) {
    const json* v = raw(key);
    if (!v) return;
    if (!v->is_boolean()) return bad(key, "must be true or false");
    out = v->get<bool>();
  }
  void string(const std::string& key, std::string& out, const std::vector<std::string>& allowed = {}) {
    const json* v = raw(key);
    if (!v) return;
    if (!v->is_string()) return bad(key, "must be a string");
    const auto s = v->get<std::string>();
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      return bad(key, "must be one of {" + list + "}, got '" + s + "'");
    }
    out = s;
  }
  void counts(const std::string& key, std::vector<std::size_t>& out, std::size_t lo) {
    const json* v = raw(key);
    if (!v) return;
    if (!v->is_array()) return bad(key, "must be an array of integers");
    std::vector<std::size_t> r;
    for (const auto& e : *v) {
      if (!e.is_number_integer() || e.get<long long>() < static_cast<long long>(lo))
        return bad(key, "entries must be integers >= " + std::to_string(lo));
      r.push_back(e.get<std::size_t>());
    }
    out = std::move(r);
  }
  void bad(const std::string& key, const std::string& msg) { problems_.push_back(child_path(key) + " " + msg); }

  void finish() {
    if (finished_ || !ok()) return;
    finished_ = true;
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) problems_.push_back("unknown key '" + child_path(k) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  static std::string range(double lo, double hi, bool lo_open) {
    std::ostringstream s;
    s << (lo_open ? "(" : "[") << lo << ", " << hi << "]";
    return s.str();
  }
  const json& j_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
  bool finished_ = false;
};

inline constexpr double kBig = 1e300;

inline void read_layer(const json& j, const std::string& path, LayerSpec& l, std::vector<std::string>& problems) {
  ObjectReader r(j, path, problems);
  r.string("kind", l.kind, {"coupling", "linear", "permutation", "planar"});
  r.counts("hidden", l.hidden, 1);
  std::string act = to_string(l.activation);
  r.string("activation", act, {"tanh", "relu", "identity"});
  l.activation = activation_from_string(act);
  r.string("init", l.init, {"rotation", "identity"});
  r.string("order", l.order, {"reverse", "random"});
  r.count("repeat", l.repeat, 1, 1000);
}

inline void read_model(const json& j, ModelSpec& m, std::vector<std::string>& problems) {
  ObjectReader r(j, "model", problems);
  if (const json* flow = r.raw("flow")) {
    if (!flow->is_array() || flow->empty()) {
      r.bad("flow", "must be a non-empty array of layer objects");
    } else {
      m.flow.clear();
      for (std::size_t i = 0; i < flow->size(); ++i) {
        LayerSpec l;
        read_layer((*flow)[i], "model.flow[" + std::to_string(i) + "]", l, problems);
        m.flow.push_back(l);
      }
    }
  }
  if (const json* h = r.raw("head")) {
    ObjectReader hr(*h, "model.head", problems);
    hr.string("kind", m.head.kind, {"softmax", "gaussian", "heteroscedastic", "bayes_linear"});
    hr.count("classes", m.head.classes, 2, 100000);
    hr.number("prior_precision", m.head.prior_precision, 0.0, kBig, true);
    hr.number("noise_variance", m.head.noise_variance, 0.0, kBig, true);
    hr.boolean("intercept", m.head.intercept);
  }
  r.number("dropout", m.dropout, 0.0, 0.95);
  r.number("s_max", m.s_max, 0.0, 100.0, true);
  r.number("coupling_output_std", m.coupling_output_std, 0.0, 10.0);
  r.number("planar_init_std", m.planar_init_std, 0.0, 10.0);
  r.number("prior_variance", m.prior_variance, 0.0, kBig, true);
}

inline void read_data(const json& j, DataSpec& d, std::vector<std::string>& problems) {
  ObjectReader r(j, "data", problems);
  r.string("generator", d.generator, known_generators());
  r.count("n", d.n, 1);
  r.count("n_test", d.n_test, 0);
  r.number("noise", d.noise, 0.0, kBig);
  r.number("separation", d.separation, 0.0, kBig);
  r.number("shift", d.shift, -kBig, kBig);
  r.boolean("noise_is_std", d.noise_is_std);
  r.boolean("noise_free", d.noise_free);
  r.number("test_fraction", d.test_fraction, 0.0, 0.95);
  r.boolean("standardize", d.standardize);
  if (const json* c = r.raw("csv")) {
    ObjectReader cr(*c, "data.csv", problems);
    cr.string("path", d.csv_path);
    if (const json* f = cr.raw("features")) {
      if (!f->is_array()) {
        cr.bad("features", "must be an array of column names");
      } else {
        for (const auto& e : *f) {
          if (!e.is_string()) {
            cr.bad("features", "entries must be strings");
            break;
          }
          d.schema.feature_columns.push_back(e.get<std::string>());
        }
      }
    }
    std::string label;
    cr.string("label", label);
    if (!label.empty()) d.schema.label_column = label;
    std::string kind = label.empty() ? "none" : "categorical";
    cr.string("label_kind", kind, {"none", "categorical", "real"});
    d.schema.label_kind = kind == "none" ? LabelKind::none : kind == "real" ? LabelKind::real : LabelKind::categorical;
    cr.count("classes", d.schema.class_count, 0, 100000);
    if (d.csv_path.empty()) cr.bad("path", "is required");
    if (d.schema.label_kind != LabelKind::none && !d.schema.label_column)
      cr.bad("label", "is required when label_kind is not 'none'");
  }
  if (d.generator.empty() == d.csv_path.empty())
    problems.push_back("data must name exactly one of 'generator' or 'csv'");
  if (d.generator == "half_moons" && d.n < 2) problems.push_back("data.n must be >= 2 for half_moons");
  if (d.generator == "two_gaussians_ood" && !(d.separation > 0.0))
    problems.push_back("data.separation must be > 0 for two_gaussians_ood");
}

inline void read_train(const json& j, TrainConfig& t, std::vector<std::string>& problems) {
  ObjectReader r(j, "train", problems);
  r.count("epochs", t.epochs, 0, 1000000);
  r.count("batch_size", t.batch_size, 1);
  r.number("learning_rate", t.learning_rate, 0.0, 10.0);
  r.number("lambda", t.lambda_gen, 0.0, kBig);
  r.boolean("lambda_per_dim", t.lambda_per_dim);
  r.number("entropy_weight", t.entropy_weight, 0.0, kBig);
  r.boolean("learn_prior", t.learn_prior);
  r.boolean("temper_prior", t.temper_prior);
  r.boolean("full_batch_evidence", t.full_batch_evidence);
  r.count("restarts", t.restarts, 1, 1000);
  if (t.temper_prior && !(t.lambda_gen > 0.0)) r.bad("temper_prior", "needs lambda > 0");
}

inline void read_ssl(const json& j, SslSpec& s, std::vector<std::string>& problems) {
  ObjectReader r(j, "ssl", problems);
  r.count("labeled_count", s.labeled_count, 1);
  r.number("entropy_weight", s.entropy_weight, 0.0, kBig);
  r.boolean("stratified", s.stratified);
  if (const json* v = r.raw("seeds")) {
    if (!v->is_array() || v->empty()) {
      r.bad("seeds", "must be a non-empty array of non-negative integers");
    } else {
      s.seeds.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer() || e.get<long long>() < 0) {
          r.bad("seeds", "entries must be non-negative integers");
          break;
        }
        s.seeds.push_back(e.get<std::uint64_t>());
      }
    }
  }
}

}  // namespace detail

/// Parses and validates a config document; throws ConfigError listing every problem.
inline RunConfig parse_config(const json& j) {
  std::vector<std::string> problems;
  RunConfig c;
  {
    detail::ObjectReader r(j, "", problems);
    r.seed("seed", c.seed);
    if (const json* d = r.raw("data"))
      detail::read_data(*d, c.data, problems);
    else
      problems.push_back("data is required");
    if (const json* m = r.raw("model")) detail::read_model(*m, c.model, problems);
    if (const json* t = r.raw("train")) detail::read_train(*t, c.train, problems);
    if (const json* rej = r.raw("rejection")) {
      detail::ObjectReader rr(*rej, "rejection", problems);
      rr.number("slack_c", c.slack_c, 0.0, detail::kBig);
    }
    if (const json* s = r.raw("ssl")) {
      SslSpec ssl;
      detail::read_ssl(*s, ssl, problems);
      c.ssl = ssl;
    }
    r.string("output_dir", c.output_dir);
  }
  const bool classifier = c.model.head.kind == "softmax";
  const auto& g = c.data.generator;
  if ((g == "gmm_cubic" || g == "covariate_shift") && classifier)
    problems.push_back("model.head.kind must be a regression head for generator '" + g + "'");
  if ((g == "half_moons" || g == "two_gaussians_ood" || g == "gmm_2d") && !classifier)
    problems.push_back("model.head.kind must be 'softmax' for generator '" + g + "'");
  if (c.train.entropy_weight && !classifier) problems.push_back("train.entropy_weight needs a softmax head");
  if (c.ssl && !classifier && c.ssl->entropy_weight > 0.0) problems.push_back("ssl.entropy_weight needs a softmax head");
  if (c.model.dropout > 0.0 && c.model.head.kind == "bayes_linear")
    problems.push_back("model.dropout must be 0 with a bayes_linear head");
  c.train.seed = c.seed;
  c.train.standardize = c.data.standardize;
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({"config file '" + path.string() + "' is not valid JSON: " + e.what()});
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Model spec <-> JSON (stored in checkpoints)

inline json to_json(const ModelSpec& m) {
  json flow = json::array();
  for (const auto& l : m.flow) {
    json lj = {{"kind", l.kind}, {"repeat", l.repeat}};
    if (l.kind == "coupling") {
      lj["hidden"] = l.hidden;
      lj["activation"] = to_string(l.activation);
    } else if (l.kind == "linear") {
      lj["init"] = l.init;
    } else if (l.kind == "permutation") {
      lj["order"] = l.order;
    }
    flow.push_back(lj);
  }
  json head = {{"kind", m.head.kind}};
  if (m.head.kind == "softmax") head["classes"] = m.head.classes;
  if (m.head.kind == "bayes_linear") {
    head["prior_precision"] = m.head.prior_precision;
    head["noise_variance"] = m.head.noise_variance;
    head["intercept"] = m.head.intercept;
  }
  json j = {{"flow", flow},
            {"head", head},
            {"dropout", m.dropout},
            {"s_max", m.s_max},
            {"coupling_output_std", m.coupling_output_std},
            {"planar_init_std", m.planar_init_std}};
  if (m.prior_variance) j["prior_variance"] = *m.prior_variance;
  return j;
}

inline ModelSpec model_spec_from_json(const json& j) {
  std::vector<std::string> problems;
  ModelSpec m;
  detail::read_model(j, m, problems);
  if (!problems.empty()) throw ConfigError(problems);
  return m;
}

// ---------------------------------------------------------------------------
// Construction

inline std::size_t head_output_classes(const ModelSpec& m) { return m.head.kind == "softmax" ? m.head.classes : 0; }

/// Expands `repeat` and builds every layer from its own child stream.
/// Coupling orientation alternates over the coupling layers of the stack.
inline FlowStack build_flow(const ModelSpec& spec, std::size_t dim, Rng& rng) {
  std::vector<FlowLayer> layers;
  std::size_t index = 0, couplings = 0;
  const std::size_t split = (dim + 1) / 2;
  for (const auto& l : spec.flow) {
    for (std::size_t r = 0; r < l.repeat; ++r, ++index) {
      Rng lr = rng.split(index);
      if (l.kind == "coupling") {
        if (dim < 2) throw ShapeError("coupling layers need at least 2 input dimensions; use planar layers for 1-D data");
        const auto orient = couplings++ % 2 == 0 ? CouplingOrientation::copy_first : CouplingOrientation::copy_second;
        layers.emplace_back(CouplingLayer::build(dim, split, orient, l.hidden, l.activation, lr,
                                                 spec.coupling_output_std, spec.s_max));
      } else if (l.kind == "linear") {
        layers.emplace_back(l.init == "identity" ? InvertibleLinearLayer::identity(dim)
                                                 : InvertibleLinearLayer::random_rotation(dim, lr));
      } else if (l.kind == "permutation") {
        if (l.order == "reverse") {
          layers.emplace_back(PermutationLayer::reverse(dim));
        } else {
          std::vector<std::size_t> p(dim);
          for (std::size_t i = 0; i < dim; ++i) p[i] = i;
          lr.shuffle(p);
          layers.emplace_back(PermutationLayer(std::move(p)));
        }
      } else {
        layers.emplace_back(PlanarLayer::build(dim, lr, spec.planar_init_std));
      }
    }
  }
  rng.next_u64();
  return FlowStack(dim, std::move(layers));
}

inline GlmHead build_head(const HeadSpec& h, std::size_t dim, Rng& rng) {
  if (h.kind == "softmax") return SoftmaxHead::build(dim, h.classes, rng);
  if (h.kind == "gaussian") return GaussianHead::zeros(dim);
  if (h.kind == "heteroscedastic") return HeteroscedasticHead::zeros(dim);
  if (h.kind == "bayes_linear") return BayesLinearHead::isotropic(dim, h.prior_precision, h.noise_variance, h.intercept);
  throw ConfigError({"model.head.kind '" + h.kind + "' is not a known head"});
}

inline HybridModel build_model(const ModelSpec& spec, std::size_t dim, Rng& rng) {
  Rng flow_rng = rng.split("flow");
  Rng head_rng = rng.split("head");
  rng.next_u64();
  HybridModel m;
  m.flow = build_flow(spec, dim, flow_rng);
  m.prior = LatentPrior::standard(dim);
  if (spec.prior_variance) m.prior.log_variance.setConstant(std::log(*spec.prior_variance));
  m.head = build_head(spec.head, dim, head_rng);
  m.dropout_rate = spec.dropout;
  m.validate();
  return m;
}

}  // namespace diglm
