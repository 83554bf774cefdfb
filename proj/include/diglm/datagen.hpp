#pragma once

// Datasets, the synthetic generators for the desk-scale experiments, CSV I/O,
// standardization and labeled/unlabeled splits.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "diglm/error.hpp"
#include "diglm/numerics.hpp"
#include "diglm/random.hpp"

namespace diglm {

enum class LabelKind { none, categorical, real };

inline std::string to_string(LabelKind k) {
  switch (k) {
    case LabelKind::none: return "none";
    case LabelKind::categorical: return "categorical";
    case LabelKind::real: return "real";
  }
  return "none";
}

struct Dataset {
  Matrix features;  // N x D
  LabelKind label_kind = LabelKind::none;
  Vector labels;  // N, categorical labels stored as exact integers
  std::size_t class_count = 0;
  std::string source_tag;
  std::vector<std::string> feature_names;
  std::string label_name = "y";

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
  bool has_labels() const { return label_kind != LabelKind::none; }
  bool empty() const { return features.rows() == 0; }

  void validate() const {
    if (has_labels() && labels.size() != features.rows())
      throw DataError("dataset '" + source_tag + "': label count differs from row count");
    if (label_kind == LabelKind::categorical)
      for (Eigen::Index i = 0; i < labels.size(); ++i)
        if (labels[i] != std::round(labels[i]) || labels[i] < 0 ||
            labels[i] >= static_cast<double>(class_count))
          throw DataError("dataset '" + source_tag + "': categorical label out of range at row " +
                          std::to_string(i));
  }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset out = *this;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    if (has_labels()) out.labels.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(rows[i]);
      out.features.row(static_cast<Eigen::Index>(i)) = features.row(r);
      if (has_labels()) out.labels[static_cast<Eigen::Index>(i)] = labels[r];
    }
    return out;
  }

  Dataset without_labels() const {
    Dataset out = *this;
    out.label_kind = LabelKind::none;
    out.labels.resize(0);
    return out;
  }

  std::vector<std::size_t> label_counts() const {
    std::vector<std::size_t> c(class_count, 0);
    if (label_kind == LabelKind::categorical)
      for (Eigen::Index i = 0; i < labels.size(); ++i) ++c[static_cast<std::size_t>(labels[i])];
    return c;
  }
};

inline std::vector<std::string> default_feature_names(std::size_t dim) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < dim; ++i) names.push_back("x" + std::to_string(i));
  return names;
}

// ---------------------------------------------------------------------------
// Generators

struct GmmCubicOptions {
  bool noise_free = false;
  /// Read the noise parameters 3 and 20 as standard deviations instead of variances.
  bool noise_param_is_std = false;
};

struct GmmCubicDraw {
  Dataset data;
  std::vector<int> component;  // 0, 1, 2
};

inline constexpr double kGmmCubicMeans[3] = {-4.0, 0.0, 4.0};
inline constexpr double kGmmCubicStds[3] = {0.4, 0.6, 0.4};
inline constexpr double kGmmCubicNoise[3] = {3.0, 20.0, 3.0};

/// x from an equal-weight 3-component mixture; y = x^3 + eps(k) with the
/// middle component much noisier than the outer two.
inline GmmCubicDraw sample_gmm_cubic(std::size_t n, Rng& rng, GmmCubicOptions opts = {}) {
  if (n < 1) throw DataError("gen_gmm_cubic: n must be >= 1");
  GmmCubicDraw out;
  out.data.features.resize(static_cast<Eigen::Index>(n), 1);
  out.data.labels.resize(static_cast<Eigen::Index>(n));
  out.data.label_kind = LabelKind::real;
  out.data.source_tag = "gmm_cubic";
  out.data.feature_names = {"x0"};
  for (std::size_t i = 0; i < n; ++i) {
    const int k = static_cast<int>(rng.below(3));
    const double x = rng.normal(kGmmCubicMeans[k], kGmmCubicStds[k]);
    const double noise_sd = opts.noise_param_is_std ? kGmmCubicNoise[k] : std::sqrt(kGmmCubicNoise[k]);
    const double eps = rng.normal(0.0, noise_sd);
    const auto r = static_cast<Eigen::Index>(i);
    out.data.features(r, 0) = x;
    out.data.labels[r] = x * x * x + (opts.noise_free ? 0.0 : eps);
    out.component.push_back(k);
  }
  return out;
}

inline Dataset gen_gmm_cubic(std::size_t n, Rng& rng, GmmCubicOptions opts = {}) {
  return sample_gmm_cubic(n, rng, opts).data;
}

/// Two interleaved half circles of unit radius. Class 0 is the upper arc
/// (cos t, sin t); class 1 is (1 - cos t, 0.5 - sin t). Rows are shuffled.
inline Dataset gen_half_moons(std::size_t n, double noise_std, Rng& rng) {
  if (n < 2) throw DataError("gen_half_moons: n must be >= 2");
  const std::size_t n0 = (n + 1) / 2;
  const std::size_t n1 = n - n0;
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(static_cast<Eigen::Index>(n));
  d.label_kind = LabelKind::categorical;
  d.class_count = 2;
  d.source_tag = "half_moons";
  d.feature_names = {"x0", "x1"};
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  auto arc = [](std::size_t i, std::size_t count) {
    return count > 1 ? std::numbers::pi * static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
  };
  for (std::size_t i = 0; i < n; ++i) {
    const bool first = i < n0;
    const double t = first ? arc(i, n0) : arc(i - n0, n1);
    double x = first ? std::cos(t) : 1.0 - std::cos(t);
    double y = first ? std::sin(t) : 0.5 - std::sin(t);
    x += rng.normal(0.0, noise_std);
    y += rng.normal(0.0, noise_std);
    const auto r = static_cast<Eigen::Index>(order[i]);
    d.features(r, 0) = x;
    d.features(r, 1) = y;
    d.labels[r] = first ? 0.0 : 1.0;
  }
  return d;
}

struct OodPair {
  Dataset in_set;
  Dataset ood_set;
};

/// In-distribution: balanced 2-class mixture N((-2, 0), I) / N((2, 0), I).
/// OOD: a fresh draw from the same mixture translated by `separation`
/// standard deviations along the second axis, labels removed.
inline OodPair gen_two_gaussians_ood(std::size_t n, double separation, Rng& rng) {
  if (!(separation >= 0.0)) throw DataError("gen_two_gaussians_ood: separation must be non-negative");
  auto mixture = [&](Rng& r, double shift) {
    Dataset d;
    d.features.resize(static_cast<Eigen::Index>(n), 2);
    d.labels.resize(static_cast<Eigen::Index>(n));
    d.label_kind = LabelKind::categorical;
    d.class_count = 2;
    d.feature_names = {"x0", "x1"};
    for (std::size_t i = 0; i < n; ++i) {
      const int k = static_cast<int>(i % 2);
      const auto row = static_cast<Eigen::Index>(i);
      d.features(row, 0) = r.normal(k == 0 ? -2.0 : 2.0, 1.0);
      d.features(row, 1) = r.normal(shift, 1.0);
      d.labels[row] = k;
    }
    return d;
  };
  Rng in_rng = rng.split("in");
  Rng ood_rng = rng.split("ood");
  rng.next_u64();
  OodPair out{mixture(in_rng, 0.0), mixture(ood_rng, separation).without_labels()};
  out.in_set.source_tag = "in";
  out.ood_set.source_tag = "ood";
  return out;
}

/// Unlabeled-style 2-D mixture of three anisotropic Gaussians (component id as label).
inline Dataset gen_gmm_2d(std::size_t n, Rng& rng) {
  static constexpr double means[3][2] = {{-2.0, 0.0}, {2.0, 1.0}, {0.0, -2.0}};
  static constexpr double sds[3][2] = {{0.5, 0.8}, {0.7, 0.4}, {0.6, 0.6}};
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(n), 2);
  d.labels.resize(static_cast<Eigen::Index>(n));
  d.label_kind = LabelKind::categorical;
  d.class_count = 3;
  d.source_tag = "gmm_2d";
  d.feature_names = {"x0", "x1"};
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(rng.below(3));
    const auto r = static_cast<Eigen::Index>(i);
    d.features(r, 0) = rng.normal(means[k][0], sds[k][0]);
    d.features(r, 1) = rng.normal(means[k][1], sds[k][1]);
    d.labels[r] = static_cast<double>(k);
  }
  return d;
}

struct ShiftPair {
  Dataset train;
  Dataset test;
};

/// Heteroscedastic regression in 2-D: y = x0 + 0.5 x1^2 + eps, sd(eps) = 0.1 + 0.2 |x0|.
/// Train inputs ~ N(0, I); test inputs ~ N(shift * 1, I).
inline ShiftPair gen_covariate_shift(std::size_t n_train, std::size_t n_test, double shift, Rng& rng) {
  auto draw = [](std::size_t n, double mu, Rng& r, const char* tag) {
    Dataset d;
    d.features.resize(static_cast<Eigen::Index>(n), 2);
    d.labels.resize(static_cast<Eigen::Index>(n));
    d.label_kind = LabelKind::real;
    d.source_tag = tag;
    d.feature_names = {"x0", "x1"};
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const double x0 = r.normal(mu, 1.0);
      const double x1 = r.normal(mu, 1.0);
      d.features(row, 0) = x0;
      d.features(row, 1) = x1;
      d.labels[row] = x0 + 0.5 * x1 * x1 + r.normal(0.0, 0.1 + 0.2 * std::abs(x0));
    }
    return d;
  };
  Rng a = rng.split("train");
  Rng b = rng.split("test");
  rng.next_u64();
  return {draw(n_train, 0.0, a, "train"), draw(n_test, shift, b, "test")};
}

// ---------------------------------------------------------------------------
// CSV

struct CsvSchema {
  std::vector<std::string> feature_columns;  // empty: every column except the label
  std::optional<std::string> label_column;
  LabelKind label_kind = LabelKind::none;
  std::size_t class_count = 0;  // 0: infer as max label + 1
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::optional<double> parse_double(const std::string& s) {
  const std::string t = trim(s);
  if (t.empty()) return std::nullopt;
  const char* first = t.data();
  if (*first == '+') ++first;
  double v = 0.0;
  auto [p, ec] = std::from_chars(first, t.data() + t.size(), v);
  if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

/// Shortest decimal text that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("load_csv: '" + path + "' has no header", 1, 0);
  std::vector<std::string> header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  auto find_col = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("load_csv: column '" + name + "' not in header of '" + path + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  std::optional<std::size_t> label_col;
  if (schema.label_column) label_col = find_col(*schema.label_column);
  std::vector<std::size_t> feat_cols;
  std::vector<std::string> feat_names;
  if (schema.feature_columns.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c)
      if (!label_col || c != *label_col) {
        feat_cols.push_back(c);
        feat_names.push_back(header[c]);
      }
  } else {
    for (const auto& name : schema.feature_columns) {
      feat_cols.push_back(find_col(name));
      feat_names.push_back(name);
    }
  }
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("load_csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                           " cells, header has " + std::to_string(header.size()),
                       lineno, 0);
    std::vector<double> row;
    for (std::size_t c : feat_cols) {
      auto v = detail::parse_double(cells[c]);
      if (!v)
        throw ParseError("load_csv: line " + std::to_string(lineno) + ", column '" + header[c] +
                             "': cannot parse '" + cells[c] + "' as a number",
                         lineno, c + 1);
      row.push_back(*v);
    }
    if (label_col) {
      auto v = detail::parse_double(cells[*label_col]);
      if (!v)
        throw ParseError("load_csv: line " + std::to_string(lineno) + ", column '" + header[*label_col] +
                             "': cannot parse label '" + cells[*label_col] + "'",
                         lineno, *label_col + 1);
      if (schema.label_kind == LabelKind::categorical &&
          (*v != std::round(*v) || *v < 0 ||
           (schema.class_count > 0 && *v >= static_cast<double>(schema.class_count))))
        throw ParseError("load_csv: line " + std::to_string(lineno) + ": label " + cells[*label_col] +
                             " outside the declared class range",
                         lineno, *label_col + 1);
      labels.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  Dataset d;
  d.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(feat_cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < feat_cols.size(); ++j)
      d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  d.feature_names = feat_names;
  d.source_tag = path;
  if (label_col) {
    d.label_kind = schema.label_kind == LabelKind::none ? LabelKind::real : schema.label_kind;
    d.label_name = *schema.label_column;
    d.labels = Eigen::Map<const Vector>(labels.data(), static_cast<Eigen::Index>(labels.size()));
    if (d.label_kind == LabelKind::categorical) {
      d.class_count = schema.class_count;
      if (d.class_count == 0 && !labels.empty())
        d.class_count = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    }
  }
  d.validate();
  return d;
}

inline void save_csv(const std::string& path, const Dataset& d) {
  std::ofstream out(path);
  if (!out) throw IoError("save_csv: cannot write '" + path + "'");
  const auto names = d.feature_names.size() == d.dim() ? d.feature_names : default_feature_names(d.dim());
  for (std::size_t j = 0; j < names.size(); ++j) out << (j ? "," : "") << names[j];
  if (d.has_labels()) out << "," << d.label_name;
  out << "\n";
  for (Eigen::Index i = 0; i < d.features.rows(); ++i) {
    for (Eigen::Index j = 0; j < d.features.cols(); ++j) out << (j ? "," : "") << format_double(d.features(i, j));
    if (d.has_labels()) out << "," << format_double(d.labels[i]);
    out << "\n";
  }
  if (!out) throw IoError("save_csv: write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Standardization

struct Standardizer {
  Vector mean;
  Vector stddev;

  static Standardizer fit(const Matrix& x) {
    if (x.rows() < 2) throw DataError("Standardizer: need at least two rows");
    Standardizer s;
    s.mean = x.colwise().mean().transpose();
    const Matrix c = x.rowwise() - s.mean.transpose();
    s.stddev = (c.array().square().colwise().sum() / static_cast<double>(x.rows())).sqrt().transpose();
    for (Eigen::Index j = 0; j < s.stddev.size(); ++j)
      if (!(s.stddev[j] > 0.0)) throw DataError("Standardizer: column " + std::to_string(j) + " is constant");
    return s;
  }

  static Standardizer identity(std::size_t dim) {
    return {Vector::Zero(static_cast<Eigen::Index>(dim)), Vector::Ones(static_cast<Eigen::Index>(dim))};
  }

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }

  Matrix transform(const Matrix& x) const {
    if (x.cols() != mean.size()) throw ShapeError("Standardizer: dimension mismatch");
    return (x.rowwise() - mean.transpose()).array().rowwise() / stddev.transpose().array();
  }
  Matrix inverse_transform(const Matrix& z) const {
    if (z.cols() != mean.size()) throw ShapeError("Standardizer: dimension mismatch");
    return (z.array().rowwise() * stddev.transpose().array()).matrix().rowwise() + mean.transpose();
  }
  /// log|d transform / dx|.
  double log_abs_det() const { return -stddev.array().log().sum(); }
};

// ---------------------------------------------------------------------------
// Splits

struct SslSplit {
  Dataset labeled;
  Dataset unlabeled;  // labels stripped
};

/// Disjoint, exhaustive split. Stratified mode allocates labeled slots per
/// class by largest remainder with at least one per class.
inline SslSplit ssl_split(const Dataset& data, std::size_t labeled_count, bool stratified, Rng& rng) {
  const std::size_t n = data.size();
  if (labeled_count > n) throw DataError("ssl_split: labeled_count exceeds dataset size");
  std::vector<std::size_t> labeled_rows;
  std::vector<bool> taken(n, false);
  if (stratified) {
    if (data.label_kind != LabelKind::categorical)
      throw DataError("ssl_split: stratified split needs categorical labels");
    const std::size_t c = data.class_count;
    if (labeled_count < c) throw DataError("ssl_split: labeled_count is smaller than the number of classes");
    std::vector<std::vector<std::size_t>> by_class(c);
    for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(data.labels[static_cast<Eigen::Index>(i)])].push_back(i);
    std::vector<std::size_t> quota(c, 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < c; ++k) {
      const double exact = static_cast<double>(labeled_count) * static_cast<double>(by_class[k].size()) /
                           static_cast<double>(n);
      quota[k] = std::min(by_class[k].size(), static_cast<std::size_t>(std::floor(exact)));
      if (quota[k] == 0 && !by_class[k].empty()) quota[k] = 1;
      assigned += quota[k];
      remainders.emplace_back(exact - std::floor(exact), k);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; assigned < labeled_count; i = (i + 1) % c) {
      const std::size_t k = remainders[i].second;
      if (quota[k] < by_class[k].size()) {
        ++quota[k];
        ++assigned;
      }
    }
    while (assigned > labeled_count) {
      // Only reachable when forcing one per class overshoots; trim the largest quota.
      auto it = std::max_element(quota.begin(), quota.end());
      --*it;
      --assigned;
    }
    for (std::size_t k = 0; k < c; ++k) {
      Rng class_rng = rng.split(k);
      class_rng.shuffle(by_class[k]);
      for (std::size_t i = 0; i < quota[k]; ++i) labeled_rows.push_back(by_class[k][i]);
    }
    rng.next_u64();
  } else {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    labeled_rows.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(labeled_count));
  }
  std::sort(labeled_rows.begin(), labeled_rows.end());
  std::vector<std::size_t> unlabeled_rows;
  for (std::size_t r : labeled_rows) taken[r] = true;
  for (std::size_t i = 0; i < n; ++i)
    if (!taken[i]) unlabeled_rows.push_back(i);
  SslSplit out{data.subset(labeled_rows), data.subset(unlabeled_rows).without_labels()};
  out.labeled.source_tag = data.source_tag + ":labeled";
  out.unlabeled.source_tag = data.source_tag + ":unlabeled";
  return out;
}

struct TrainTestSplit {
  Dataset train;
  Dataset test;
};

inline TrainTestSplit split_train_test(const Dataset& data, double test_fraction, Rng& rng) {
  if (test_fraction < 0.0 || test_fraction >= 1.0) throw DataError("split_train_test: test_fraction must be in [0, 1)");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto n_test = static_cast<std::size_t>(std::round(test_fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train), data.subset(test)};
}

}  // namespace diglm
