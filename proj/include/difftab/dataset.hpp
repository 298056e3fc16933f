#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "difftab/errors.hpp"
#include "difftab/rng.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

enum class FeatureKind { binary, continuous };

inline std::string feature_kind_name(FeatureKind k) {
  return k == FeatureKind::binary ? "binary" : "continuous";
}

inline FeatureKind feature_kind_from_name(const std::string& s) {
  if (s == "binary") return FeatureKind::binary;
  if (s == "continuous") return FeatureKind::continuous;
  throw ConfigError("unknown feature kind '" + s + "'");
}

// Per-column z-score statistics; kept alongside standardized features so the
// transform can be undone on generated samples.
struct Standardization {
  std::vector<double> mean;
  std::vector<double> stddev;  // zero-spread columns fall back to 1

  Tensor apply(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != mean.size())
      throw DimensionError("standardization width mismatch");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t j = 0; j < x.dim(1); ++j)
        out(i, j) = (x(i, j) - mean[j]) / stddev[j];
    return out;
  }

  Tensor invert(const Tensor& x) const {
    if (x.rank() != 2 || x.dim(1) != mean.size())
      throw DimensionError("standardization width mismatch");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.dim(0); ++i)
      for (std::size_t j = 0; j < x.dim(1); ++j)
        out(i, j) = x(i, j) * stddev[j] + mean[j];
    return out;
  }
};

inline Standardization fit_standardization(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("standardization expects rank 2");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Standardization s;
  s.mean.assign(d, 0.0);
  s.stddev.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += x(i, j);
  for (std::size_t j = 0; j < d; ++j) s.mean[j] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      s.stddev[j] += (x(i, j) - s.mean[j]) * (x(i, j) - s.mean[j]);
  for (std::size_t j = 0; j < d; ++j) {
    s.stddev[j] = std::sqrt(s.stddev[j] / static_cast<double>(n));
    if (s.stddev[j] == 0.0) s.stddev[j] = 1.0;
  }
  return s;
}

// A loaded table: features (standardized when continuous), optional integer
// labels taken from the final CSV column, and column names.
struct Dataset {
  Tensor features{Shape{1, 1}};
  std::optional<std::vector<int>> labels;
  FeatureKind kind = FeatureKind::continuous;
  std::vector<std::string> columns;
  std::optional<Standardization> standardization;

  std::size_t rows() const { return features.dim(0); }
  std::size_t dim() const { return features.dim(1); }

  void validate() const {
    if (features.rank() != 2) throw DimensionError("features must be rank 2");
    if (labels && labels->size() != features.dim(0))
      throw DimensionError("label count does not match row count");
    if (!columns.empty() && columns.size() != features.dim(1))
      throw DimensionError("column-name count does not match feature count");
    if (kind == FeatureKind::binary) {
      for (std::size_t i = 0; i < features.size(); ++i)
        if (features[i] != 0.0 && features[i] != 1.0)
          throw ContractError("binary dataset entry is not 0/1");
    }
  }
};

namespace detail {

// One CSV record, honoring quoted fields with doubled-quote escapes.  Returns
// false at end of input.  Handles LF and CRLF endings; a quoted field may
// contain newlines.
inline bool read_csv_record(std::istream& in, std::vector<std::string>* out,
                            std::size_t* line_no) {
  out->clear();
  int c = in.peek();
  if (c == EOF) return false;
  std::string field;
  bool quoted = false;
  bool done = false;
  (*line_no)++;
  while (!done) {
    c = in.get();
    if (quoted) {
      if (c == EOF) throw ParseError("unterminated quoted field at line " +
                                     std::to_string(*line_no));
      if (c == '"') {
        if (in.peek() == '"') {
          field.push_back('"');
          in.get();
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') (*line_no)++;
        field.push_back(static_cast<char>(c));
      }
      continue;
    }
    switch (c) {
      case EOF:
        done = true;
        break;
      case '"':
        quoted = true;
        break;
      case ',':
        out->push_back(std::move(field));
        field.clear();
        break;
      case '\r':
        if (in.peek() == '\n') in.get();
        done = true;
        break;
      case '\n':
        done = true;
        break;
      default:
        field.push_back(static_cast<char>(c));
    }
  }
  out->push_back(std::move(field));
  return true;
}

inline double parse_number(const std::string& field, std::size_t row,
                           std::size_t col) {
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  auto res = std::from_chars(first, last, value);
  if (res.ec != std::errc{} || res.ptr != last) {
    throw ParseError("non-numeric cell '" + field + "' at row " +
                     std::to_string(row) + ", column " + std::to_string(col));
  }
  return value;
}

inline int parse_label(const std::string& field, std::size_t row,
                       std::size_t col) {
  double value = parse_number(field, row, col);
  double rounded = std::nearbyint(value);
  if (value != rounded || rounded < 0) {
    throw ParseError("label '" + field + "' at row " + std::to_string(row) +
                     ", column " + std::to_string(col) +
                     " is not a nonnegative integer");
  }
  return static_cast<int>(rounded);
}

}  // namespace detail

// Load a rectangular numeric CSV.  With `labeled`, the final column holds
// integer class labels.  Continuous features are z-scored with the statistics
// stored on the dataset; binary features must already be exactly 0/1.
// Row/column numbers in errors are 1-based over data rows (headers excluded).
inline Dataset load_csv(const std::string& path, FeatureKind kind,
                        bool labeled = false, bool header = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");

  std::vector<std::vector<std::string>> records;
  std::vector<std::string> names;
  std::vector<std::string> rec;
  std::size_t line_no = 0;
  if (header) {
    if (!detail::read_csv_record(in, &rec, &line_no))
      throw ParseError("'" + path + "' is empty");
    names = rec;
  }
  while (detail::read_csv_record(in, &rec, &line_no)) {
    if (rec.size() == 1 && rec[0].empty()) continue;  // blank line
    records.push_back(rec);
  }
  if (records.empty()) throw ParseError("'" + path + "' has no data rows");

  const std::size_t width = records[0].size();
  if (labeled && width < 2)
    throw ParseError("labeled data needs at least one feature column");
  const std::size_t d = labeled ? width - 1 : width;
  if (header && names.size() != width)
    throw ParseError("header has " + std::to_string(names.size()) +
                     " fields but rows have " + std::to_string(width));

  Dataset ds;
  ds.kind = kind;
  ds.features = Tensor({records.size(), d});
  if (labeled) ds.labels.emplace(records.size(), 0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].size() != width) {
      throw ParseError("ragged row " + std::to_string(i + 1) + ": expected " +
                       std::to_string(width) + " fields, got " +
                       std::to_string(records[i].size()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      double v = detail::parse_number(records[i][j], i + 1, j + 1);
      if (kind == FeatureKind::binary && v != 0.0 && v != 1.0) {
        throw ParseError("binary value '" + records[i][j] + "' at row " +
                         std::to_string(i + 1) + ", column " +
                         std::to_string(j + 1) + " is not 0 or 1");
      }
      ds.features(i, j) = v;
    }
    if (labeled) (*ds.labels)[i] = detail::parse_label(records[i][d], i + 1, d + 1);
  }

  if (header) {
    ds.columns.assign(names.begin(), names.begin() + static_cast<long>(d));
  } else {
    for (std::size_t j = 0; j < d; ++j) ds.columns.push_back("f" + std::to_string(j));
  }
  if (kind == FeatureKind::continuous) {
    ds.standardization = fit_standardization(ds.features);
    ds.features = ds.standardization->apply(ds.features);
  }
  ds.validate();
  return ds;
}

// Shortest decimal form that round-trips a double exactly.
inline std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Write features (plus optional integer label column) as CSV.  Values use a
// 17-significant-digit form so a load/save cycle is lossless.
inline void write_csv(const std::string& path, const Tensor& features,
                      const std::vector<int>* labels = nullptr,
                      const std::vector<std::string>* columns = nullptr) {
  if (features.rank() != 2) throw DimensionError("write_csv expects rank 2");
  if (labels && labels->size() != features.dim(0))
    throw DimensionError("label count does not match row count");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  if (columns) {
    if (columns->size() != features.dim(1))
      throw DimensionError("column-name count does not match feature count");
    for (std::size_t j = 0; j < columns->size(); ++j)
      out << (j ? "," : "") << (*columns)[j];
    if (labels) out << ",label";
    out << "\n";
  }
  for (std::size_t i = 0; i < features.dim(0); ++i) {
    for (std::size_t j = 0; j < features.dim(1); ++j)
      out << (j ? "," : "") << format_value(features(i, j));
    if (labels) out << "," << (*labels)[i];
    out << "\n";
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

// ---- Seeded synthetic generators (desk-scale stand-ins with stored truth).

struct BernoulliProduct {
  Dataset data;
  std::vector<double> p;  // ground truth per-dimension success probability
};

inline BernoulliProduct make_bernoulli_product(const std::vector<double>& p,
                                               std::size_t n,
                                               std::uint64_t seed) {
  if (p.empty()) throw ConfigError("bernoulli product needs at least one dim");
  if (n < 1) throw ConfigError("bernoulli product needs at least one row");
  for (double v : p)
    if (!(v >= 0.0 && v <= 1.0))
      throw ConfigError("bernoulli probability " + std::to_string(v) +
                        " outside [0, 1]");
  Rng rng(seed);
  BernoulliProduct out;
  out.p = p;
  out.data.kind = FeatureKind::binary;
  out.data.features = Tensor({n, p.size()});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < p.size(); ++j)
      out.data.features(i, j) = rng.bernoulli(p[j]) ? 1.0 : 0.0;
  for (std::size_t j = 0; j < p.size(); ++j)
    out.data.columns.push_back("f" + std::to_string(j));
  out.data.validate();
  return out;
}

struct GaussianMixture {
  Dataset data;
  std::vector<std::vector<double>> means;      // ground truth
  std::vector<std::vector<double>> variances;  // per-component diagonal
  std::vector<double> weights;
  std::vector<int> components;  // which component produced each row
};

inline GaussianMixture make_gaussian_mixture(
    const std::vector<std::vector<double>>& means,
    const std::vector<std::vector<double>>& variances,
    const std::vector<double>& weights, std::size_t n, std::uint64_t seed) {
  if (means.empty() || means[0].empty())
    throw ConfigError("mixture needs at least one component and dimension");
  if (variances.size() != means.size() || weights.size() != means.size())
    throw ConfigError("mixture component counts disagree");
  const std::size_t d = means[0].size();
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ConfigError("mixture weights must be nonnegative");
    total += w;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw ConfigError("mixture weights must sum to 1");
  for (std::size_t k = 0; k < means.size(); ++k) {
    if (means[k].size() != d || variances[k].size() != d)
      throw ConfigError("mixture component width mismatch");
    for (double v : variances[k])
      if (v < 0.0) throw ConfigError("mixture variances must be nonnegative");
  }
  if (n < 1) throw ConfigError("mixture needs at least one row");

  Rng rng(seed);
  GaussianMixture out;
  out.means = means;
  out.variances = variances;
  out.weights = weights;
  out.data.kind = FeatureKind::continuous;
  out.data.features = Tensor({n, d});
  out.components.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform();
    std::size_t k = 0;
    double acc = weights[0];
    while (k + 1 < weights.size() && u >= acc) acc += weights[++k];
    out.components[i] = static_cast<int>(k);
    for (std::size_t j = 0; j < d; ++j)
      out.data.features(i, j) =
          means[k][j] + std::sqrt(variances[k][j]) * rng.normal();
  }
  for (std::size_t j = 0; j < d; ++j)
    out.data.columns.push_back("f" + std::to_string(j));
  out.data.validate();
  return out;
}

struct TwoClassBlobs {
  Dataset data;  // labels filled: first half class 0, second half class 1
  std::vector<double> mean0, mean1;
  double stddev = 0.0;
};

inline TwoClassBlobs make_two_class_blobs(const std::vector<double>& mean0,
                                          const std::vector<double>& mean1,
                                          double stddev, std::size_t per_class,
                                          std::uint64_t seed) {
  if (mean0.empty() || mean0.size() != mean1.size())
    throw ConfigError("blob class means must share a nonzero width");
  if (!(stddev > 0.0)) throw ConfigError("blob spread must be > 0");
  if (per_class < 1) throw ConfigError("blobs need at least one row per class");
  const std::size_t d = mean0.size();
  Rng rng(seed);
  TwoClassBlobs out;
  out.mean0 = mean0;
  out.mean1 = mean1;
  out.stddev = stddev;
  out.data.kind = FeatureKind::continuous;
  out.data.features = Tensor({2 * per_class, d});
  out.data.labels.emplace(2 * per_class, 0);
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const bool second = i >= per_class;
    const std::vector<double>& mu = second ? mean1 : mean0;
    (*out.data.labels)[i] = second ? 1 : 0;
    for (std::size_t j = 0; j < d; ++j)
      out.data.features(i, j) = mu[j] + stddev * rng.normal();
  }
  for (std::size_t j = 0; j < d; ++j)
    out.data.columns.push_back("f" + std::to_string(j));
  out.data.validate();
  return out;
}

}  // namespace difftab
