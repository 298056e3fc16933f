#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "difftab/errors.hpp"
#include "difftab/guidance.hpp"
#include "difftab/rng.hpp"
#include "difftab/tensor.hpp"
#include "difftab/trainer.hpp"

namespace difftab {

// A [rows, features] matrix whose entries are exactly 0 or 1.
class BinaryMatrix {
 public:
  explicit BinaryMatrix(Tensor m) : m_(std::move(m)) {
    if (m_.rank() != 2) throw DimensionError("binary matrix must be rank 2");
    for (std::size_t i = 0; i < m_.size(); ++i) {
      if (m_[i] != 0.0 && m_[i] != 1.0) {
        throw ContractError("binary matrix entry " + std::to_string(i) +
                            " is " + std::to_string(m_[i]) +
                            ", expected exactly 0 or 1");
      }
    }
  }

  std::size_t rows() const { return m_.dim(0); }
  std::size_t cols() const { return m_.dim(1); }
  double operator()(std::size_t i, std::size_t j) const { return m_(i, j); }
  const Tensor& tensor() const { return m_; }

 private:
  Tensor m_;
};

// Per-dimension empirical success probability (column mean).
inline std::vector<double> dimension_probs(const BinaryMatrix& m) {
  if (m.rows() == 0) throw ContractError("dimension_probs of an empty matrix");
  std::vector<double> p(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) p[j] += m(i, j);
  for (double& v : p) v /= static_cast<double>(m.rows());
  return p;
}

// Threshold continuous output into the binary metric space; an entry becomes
// 1 iff it is strictly above the threshold, so exact ties map to 0.
inline BinaryMatrix binarize(const Tensor& x, double threshold = 0.5) {
  if (!std::isfinite(threshold))
    throw ContractError("binarize threshold must be finite");
  if (x.rank() != 2) throw DimensionError("binarize expects a rank-2 tensor");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > threshold ? 1.0 : 0.0;
  return BinaryMatrix(std::move(out));
}

// Alternative post-processing: treat each entry as a success probability
// (clamped to [0,1]) and draw per-entry Bernoulli outcomes.
inline BinaryMatrix binarize_bernoulli(const Tensor& x, Rng& rng) {
  if (x.rank() != 2) throw DimensionError("binarize expects a rank-2 tensor");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double p = std::clamp(x[i], 0.0, 1.0);
    out[i] = rng.bernoulli(p) ? 1.0 : 0.0;
  }
  return BinaryMatrix(std::move(out));
}

struct MetricsReport {
  std::vector<double> dim_probs_real;
  std::vector<double> dim_probs_synth;
  // Pearson correlation of the probability vectors; empty when either vector
  // has zero variance (correlation undefined there, never reported as 0).
  std::optional<double> rho;
  double sae = 0.0;
  double rmse = 0.0;
};

namespace detail {

inline std::optional<double> pearson(const std::vector<double>& x,
                                     const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace detail

// Dimension-probability agreement between a real and a synthetic matrix.
inline MetricsReport eval_binary(const BinaryMatrix& real,
                                 const BinaryMatrix& synth) {
  if (real.cols() != synth.cols()) {
    throw DimensionError("feature counts differ: " +
                         std::to_string(real.cols()) + " vs " +
                         std::to_string(synth.cols()));
  }
  MetricsReport rep;
  rep.dim_probs_real = dimension_probs(real);
  rep.dim_probs_synth = dimension_probs(synth);
  rep.rho = detail::pearson(rep.dim_probs_real, rep.dim_probs_synth);
  double sq = 0.0;
  for (std::size_t j = 0; j < rep.dim_probs_real.size(); ++j) {
    double diff = rep.dim_probs_real[j] - rep.dim_probs_synth[j];
    rep.sae += std::fabs(diff);
    sq += diff * diff;
  }
  rep.rmse = std::sqrt(sq / static_cast<double>(rep.dim_probs_real.size()));
  return rep;
}

// Gaussian kernel density estimate evaluated on a grid:
//   density(g) = (1/(n h)) sum_i phi((g - v_i) / h).
inline std::vector<double> kde(const std::vector<double>& values,
                               double bandwidth,
                               const std::vector<double>& grid) {
  if (values.empty()) throw ContractError("kde of an empty sample");
  if (!(bandwidth > 0.0)) throw ContractError("kde bandwidth must be > 0");
  const double inv_norm = 1.0 / std::sqrt(2.0 * 3.14159265358979323846);
  std::vector<double> out(grid.size(), 0.0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (double v : values) {
      double z = (grid[g] - v) / bandwidth;
      acc += inv_norm * std::exp(-0.5 * z * z);
    }
    out[g] = acc / (static_cast<double>(values.size()) * bandwidth);
  }
  return out;
}

// Normal-reference bandwidth h = 1.06 sigma n^(-1/5), with sigma the sample
// standard deviation.  Degenerate samples (n = 1 or zero spread) fall back to
// h = 1 so the estimate stays defined.
inline double kde_bandwidth(const std::vector<double>& values) {
  if (values.empty()) throw ContractError("kde of an empty sample");
  const std::size_t n = values.size();
  if (n < 2) return 1.0;
  double mean = std::accumulate(values.begin(), values.end(), 0.0) /
                static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  double sigma = std::sqrt(ss / static_cast<double>(n - 1));
  if (sigma == 0.0) return 1.0;
  return 1.06 * sigma * std::pow(static_cast<double>(n), -0.2);
}

inline std::vector<double> kde(const std::vector<double>& values,
                               const std::vector<double>& grid) {
  return kde(values, kde_bandwidth(values), grid);
}

// Mann-Whitney AUC with half credit for ties, computed from midranks.
inline double auc(const std::vector<double>& scores,
                  const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw DimensionError("one label per score required");
  std::size_t npos = 0, nneg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ContractError("auc labels must be 0 or 1");
    (y == 1 ? npos : nneg)++;
  }
  if (npos == 0 || nneg == 0)
    throw ContractError("auc requires both classes present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    double midrank = 0.5 * static_cast<double>(i + j - 1) + 1.0;  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_pos += midrank;
    i = j;
  }
  double u = rank_sum_pos -
             static_cast<double>(npos) * static_cast<double>(npos + 1) / 2.0;
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

struct AugmentationPoint {
  std::size_t n_synth = 0;
  double auc = 0.0;
};

// Downstream-task harness: train a logistic classifier on the real rows plus
// a growing prefix of the synthetic pool and score it by held-out AUC.  The
// classifier is retrained from scratch at every point with the same seed, so
// the n_synth = 0 row is exactly the real-only baseline.
inline std::vector<AugmentationPoint> augmentation_curve(
    const Tensor& real_x, const std::vector<int>& real_y,
    const Tensor& synth_x, const std::vector<int>& synth_y,
    const Tensor& test_x, const std::vector<int>& test_y, std::size_t step,
    const TrainConfig& cfg) {
  if (step < 1) throw ContractError("augmentation step must be >= 1");
  if (real_x.rank() != 2 || synth_x.rank() != 2 || test_x.rank() != 2)
    throw DimensionError("augmentation inputs must be rank 2");
  if (real_x.dim(1) != synth_x.dim(1) || real_x.dim(1) != test_x.dim(1))
    throw DimensionError("augmentation feature widths differ");
  if (real_y.size() != real_x.dim(0) || synth_y.size() != synth_x.dim(0) ||
      test_y.size() != test_x.dim(0))
    throw DimensionError("one label per row required");

  const std::size_t d = real_x.dim(1);
  std::vector<AugmentationPoint> curve;
  for (std::size_t n = 0;; n += step) {
    n = std::min(n, synth_x.dim(0));
    Tensor x({real_x.dim(0) + n, d});
    std::vector<int> y(real_x.dim(0) + n);
    for (std::size_t i = 0; i < real_x.dim(0); ++i) {
      for (std::size_t j = 0; j < d; ++j) x(i, j) = real_x(i, j);
      y[i] = real_y[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) x(real_x.dim(0) + i, j) = synth_x(i, j);
      y[real_x.dim(0) + i] = synth_y[i];
    }

    ClassifierConfig cc;
    cc.kind = ClassifierKind::logistic;
    cc.feature_dim = static_cast<int>(d);
    cc.num_classes = 2;
    cc.time_conditioned = false;
    Rng init(derive_seed(cfg.seed, 0x617567));
    GuidanceClassifier clf(cc, init);
    train_classifier_clean(clf, x, y, cfg);

    Tensor probs = clf.probabilities(test_x, 1);
    std::vector<double> scores(test_x.dim(0));
    for (std::size_t i = 0; i < scores.size(); ++i) scores[i] = probs(i, 1);
    curve.push_back({n, auc(scores, test_y)});
    if (n >= synth_x.dim(0)) break;
  }
  return curve;
}

}  // namespace difftab
