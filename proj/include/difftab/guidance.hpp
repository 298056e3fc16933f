#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "difftab/anderson.hpp"
#include "difftab/autodiff.hpp"
#include "difftab/denoiser.hpp"
#include "difftab/errors.hpp"
#include "difftab/rng.hpp"
#include "difftab/sampler.hpp"
#include "difftab/schedule.hpp"
#include "difftab/tensor.hpp"
#include "difftab/trainer.hpp"

namespace difftab {

enum class ClassifierKind { logistic, mlp };

inline std::string classifier_kind_name(ClassifierKind k) {
  return k == ClassifierKind::logistic ? "logistic" : "mlp";
}

inline ClassifierKind classifier_kind_from_name(const std::string& s) {
  if (s == "logistic") return ClassifierKind::logistic;
  if (s == "mlp") return ClassifierKind::mlp;
  throw ConfigError("unknown classifier kind '" + s + "'");
}

struct ClassifierConfig {
  ClassifierKind kind = ClassifierKind::mlp;
  int feature_dim = 0;
  int num_classes = 2;
  bool time_conditioned = true;  // concatenate a timestep embedding
  int time_dim = 16;             // sinusoidal width when time-conditioned
  int hidden = 64;               // mlp width
  int hidden_layers = 2;         // mlp depth

  void validate() const {
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (time_conditioned && (time_dim < 2 || time_dim % 2)) {
      throw ConfigError("time_dim must be even >= 2");
    }
    if (kind == ClassifierKind::mlp && (hidden < 1 || hidden_layers < 1)) {
      throw ConfigError("mlp classifier needs positive width and depth");
    }
  }
};

// Class-probability model p(y | x_t, t) used to steer the reverse process.
// The logistic kind is linear in x (its input gradient has a closed form);
// the mlp kind shares the tape machinery with the denoiser.  Either kind can
// see the timestep through a concatenated sinusoidal embedding.
class GuidanceClassifier {
 public:
  GuidanceClassifier(ClassifierConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const auto& [name, spec] : layer_specs()) {
      params_.add(name, init_tensor(spec, rng));
    }
  }

  GuidanceClassifier(ClassifierConfig cfg, ParamSet params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    auto specs = layer_specs();
    if (specs.size() != params_.size()) {
      throw IoError("parameter count does not match classifier architecture");
    }
    for (const auto& [name, spec] : specs) {
      if (!params_.contains(name)) throw IoError("missing parameter '" + name + "'");
      if (params_.get(name).shape() != spec.shape) {
        throw IoError("parameter '" + name + "' shape mismatch: expected " +
                      shape_str(spec.shape) + ", got " +
                      shape_str(params_.get(name).shape()));
      }
    }
  }

  const ClassifierConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.feature_dim; }
  int num_classes() const { return cfg_.num_classes; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  // Traced logits [batch, classes]; `leaves` from tape.adopt(params()).
  Var trace_logits(GradTape& tape, const std::map<std::string, Var>& leaves,
                   Var x, const std::vector<int>& ts) const {
    const Tensor& xv = tape.value(x);
    if (xv.rank() != 2 || xv.dim(1) != static_cast<std::size_t>(cfg_.feature_dim)) {
      throw DimensionError("classifier input must be [batch, " +
                           std::to_string(cfg_.feature_dim) + "]");
    }
    if (ts.size() != xv.dim(0)) {
      throw DimensionError("classifier: one timestep per batch row required");
    }
    Var h = x;
    if (cfg_.time_conditioned) {
      TimestepEmbedding emb(cfg_.time_dim);
      h = tape.concat_cols(h, tape.input(emb.embed_batch(ts)));
    }
    if (cfg_.kind == ClassifierKind::logistic) {
      return tape.add_row_bias(tape.matmul(h, leaves.at("lin.w")),
                               leaves.at("lin.b"));
    }
    for (int l = 0; l < cfg_.hidden_layers; ++l) {
      std::string base = "fc" + std::to_string(l) + ".";
      h = tape.silu(tape.add_row_bias(tape.matmul(h, leaves.at(base + "w")),
                                      leaves.at(base + "b")));
    }
    return tape.add_row_bias(tape.matmul(h, leaves.at("out.w")),
                             leaves.at("out.b"));
  }

  Tensor logits(const Tensor& x, const std::vector<int>& ts) const {
    GradTape tape;
    auto leaves = tape.adopt(params_);
    return tape.value(trace_logits(tape, leaves, tape.input(x), ts));
  }

  Tensor logits(const Tensor& x, int t) const {
    if (x.rank() != 2) throw DimensionError("classifier input must be rank 2");
    return logits(x, std::vector<int>(x.dim(0), t));
  }

  // Row-wise softmax; each row is positive and sums to 1.
  Tensor probabilities(const Tensor& x, int t) const {
    Tensor lg = logits(x, t);
    Tensor out(lg.shape());
    for (std::size_t i = 0; i < lg.dim(0); ++i) {
      double mx = lg(i, 0);
      for (std::size_t c = 1; c < lg.dim(1); ++c) mx = std::max(mx, lg(i, c));
      double denom = 0.0;
      for (std::size_t c = 0; c < lg.dim(1); ++c) denom += std::exp(lg(i, c) - mx);
      for (std::size_t c = 0; c < lg.dim(1); ++c)
        out(i, c) = std::exp(lg(i, c) - mx) / denom;
    }
    return out;
  }

  std::vector<int> predict(const Tensor& x, int t) const {
    Tensor lg = logits(x, t);
    std::vector<int> out(lg.dim(0));
    for (std::size_t i = 0; i < lg.dim(0); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < lg.dim(1); ++c)
        if (lg(i, c) > lg(i, best)) best = c;
      out[i] = static_cast<int>(best);
    }
    return out;
  }

  // Per-row gradient of log p(y | x, t) with respect to x.  Linear kinds use
  // the closed form grad = W (onehot_y - p); the mlp kind runs the tape
  // backward from the summed row log-likelihoods.
  Tensor log_prob_grad(const Tensor& x, int t, int y) const {
    if (x.rank() != 2 || x.dim(1) != static_cast<std::size_t>(cfg_.feature_dim)) {
      throw DimensionError("classifier input must be [batch, " +
                           std::to_string(cfg_.feature_dim) + "]");
    }
    if (y < 0 || y >= cfg_.num_classes) {
      throw IndexError("label " + std::to_string(y) + " outside [0, " +
                       std::to_string(cfg_.num_classes - 1) + "]");
    }
    if (cfg_.kind == ClassifierKind::logistic) {
      Tensor p = probabilities(x, t);
      const Tensor& w = params_.get("lin.w");  // [in, classes], x block first
      Tensor grad({x.dim(0), x.dim(1)});
      for (std::size_t i = 0; i < x.dim(0); ++i) {
        for (std::size_t j = 0; j < x.dim(1); ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < p.dim(1); ++c) {
            double onehot = static_cast<int>(c) == y ? 1.0 : 0.0;
            acc += w(j, c) * (onehot - p(i, c));
          }
          grad(i, j) = acc;
        }
      }
      return grad;
    }
    return log_prob_grad_tape(x, t, y);
  }

  // Tape-based gradient; for the logistic kind this is the independent check
  // of the closed form.
  Tensor log_prob_grad_tape(const Tensor& x, int t, int y) const {
    GradTape tape;
    auto leaves = tape.adopt(params_);
    Var xv = tape.input(x);
    std::vector<int> ts(x.dim(0), t);
    Var lg = trace_logits(tape, leaves, xv, ts);
    Var loss = tape.nll_loss(lg, std::vector<int>(x.dim(0), y));
    // mean NLL = -(1/B) sum log p; seeding with -B leaves d sum log p / dx.
    tape.backward(loss, -static_cast<double>(x.dim(0)));
    return tape.grad(xv);
  }

 private:
  struct LayerSpec {
    Shape shape;
    double gain = 0.0;
    std::size_t fan_in = 0;
  };

  static constexpr double kSiluGain = 1.6765324703321147;

  Tensor init_tensor(const LayerSpec& spec, Rng& rng) const {
    if (spec.gain == 0.0) return Tensor(spec.shape);
    double bound = spec.gain * std::sqrt(3.0 / static_cast<double>(spec.fan_in));
    return Tensor::rand_uniform(spec.shape, rng, -bound, bound);
  }

  static LayerSpec linear_spec(std::size_t in, std::size_t out, double gain) {
    return {{in, out}, gain, in};
  }
  static LayerSpec bias_spec(std::size_t n) { return {{n}, 0.0, 0}; }

  std::size_t input_width() const {
    return static_cast<std::size_t>(cfg_.feature_dim) +
           (cfg_.time_conditioned ? static_cast<std::size_t>(cfg_.time_dim) : 0);
  }

  std::vector<std::pair<std::string, LayerSpec>> layer_specs() const {
    std::vector<std::pair<std::string, LayerSpec>> specs;
    const std::size_t in = input_width();
    const std::size_t nc = static_cast<std::size_t>(cfg_.num_classes);
    if (cfg_.kind == ClassifierKind::logistic) {
      specs.emplace_back("lin.w", linear_spec(in, nc, 1.0));
      specs.emplace_back("lin.b", bias_spec(nc));
      return specs;
    }
    const std::size_t hid = static_cast<std::size_t>(cfg_.hidden);
    for (int l = 0; l < cfg_.hidden_layers; ++l) {
      std::string base = "fc" + std::to_string(l) + ".";
      specs.emplace_back(base + "w",
                         linear_spec(l == 0 ? in : hid, hid, l == 0 ? 1.0 : kSiluGain));
      specs.emplace_back(base + "b", bias_spec(hid));
    }
    specs.emplace_back("out.w", linear_spec(hid, nc, kSiluGain));
    specs.emplace_back("out.b", bias_spec(nc));
    return specs;
  }

  ClassifierConfig cfg_;
  ParamSet params_;
};

namespace detail {

inline void require_two_classes(const std::vector<int>& labels, int num_classes) {
  if (labels.empty()) throw ConfigError("classifier training needs labels");
  std::set<int> seen(labels.begin(), labels.end());
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ConfigError("label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes - 1) + "]");
    }
  }
  if (seen.size() < 2) {
    throw ConfigError("classifier training needs at least two classes present");
  }
}

// Shared minibatch cross-entropy loop.  When `sched` is non-null each batch
// row is re-noised at a uniformly drawn timestep; otherwise the classifier
// trains on the clean rows with t pinned to 1.
inline TrainResult train_classifier_impl(GuidanceClassifier& clf,
                                         const NoiseSchedule* sched,
                                         const Tensor& data,
                                         const std::vector<int>& labels,
                                         const TrainConfig& cfg) {
  cfg.validate();
  if (data.rank() != 2 ||
      data.dim(1) != static_cast<std::size_t>(clf.feature_dim())) {
    throw DimensionError("classifier data must be [rows, " +
                         std::to_string(clf.feature_dim()) + "]");
  }
  if (labels.size() != data.dim(0)) {
    throw DimensionError("one label per data row required");
  }
  require_two_classes(labels, clf.num_classes());

  const std::size_t n = data.dim(0);
  const std::size_t bsz = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t dim = data.dim(1);

  AdamState adam;
  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    const std::uint64_t batch_seed =
        derive_seed(cfg.seed, static_cast<std::uint64_t>(step));
    Rng rng(batch_seed);

    Tensor x0({bsz, dim});
    std::vector<int> ys(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
      std::size_t row = static_cast<std::size_t>(rng.below(n));
      for (std::size_t j = 0; j < dim; ++j) x0(b, j) = data(row, j);
      ys[b] = labels[row];
    }
    Tensor xt = x0;
    std::vector<int> ts(bsz, 1);
    if (sched) {
      ts = detail::draw_timesteps(rng, bsz, sched->steps());
      Tensor eps = Tensor::randn({bsz, dim}, rng);
      xt = forward_sample_rows(*sched, x0, ts, eps);
    }

    GradTape tape;
    auto leaves = tape.adopt(clf.params());
    Var logits = clf.trace_logits(tape, leaves, tape.input(xt), ts);
    Var loss = tape.nll_loss(logits, ys);
    const double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value)) {
      throw NumericError("classifier loss is not finite at step " +
                         std::to_string(step) + " (batch seed " +
                         std::to_string(batch_seed) + ")");
    }
    tape.backward(loss);
    adam_step(adam, clf.params(), tape.grads(leaves), cfg);
    result.loss_history.push_back(loss_value);
    if (cfg.tolerance > 0.0 && loss_value <= cfg.tolerance) {
      result.reached_tolerance = true;
      break;
    }
  }
  return result;
}

}  // namespace detail

// Train a classifier on noised inputs: each batch row is mixed toward noise
// at its own uniformly drawn timestep, so the classifier learns p(y | x_t, t)
// across the whole schedule.
inline TrainResult train_classifier(GuidanceClassifier& clf,
                                    const NoiseSchedule& sched,
                                    const Tensor& data,
                                    const std::vector<int>& labels,
                                    const TrainConfig& cfg) {
  return detail::train_classifier_impl(clf, &sched, data, labels, cfg);
}

// Train on clean rows (no forward noising); the downstream-task path.
inline TrainResult train_classifier_clean(GuidanceClassifier& clf,
                                          const Tensor& data,
                                          const std::vector<int>& labels,
                                          const TrainConfig& cfg) {
  return detail::train_classifier_impl(clf, nullptr, data, labels, cfg);
}

// Noise prediction steered toward label y:
//   eps' = eps_theta(x_t, t) - scale * sqrt(1 - alpha_bar_t) * d log p(y|x_t).
inline Tensor guided_epsilon(const EpsFn& eps, const GuidanceClassifier& clf,
                             const NoiseSchedule& sched, const Tensor& x_t,
                             int t, int y, double scale = 1.0) {
  Tensor out = eps(x_t, t);
  if (scale == 0.0) return out;
  Tensor grad = clf.log_prob_grad(x_t, t, y);
  require_same_shape(out, grad, "guided_epsilon");
  axpy(out, -scale * sched.sqrt_one_minus_alpha_bar(t), grad);
  return out;
}

inline Tensor guided_epsilon(const DenoiserModel& model,
                             const GuidanceClassifier& clf,
                             const NoiseSchedule& sched, const Tensor& x_t,
                             int t, int y, double scale = 1.0) {
  return guided_epsilon(model.eps_fn(), clf, sched, x_t, t, y, scale);
}

// Bundle the adjustment into a predictor usable by any sampler.  The model,
// classifier, and schedule must outlive the closure.
inline EpsFn make_guided_eps(const DenoiserModel& model,
                             const GuidanceClassifier& clf,
                             const NoiseSchedule& sched, int y,
                             double scale = 1.0) {
  EpsFn base = model.eps_fn();
  return [base, &clf, &sched, y, scale](const Tensor& x, int t) {
    return guided_epsilon(base, clf, sched, x, t, y, scale);
  };
}

// Label-conditioned generation: guided noise prediction inside the
// deterministic reverse process, with optional extrapolation over the
// per-step map (k = 0 disables it).
inline AccelResult conditional_sample(const DenoiserModel& model,
                                      const GuidanceClassifier& clf,
                                      const NoiseSchedule& sched,
                                      const SampleConfig& cfg, int y,
                                      std::size_t n, int k = 0,
                                      double scale = 1.0,
                                      double residual_tol = 1e-3) {
  if (clf.feature_dim() != model.feature_dim()) {
    throw DimensionError("classifier and model feature widths differ");
  }
  if (y < 0 || y >= clf.num_classes()) {
    throw IndexError("label " + std::to_string(y) + " outside [0, " +
                     std::to_string(clf.num_classes() - 1) + "]");
  }
  AndersonConfig aa;
  aa.k = k;
  EpsFn eps = make_guided_eps(model, clf, sched, y, scale);
  return accelerated_sample(eps, sched, cfg, aa, n,
                            static_cast<std::size_t>(model.feature_dim()),
                            residual_tol);
}

}  // namespace difftab
