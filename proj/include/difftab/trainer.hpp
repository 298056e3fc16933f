#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "difftab/autodiff.hpp"
#include "difftab/denoiser.hpp"
#include "difftab/errors.hpp"
#include "difftab/rng.hpp"
#include "difftab/schedule.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 128;
  int steps = 1000;
  double tolerance = 0.0;  // stop early once the loss falls below (0 = never)
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool weighted_loss = false;  // per-timestep weights instead of uniform
  int checkpoint_every = 0;    // invoke the checkpoint callback every N steps

  void validate() const {
    if (lr < 0.0) throw ConfigError("learning rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (steps < 1) throw ConfigError("step count must be >= 1");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
        !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (adam_eps <= 0.0) throw ConfigError("adam epsilon must be positive");
  }
};

// First/second moment accumulators, one tensor per parameter.
struct AdamState {
  std::map<std::string, Tensor> m, v;
  long step = 0;
};

// One bias-corrected Adam update over every parameter (sorted name order).
// The state is initialized lazily on the first call; every parameter must
// have a gradient entry of matching shape.
inline void adam_step(AdamState& state, ParamSet& params,
                      const std::map<std::string, Tensor>& grads,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (state.m.empty()) {
    for (const auto& [name, value] : params) {
      state.m.emplace(name, Tensor(value.shape()));
      state.v.emplace(name, Tensor(value.shape()));
    }
  }
  for (const auto& [name, value] : params) {
    if (!grads.count(name)) {
      throw ContractError("adam_step: missing gradient for '" + name + "'");
    }
    if (!grads.at(name).same_shape(value)) {
      throw ContractError("adam_step: gradient shape mismatch for '" + name + "'");
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  for (const auto& [name, value] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    Tensor next = value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      next[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    params.set(name, std::move(next));
  }
}

// Row-wise forward mixing with one timestep per row.
inline Tensor forward_sample_rows(const NoiseSchedule& sched, const Tensor& x0,
                                  const std::vector<int>& ts, const Tensor& eps) {
  require_same_shape(x0, eps, "forward_sample_rows");
  if (x0.rank() != 2 || ts.size() != x0.dim(0)) {
    throw DimensionError("forward_sample_rows: one timestep per row required");
  }
  Tensor xt(x0.shape());
  for (std::size_t b = 0; b < x0.dim(0); ++b) {
    const double sa = sched.sqrt_alpha_bar(ts[b]);
    const double sn = sched.sqrt_one_minus_alpha_bar(ts[b]);
    for (std::size_t j = 0; j < x0.dim(1); ++j) {
      xt(b, j) = sa * x0(b, j) + sn * eps(b, j);
    }
  }
  return xt;
}

// Per-timestep loss weights.  Uniform mode weights every term 1; the weighted
// mode uses the variational coefficient beta_t^2 / (2 sigma_t^2 alpha_t
// (1 - alpha_bar_t)) with sigma_t^2 = beta_t, which stays finite at t = 1.
inline double loss_weight(const NoiseSchedule& sched, int t, bool weighted) {
  if (!weighted) return 1.0;
  const double beta = sched.beta(t);
  return beta / (2.0 * sched.alpha(t) * (1.0 - sched.alpha_bar(t)));
}

// Mean over the batch of the weighted squared noise-prediction error given a
// precomputed prediction; the arithmetic core shared by the value and traced
// paths of the batch loss.
inline double loss_given_prediction(const Tensor& eps_hat, const Tensor& eps,
                                    const std::vector<double>& row_weights) {
  require_same_shape(eps_hat, eps, "loss_given_prediction");
  if (eps.rank() != 2 || row_weights.size() != eps.dim(0)) {
    throw DimensionError("loss_given_prediction: one weight per row required");
  }
  double acc = 0.0;
  for (std::size_t b = 0; b < eps.dim(0); ++b) {
    double row = 0.0;
    for (std::size_t j = 0; j < eps.dim(1); ++j) {
      double d = eps_hat(b, j) - eps(b, j);
      row += d * d;
    }
    acc += row_weights[b] * row;
  }
  return acc / static_cast<double>(eps.dim(0));
}

namespace detail {

inline std::vector<double> batch_weights(const NoiseSchedule& sched,
                                         const std::vector<int>& ts,
                                         bool weighted) {
  std::vector<double> w(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    w[i] = loss_weight(sched, ts[i], weighted);
  }
  return w;
}

// Traced batch loss: mean_b w_b ||eps_hat_b - eps_b||^2.
inline Var trace_loss(GradTape& tape, const DenoiserModel& model,
                      const std::map<std::string, Var>& leaves,
                      const NoiseSchedule& sched, const Tensor& x0,
                      const std::vector<int>& ts, const Tensor& eps,
                      bool weighted) {
  Tensor xt = forward_sample_rows(sched, x0, ts, eps);
  Var eps_hat = model.trace(tape, leaves, tape.input(xt), ts);
  Var d = tape.sub(eps_hat, tape.input(eps));
  Var sq = tape.mul(d, d);
  auto w = batch_weights(sched, ts, weighted);
  if (weighted) {
    Tensor wt(eps.shape());
    for (std::size_t b = 0; b < eps.dim(0); ++b)
      for (std::size_t j = 0; j < eps.dim(1); ++j) wt(b, j) = w[b];
    sq = tape.const_mul(sq, std::move(wt));
  }
  return tape.scale(tape.sum(sq), 1.0 / static_cast<double>(eps.dim(0)));
}

// Uniform timesteps in [1, T], one per batch row.
inline std::vector<int> draw_timesteps(Rng& rng, std::size_t n, int T) {
  std::vector<int> ts(n);
  for (std::size_t i = 0; i < n; ++i) ts[i] = rng.uniform_int(1, T);
  return ts;
}

}  // namespace detail

// Value of the batch training loss for a given model and noise draw.
inline double loss_batch(const DenoiserModel& model, const NoiseSchedule& sched,
                         const Tensor& x0, const std::vector<int>& ts,
                         const Tensor& eps, bool weighted = false) {
  Tensor xt = forward_sample_rows(sched, x0, ts, eps);
  Tensor eps_hat = model.forward(xt, ts);
  return loss_given_prediction(eps_hat, eps,
                               detail::batch_weights(sched, ts, weighted));
}

struct TrainResult {
  std::vector<double> loss_history;  // one entry per executed step
  bool reached_tolerance = false;
};

using CheckpointFn = std::function<void(int step, const DenoiserModel&, double loss)>;

// Minibatch denoising training: for each step, sample rows with replacement,
// draw per-row timesteps and noise, and take one Adam step on the batch loss.
// Each step re-seeds its own stream from (seed, step), so runs are bit-wise
// reproducible and any failure names a re-runnable batch.
inline TrainResult train(DenoiserModel& model, const NoiseSchedule& sched,
                         const Tensor& data, const TrainConfig& cfg,
                         const CheckpointFn& on_checkpoint = {}) {
  cfg.validate();
  if (data.rank() != 2 || data.dim(1) != static_cast<std::size_t>(model.feature_dim())) {
    throw DimensionError("training data must be [rows, " +
                         std::to_string(model.feature_dim()) + "]");
  }
  const std::size_t n = data.dim(0);
  const std::size_t bsz = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t dim = data.dim(1);

  AdamState adam;
  TrainResult result;
  result.loss_history.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    const std::uint64_t batch_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(step));
    Rng rng(batch_seed);

    Tensor x0({bsz, dim});
    for (std::size_t b = 0; b < bsz; ++b) {
      std::size_t row = static_cast<std::size_t>(rng.below(n));
      for (std::size_t j = 0; j < dim; ++j) x0(b, j) = data(row, j);
    }
    std::vector<int> ts = detail::draw_timesteps(rng, bsz, sched.steps());
    Tensor eps = Tensor::randn({bsz, dim}, rng);

    GradTape tape;
    auto leaves = tape.adopt(model.params());
    Var loss = detail::trace_loss(tape, model, leaves, sched, x0, ts, eps,
                                  cfg.weighted_loss);
    const double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value)) {
      throw NumericError("training loss is not finite at step " +
                         std::to_string(step) + " (batch seed " +
                         std::to_string(batch_seed) + ")");
    }
    tape.backward(loss);
    adam_step(adam, model.params(), tape.grads(leaves), cfg);
    result.loss_history.push_back(loss_value);

    if (on_checkpoint && cfg.checkpoint_every > 0 &&
        (step + 1) % cfg.checkpoint_every == 0) {
      on_checkpoint(step + 1, model, loss_value);
    }
    if (cfg.tolerance > 0.0 && loss_value <= cfg.tolerance) {
      result.reached_tolerance = true;
      break;
    }
  }
  return result;
}

}  // namespace difftab
