#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "difftab/errors.hpp"
#include "difftab/rng.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

// Denoiser interface used by samplers and diagnostics: predicts the noise in
// x_t given (x_t, t).  x is a [batch, dim] tensor.
using EpsFn = std::function<Tensor(const Tensor&, int)>;

// Variance schedule of the forward noising process.  Timesteps are 1-based
// (t in [1, T]); cumulative products use the convention alpha_bar(0) = 1 so
// the posterior variance at t = 1 is exactly zero.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw ConfigError("schedule needs at least one step");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || !(beta_start <= beta_end)) {
      throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
    }
    if (steps > 1 && beta_start == beta_end) {
      throw ConfigError("schedule with several steps needs beta_start < beta_end");
    }
    NoiseSchedule s;
    s.beta_.resize(static_cast<std::size_t>(steps));
    for (int t = 0; t < steps; ++t) {
      // Endpoints are pinned exactly; interior points interpolate linearly.
      double b;
      if (t == 0) {
        b = beta_start;
      } else if (t == steps - 1) {
        b = beta_end;
      } else {
        b = beta_start + (beta_end - beta_start) * (static_cast<double>(t) /
                                                    static_cast<double>(steps - 1));
      }
      s.beta_[static_cast<std::size_t>(t)] = b;
    }
    s.init_derived();
    return s;
  }

  // Arbitrary increasing beta sequence in (0, 1); used by tests.
  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ConfigError("schedule needs at least one step");
    for (double b : betas) {
      if (!(b > 0.0) || !(b < 1.0)) throw ConfigError("beta outside (0, 1)");
    }
    NoiseSchedule s;
    s.beta_ = std::move(betas);
    s.init_derived();
    return s;
  }

  int steps() const { return static_cast<int>(beta_.size()); }

  double beta(int t) const { return beta_[index1(t)]; }
  double alpha(int t) const { return alpha_[index1(t)]; }

  // alpha_bar(t) for t in [0, T]; alpha_bar(0) = 1.
  double alpha_bar(int t) const {
    if (t < 0 || t > steps()) {
      throw IndexError("alpha_bar: t = " + std::to_string(t) +
                       " outside [0, " + std::to_string(steps()) + "]");
    }
    return alpha_bar_[static_cast<std::size_t>(t)];
  }

  double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar(t)); }
  double sqrt_one_minus_alpha_bar(int t) const {
    return std::sqrt(1.0 - alpha_bar(t));
  }

  // Variance of q(x_{t-1} | x_t, x_0); zero at t = 1.
  double posterior_var(int t) const { return posterior_var_[index1(t)]; }

 private:
  std::size_t index1(int t) const {
    if (t < 1 || t > steps()) {
      throw IndexError("timestep t = " + std::to_string(t) + " outside [1, " +
                       std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
  }

  void init_derived() {
    const std::size_t T = beta_.size();
    alpha_.resize(T);
    alpha_bar_.resize(T + 1);
    posterior_var_.resize(T);
    alpha_bar_[0] = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
      alpha_[i] = 1.0 - beta_[i];
      alpha_bar_[i + 1] = alpha_bar_[i] * alpha_[i];
      posterior_var_[i] =
          (1.0 - alpha_bar_[i]) / (1.0 - alpha_bar_[i + 1]) * beta_[i];
    }
  }

  std::vector<double> beta_, alpha_, alpha_bar_, posterior_var_;
};

// x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps.
inline Tensor forward_sample(const NoiseSchedule& sched, const Tensor& x0, int t,
                             const Tensor& eps) {
  require_same_shape(x0, eps, "forward_sample");
  sched.beta(t);  // range check
  Tensor out = scale(x0, sched.sqrt_alpha_bar(t));
  axpy(out, sched.sqrt_one_minus_alpha_bar(t), eps);
  return out;
}

// Draws eps and returns (x_t, eps); the supervised pair for denoiser training.
inline std::pair<Tensor, Tensor> training_pair(const NoiseSchedule& sched,
                                               const Tensor& x0, int t, Rng& rng) {
  Tensor eps = Tensor::randn(x0.shape(), rng);
  Tensor xt = forward_sample(sched, x0, t, eps);
  return {std::move(xt), std::move(eps)};
}

struct PosteriorParams {
  Tensor mean;
  double var = 0.0;
};

// Mean and variance of q(x_{t-1} | x_t, x_0).
inline PosteriorParams posterior_params(const NoiseSchedule& sched,
                                        const Tensor& x0, const Tensor& xt, int t) {
  require_same_shape(x0, xt, "posterior_params");
  // At t = 1 the posterior collapses onto x0 (alpha_bar(0) = 1 makes the x_t
  // coefficient zero and the variance zero); returning x0 directly keeps the
  // identity exact instead of within rounding of the coefficient form.
  if (t == 1) {
    sched.beta(1);  // range check for T >= 1
    return {x0, 0.0};
  }
  const double beta = sched.beta(t);
  const double abar_t = sched.alpha_bar(t);
  const double abar_prev = sched.alpha_bar(t - 1);
  const double coef_x0 = std::sqrt(abar_prev) * beta / (1.0 - abar_t);
  const double coef_xt =
      std::sqrt(sched.alpha(t)) * (1.0 - abar_prev) / (1.0 - abar_t);
  Tensor mean = scale(x0, coef_x0);
  axpy(mean, coef_xt, xt);
  return {std::move(mean), sched.posterior_var(t)};
}

// KL(N(mean_a, var_a I) || N(mean_b, var_b I)) for isotropic Gaussians.
inline double gaussian_kl(const Tensor& mean_a, double var_a,
                          const Tensor& mean_b, double var_b) {
  require_same_shape(mean_a, mean_b, "gaussian_kl");
  if (!(var_a > 0.0) || !(var_b > 0.0)) {
    throw ContractError("gaussian_kl requires positive variances");
  }
  const double d = static_cast<double>(mean_a.size());
  const double ratio = var_a / var_b;
  Tensor diff = sub(mean_b, mean_a);
  return 0.5 * (d * (ratio - 1.0 - std::log(ratio)) + dot(diff, diff) / var_b);
}

// Per-timestep KL diagnostics of the reverse model against the forward
// posterior, for t = 2..T (the t = 1 posterior is deterministic, and the
// discrete decoder term is out of scope here).  Entry i corresponds to
// t = i + 2.  Both Gaussians use the posterior variance, so each term reduces
// to a scaled squared mean gap and is exactly zero for a perfect denoiser.
inline std::vector<double> vlb_terms(const NoiseSchedule& sched,
                                     const EpsFn& eps_fn, const Tensor& x0,
                                     Rng& rng) {
  if (x0.rank() != 2) throw DimensionError("vlb_terms expects [batch, dim] x0");
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(std::max(0, sched.steps() - 1)));
  for (int t = 2; t <= sched.steps(); ++t) {
    Tensor eps = Tensor::randn(x0.shape(), rng);
    Tensor xt = forward_sample(sched, x0, t, eps);
    PosteriorParams q = posterior_params(sched, x0, xt, t);
    Tensor eps_hat = eps_fn(xt, t);
    require_same_shape(eps_hat, xt, "vlb_terms: eps_fn output");
    // mu_theta = (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)
    Tensor mu = xt;
    axpy(mu, -sched.beta(t) / sched.sqrt_one_minus_alpha_bar(t), eps_hat);
    mu = scale(mu, 1.0 / std::sqrt(sched.alpha(t)));
    terms.push_back(gaussian_kl(q.mean, q.var, mu, q.var));
  }
  return terms;
}

}  // namespace difftab
