#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "difftab/denoiser.hpp"
#include "difftab/errors.hpp"
#include "difftab/rng.hpp"
#include "difftab/schedule.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

enum class SamplerMode { ddpm, ddim };

// Noise level injected by the ancestral update: the forward-posterior standard
// deviation, or zero for the deterministic variant.
enum class SigmaMode { posterior, zero };

// Two readings of the deterministic update. canonical predicts x0 and re-noises
// to the target level: x_s = sqrt(abar_s) x0_hat + sqrt(1 - abar_s) eps_hat.
// noise_ratio rescales the state by the noise-to-signal ratio
// lambda_u = sqrt(1 - abar_u) / sqrt(abar_u) and weights eps_hat by abar
// directly: x_s = (lambda_s / lambda_t)(x_t - abar_t eps_hat) + abar_s eps_hat.
// It is kept for comparison only; canonical is the default everywhere.
enum class DdimForm { canonical, noise_ratio };

inline const char* sampler_mode_name(SamplerMode m) {
  return m == SamplerMode::ddpm ? "ddpm" : "ddim";
}

struct SampleConfig {
  SamplerMode mode = SamplerMode::ddpm;
  SigmaMode sigma_mode = SigmaMode::posterior;
  // Number of reverse steps; 0 selects the full schedule. Values below the
  // schedule length are only meaningful for ddim, which walks a uniform-stride
  // subsequence of timesteps.
  int t_use = 0;
  std::uint64_t seed = 0;
  bool record_trajectory = false;
  DdimForm ddim_form = DdimForm::canonical;

  void validate() const {
    if (t_use < 0)
      throw ConfigError("t_use must be >= 0 (0 selects the full schedule)");
  }
};

// States visited by one reverse pass over a batch of chains. ts is strictly
// decreasing and ends at 0; states[i] is the [n, dim] batch at ts[i];
// residuals[i][c] is the L2 norm of chain c's change on the step ts[i] ->
// ts[i+1]... i.e. entry i covers the transition out of states[i].
struct Trajectory {
  std::vector<int> ts;
  std::vector<Tensor> states;
  std::vector<std::vector<double>> residuals;
};

struct SampleResult {
  Tensor samples;
  Trajectory trajectory;
};

// Per-chain L2 norm of (a - b) for [n, dim] batches.
inline std::vector<double> chain_residuals(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "chain_residuals");
  if (a.rank() != 2)
    throw DimensionError("chain_residuals expects [n, dim] batches, got shape " +
                         shape_str(a.shape()));
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = a(i, j) - b(i, j);
      s += diff * diff;
    }
    out[i] = std::sqrt(s);
  }
  return out;
}

// One ancestral reverse step: mu_theta(x_t, t) + sigma_t * z.
// z must match x_t's shape and must be all zero at t = 1 (the final step
// injects no noise).
inline Tensor ddpm_step(const EpsFn& eps, const NoiseSchedule& sched,
                        const Tensor& x_t, int t, const Tensor& z,
                        SigmaMode sigma_mode) {
  if (t < 1 || t > sched.steps())
    throw IndexError("ddpm_step timestep out of range: t=" + std::to_string(t) +
                     " with " + std::to_string(sched.steps()) + " steps");
  require_same_shape(x_t, z, "ddpm_step noise");
  if (t == 1 && norm2(z) != 0.0)
    throw ContractError("ddpm_step injects no noise at t = 1; pass z = 0");
  Tensor eps_hat = eps(x_t, t);
  require_same_shape(x_t, eps_hat, "ddpm_step prediction");
  Tensor mu = mu_from_eps(sched, x_t, t, eps_hat);
  const double sigma =
      sigma_mode == SigmaMode::posterior ? std::sqrt(sched.posterior_var(t)) : 0.0;
  if (sigma != 0.0) axpy(mu, sigma, z);
  return mu;
}

// One deterministic reverse step from timestep t to s (0 <= s <= t). s == t is
// the identity and does not evaluate the model; s = 0 lands on the data
// estimate (abar_0 = 1).
inline Tensor ddim_step(const EpsFn& eps, const NoiseSchedule& sched,
                        const Tensor& x_t, int t, int s,
                        DdimForm form = DdimForm::canonical) {
  if (t < 1 || t > sched.steps())
    throw IndexError("ddim_step source timestep out of range: t=" +
                     std::to_string(t) + " with " +
                     std::to_string(sched.steps()) + " steps");
  if (s < 0)
    throw IndexError("ddim_step target timestep must be >= 0, got s=" +
                     std::to_string(s));
  if (s > t)
    throw ContractError("ddim_step moves backward in time; need s <= t, got s=" +
                        std::to_string(s) + " > t=" + std::to_string(t));
  if (s == t) return x_t;
  Tensor eps_hat = eps(x_t, t);
  require_same_shape(x_t, eps_hat, "ddim_step prediction");
  if (form == DdimForm::canonical) {
    Tensor out = scale(x0_from_eps(sched, x_t, t, eps_hat), sched.sqrt_alpha_bar(s));
    axpy(out, sched.sqrt_one_minus_alpha_bar(s), eps_hat);
    return out;
  }
  const double ab_t = sched.alpha_bar(t);
  const double ab_s = sched.alpha_bar(s);
  const double lambda_t = std::sqrt((1.0 - ab_t) / ab_t);  // > 0 for t >= 1
  const double lambda_s = std::sqrt((1.0 - ab_s) / ab_s);
  Tensor inner = x_t;
  axpy(inner, -ab_t, eps_hat);
  Tensor out = scale(inner, lambda_s / lambda_t);
  axpy(out, ab_s, eps_hat);
  return out;
}

// Uniform-stride timestep grid for a reduced reverse pass: m + 1 ascending
// values tau_i = round(i * T / m), pinned to tau_0 = 0 and tau_m = T.
inline std::vector<int> ddim_timesteps(const NoiseSchedule& sched, int m) {
  const int T = sched.steps();
  if (m < 1 || m > T)
    throw ConfigError("reverse step count must lie in [1, " + std::to_string(T) +
                      "], got " + std::to_string(m));
  std::vector<int> ts(static_cast<std::size_t>(m) + 1);
  for (int i = 0; i <= m; ++i)
    ts[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(static_cast<double>(i) * T / m));
  ts.front() = 0;
  ts.back() = T;
  for (int i = 0; i < m; ++i)
    if (ts[static_cast<std::size_t>(i)] >= ts[static_cast<std::size_t>(i) + 1])
      throw ContractError("timestep grid must be strictly increasing");
  return ts;
}

namespace detail {

inline void require_finite_state(const Tensor& x, int t) {
  if (!x.all_finite())
    throw NumericError("sampling produced a non-finite state at t=" +
                       std::to_string(t));
}

}  // namespace detail

// Draws x_T ~ N(0, I) for n chains and runs the reverse process to x_0.
// ddpm visits every timestep; ddim may walk a uniform-stride subsequence when
// cfg.t_use is below the schedule length. sigma_mode applies to ddpm only; the
// ddim update is deterministic. Fixed seeds give bit-identical output.
inline SampleResult sample(const EpsFn& eps, const NoiseSchedule& sched,
                           const SampleConfig& cfg, std::size_t n,
                           std::size_t dim) {
  cfg.validate();
  if (n < 1 || dim < 1)
    throw DimensionError("sample requires n >= 1 chains and dim >= 1 features");
  const int T = sched.steps();
  const int m = cfg.t_use == 0 ? T : cfg.t_use;
  if (m > T)
    throw ConfigError("t_use exceeds the schedule length: " + std::to_string(m) +
                      " > " + std::to_string(T));
  if (cfg.mode == SamplerMode::ddpm && m != T)
    throw ContractError(
        "ddpm sampling visits every timestep; use ddim for reduced-step runs");
  const std::vector<int> grid = ddim_timesteps(sched, m);

  Rng rng(cfg.seed);
  Tensor x = Tensor::randn({n, dim}, rng);
  Trajectory traj;
  if (cfg.record_trajectory) {
    traj.ts.push_back(T);
    traj.states.push_back(x);
  }
  for (int i = m; i >= 1; --i) {
    const int t = grid[static_cast<std::size_t>(i)];
    const int s = grid[static_cast<std::size_t>(i) - 1];
    Tensor next = [&] {
      if (cfg.mode == SamplerMode::ddpm) {
        Tensor z = t > 1 ? Tensor::randn({n, dim}, rng) : Tensor::zeros({n, dim});
        return ddpm_step(eps, sched, x, t, z, cfg.sigma_mode);
      }
      return ddim_step(eps, sched, x, t, s, cfg.ddim_form);
    }();
    detail::require_finite_state(next, s);
    if (cfg.record_trajectory) {
      traj.residuals.push_back(chain_residuals(next, x));
      traj.ts.push_back(s);
      traj.states.push_back(next);
    }
    x = std::move(next);
  }
  return SampleResult{std::move(x), std::move(traj)};
}

inline SampleResult sample(const DenoiserModel& model, const NoiseSchedule& sched,
                           const SampleConfig& cfg, std::size_t n) {
  return sample(model.eps_fn(), sched, cfg, n,
                static_cast<std::size_t>(model.feature_dim()));
}

// Noises x0 to x_T with recorded noise, then runs the deterministic (sigma = 0)
// ancestral pass back down from that exact x_T. With a perfect predictor this
// inverts the forward process; fidelity degrades as alpha_bar_T shrinks because
// x_T retains less of the record.
inline Tensor reconstruct(const EpsFn& eps, const NoiseSchedule& sched,
                          const Tensor& x0, std::uint64_t seed) {
  if (x0.rank() != 2)
    throw DimensionError("reconstruct expects records shaped [n, dim], got " +
                         shape_str(x0.shape()));
  const int T = sched.steps();
  Rng rng(seed);
  Tensor noise = Tensor::randn(x0.shape(), rng);
  Tensor x = forward_sample(sched, x0, T, noise);
  const Tensor zero = Tensor::zeros(x0.shape());
  for (int t = T; t >= 1; --t) {
    x = ddpm_step(eps, sched, x, t, zero, SigmaMode::zero);
    detail::require_finite_state(x, t - 1);
  }
  return x;
}

inline Tensor reconstruct(const DenoiserModel& model, const NoiseSchedule& sched,
                          const Tensor& x0, std::uint64_t seed) {
  return reconstruct(model.eps_fn(), sched, x0, seed);
}

}  // namespace difftab
