#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "difftab/errors.hpp"
#include "difftab/rng.hpp"
#include "difftab/sampler.hpp"
#include "difftab/schedule.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

// Conversions between the constrained mixing weights beta (sum to 1) and the
// unconstrained parameters gamma: beta_0 = gamma_0, beta_i = gamma_i -
// gamma_{i-1}, beta_p = 1 - gamma_{p-1}. The map telescopes, so the beta sum
// is 1 by construction and the round trip is the identity.
inline std::vector<double> beta_from_gamma(const std::vector<double>& gamma) {
  std::vector<double> beta(gamma.size() + 1);
  double prev = 0.0;
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    beta[i] = gamma[i] - prev;
    prev = gamma[i];
  }
  beta[gamma.size()] = 1.0 - prev;
  return beta;
}

inline std::vector<double> gamma_from_beta(const std::vector<double>& beta) {
  if (beta.empty()) throw ContractError("beta must have at least one entry");
  std::vector<double> gamma(beta.size() - 1);
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < beta.size(); ++i) {
    acc += beta[i];
    gamma[i] = acc;
  }
  return gamma;
}

// Reference mixing weights: minimize ||F beta|| over beta with sum(beta) = 1,
// where F holds the p+1 residual columns f_0..f_p. Eliminating the constraint
// through gamma turns this into the unconstrained problem
// min_gamma ||f_p - sum_i gamma_i (f_{i+1} - f_i)||, solved here by a fresh
// Gram-Schmidt pass. Difference columns that lose rank are skipped and keep
// gamma = 0, which handles degenerate ties (identical residuals) gracefully.
inline std::vector<double> aa_prototype_weights(const Tensor& f_matrix) {
  if (f_matrix.rank() != 2)
    throw DimensionError("residual matrix must be [n, p+1], got shape " +
                         shape_str(f_matrix.shape()));
  const std::size_t n = f_matrix.dim(0);
  const std::size_t p = f_matrix.dim(1) - 1;
  if (p == 0) return {1.0};

  auto column = [&](std::size_t j) {
    Tensor c = Tensor::zeros({n});
    for (std::size_t i = 0; i < n; ++i) c[i] = f_matrix(i, j);
    return c;
  };
  Tensor f_last = column(p);

  std::vector<Tensor> q;
  std::vector<std::vector<double>> r;
  std::vector<std::size_t> kept;
  double scale_norm = 0.0;
  for (std::size_t j = 0; j < p; ++j) {
    Tensor v = column(j + 1);
    axpy(v, -1.0, column(j));
    const double original = norm2(v);
    if (scale_norm == 0.0) scale_norm = original;
    std::vector<double> rcol(q.size() + 1, 0.0);
    for (std::size_t i = 0; i < q.size(); ++i) {
      rcol[i] = dot(q[i], v);
      axpy(v, -rcol[i], q[i]);
    }
    const double rem = norm2(v);
    if (rem <= 1e-10 * scale_norm || rem == 0.0) continue;
    rcol[q.size()] = rem;
    q.push_back(difftab::scale(v, 1.0 / rem));
    r.push_back(std::move(rcol));
    kept.push_back(j);
  }

  std::vector<double> gamma(p, 0.0);
  if (!q.empty()) {
    std::vector<double> y(q.size());
    for (std::size_t i = 0; i < q.size(); ++i) y[i] = dot(q[i], f_last);
    std::vector<double> reduced(q.size(), 0.0);
    for (std::size_t i = q.size(); i-- > 0;) {
      double acc = y[i];
      for (std::size_t j = i + 1; j < q.size(); ++j) acc -= r[j][i] * reduced[j];
      reduced[i] = acc / r[i][i];
    }
    for (std::size_t i = 0; i < kept.size(); ++i) gamma[kept[i]] = reduced[i];
  }
  return beta_from_gamma(gamma);
}

struct AndersonConfig {
  int k = 3;                   // max history table size; 0 disables acceleration
  double drop_tol = 1e-10;     // rank threshold relative to the first column
  double gamma_l1_max = 1e3;   // safeguard bound on ||gamma||_1

  void validate() const {
    if (k < 0) throw ConfigError("history size k must be >= 0");
    if (drop_tol <= 0.0) throw ConfigError("drop tolerance must be positive");
    if (gamma_l1_max <= 0.0) throw ConfigError("gamma bound must be positive");
  }
};

// Acceleration state for one fixed-point chain. Holds the incremental QR of
// the residual-difference columns (Q orthonormal, R upper triangular stored
// column-wise) plus the matching iterate-difference columns, and restarts by
// clearing the table whenever it fills, loses rank, or the safeguard trips.
class AndersonState {
 public:
  AndersonState(std::size_t dim, AndersonConfig cfg) : dim_(dim), cfg_(cfg) {
    cfg_.validate();
    if (dim == 0) throw DimensionError("state dimension must be positive");
  }

  int table_size() const { return static_cast<int>(q_.size()); }
  const AndersonConfig& config() const { return cfg_; }
  const std::vector<Tensor>& q_columns() const { return q_; }
  const std::vector<std::vector<double>>& r_columns() const { return r_; }
  const std::vector<Tensor>& delta_f_columns() const { return delta_f_; }
  const std::vector<Tensor>& delta_g_columns() const { return delta_g_; }
  const std::optional<std::vector<double>>& last_gamma() const {
    return last_gamma_;
  }
  int restarts() const { return restarts_; }
  int fallbacks() const { return fallbacks_; }

  // Clears the QR table and the stored previous iterate; the next update is a
  // plain fixed-point step.
  void restart() {
    q_.clear();
    r_.clear();
    delta_f_.clear();
    delta_g_.clear();
    first_norm_ = 0.0;
    has_prev_ = false;
  }

  // One modified Gram-Schmidt sweep appending a residual-difference column.
  // Returns false (leaving the state untouched) when the column falls below
  // the drop tolerance, i.e. is numerically dependent on the table.
  bool qr_append(const Tensor& delta_f) {
    require_dim(delta_f, "qr_append column");
    if (table_size() >= cfg_.k)
      throw ContractError("QR table is full; restart before appending");
    Tensor v = delta_f;
    std::vector<double> rcol(q_.size() + 1, 0.0);
    for (std::size_t i = 0; i < q_.size(); ++i) {
      rcol[i] = dot(q_[i], v);
      axpy(v, -rcol[i], q_[i]);
    }
    const double rem = norm2(v);
    const double scale_norm = q_.empty() ? norm2(delta_f) : first_norm_;
    if (rem == 0.0 || rem <= cfg_.drop_tol * scale_norm || !std::isfinite(rem))
      return false;
    if (q_.empty()) first_norm_ = norm2(delta_f);
    rcol[q_.size()] = rem;
    q_.push_back(scale(v, 1.0 / rem));
    r_.push_back(std::move(rcol));
    delta_f_.push_back(delta_f);
    return true;
  }

  // Least-squares coefficients gamma with R gamma = Q^T f via back
  // substitution; nullopt when a pivot is numerically zero (restart signal).
  std::optional<std::vector<double>> solve_gamma(const Tensor& f) const {
    require_dim(f, "solve_gamma residual");
    const std::size_t p = q_.size();
    if (p == 0) throw ContractError("solve_gamma requires a nonempty table");
    std::vector<double> y(p);
    for (std::size_t i = 0; i < p; ++i) y[i] = dot(q_[i], f);
    std::vector<double> gamma(p, 0.0);
    for (std::size_t i = p; i-- > 0;) {
      const double diag = r_[i][i];
      if (!std::isfinite(diag) || std::fabs(diag) <= cfg_.drop_tol * first_norm_)
        return std::nullopt;
      double acc = y[i];
      for (std::size_t j = i + 1; j < p; ++j) acc -= r_[j][i] * gamma[j];
      gamma[i] = acc / diag;
    }
    return gamma;
  }

  // One accelerated step: given w_t and g(w_t), returns w_{t+1} =
  // g(w_t) - sum_i gamma_i * delta_g_i, maintaining the history table. Any
  // failure path (full table, rank drop, unsolvable system, safeguard breach,
  // non-finite extrapolation) restarts the table and falls back to the plain
  // step g(w_t), so the iteration always makes progress.
  Tensor aa_update(const Tensor& g_wt, const Tensor& w_t) {
    require_dim(g_wt, "aa_update g(w)");
    require_dim(w_t, "aa_update w");
    if (cfg_.k == 0) return g_wt;

    Tensor f = sub(g_wt, w_t);
    if (!has_prev_) {
      remember(w_t, g_wt, std::move(f));
      return g_wt;
    }
    if (table_size() == cfg_.k) {
      restart();  // scheduled restart: this step is the plain one of the cycle
      remember(w_t, g_wt, std::move(f));
      return g_wt;
    }

    Tensor delta_f = sub(f, prev_f_);
    Tensor delta_g = sub(g_wt, prev_g_);
    if (!qr_append(delta_f)) {
      ++restarts_;
      restart();
      remember(w_t, g_wt, std::move(f));
      return g_wt;
    }
    delta_g_.push_back(std::move(delta_g));

    auto gamma = solve_gamma(f);
    if (!gamma) {
      ++restarts_;
      restart();
      remember(w_t, g_wt, std::move(f));
      return g_wt;
    }
    double l1 = 0.0;
    for (double g : *gamma) l1 += std::fabs(g);
    if (!(l1 <= cfg_.gamma_l1_max)) {
      ++restarts_;
      restart();
      remember(w_t, g_wt, std::move(f));
      return g_wt;
    }

    Tensor next = g_wt;
    for (std::size_t i = 0; i < delta_g_.size(); ++i)
      axpy(next, -(*gamma)[i], delta_g_[i]);
    if (!next.all_finite()) {
      ++fallbacks_;
      restart();
      remember(w_t, g_wt, std::move(f));
      return g_wt;
    }
    last_gamma_ = std::move(gamma);
    remember(w_t, g_wt, std::move(f));
    return next;
  }

 private:
  void require_dim(const Tensor& t, const char* what) const {
    if (t.rank() != 1 || t.dim(0) != dim_)
      throw DimensionError(std::string(what) + " must be a length-" +
                           std::to_string(dim_) + " vector, got shape " +
                           shape_str(t.shape()));
  }

  void remember(const Tensor& w, const Tensor& g, Tensor f) {
    prev_w_ = w;
    prev_g_ = g;
    prev_f_ = std::move(f);
    has_prev_ = true;
  }

  std::size_t dim_;
  AndersonConfig cfg_;
  std::vector<Tensor> q_;
  std::vector<std::vector<double>> r_;  // r_[j][i] = R(i, j), entries 0..j
  std::vector<Tensor> delta_f_;
  std::vector<Tensor> delta_g_;
  Tensor prev_w_, prev_g_, prev_f_;
  bool has_prev_ = false;
  double first_norm_ = 0.0;
  std::optional<std::vector<double>> last_gamma_;
  int restarts_ = 0;   // forced restarts (rank drop, solve failure, safeguard)
  int fallbacks_ = 0;  // non-finite extrapolations replaced by plain steps
};

// Convergence log of an accelerated run. residuals[i][c] is chain c's
// fixed-point residual ||g(w) - w|| entering iteration i; elapsed_ns is wall
// time per iteration and is the one field exempt from bit-determinism.
struct AAReport {
  std::vector<std::vector<double>> residuals;
  std::vector<long long> elapsed_ns;
  std::vector<int> iterations_to_tol;  // per chain; -1 if never below tol
  double residual_tol = 0.0;
  long long wall_ns = 0;
  int restarts = 0;
  int fallbacks = 0;
};

struct AccelResult {
  Tensor samples;
  AAReport report;
};

// Deterministic reverse pass with per-chain Anderson acceleration. The
// fixed-point operator g at iteration i is the single deterministic update
// from grid timestep t to s applied to each chain row; histories mix across
// the changing timesteps and the table restarts every k steps. Draws x_T
// exactly like sample(), so k = 0 reproduces the plain pass byte for byte.
inline AccelResult accelerated_sample(const EpsFn& eps, const NoiseSchedule& sched,
                                      const SampleConfig& cfg,
                                      const AndersonConfig& aa, std::size_t n,
                                      std::size_t dim,
                                      double residual_tol = 1e-3) {
  cfg.validate();
  aa.validate();
  if (cfg.mode == SamplerMode::ddpm)
    throw ContractError(
        "acceleration applies to the deterministic sampler; use ddim mode");
  if (n < 1 || dim < 1)
    throw DimensionError("sample requires n >= 1 chains and dim >= 1 features");
  const int T = sched.steps();
  const int m = cfg.t_use == 0 ? T : cfg.t_use;
  if (m > T)
    throw ConfigError("t_use exceeds the schedule length: " + std::to_string(m) +
                      " > " + std::to_string(T));
  const std::vector<int> grid = ddim_timesteps(sched, m);

  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg.seed);
  Tensor x = Tensor::randn({n, dim}, rng);

  std::vector<AndersonState> states;
  states.reserve(n);
  for (std::size_t c = 0; c < n; ++c) states.emplace_back(dim, aa);

  AAReport report;
  report.residual_tol = residual_tol;
  report.iterations_to_tol.assign(n, -1);

  Tensor row = Tensor::zeros({dim});
  Tensor grow = Tensor::zeros({dim});
  for (int i = m; i >= 1; --i) {
    const auto it0 = std::chrono::steady_clock::now();
    const int t = grid[static_cast<std::size_t>(i)];
    const int s = grid[static_cast<std::size_t>(i) - 1];
    Tensor g = ddim_step(eps, sched, x, t, s, cfg.ddim_form);
    detail::require_finite_state(g, s);

    std::vector<double> res = chain_residuals(g, x);
    const int iteration = m - i + 1;
    for (std::size_t c = 0; c < n; ++c)
      if (report.iterations_to_tol[c] < 0 && res[c] < residual_tol)
        report.iterations_to_tol[c] = iteration;
    report.residuals.push_back(std::move(res));

    Tensor next = Tensor::zeros({n, dim});
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t j = 0; j < dim; ++j) {
        row[j] = x(c, j);
        grow[j] = g(c, j);
      }
      Tensor w_next = states[c].aa_update(grow, row);
      for (std::size_t j = 0; j < dim; ++j) next(c, j) = w_next[j];
    }
    detail::require_finite_state(next, s);
    x = std::move(next);

    report.elapsed_ns.push_back(
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now() - it0)
            .count());
  }
  for (const AndersonState& st : states) {
    report.restarts += st.restarts();
    report.fallbacks += st.fallbacks();
  }
  report.wall_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(
                       std::chrono::steady_clock::now() - t0)
                       .count();
  return AccelResult{std::move(x), std::move(report)};
}

inline AccelResult accelerated_sample(const DenoiserModel& model,
                                      const NoiseSchedule& sched,
                                      const SampleConfig& cfg,
                                      const AndersonConfig& aa, std::size_t n,
                                      double residual_tol = 1e-3) {
  return accelerated_sample(model.eps_fn(), sched, cfg, aa, n,
                            static_cast<std::size_t>(model.feature_dim()),
                            residual_tol);
}

}  // namespace difftab
