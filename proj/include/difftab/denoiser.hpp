#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "difftab/autodiff.hpp"
#include "difftab/errors.hpp"
#include "difftab/rng.hpp"
#include "difftab/schedule.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

// Sinusoidal timestep features: dim/2 sin/cos pairs on a geometric frequency
// ladder.  Entries lie in [-1, 1] and the map is injective over the timestep
// ranges used here (the first pair has frequency 1).
struct TimestepEmbedding {
  int dim;

  TimestepEmbedding(int d) : dim(d) {
    if (d < 2 || d % 2 != 0) {
      throw ConfigError("time embedding dim must be even and >= 2");
    }
  }

  Tensor embed(int t) const {
    if (t < 1) throw IndexError("timestep must be >= 1");
    const int half = dim / 2;
    Tensor out({static_cast<std::size_t>(dim)});
    for (int i = 0; i < half; ++i) {
      double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                             static_cast<double>(half));
      out[static_cast<std::size_t>(i)] = std::sin(t * freq);
      out[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
    }
    return out;
  }

  Tensor embed_batch(const std::vector<int>& ts) const {
    if (ts.empty()) throw ContractError("empty timestep batch");
    Tensor out({ts.size(), static_cast<std::size_t>(dim)});
    for (std::size_t b = 0; b < ts.size(); ++b) {
      Tensor row = embed(ts[b]);
      for (std::size_t j = 0; j < row.size(); ++j) out(b, j) = row[j];
    }
    return out;
  }
};

enum class DenoiserArch { mlp, unet1d };

inline std::string arch_name(DenoiserArch a) {
  return a == DenoiserArch::mlp ? "mlp" : "unet1d";
}

inline DenoiserArch arch_from_name(const std::string& s) {
  if (s == "mlp") return DenoiserArch::mlp;
  if (s == "unet1d") return DenoiserArch::unet1d;
  throw ConfigError("unknown arch '" + s + "'");
}

struct DenoiserConfig {
  DenoiserArch arch = DenoiserArch::unet1d;
  int feature_dim = 0;
  int time_dim = 64;                 // sinusoidal width and time-feature width
  int hidden = 256;                  // mlp width
  int hidden_layers = 3;             // mlp depth
  std::vector<int> channels = {32, 64};  // unet widths, one per resolution
  int blocks_per_level = 2;
  int kernel = 3;                    // odd, same-padded
  bool zero_init_final = true;       // start as the identity-noise predictor

  void validate() const {
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (time_dim < 2 || time_dim % 2) throw ConfigError("time_dim must be even >= 2");
    if (arch == DenoiserArch::mlp) {
      if (hidden < 1 || hidden_layers < 1) {
        throw ConfigError("mlp needs positive hidden width and depth");
      }
    } else {
      if (channels.empty()) throw ConfigError("unet needs at least one level");
      for (int c : channels)
        if (c < 1) throw ConfigError("unet channel widths must be positive");
      if (blocks_per_level < 1) throw ConfigError("blocks_per_level must be >= 1");
      if (kernel < 1 || kernel % 2 == 0) {
        throw ConfigError("kernel must be odd for same padding");
      }
    }
  }
};

// Noise-prediction network eps_theta(x_t, t).  Two architectures share the
// time-embedding trunk: a plain MLP with per-layer time projections, and a
// 1-d U-Net over the feature axis (features padded to a multiple of the
// downsampling factor and cropped back).
class DenoiserModel {
 public:
  DenoiserModel(DenoiserConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const auto& [name, spec] : layer_specs()) {
      params_.add(name, init_tensor(spec, rng));
    }
  }

  DenoiserModel(DenoiserConfig cfg, ParamSet params)
      : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    auto specs = layer_specs();
    if (specs.size() != params_.size()) {
      throw IoError("parameter count does not match architecture");
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

  const DenoiserConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.feature_dim; }
  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  // Traced forward pass for training; `leaves` must come from
  // tape.adopt(params()).
  Var trace(GradTape& tape, const std::map<std::string, Var>& leaves, Var x,
            const std::vector<int>& ts) const {
    const Tensor& xv = tape.value(x);
    if (xv.rank() != 2 || xv.dim(1) != static_cast<std::size_t>(cfg_.feature_dim)) {
      throw DimensionError("denoiser input must be [batch, " +
                           std::to_string(cfg_.feature_dim) + "]");
    }
    if (ts.size() != xv.dim(0)) {
      throw DimensionError("denoiser: one timestep per batch row required");
    }
    TimestepEmbedding emb(cfg_.time_dim);
    Var temb = tape.input(emb.embed_batch(ts));
    Var tfeat = tape.add_row_bias(
        tape.matmul(tape.silu(tape.add_row_bias(
                        tape.matmul(temb, leaves.at("time.fc1.w")),
                        leaves.at("time.fc1.b"))),
                    leaves.at("time.fc2.w")),
        leaves.at("time.fc2.b"));
    Var stfeat = tape.silu(tfeat);
    return cfg_.arch == DenoiserArch::mlp ? trace_mlp(tape, leaves, x, stfeat)
                                          : trace_unet(tape, leaves, x, stfeat);
  }

  // Inference forward pass (no gradients retained beyond the call).
  Tensor forward(const Tensor& x, const std::vector<int>& ts) const {
    GradTape tape;
    auto leaves = tape.adopt(params_);
    return tape.value(trace(tape, leaves, tape.input(x), ts));
  }

  Tensor forward(const Tensor& x, int t) const {
    if (x.rank() != 2) throw DimensionError("denoiser input must be rank 2");
    return forward(x, std::vector<int>(x.dim(0), t));
  }

  // Adapter for samplers/diagnostics; the model must outlive the closure.
  EpsFn eps_fn() const {
    return [this](const Tensor& x, int t) { return forward(x, t); };
  }

 private:
  struct LayerSpec {
    Shape shape;
    double gain = 0.0;  // 0 -> zero init; otherwise fan-in-scaled uniform
    std::size_t fan_in = 0;
  };

  // 1 / sqrt(E[silu(z)^2]) for z ~ N(0,1); keeps activation variance roughly
  // unit through silu-activated layers.
  static constexpr double kSiluGain = 1.6765324703321147;
  // Additive time projections start at half strength so conditioning enters
  // as a perturbation instead of doubling the pre-activation variance.
  static constexpr double kTimeGain = 0.5 * kSiluGain;
  static constexpr double kInvSqrt2 = 0.70710678118654752;

  Tensor init_tensor(const LayerSpec& spec, Rng& rng) const {
    if (spec.gain == 0.0) return Tensor(spec.shape);
    double bound = spec.gain * std::sqrt(3.0 / static_cast<double>(spec.fan_in));
    return Tensor::rand_uniform(spec.shape, rng, -bound, bound);
  }

  static LayerSpec linear_spec(std::size_t in, std::size_t out, double gain) {
    return {{in, out}, gain, in};
  }
  static LayerSpec bias_spec(std::size_t n) { return {{n}, 0.0, 0}; }
  LayerSpec conv_spec(std::size_t oc, std::size_t ic, double gain) const {
    std::size_t k = static_cast<std::size_t>(cfg_.kernel);
    return {{oc, ic, k}, gain, ic * k};
  }

  // Ordered (name, spec) list; construction order fixes the rng draw order.
  std::vector<std::pair<std::string, LayerSpec>> layer_specs() const {
    std::vector<std::pair<std::string, LayerSpec>> specs;
    const std::size_t td = static_cast<std::size_t>(cfg_.time_dim);
    const std::size_t fd = static_cast<std::size_t>(cfg_.feature_dim);
    specs.emplace_back("time.fc1.w", linear_spec(td, td, 1.0));
    specs.emplace_back("time.fc1.b", bias_spec(td));
    specs.emplace_back("time.fc2.w", linear_spec(td, td, kSiluGain));
    specs.emplace_back("time.fc2.b", bias_spec(td));
    const double head_gain = cfg_.zero_init_final ? 0.0 : kSiluGain;
    if (cfg_.arch == DenoiserArch::mlp) {
      const std::size_t hid = static_cast<std::size_t>(cfg_.hidden);
      for (int l = 0; l < cfg_.hidden_layers; ++l) {
        std::string base = "fc" + std::to_string(l) + ".";
        std::size_t in = l == 0 ? fd : hid;
        specs.emplace_back(base + "w", linear_spec(in, hid, l == 0 ? 1.0 : kSiluGain));
        specs.emplace_back(base + "b", bias_spec(hid));
        specs.emplace_back(base + "t.w", linear_spec(td, hid, kTimeGain));
      }
      specs.emplace_back("out.w", linear_spec(hid, fd, head_gain));
      specs.emplace_back("out.b", bias_spec(fd));
    } else {
      const auto& ch = cfg_.channels;
      const std::size_t levels = ch.size();
      auto block_specs = [&](const std::string& base, std::size_t c) {
        specs.emplace_back(base + "conv1.w", conv_spec(c, c, kSiluGain));
        specs.emplace_back(base + "conv1.b", bias_spec(c));
        specs.emplace_back(base + "temb.w", linear_spec(td, c, kTimeGain));
        specs.emplace_back(base + "temb.b", bias_spec(c));
        specs.emplace_back(base + "conv2.w", conv_spec(c, c, kSiluGain));
        specs.emplace_back(base + "conv2.b", bias_spec(c));
      };
      specs.emplace_back("stem.w", conv_spec(static_cast<std::size_t>(ch[0]), 1, 1.0));
      specs.emplace_back("stem.b", bias_spec(static_cast<std::size_t>(ch[0])));
      for (std::size_t i = 0; i < levels; ++i) {
        std::size_t c = static_cast<std::size_t>(ch[i]);
        for (int j = 0; j < cfg_.blocks_per_level; ++j) {
          block_specs("down" + std::to_string(i) + ".block" + std::to_string(j) + ".", c);
        }
        if (i + 1 < levels) {
          std::size_t cn = static_cast<std::size_t>(ch[i + 1]);
          std::string base = "down" + std::to_string(i) + ".pool.";
          specs.emplace_back(base + "w", conv_spec(cn, c, 1.0));
          specs.emplace_back(base + "b", bias_spec(cn));
        }
      }
      for (std::size_t i = levels; i-- > 1;) {
        std::size_t c_hi = static_cast<std::size_t>(ch[i]);
        std::size_t c_lo = static_cast<std::size_t>(ch[i - 1]);
        std::string base = "up" + std::to_string(i) + ".";
        specs.emplace_back(base + "upconv.w", conv_spec(c_lo, c_hi, 1.0));
        specs.emplace_back(base + "upconv.b", bias_spec(c_lo));
        specs.emplace_back(base + "fuse.w", conv_spec(c_lo, 2 * c_lo, 1.0));
        specs.emplace_back(base + "fuse.b", bias_spec(c_lo));
        for (int j = 0; j < cfg_.blocks_per_level; ++j) {
          block_specs(base + "block" + std::to_string(j) + ".", c_lo);
        }
      }
      specs.emplace_back("head.w", conv_spec(1, static_cast<std::size_t>(ch[0]),
                                             head_gain));
      specs.emplace_back("head.b", bias_spec(1));
    }
    return specs;
  }

  Var trace_mlp(GradTape& tape, const std::map<std::string, Var>& leaves, Var x,
                Var stfeat) const {
    Var h = x;
    for (int l = 0; l < cfg_.hidden_layers; ++l) {
      std::string base = "fc" + std::to_string(l) + ".";
      Var pre = tape.add_row_bias(tape.matmul(h, leaves.at(base + "w")),
                                  leaves.at(base + "b"));
      pre = tape.add(pre, tape.matmul(stfeat, leaves.at(base + "t.w")));
      h = tape.silu(pre);
    }
    return tape.add_row_bias(tape.matmul(h, leaves.at("out.w")),
                             leaves.at("out.b"));
  }

  Var conv_block(GradTape& tape, const std::map<std::string, Var>& leaves,
                 const std::string& base, Var h) const {
    std::size_t pad = static_cast<std::size_t>(cfg_.kernel / 2);
    return tape.add_channel_bias(
        tape.conv1d(h, leaves.at(base + "w"), 1, pad), leaves.at(base + "b"));
  }

  // Pre-activation residual block with additive per-channel time features;
  // the residual join is scaled by 1/sqrt(2) to keep the variance level.
  Var res_block(GradTape& tape, const std::map<std::string, Var>& leaves,
                const std::string& base, Var h, Var stfeat) const {
    Var a = conv_block(tape, leaves, base + "conv1.", tape.silu(h));
    Var tb = tape.add_row_bias(tape.matmul(stfeat, leaves.at(base + "temb.w")),
                               leaves.at(base + "temb.b"));
    a = tape.add_sample_channel_bias(a, tb);
    a = conv_block(tape, leaves, base + "conv2.", tape.silu(a));
    return tape.scale(tape.add(h, a), kInvSqrt2);
  }

  Var trace_unet(GradTape& tape, const std::map<std::string, Var>& leaves, Var x,
                 Var stfeat) const {
    const auto& ch = cfg_.channels;
    const std::size_t levels = ch.size();
    const std::size_t factor = std::size_t{1} << (levels - 1);
    const std::size_t fd = static_cast<std::size_t>(cfg_.feature_dim);
    const std::size_t padded = (fd + factor - 1) / factor * factor;
    const std::size_t batch = tape.value(x).dim(0);
    const std::size_t pad = static_cast<std::size_t>(cfg_.kernel / 2);

    Var h = tape.reshape(x, {batch, 1, fd});
    if (padded > fd) h = tape.pad_length(h, padded - fd);
    h = conv_block(tape, leaves, "stem.", h);

    std::vector<Var> skips;
    for (std::size_t i = 0; i < levels; ++i) {
      std::string lvl = "down" + std::to_string(i) + ".";
      for (int j = 0; j < cfg_.blocks_per_level; ++j) {
        h = res_block(tape, leaves, lvl + "block" + std::to_string(j) + ".", h,
                      stfeat);
      }
      if (i + 1 < levels) {
        skips.push_back(h);
        h = tape.add_channel_bias(
            tape.conv1d(h, leaves.at(lvl + "pool.w"), 2, pad),
            leaves.at(lvl + "pool.b"));
      }
    }
    for (std::size_t i = levels; i-- > 1;) {
      std::string lvl = "up" + std::to_string(i) + ".";
      h = conv_block(tape, leaves, lvl + "upconv.", tape.upsample2(h));
      h = tape.concat_channels(h, skips[i - 1]);
      h = conv_block(tape, leaves, lvl + "fuse.", h);
      for (int j = 0; j < cfg_.blocks_per_level; ++j) {
        h = res_block(tape, leaves, lvl + "block" + std::to_string(j) + ".", h,
                      stfeat);
      }
    }
    h = conv_block(tape, leaves, "head.", tape.silu(h));
    if (padded > fd) h = tape.crop_length(h, fd);
    return tape.reshape(h, {batch, fd});
  }

  DenoiserConfig cfg_;
  ParamSet params_;
};

// Reverse-process mean mu_theta(x_t, t) from a noise prediction:
// (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t).
inline Tensor mu_from_eps(const NoiseSchedule& sched, const Tensor& xt, int t,
                          const Tensor& eps_hat) {
  require_same_shape(xt, eps_hat, "mu_from_eps");
  Tensor mu = xt;
  axpy(mu, -sched.beta(t) / sched.sqrt_one_minus_alpha_bar(t), eps_hat);
  return scale(mu, 1.0 / std::sqrt(sched.alpha(t)));
}

// Data estimate x0_hat(x_t, t) from a noise prediction:
// (x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t).
inline Tensor x0_from_eps(const NoiseSchedule& sched, const Tensor& xt, int t,
                          const Tensor& eps_hat) {
  require_same_shape(xt, eps_hat, "x0_from_eps");
  Tensor x0 = xt;
  axpy(x0, -sched.sqrt_one_minus_alpha_bar(t), eps_hat);
  return scale(x0, 1.0 / sched.sqrt_alpha_bar(t));
}

}  // namespace difftab
