#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "difftab/denoiser.hpp"
#include "difftab/errors.hpp"
#include "difftab/guidance.hpp"

namespace difftab {

// Flat key=value run configuration.  Parsing is fail-closed: unknown keys,
// duplicate keys, and malformed values are all errors.
struct RunConfig {
  // schedule
  int T = 200;
  double beta_start = 1e-4;
  double beta_end = 1e-2;
  // training
  double lr = 0.001;
  int batch = 128;
  int steps = 1000;
  // sampling
  int k = 3;
  double residual_tol = 1e-3;
  double guidance_scale = 1.0;
  double threshold = 0.5;
  // denoiser architecture
  std::string arch = "unet1d";
  int hidden = 256;
  int hidden_layers = 3;
  int time_dim = 64;
  std::vector<int> channels = {32, 64};
  int blocks = 2;
  int kernel = 3;
  // guidance classifier architecture
  std::string clf_kind = "mlp";
  int clf_hidden = 64;
  int clf_hidden_layers = 2;
  int clf_time_dim = 16;
  bool clf_time_conditioned = true;

  void validate() const {
    if (T < 1) throw ConfigError("T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
      throw ConfigError("need 0 < beta_start <= beta_end < 1");
    if (T > 1 && beta_start >= beta_end)
      throw ConfigError("need beta_start < beta_end when T > 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (k < 0) throw ConfigError("k must be >= 0");
    if (!(residual_tol > 0.0)) throw ConfigError("residual_tol must be positive");
    if (!(guidance_scale >= 0.0))
      throw ConfigError("guidance_scale must be >= 0");
    arch_from_name(arch);                  // throws on unknown name
    classifier_kind_from_name(clf_kind);   // throws on unknown name
    if (hidden < 1 || hidden_layers < 1 || clf_hidden < 1 ||
        clf_hidden_layers < 1)
      throw ConfigError("hidden widths and depths must be >= 1");
    if (time_dim < 2 || time_dim % 2)
      throw ConfigError("time_dim must be even >= 2");
    if (clf_time_dim < 2 || clf_time_dim % 2)
      throw ConfigError("clf_time_dim must be even >= 2");
    if (channels.empty()) throw ConfigError("channels must be non-empty");
    for (int c : channels)
      if (c < 1) throw ConfigError("channels entries must be positive");
    if (blocks < 1) throw ConfigError("blocks must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw ConfigError("kernel must be odd");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double conf_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const char* first = value.data();
  const char* last = first + value.size();
  auto [p, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || p != last)
    throw ConfigError("bad value '" + value + "' for key '" + key + "'");
  return out;
}

inline int conf_int(const std::string& key, const std::string& value) {
  int out = 0;
  const char* first = value.data();
  const char* last = first + value.size();
  auto [p, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || p != last)
    throw ConfigError("bad value '" + value + "' for key '" + key + "'");
  return out;
}

inline bool conf_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad value '" + value + "' for key '" + key +
                    "' (want true/false)");
}

inline std::vector<int> conf_int_list(const std::string& key,
                                      const std::string& value) {
  std::vector<int> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(conf_int(key, trim(item)));
  if (out.empty())
    throw ConfigError("bad value '" + value + "' for key '" + key + "'");
  return out;
}

inline bool apply_config_key(RunConfig& cfg, const std::string& key,
                             const std::string& value) {
  if (key == "T") cfg.T = conf_int(key, value);
  else if (key == "beta_start") cfg.beta_start = conf_double(key, value);
  else if (key == "beta_end") cfg.beta_end = conf_double(key, value);
  else if (key == "lr") cfg.lr = conf_double(key, value);
  else if (key == "batch") cfg.batch = conf_int(key, value);
  else if (key == "steps") cfg.steps = conf_int(key, value);
  else if (key == "k") cfg.k = conf_int(key, value);
  else if (key == "residual_tol") cfg.residual_tol = conf_double(key, value);
  else if (key == "guidance_scale") cfg.guidance_scale = conf_double(key, value);
  else if (key == "threshold") cfg.threshold = conf_double(key, value);
  else if (key == "arch") cfg.arch = value;
  else if (key == "hidden") cfg.hidden = conf_int(key, value);
  else if (key == "hidden_layers") cfg.hidden_layers = conf_int(key, value);
  else if (key == "time_dim") cfg.time_dim = conf_int(key, value);
  else if (key == "channels") cfg.channels = conf_int_list(key, value);
  else if (key == "blocks") cfg.blocks = conf_int(key, value);
  else if (key == "kernel") cfg.kernel = conf_int(key, value);
  else if (key == "clf_kind") cfg.clf_kind = value;
  else if (key == "clf_hidden") cfg.clf_hidden = conf_int(key, value);
  else if (key == "clf_hidden_layers") cfg.clf_hidden_layers = conf_int(key, value);
  else if (key == "clf_time_dim") cfg.clf_time_dim = conf_int(key, value);
  else if (key == "clf_time_conditioned")
    cfg.clf_time_conditioned = conf_bool(key, value);
  else return false;
  return true;
}

}  // namespace detail

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::vector<std::string> seen;
  std::stringstream ss(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(ss, raw)) {
    ++lineno;
    std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key=value, got '" + line + "'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    for (const auto& s : seen)
      if (s == key)
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": duplicate key '" + key + "'");
    seen.push_back(key);
    if (!detail::apply_config_key(cfg, key, value))
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// One line per key with its shipped default; embedded in the CLI help text so
// the documentation can never drift from the code.
inline std::string config_keys_help() {
  RunConfig d;
  std::ostringstream out;
  auto line = [&out](const std::string& key, const std::string& value,
                     const std::string& what) {
    out << "  " << key << "=" << value << "  (" << what << ")\n";
  };
  auto num = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  line("T", std::to_string(d.T), "diffusion timesteps");
  line("beta_start", num(d.beta_start), "first noise-schedule beta");
  line("beta_end", num(d.beta_end), "last noise-schedule beta");
  line("lr", num(d.lr), "Adam learning rate");
  line("batch", std::to_string(d.batch), "minibatch size");
  line("steps", std::to_string(d.steps), "training steps");
  line("k", std::to_string(d.k), "Anderson table size, 0 disables");
  line("residual_tol", num(d.residual_tol), "accelerated-sampling stop tolerance");
  line("guidance_scale", num(d.guidance_scale), "classifier-guidance strength");
  line("threshold", num(d.threshold), "binarization threshold for binary data");
  line("arch", d.arch, "denoiser architecture: mlp or unet1d");
  line("hidden", std::to_string(d.hidden), "mlp width");
  line("hidden_layers", std::to_string(d.hidden_layers), "mlp depth");
  line("time_dim", std::to_string(d.time_dim), "time-embedding width");
  line("channels", "32,64", "unet widths per level, comma-separated");
  line("blocks", std::to_string(d.blocks), "unet residual blocks per level");
  line("kernel", std::to_string(d.kernel), "unet convolution kernel (odd)");
  line("clf_kind", d.clf_kind, "guidance classifier: logistic or mlp");
  line("clf_hidden", std::to_string(d.clf_hidden), "classifier hidden width");
  line("clf_hidden_layers", std::to_string(d.clf_hidden_layers),
       "classifier hidden depth");
  line("clf_time_dim", std::to_string(d.clf_time_dim),
       "classifier time-embedding width");
  line("clf_time_conditioned", d.clf_time_conditioned ? "true" : "false",
       "condition classifier on timestep");
  return out.str();
}

// Builders that translate the flat config into the structured module configs.
inline DenoiserConfig denoiser_config(const RunConfig& cfg, int feature_dim) {
  DenoiserConfig d;
  d.arch = arch_from_name(cfg.arch);
  d.feature_dim = feature_dim;
  d.time_dim = cfg.time_dim;
  d.hidden = cfg.hidden;
  d.hidden_layers = cfg.hidden_layers;
  d.channels = cfg.channels;
  d.blocks_per_level = cfg.blocks;
  d.kernel = cfg.kernel;
  d.validate();
  return d;
}

inline ClassifierConfig classifier_config(const RunConfig& cfg, int feature_dim,
                                          int num_classes) {
  ClassifierConfig c;
  c.kind = classifier_kind_from_name(cfg.clf_kind);
  c.feature_dim = feature_dim;
  c.num_classes = num_classes;
  c.time_conditioned = cfg.clf_time_conditioned;
  c.time_dim = cfg.clf_time_dim;
  c.hidden = cfg.clf_hidden;
  c.hidden_layers = cfg.clf_hidden_layers;
  c.validate();
  return c;
}

}  // namespace difftab
