#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "difftab/anderson.hpp"
#include "difftab/checkpoint.hpp"
#include "difftab/config.hpp"
#include "difftab/dataset.hpp"
#include "difftab/guidance.hpp"
#include "difftab/metrics.hpp"
#include "difftab/sampler.hpp"
#include "difftab/trainer.hpp"

namespace difftab {
namespace cli_detail {

// Per-purpose seed streams derived from the master --seed, so the commands of
// one pipeline never share raw generator state.
namespace stream {
inline constexpr std::uint64_t model_init = 1;
inline constexpr std::uint64_t model_train = 2;
inline constexpr std::uint64_t sampling = 3;
inline constexpr std::uint64_t binarize = 4;
inline constexpr std::uint64_t reconstruct = 5;
inline constexpr std::uint64_t clf_init = 6;
inline constexpr std::uint64_t clf_train = 7;
inline constexpr std::uint64_t augment = 8;
}  // namespace stream

struct CliArgs {
  // global
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  // csv flags
  std::string kind = "continuous";
  bool header = false;
  bool labeled = false;
  // positionals
  std::string data, model, classifier, real, synth, test;
  // sampling
  std::string mode = "ddpm";
  int k = 0;
  int t_use = 0;
  bool sigma_zero = false;
  int guided = -1;
  bool trajectory = false;
  int n = 100;
  bool bernoulli = false;
  // augment
  int step = 0;
};

inline Tensor raw_features(const Dataset& ds) {
  return ds.standardization ? ds.standardization->invert(ds.features)
                            : ds.features;
}

// Map a freshly loaded table into the space a checkpointed model was trained
// in: undo the load-time z-score, then apply the checkpoint's own statistics.
inline Tensor to_model_space(const Dataset& ds,
                             const std::optional<Standardization>& stats) {
  if (!stats) return ds.features;
  return stats->apply(raw_features(ds));
}

inline void write_text_output(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::string out_or(const std::string& out, const char* fallback) {
  return out.empty() ? std::string(fallback) : out;
}

inline int cmd_train(const CliArgs& a, const RunConfig& cfg) {
  Dataset ds =
      load_csv(a.data, feature_kind_from_name(a.kind), a.labeled, a.header);
  NoiseSchedule sched =
      NoiseSchedule::linear(cfg.T, cfg.beta_start, cfg.beta_end);
  DenoiserConfig dc = denoiser_config(cfg, static_cast<int>(ds.dim()));
  Rng init(derive_seed(a.seed, stream::model_init));
  DenoiserModel model(dc, init);
  TrainConfig tc;
  tc.lr = cfg.lr;
  tc.batch_size = cfg.batch;
  tc.steps = cfg.steps;
  tc.seed = derive_seed(a.seed, stream::model_train);
  TrainResult res = train(model, sched, ds.features, tc);

  ModelCheckpoint ck;
  ck.arch = dc;
  ck.betas = schedule_betas(sched);
  ck.kind = ds.kind;
  ck.standardization = ds.standardization;
  ck.train_seed = tc.seed;
  ck.train_steps = cfg.steps;
  ck.final_loss = res.loss_history.back();
  ck.params = model.params();
  const std::string path = out_or(a.out, "model.ckpt");
  save_model_checkpoint(path, ck);
  std::cout << "trained " << cfg.steps << " steps, final loss "
            << format_value(ck.final_loss) << ", saved " << path << "\n";
  return 0;
}

inline int cmd_sample(const CliArgs& a, const RunConfig& cfg, bool k_given) {
  const bool guided = a.guided >= 0;
  const SamplerMode mode =
      a.mode == "ddpm" ? SamplerMode::ddpm : SamplerMode::ddim;
  const int k = k_given ? a.k : (mode == SamplerMode::ddim ? cfg.k : 0);
  if (k < 0) throw ConfigError("--k must be >= 0");
  if (a.n < 1) throw ConfigError("--n must be >= 1");
  if (mode == SamplerMode::ddpm && k > 0)
    throw ConfigError("acceleration requires --mode ddim (or pass --k 0)");
  if (guided && mode != SamplerMode::ddim)
    throw ConfigError("--guided runs the deterministic sampler; pass --mode ddim");
  if (guided && a.classifier.empty())
    throw ConfigError("--guided needs --classifier <checkpoint>");
  if (a.trajectory && (k > 0 || guided))
    throw ConfigError(
        "--trajectory records the plain reverse pass; pass --k 0 and drop --guided");
  if (a.sigma_zero && mode == SamplerMode::ddim)
    throw ConfigError("--sigma-zero applies to ddpm; ddim is already deterministic");

  ModelCheckpoint ck = load_model_checkpoint(a.model);
  DenoiserModel model = ck.model();
  NoiseSchedule sched = ck.schedule();
  if (mode == SamplerMode::ddpm && a.t_use > 0 && a.t_use != sched.steps())
    throw ConfigError("ddpm visits every timestep; --T needs --mode ddim");

  SampleConfig sc;
  sc.mode = mode;
  sc.sigma_mode = a.sigma_zero ? SigmaMode::zero : SigmaMode::posterior;
  sc.t_use = a.t_use;
  sc.seed = derive_seed(a.seed, stream::sampling);
  sc.record_trajectory = a.trajectory;

  const std::size_t n = static_cast<std::size_t>(a.n);
  Tensor samples;
  Trajectory traj;
  if (guided) {
    ClassifierCheckpoint cc = load_classifier_checkpoint(a.classifier);
    GuidanceClassifier clf = cc.classifier();
    samples = conditional_sample(model, clf, sched, sc, a.guided, n, k,
                                 cfg.guidance_scale, cfg.residual_tol)
                  .samples;
  } else if (k > 0) {
    AndersonConfig aa;
    aa.k = k;
    samples =
        accelerated_sample(model, sched, sc, aa, n, cfg.residual_tol).samples;
  } else {
    SampleResult sr = sample(model, sched, sc, n);
    samples = std::move(sr.samples);
    traj = std::move(sr.trajectory);
  }

  Tensor out_rows =
      ck.standardization ? ck.standardization->invert(samples) : samples;
  if (ck.kind == FeatureKind::binary) {
    if (a.bernoulli) {
      Rng brng(derive_seed(a.seed, stream::binarize));
      out_rows = binarize_bernoulli(out_rows, brng).tensor();
    } else {
      out_rows = binarize(out_rows, cfg.threshold).tensor();
    }
  }
  const std::string path = out_or(a.out, "samples.csv");
  if (guided) {
    // guided rows are labeled with the class they were steered toward
    std::vector<int> labels(out_rows.dim(0), a.guided);
    write_csv(path, out_rows, &labels);
  } else {
    write_csv(path, out_rows);
  }
  if (a.trajectory) {
    // model-space states, one row per (state, chain)
    std::ostringstream tcsv;
    tcsv << "t,chain";
    for (std::size_t j = 0; j < samples.dim(1); ++j) tcsv << ",f" << j;
    tcsv << "\n";
    for (std::size_t si = 0; si < traj.states.size(); ++si)
      for (std::size_t c = 0; c < traj.states[si].dim(0); ++c) {
        tcsv << traj.ts[si] << "," << c;
        for (std::size_t j = 0; j < traj.states[si].dim(1); ++j)
          tcsv << "," << format_value(traj.states[si](c, j));
        tcsv << "\n";
      }
    write_text_output(path + ".traj", tcsv.str());
  }
  std::cout << "wrote " << out_rows.dim(0) << " samples to " << path << "\n";
  return 0;
}

inline int cmd_reconstruct(const CliArgs& a, const RunConfig& cfg) {
  ModelCheckpoint ck = load_model_checkpoint(a.model);
  DenoiserModel model = ck.model();
  NoiseSchedule sched = ck.schedule();
  Dataset ds = load_csv(a.data, ck.kind, a.labeled, a.header);
  if (ds.dim() != static_cast<std::size_t>(ck.arch.feature_dim))
    throw DimensionError("table width " + std::to_string(ds.dim()) +
                         " does not match the model's " +
                         std::to_string(ck.arch.feature_dim));
  Tensor x = to_model_space(ds, ck.standardization);
  Tensor rec =
      reconstruct(model, sched, x, derive_seed(a.seed, stream::reconstruct));

  double worst = 1.0, total = 0.0;
  std::size_t counted = 0;
  for (std::size_t j = 0; j < x.dim(1); ++j) {
    std::vector<double> in(x.dim(0)), re(x.dim(0));
    for (std::size_t i = 0; i < x.dim(0); ++i) {
      in[i] = x(i, j);
      re[i] = rec(i, j);
    }
    std::optional<double> r = detail::pearson(in, re);
    if (!r) continue;
    worst = std::min(worst, *r);
    total += *r;
    ++counted;
  }

  Tensor out_rows = ck.standardization ? ck.standardization->invert(rec) : rec;
  if (ck.kind == FeatureKind::binary)
    out_rows = binarize(out_rows, cfg.threshold).tensor();
  const std::string path = out_or(a.out, "reconstruction.csv");
  write_csv(path, out_rows);
  if (counted > 0) {
    std::cout << "mean per-feature correlation "
              << format_value(total / static_cast<double>(counted)) << " (min "
              << format_value(worst) << "), wrote " << path << "\n";
  } else {
    std::cout << "wrote " << path << "\n";
  }
  return 0;
}

inline int cmd_classify_train(const CliArgs& a, const RunConfig& cfg) {
  std::optional<ModelCheckpoint> mk;
  if (!a.model.empty()) mk = load_model_checkpoint(a.model);
  const FeatureKind kind = mk ? mk->kind : feature_kind_from_name(a.kind);
  Dataset ds = load_csv(a.data, kind, /*labeled=*/true, a.header);
  if (mk && ds.dim() != static_cast<std::size_t>(mk->arch.feature_dim))
    throw DimensionError("table width " + std::to_string(ds.dim()) +
                         " does not match the model's " +
                         std::to_string(mk->arch.feature_dim));
  NoiseSchedule sched =
      mk ? mk->schedule()
         : NoiseSchedule::linear(cfg.T, cfg.beta_start, cfg.beta_end);
  Tensor x = mk ? to_model_space(ds, mk->standardization) : ds.features;

  int num_classes = 0;
  for (int y : *ds.labels) num_classes = std::max(num_classes, y + 1);
  ClassifierConfig cc =
      classifier_config(cfg, static_cast<int>(ds.dim()), num_classes);
  Rng init(derive_seed(a.seed, stream::clf_init));
  GuidanceClassifier clf(cc, init);
  TrainConfig tc;
  tc.lr = cfg.lr;
  tc.batch_size = cfg.batch;
  tc.steps = cfg.steps;
  tc.seed = derive_seed(a.seed, stream::clf_train);
  TrainResult res = train_classifier(clf, sched, x, *ds.labels, tc);

  ClassifierCheckpoint ck;
  ck.cfg = cc;
  ck.betas = schedule_betas(sched);
  ck.train_seed = tc.seed;
  ck.train_steps = cfg.steps;
  ck.final_loss = res.loss_history.back();
  ck.params = clf.params();
  const std::string path = out_or(a.out, "classifier.ckpt");
  save_classifier_checkpoint(path, ck);
  std::cout << "trained classifier on " << ds.rows() << " rows ("
            << num_classes << " classes), final loss "
            << format_value(ck.final_loss) << ", saved " << path << "\n";
  return 0;
}

inline int cmd_evaluate(const CliArgs& a, const RunConfig&) {
  const FeatureKind kind = feature_kind_from_name(a.kind);
  Dataset real = load_csv(a.real, kind, a.labeled, a.header);
  Dataset synth = load_csv(a.synth, kind, a.labeled, a.header);
  std::ostringstream csv;
  if (kind == FeatureKind::binary) {
    MetricsReport rep =
        eval_binary(BinaryMatrix(real.features), BinaryMatrix(synth.features));
    csv << "metric,value\n";
    csv << "rho," << (rep.rho ? format_value(*rep.rho) : "null") << "\n";
    csv << "sae," << format_value(rep.sae) << "\n";
    csv << "rmse," << format_value(rep.rmse) << "\n";
  } else {
    Tensor r = raw_features(real);
    Tensor s = raw_features(synth);
    if (r.dim(1) != s.dim(1))
      throw DimensionError("real and synthetic tables have different widths");
    csv << "feature,grid,density_real,density_synth\n";
    constexpr int kGridPoints = 101;
    for (std::size_t j = 0; j < r.dim(1); ++j) {
      std::vector<double> rv(r.dim(0)), sv(s.dim(0));
      for (std::size_t i = 0; i < r.dim(0); ++i) rv[i] = r(i, j);
      for (std::size_t i = 0; i < s.dim(0); ++i) sv[i] = s(i, j);
      double lo = rv[0], hi = rv[0];
      for (double v : rv) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      for (double v : sv) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      const double pad = 3.0 * std::max(kde_bandwidth(rv), kde_bandwidth(sv));
      lo -= pad;
      hi += pad;
      std::vector<double> grid(kGridPoints);
      for (int g = 0; g < kGridPoints; ++g)
        grid[static_cast<std::size_t>(g)] =
            lo + (hi - lo) * g / (kGridPoints - 1);
      std::vector<double> dr = kde(rv, grid);
      std::vector<double> dsy = kde(sv, grid);
      for (int g = 0; g < kGridPoints; ++g) {
        const std::size_t gi = static_cast<std::size_t>(g);
        csv << j << "," << format_value(grid[gi]) << ","
            << format_value(dr[gi]) << "," << format_value(dsy[gi]) << "\n";
      }
    }
  }
  write_text_output(a.out, csv.str());
  return 0;
}

inline int cmd_augment(const CliArgs& a, const RunConfig& cfg) {
  if (a.step < 0) throw ConfigError("--step must be >= 0");
  const FeatureKind kind = feature_kind_from_name(a.kind);
  Dataset real = load_csv(a.real, kind, /*labeled=*/true, a.header);
  Dataset synth = load_csv(a.synth, kind, /*labeled=*/true, a.header);
  Dataset test = load_csv(a.test, kind, /*labeled=*/true, a.header);
  Tensor rr = raw_features(real);
  Tensor sr = raw_features(synth);
  Tensor tr = raw_features(test);
  if (rr.dim(1) != sr.dim(1) || rr.dim(1) != tr.dim(1))
    throw DimensionError("augment tables have different widths");
  Tensor rx = rr, sx = sr, tx = tr;
  if (kind == FeatureKind::continuous) {
    // one shared space for all three tables, fit on the real rows
    Standardization st = fit_standardization(rr);
    rx = st.apply(rr);
    sx = st.apply(sr);
    tx = st.apply(tr);
  }
  const std::size_t step = a.step > 0
                               ? static_cast<std::size_t>(a.step)
                               : std::max<std::size_t>(1, sr.dim(0) / 4);
  TrainConfig tc;
  tc.lr = cfg.lr;
  tc.batch_size = cfg.batch;
  tc.steps = cfg.steps;
  tc.seed = derive_seed(a.seed, stream::augment);
  std::vector<AugmentationPoint> curve = augmentation_curve(
      rx, *real.labels, sx, *synth.labels, tx, *test.labels, step, tc);
  std::ostringstream csv;
  csv << "n_synth,auc\n";
  for (const AugmentationPoint& p : curve)
    csv << p.n_synth << "," << format_value(p.auc) << "\n";
  write_text_output(a.out, csv.str());
  return 0;
}

}  // namespace cli_detail

// Entry point: args are argv[1..].  Exit codes: 0 ok, 1 usage, 2 data error,
// 3 numeric failure.
inline int run_cli(std::vector<std::string> args) {
  CLI::App app{
      "difftab: denoising-diffusion models for fixed-width tabular records"};
  app.name("difftab");
  app.fallthrough();  // global options may appear after the subcommand
  app.require_subcommand(1);
  app.footer("Config keys (key=default):\n" + config_keys_help());

  cli_detail::CliArgs a;
  app.add_option("--config", a.config_path,
                 "flat key=value config file (unknown keys are errors)");
  app.add_option("--seed", a.seed,
                 "master seed; runs are pure functions of (argv, config, seed)")
      ->capture_default_str();
  app.add_option("--out", a.out, "output path (per-command default otherwise)");

  auto kind_opt = [&a](CLI::App* cmd) {
    cmd->add_option("--kind", a.kind, "feature kind: binary or continuous")
        ->check(CLI::IsMember({"binary", "continuous"}))
        ->capture_default_str();
  };
  auto header_flag = [&a](CLI::App* cmd) {
    cmd->add_flag("--header", a.header, "CSV inputs carry a header row");
  };
  auto labeled_flag = [&a](CLI::App* cmd) {
    cmd->add_flag("--labeled", a.labeled,
                  "final CSV column is an integer label, not a feature");
  };

  CLI::App* t = app.add_subcommand(
      "train", "train a denoiser on a CSV table (writes model.ckpt)");
  t->add_option("data", a.data, "training table")->required();
  kind_opt(t);
  header_flag(t);
  labeled_flag(t);

  CLI::App* s = app.add_subcommand(
      "sample", "draw records from a trained model (writes samples.csv)");
  s->add_option("model", a.model, "model checkpoint")->required();
  s->add_option("--mode", a.mode, "reverse process: ddpm or ddim")
      ->check(CLI::IsMember({"ddpm", "ddim"}))
      ->capture_default_str();
  CLI::Option* k_opt = s->add_option(
      "--k", a.k, "Anderson table size, 0 disables (ddim only; default: config key k)");
  s->add_option("--T", a.t_use,
                "reverse steps to walk (ddim subsequence; 0 = full schedule)")
      ->capture_default_str();
  s->add_flag("--sigma-zero", a.sigma_zero,
              "deterministic ddpm updates (no injected noise)");
  s->add_option("--guided", a.guided,
                "steer chains toward this class label; output rows gain a "
                "label column (needs --classifier and --mode ddim)")
      ->check(CLI::NonNegativeNumber);
  s->add_flag("--trajectory", a.trajectory,
              "also write every reverse state to <out>.traj");
  s->add_option("-n,--num", a.n, "number of records to draw")
      ->capture_default_str();
  s->add_flag("--bernoulli", a.bernoulli,
              "sample binary outputs per dimension instead of thresholding");
  s->add_option("--classifier", a.classifier,
                "classifier checkpoint for --guided");

  CLI::App* r = app.add_subcommand(
      "reconstruct",
      "noise records to x_T, then deterministically denoise back "
      "(writes reconstruction.csv)");
  r->add_option("model", a.model, "model checkpoint")->required();
  r->add_option("data", a.data, "table to reconstruct")->required();
  header_flag(r);
  labeled_flag(r);

  CLI::App* c = app.add_subcommand(
      "classify-train",
      "train a guidance classifier on a labeled table (writes classifier.ckpt)");
  c->add_option("data", a.data, "labeled table (final column = class)")
      ->required();
  kind_opt(c);
  header_flag(c);
  c->add_option("--model", a.model,
                "model checkpoint whose schedule and scaling the classifier "
                "should match");

  CLI::App* e = app.add_subcommand(
      "evaluate",
      "compare a synthetic table against a real one; binary kind reports "
      "rho/SAE/RMSE, continuous kind writes per-feature density curves "
      "(--out or stdout)");
  e->add_option("real", a.real, "real table")->required();
  e->add_option("synth", a.synth, "synthetic table")->required();
  kind_opt(e);
  header_flag(e);
  labeled_flag(e);

  CLI::App* g = app.add_subcommand(
      "augment",
      "held-out AUC of a classifier trained on real rows plus a growing "
      "synthetic prefix (--out or stdout)");
  g->add_option("real", a.real, "labeled real table")->required();
  g->add_option("synth", a.synth, "labeled synthetic table")->required();
  g->add_option("test", a.test, "labeled held-out table")->required();
  kind_opt(g);
  header_flag(g);
  g->add_option("--step", a.step,
                "synthetic-prefix increment (0 = quarter of the pool)")
      ->capture_default_str();

  std::reverse(args.begin(), args.end());  // CLI11 consumes reversed argv
  try {
    app.parse(std::move(args));
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << "error: " << err.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    const RunConfig cfg =
        a.config_path.empty() ? RunConfig{} : parse_config_file(a.config_path);
    if (app.got_subcommand(t)) return cli_detail::cmd_train(a, cfg);
    if (app.got_subcommand(s))
      return cli_detail::cmd_sample(a, cfg, k_opt->count() > 0);
    if (app.got_subcommand(r)) return cli_detail::cmd_reconstruct(a, cfg);
    if (app.got_subcommand(c)) return cli_detail::cmd_classify_train(a, cfg);
    if (app.got_subcommand(e)) return cli_detail::cmd_evaluate(a, cfg);
    if (app.got_subcommand(g)) return cli_detail::cmd_augment(a, cfg);
    std::cerr << "error: no subcommand\n\n" << app.help();
    return 1;
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
}

}  // namespace difftab
