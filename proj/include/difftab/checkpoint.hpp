#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "difftab/autodiff.hpp"
#include "difftab/dataset.hpp"
#include "difftab/denoiser.hpp"
#include "difftab/errors.hpp"
#include "difftab/guidance.hpp"
#include "difftab/schedule.hpp"
#include "difftab/tensor.hpp"

namespace difftab {

// Container layout (all integers little-endian):
//   magic "DFSN" | version u32 | records...
// each record:
//   name_len u32 | name bytes | rank u32 | dims u64[rank] | payload f64[numel]
// Record order is part of the format, so save(load(f)) reproduces f byte for
// byte.

inline constexpr char kCheckpointMagic[4] = {'D', 'F', 'S', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

inline void put_f64(std::ostream& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline void get_bytes(std::istream& in, void* p, std::size_t n,
                      const std::string& what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw IoError("checkpoint truncated while reading " + what);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  get_bytes(in, b, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
  unsigned char b[8];
  get_bytes(in, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& in, const std::string& what) {
  return std::bit_cast<double>(get_u64(in, what));
}

}  // namespace detail

inline void write_records(
    const std::string& path,
    const std::vector<std::pair<std::string, Tensor>>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  detail::put_bytes(out, kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  for (const auto& [name, value] : records) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    detail::put_bytes(out, name.data(), name.size());
    detail::put_u32(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t i = 0; i < value.rank(); ++i)
      detail::put_u64(out, value.dim(i));
    for (std::size_t i = 0; i < value.size(); ++i)
      detail::put_f64(out, value[i]);
  }
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline std::vector<std::pair<std::string, Tensor>> read_records(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  char magic[4];
  detail::get_bytes(in, magic, 4, "magic");
  if (std::string(magic, 4) != std::string(kCheckpointMagic, 4))
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  std::uint32_t version = detail::get_u32(in, "version");
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));

  std::vector<std::pair<std::string, Tensor>> records;
  std::set<std::string> seen;
  while (in.peek() != EOF) {
    const std::string where =
        records.empty() ? "the first record"
                        : "the record after '" + records.back().first + "'";
    std::uint32_t name_len = detail::get_u32(in, "name length of " + where);
    std::string name(name_len, '\0');
    detail::get_bytes(in, name.data(), name_len, "name of " + where);
    if (!seen.insert(name).second)
      throw IoError("duplicate record '" + name + "'");
    std::uint32_t rank = detail::get_u32(in, "rank of record '" + name + "'");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i)
      shape[i] = detail::get_u64(in, "dims of record '" + name + "'");
    Tensor value(shape);
    for (std::size_t i = 0; i < value.size(); ++i)
      value[i] = detail::get_f64(in, "payload of record '" + name + "'");
    records.emplace_back(std::move(name), std::move(value));
  }
  return records;
}

namespace detail {

inline Tensor scalar_record(std::initializer_list<double> values) {
  Tensor t({values.size()});
  std::size_t i = 0;
  for (double v : values) t[i++] = v;
  return t;
}

inline Tensor vector_record(const std::vector<double>& values) {
  Tensor t({values.size()});
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = values[i];
  return t;
}

// Seeds may exceed 2^53, so they travel as two 32-bit halves.
inline std::pair<double, double> split_seed(std::uint64_t seed) {
  return {static_cast<double>(seed & 0xffffffffULL),
          static_cast<double>(seed >> 32)};
}

inline std::uint64_t join_seed(double lo, double hi) {
  return static_cast<std::uint64_t>(lo) |
         (static_cast<std::uint64_t>(hi) << 32);
}

inline const Tensor& find_record(
    const std::vector<std::pair<std::string, Tensor>>& records,
    const std::string& name, const std::string& path) {
  for (const auto& [n, v] : records)
    if (n == name) return v;
  throw IoError("'" + path + "' is missing record '" + name + "'");
}

inline bool has_record(
    const std::vector<std::pair<std::string, Tensor>>& records,
    const std::string& name) {
  for (const auto& [n, v] : records)
    if (n == name) return true;
  return false;
}

inline int record_int(const Tensor& t, std::size_t i) {
  return static_cast<int>(t[i]);
}

}  // namespace detail

inline std::vector<double> schedule_betas(const NoiseSchedule& sched) {
  std::vector<double> betas(static_cast<std::size_t>(sched.steps()));
  for (int t = 1; t <= sched.steps(); ++t)
    betas[static_cast<std::size_t>(t) - 1] = sched.beta(t);
  return betas;
}

// Everything needed to resume sampling from a trained denoiser: architecture,
// the exact beta sequence, the data-space contract (feature kind plus any
// standardization), parameters, and training provenance.
struct ModelCheckpoint {
  DenoiserConfig arch;
  std::vector<double> betas;
  FeatureKind kind = FeatureKind::continuous;
  std::optional<Standardization> standardization;
  std::uint64_t train_seed = 0;
  int train_steps = 0;
  double final_loss = 0.0;
  ParamSet params;

  NoiseSchedule schedule() const { return NoiseSchedule::from_betas(betas); }
  DenoiserModel model() const { return DenoiserModel(arch, params); }
};

inline void save_model_checkpoint(const std::string& path,
                                  const ModelCheckpoint& ck) {
  std::vector<std::pair<std::string, Tensor>> records;
  auto [seed_lo, seed_hi] = detail::split_seed(ck.train_seed);
  records.emplace_back(
      "!arch", detail::scalar_record(
                   {ck.arch.arch == DenoiserArch::mlp ? 0.0 : 1.0,
                    static_cast<double>(ck.arch.feature_dim),
                    static_cast<double>(ck.arch.time_dim),
                    static_cast<double>(ck.arch.hidden),
                    static_cast<double>(ck.arch.hidden_layers),
                    static_cast<double>(ck.arch.blocks_per_level),
                    static_cast<double>(ck.arch.kernel),
                    ck.arch.zero_init_final ? 1.0 : 0.0}));
  std::vector<double> ch(ck.arch.channels.begin(), ck.arch.channels.end());
  records.emplace_back("!channels", detail::vector_record(ch));
  records.emplace_back("!betas", detail::vector_record(ck.betas));
  records.emplace_back(
      "!data", detail::scalar_record(
                   {ck.kind == FeatureKind::binary ? 0.0 : 1.0,
                    ck.standardization.has_value() ? 1.0 : 0.0}));
  if (ck.standardization) {
    records.emplace_back("!std.mean",
                         detail::vector_record(ck.standardization->mean));
    records.emplace_back("!std.stddev",
                         detail::vector_record(ck.standardization->stddev));
  }
  records.emplace_back(
      "!train", detail::scalar_record({seed_lo, seed_hi,
                                       static_cast<double>(ck.train_steps),
                                       ck.final_loss}));
  for (const auto& [name, value] : ck.params)
    records.emplace_back("p." + name, value);
  write_records(path, records);
}

inline ModelCheckpoint load_model_checkpoint(const std::string& path) {
  auto records = read_records(path);
  ModelCheckpoint ck;
  const Tensor& arch = detail::find_record(records, "!arch", path);
  if (arch.size() != 8) throw IoError("'" + path + "': malformed '!arch'");
  ck.arch.arch = detail::record_int(arch, 0) == 0 ? DenoiserArch::mlp
                                                  : DenoiserArch::unet1d;
  ck.arch.feature_dim = detail::record_int(arch, 1);
  ck.arch.time_dim = detail::record_int(arch, 2);
  ck.arch.hidden = detail::record_int(arch, 3);
  ck.arch.hidden_layers = detail::record_int(arch, 4);
  ck.arch.blocks_per_level = detail::record_int(arch, 5);
  ck.arch.kernel = detail::record_int(arch, 6);
  ck.arch.zero_init_final = arch[7] != 0.0;
  const Tensor& ch = detail::find_record(records, "!channels", path);
  ck.arch.channels.clear();
  for (std::size_t i = 0; i < ch.size(); ++i)
    ck.arch.channels.push_back(detail::record_int(ch, i));
  const Tensor& betas = detail::find_record(records, "!betas", path);
  ck.betas.assign(betas.data(), betas.data() + betas.size());
  const Tensor& data = detail::find_record(records, "!data", path);
  if (data.size() != 2) throw IoError("'" + path + "': malformed '!data'");
  ck.kind = detail::record_int(data, 0) == 0 ? FeatureKind::binary
                                             : FeatureKind::continuous;
  if (data[1] != 0.0) {
    const Tensor& mean = detail::find_record(records, "!std.mean", path);
    const Tensor& sd = detail::find_record(records, "!std.stddev", path);
    Standardization s;
    s.mean.assign(mean.data(), mean.data() + mean.size());
    s.stddev.assign(sd.data(), sd.data() + sd.size());
    ck.standardization = std::move(s);
  }
  const Tensor& train = detail::find_record(records, "!train", path);
  if (train.size() != 4) throw IoError("'" + path + "': malformed '!train'");
  ck.train_seed = detail::join_seed(train[0], train[1]);
  ck.train_steps = detail::record_int(train, 2);
  ck.final_loss = train[3];
  for (auto& [name, value] : records)
    if (name.rfind("p.", 0) == 0) ck.params.add(name.substr(2), std::move(value));
  ck.model();  // validates parameters against the architecture
  return ck;
}

// Classifier checkpoint: same container, different metadata records.
struct ClassifierCheckpoint {
  ClassifierConfig cfg;
  std::vector<double> betas;  // schedule it was trained against; may be empty
  std::uint64_t train_seed = 0;
  int train_steps = 0;
  double final_loss = 0.0;
  ParamSet params;

  GuidanceClassifier classifier() const {
    return GuidanceClassifier(cfg, params);
  }
};

inline void save_classifier_checkpoint(const std::string& path,
                                       const ClassifierCheckpoint& ck) {
  std::vector<std::pair<std::string, Tensor>> records;
  auto [seed_lo, seed_hi] = detail::split_seed(ck.train_seed);
  records.emplace_back(
      "!clf", detail::scalar_record(
                  {ck.cfg.kind == ClassifierKind::logistic ? 0.0 : 1.0,
                   static_cast<double>(ck.cfg.feature_dim),
                   static_cast<double>(ck.cfg.num_classes),
                   ck.cfg.time_conditioned ? 1.0 : 0.0,
                   static_cast<double>(ck.cfg.time_dim),
                   static_cast<double>(ck.cfg.hidden),
                   static_cast<double>(ck.cfg.hidden_layers)}));
  records.emplace_back("!betas", detail::vector_record(ck.betas));
  records.emplace_back(
      "!train", detail::scalar_record({seed_lo, seed_hi,
                                       static_cast<double>(ck.train_steps),
                                       ck.final_loss}));
  for (const auto& [name, value] : ck.params)
    records.emplace_back("p." + name, value);
  write_records(path, records);
}

inline ClassifierCheckpoint load_classifier_checkpoint(const std::string& path) {
  auto records = read_records(path);
  if (!detail::has_record(records, "!clf"))
    throw IoError("'" + path + "' is not a classifier checkpoint");
  ClassifierCheckpoint ck;
  const Tensor& clf = detail::find_record(records, "!clf", path);
  if (clf.size() != 7) throw IoError("'" + path + "': malformed '!clf'");
  ck.cfg.kind = detail::record_int(clf, 0) == 0 ? ClassifierKind::logistic
                                                : ClassifierKind::mlp;
  ck.cfg.feature_dim = detail::record_int(clf, 1);
  ck.cfg.num_classes = detail::record_int(clf, 2);
  ck.cfg.time_conditioned = clf[3] != 0.0;
  ck.cfg.time_dim = detail::record_int(clf, 4);
  ck.cfg.hidden = detail::record_int(clf, 5);
  ck.cfg.hidden_layers = detail::record_int(clf, 6);
  const Tensor& betas = detail::find_record(records, "!betas", path);
  ck.betas.assign(betas.data(), betas.data() + betas.size());
  const Tensor& train = detail::find_record(records, "!train", path);
  if (train.size() != 4) throw IoError("'" + path + "': malformed '!train'");
  ck.train_seed = detail::join_seed(train[0], train[1]);
  ck.train_steps = detail::record_int(train, 2);
  ck.final_loss = train[3];
  for (auto& [name, value] : records)
    if (name.rfind("p.", 0) == 0) ck.params.add(name.substr(2), std::move(value));
  ck.classifier();  // validates parameters against the configuration
  return ck;
}

}  // namespace difftab
