#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "difftab/anderson.hpp"
#include "difftab/checkpoint.hpp"
#include "difftab/config.hpp"
#include "difftab/dataset.hpp"
#include "difftab/metrics.hpp"
#include "difftab/sampler.hpp"
#include "difftab/trainer.hpp"

using namespace difftab;
using Catch::Matchers::ContainsSubstring;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("difftab_io_" + name))
      .string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool same_params(const ParamSet& a, const ParamSet& b) {
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end() && ib != b.end(); ++ia, ++ib) {
    if (ia->first != ib->first) return false;
    if (!same_bits(ia->second, ib->second)) return false;
  }
  return ia == a.end() && ib == b.end();
}

ModelCheckpoint tiny_model_checkpoint() {
  ModelCheckpoint ck;
  ck.arch.arch = DenoiserArch::mlp;
  ck.arch.feature_dim = 4;
  ck.arch.time_dim = 8;
  ck.arch.hidden = 16;
  ck.arch.hidden_layers = 2;
  ck.betas = schedule_betas(NoiseSchedule::linear(12, 1e-4, 2e-2));
  ck.kind = FeatureKind::continuous;
  Standardization s;
  s.mean = {0.25, -1.5, 3.0, 0.0};
  s.stddev = {1.0, 0.5, 2.0, 4.0};
  ck.standardization = s;
  ck.train_seed = 0xdeadbeefcafe1234ULL;
  ck.train_steps = 42;
  ck.final_loss = 0.1252345;
  Rng rng(3);
  DenoiserModel model(ck.arch, rng);
  ck.params = model.params();
  return ck;
}

}  // namespace

TEST_CASE("a 2x2 binary csv loads into an exact dataset") {
  const std::string path = tmp_path("tiny.csv");
  write_text(path, "1,0\n0,1\n");
  Dataset ds = load_csv(path, FeatureKind::binary);
  REQUIRE(ds.rows() == 2);
  REQUIRE(ds.dim() == 2);
  REQUIRE(ds.features(0, 0) == 1.0);
  REQUIRE(ds.features(0, 1) == 0.0);
  REQUIRE(ds.features(1, 0) == 0.0);
  REQUIRE(ds.features(1, 1) == 1.0);
  REQUIRE_FALSE(ds.labels.has_value());
  REQUIRE_FALSE(ds.standardization.has_value());
  REQUIRE(ds.columns == std::vector<std::string>{"f0", "f1"});

  BinaryMatrix bm(ds.features);
  std::vector<double> probs = dimension_probs(bm);
  REQUIRE(probs[0] == 0.5);
  REQUIRE(probs[1] == 0.5);
}

TEST_CASE("the final column becomes labels when requested") {
  const std::string path = tmp_path("labeled.csv");

  SECTION("binary features keep exact values") {
    write_text(path, "1,0,1\n0,1,0\n");
    Dataset ds = load_csv(path, FeatureKind::binary, /*labeled=*/true);
    REQUIRE(ds.dim() == 2);
    REQUIRE(ds.labels.has_value());
    REQUIRE(*ds.labels == std::vector<int>{1, 0});
    REQUIRE(ds.features(0, 0) == 1.0);
    REQUIRE(ds.features(1, 1) == 1.0);
  }

  SECTION("continuous features are standardized, labels excluded") {
    write_text(path, "0.5,1.25,0\n-0.5,0.75,1\n2.5,0.25,1\n");
    Dataset ds = load_csv(path, FeatureKind::continuous, /*labeled=*/true);
    REQUIRE(ds.dim() == 2);
    REQUIRE(*ds.labels == std::vector<int>{0, 1, 1});
    REQUIRE(ds.standardization.has_value());
    for (std::size_t j = 0; j < 2; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < 3; ++i) m += ds.features(i, j);
      REQUIRE(std::fabs(m / 3.0) < 1e-12);
    }
    Tensor raw = ds.standardization->invert(ds.features);
    REQUIRE(std::fabs(raw(0, 0) - 0.5) < 1e-10);
    REQUIRE(std::fabs(raw(1, 0) + 0.5) < 1e-10);
    REQUIRE(std::fabs(raw(2, 1) - 0.25) < 1e-10);
  }
}

TEST_CASE("standardize then invert reproduces the raw table") {
  const std::string path = tmp_path("roundtrip.csv");
  Rng rng(11);
  Tensor raw({40, 5});
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = rng.uniform(-30.0, 50.0);
  write_csv(path, raw);

  Dataset ds = load_csv(path, FeatureKind::continuous);
  REQUIRE(ds.standardization.has_value());
  // standardized columns are zero-mean, unit-spread
  for (std::size_t j = 0; j < 5; ++j) {
    double m = 0.0, v = 0.0;
    for (std::size_t i = 0; i < 40; ++i) m += ds.features(i, j);
    m /= 40.0;
    for (std::size_t i = 0; i < 40; ++i)
      v += (ds.features(i, j) - m) * (ds.features(i, j) - m);
    REQUIRE(std::fabs(m) < 1e-12);
    REQUIRE(std::fabs(std::sqrt(v / 40.0) - 1.0) < 1e-12);
  }
  Tensor back = ds.standardization->invert(ds.features);
  for (std::size_t i = 0; i < raw.size(); ++i)
    REQUIRE(std::fabs(back[i] - raw[i]) < 1e-10);
}

TEST_CASE("csv parse errors carry row and column locations") {
  const std::string path = tmp_path("bad.csv");

  SECTION("ragged row") {
    write_text(path, "1,2\n3\n");
    REQUIRE_THROWS_WITH(load_csv(path, FeatureKind::continuous),
                        ContainsSubstring("ragged row 2"));
  }
  SECTION("non-numeric cell") {
    write_text(path, "1,x\n");
    REQUIRE_THROWS_WITH(load_csv(path, FeatureKind::continuous),
                        ContainsSubstring("'x' at row 1, column 2"));
  }
  SECTION("binary violation") {
    write_text(path, "1,0\n0,0.5\n");
    REQUIRE_THROWS_WITH(load_csv(path, FeatureKind::binary),
                        ContainsSubstring("row 2, column 2"));
  }
  SECTION("bad labels") {
    write_text(path, "1,0.5\n");
    REQUIRE_THROWS_WITH(load_csv(path, FeatureKind::continuous, true),
                        ContainsSubstring("not a nonnegative integer"));
    write_text(path, "1,-2\n");
    REQUIRE_THROWS_AS(load_csv(path, FeatureKind::continuous, true), ParseError);
  }
  SECTION("no data") {
    write_text(path, "");
    REQUIRE_THROWS_AS(load_csv(path, FeatureKind::continuous), ParseError);
    REQUIRE_THROWS_AS(load_csv(path, FeatureKind::continuous, false, true),
                      ParseError);
  }
  SECTION("labeled single column") {
    write_text(path, "1\n0\n");
    REQUIRE_THROWS_WITH(load_csv(path, FeatureKind::continuous, true),
                        ContainsSubstring("at least one feature column"));
  }
  SECTION("header width mismatch") {
    write_text(path, "a,b,c\n1,2\n");
    REQUIRE_THROWS_WITH(load_csv(path, FeatureKind::continuous, false, true),
                        ContainsSubstring("header has 3 fields"));
  }
  SECTION("unterminated quote") {
    write_text(path, "\"abc\n");
    REQUIRE_THROWS_WITH(load_csv(path, FeatureKind::continuous),
                        ContainsSubstring("unterminated quoted field"));
  }
  SECTION("missing file") {
    REQUIRE_THROWS_AS(load_csv(tmp_path("nonexistent.csv"),
                               FeatureKind::continuous),
                      IoError);
  }
}

TEST_CASE("quoted fields follow csv conventions") {
  const std::string path = tmp_path("quoted.csv");

  SECTION("quoted names with commas, escaped quotes, embedded newlines") {
    write_text(path, "\"a,b\",\"say \"\"hi\"\"\",\"two\nline\"\n1,2,3\n");
    Dataset ds = load_csv(path, FeatureKind::continuous, false, true);
    REQUIRE(ds.columns ==
            std::vector<std::string>{"a,b", "say \"hi\"", "two\nline"});
    REQUIRE(ds.rows() == 1);
  }
  SECTION("quoted numeric fields and crlf endings") {
    write_text(path, "\"1\",0\r\n0,\"1\"\r\n");
    Dataset ds = load_csv(path, FeatureKind::binary);
    REQUIRE(ds.rows() == 2);
    REQUIRE(ds.features(0, 0) == 1.0);
    REQUIRE(ds.features(1, 1) == 1.0);
  }
  SECTION("blank lines are skipped") {
    write_text(path, "1,0\n\n0,1\n\n");
    Dataset ds = load_csv(path, FeatureKind::binary);
    REQUIRE(ds.rows() == 2);
  }
}

TEST_CASE("csv writing round trips values, labels, and names") {
  const std::string path = tmp_path("written.csv");

  SECTION("formatted values parse back to identical bits") {
    Rng rng(17);
    std::vector<double> nasty = {1.0 / 3.0, 1e-17, -0.0, 0.1 + 0.2, 2.5e-300};
    for (int i = 0; i < 50; ++i) nasty.push_back(rng.uniform(-1e6, 1e6));
    for (double v : nasty) {
      double back = detail::parse_number(format_value(v), 1, 1);
      REQUIRE(std::memcmp(&back, &v, sizeof v) == 0);
    }
  }
  SECTION("header, labels, and columns survive a write/load cycle") {
    Tensor x({3, 2});
    x(0, 0) = 1.5; x(0, 1) = -2.25;
    x(1, 0) = 0.125; x(1, 1) = 7.0;
    x(2, 0) = -3.5; x(2, 1) = 0.0625;
    std::vector<int> labels = {0, 1, 2};
    std::vector<std::string> cols = {"alpha", "beta"};
    write_csv(path, x, &labels, &cols);
    Dataset ds = load_csv(path, FeatureKind::continuous, true, true);
    REQUIRE(ds.columns == cols);
    REQUIRE(*ds.labels == labels);
    Tensor back = ds.standardization->invert(ds.features);
    for (std::size_t i = 0; i < x.size(); ++i)
      REQUIRE(std::fabs(back[i] - x[i]) < 1e-10);
  }
  SECTION("write_csv validates its inputs") {
    Tensor x({2, 2});
    std::vector<int> labels = {0};
    REQUIRE_THROWS_AS(write_csv(path, x, &labels), DimensionError);
    std::vector<std::string> cols = {"only"};
    REQUIRE_THROWS_AS(write_csv(path, x, nullptr, &cols), DimensionError);
  }
}

TEST_CASE("bernoulli product matches its probability vector at scale") {
  auto bp = make_bernoulli_product({0.1, 0.9}, 10000, 42);
  REQUIRE(bp.data.kind == FeatureKind::binary);
  REQUIRE(bp.data.rows() == 10000);
  std::vector<double> probs = dimension_probs(BinaryMatrix(bp.data.features));
  REQUIRE(std::fabs(probs[0] - 0.1) < 0.02);
  REQUIRE(std::fabs(probs[1] - 0.9) < 0.02);
}

TEST_CASE("degenerate mixture weights sample only the first component") {
  auto gm = make_gaussian_mixture({{-2.0, 0.0}, {5.0, 5.0}},
                                  {{0.01, 0.01}, {0.01, 0.01}}, {1.0, 0.0},
                                  500, 8);
  for (int c : gm.components) REQUIRE(c == 0);
  for (std::size_t i = 0; i < gm.data.rows(); ++i) {
    REQUIRE(std::fabs(gm.data.features(i, 0) + 2.0) < 1.0);
    REQUIRE(std::fabs(gm.data.features(i, 1) - 0.0) < 1.0);
  }
}

TEST_CASE("fixed seeds reproduce generator output bit for bit") {
  auto b1 = make_bernoulli_product({0.3, 0.6, 0.9}, 200, 5);
  auto b2 = make_bernoulli_product({0.3, 0.6, 0.9}, 200, 5);
  auto b3 = make_bernoulli_product({0.3, 0.6, 0.9}, 200, 6);
  REQUIRE(same_bits(b1.data.features, b2.data.features));
  REQUIRE_FALSE(same_bits(b1.data.features, b3.data.features));

  auto g1 = make_gaussian_mixture({{0.0}, {4.0}}, {{1.0}, {1.0}}, {0.5, 0.5},
                                  100, 9);
  auto g2 = make_gaussian_mixture({{0.0}, {4.0}}, {{1.0}, {1.0}}, {0.5, 0.5},
                                  100, 9);
  REQUIRE(same_bits(g1.data.features, g2.data.features));
  REQUIRE(g1.components == g2.components);

  auto t1 = make_two_class_blobs({0.0, 0.0}, {1.0, 1.0}, 0.5, 50, 12);
  auto t2 = make_two_class_blobs({0.0, 0.0}, {1.0, 1.0}, 0.5, 50, 12);
  REQUIRE(same_bits(t1.data.features, t2.data.features));
  REQUIRE(t1.data.labels.has_value());
  for (std::size_t i = 0; i < 100; ++i)
    REQUIRE((*t1.data.labels)[i] == (i < 50 ? 0 : 1));
}

TEST_CASE("invalid generator specs are rejected") {
  REQUIRE_THROWS_AS(make_bernoulli_product({}, 10, 0), ConfigError);
  REQUIRE_THROWS_AS(make_bernoulli_product({1.5}, 10, 0), ConfigError);
  REQUIRE_THROWS_AS(make_bernoulli_product({-0.1}, 10, 0), ConfigError);
  REQUIRE_THROWS_AS(make_bernoulli_product({0.5}, 0, 0), ConfigError);

  REQUIRE_THROWS_AS(
      make_gaussian_mixture({{0.0}}, {{1.0}}, {0.9}, 10, 0), ConfigError);
  REQUIRE_THROWS_AS(
      make_gaussian_mixture({{0.0}, {1.0}}, {{1.0}, {1.0}}, {1.5, -0.5}, 10, 0),
      ConfigError);
  REQUIRE_THROWS_AS(
      make_gaussian_mixture({{0.0}, {1.0}}, {{1.0}}, {0.5, 0.5}, 10, 0),
      ConfigError);
  REQUIRE_THROWS_AS(
      make_gaussian_mixture({{0.0}, {1.0, 2.0}}, {{1.0}, {1.0}}, {0.5, 0.5},
                            10, 0),
      ConfigError);
  REQUIRE_THROWS_AS(
      make_gaussian_mixture({{0.0}}, {{-1.0}}, {1.0}, 10, 0), ConfigError);
  REQUIRE_THROWS_AS(
      make_gaussian_mixture({{0.0}}, {{1.0}}, {1.0}, 0, 0), ConfigError);

  REQUIRE_THROWS_AS(make_two_class_blobs({}, {}, 0.5, 10, 0), ConfigError);
  REQUIRE_THROWS_AS(make_two_class_blobs({0.0}, {1.0, 2.0}, 0.5, 10, 0),
                    ConfigError);
  REQUIRE_THROWS_AS(make_two_class_blobs({0.0}, {1.0}, 0.0, 10, 0), ConfigError);
  REQUIRE_THROWS_AS(make_two_class_blobs({0.0}, {1.0}, 0.5, 0, 0), ConfigError);
}

TEST_CASE("record container round trips tensors bit for bit") {
  const std::string path = tmp_path("records.bin");
  Rng rng(21);
  Tensor w = Tensor::randn({3, 4}, rng);
  Tensor b({5});
  b[0] = 0.0;
  b[1] = -0.0;
  b[2] = 5e-324;  // smallest denormal
  b[3] = 1e308;
  b[4] = std::numeric_limits<double>::quiet_NaN();
  Tensor t3 = Tensor::randn({2, 3, 2}, rng);
  std::vector<std::pair<std::string, Tensor>> records = {
      {"w", w}, {"b", b}, {"t3", t3}};
  write_records(path, records);

  auto back = read_records(path);
  REQUIRE(back.size() == 3);
  REQUIRE(back[0].first == "w");
  REQUIRE(back[1].first == "b");
  REQUIRE(back[2].first == "t3");
  REQUIRE(same_bits(back[0].second, w));
  REQUIRE(same_bits(back[1].second, b));
  REQUIRE(same_bits(back[2].second, t3));
  REQUIRE(std::signbit(back[1].second[1]));
  REQUIRE(back[1].second[2] == 5e-324);
}

TEST_CASE("saving a loaded checkpoint reproduces the file byte for byte") {
  const std::string p1 = tmp_path("model_a.ckpt");
  const std::string p2 = tmp_path("model_b.ckpt");
  ModelCheckpoint ck = tiny_model_checkpoint();
  save_model_checkpoint(p1, ck);

  ModelCheckpoint ck2 = load_model_checkpoint(p1);
  REQUIRE(ck2.arch.arch == ck.arch.arch);
  REQUIRE(ck2.arch.feature_dim == 4);
  REQUIRE(ck2.arch.time_dim == 8);
  REQUIRE(ck2.arch.hidden == 16);
  REQUIRE(ck2.arch.hidden_layers == 2);
  REQUIRE(ck2.betas == ck.betas);
  REQUIRE(ck2.kind == FeatureKind::continuous);
  REQUIRE(ck2.standardization.has_value());
  REQUIRE(ck2.standardization->mean == ck.standardization->mean);
  REQUIRE(ck2.standardization->stddev == ck.standardization->stddev);
  REQUIRE(ck2.train_seed == 0xdeadbeefcafe1234ULL);
  REQUIRE(ck2.train_steps == 42);
  REQUIRE(ck2.final_loss == ck.final_loss);
  REQUIRE(same_params(ck2.params, ck.params));

  save_model_checkpoint(p2, ck2);
  REQUIRE(read_bytes(p1) == read_bytes(p2));
}

TEST_CASE("binary-kind checkpoints omit standardization") {
  const std::string path = tmp_path("model_bin.ckpt");
  ModelCheckpoint ck = tiny_model_checkpoint();
  ck.kind = FeatureKind::binary;
  ck.standardization.reset();
  save_model_checkpoint(path, ck);
  ModelCheckpoint ck2 = load_model_checkpoint(path);
  REQUIRE(ck2.kind == FeatureKind::binary);
  REQUIRE_FALSE(ck2.standardization.has_value());
}

TEST_CASE("truncated checkpoints name the offending record and abort") {
  const std::string good = tmp_path("trunc_src.ckpt");
  const std::string bad = tmp_path("trunc.ckpt");
  ModelCheckpoint ck = tiny_model_checkpoint();
  save_model_checkpoint(good, ck);
  const std::string bytes = read_bytes(good);

  SECTION("one byte short of the final payload") {
    std::string last_name;
    for (const auto& [name, value] : ck.params) last_name = name;
    write_bytes(bad, bytes.substr(0, bytes.size() - 1));
    REQUIRE_THROWS_WITH(load_model_checkpoint(bad),
                        ContainsSubstring("p." + last_name));
    REQUIRE_THROWS_WITH(load_model_checkpoint(bad),
                        ContainsSubstring("truncated"));
  }
  SECTION("cut inside the first record header") {
    write_bytes(bad, bytes.substr(0, 10));
    REQUIRE_THROWS_WITH(load_model_checkpoint(bad),
                        ContainsSubstring("the first record"));
  }
  SECTION("cut inside the magic") {
    write_bytes(bad, bytes.substr(0, 3));
    REQUIRE_THROWS_WITH(load_model_checkpoint(bad),
                        ContainsSubstring("magic"));
  }
}

TEST_CASE("corrupt magic or version is rejected") {
  const std::string good = tmp_path("corrupt_src.ckpt");
  const std::string bad = tmp_path("corrupt.ckpt");
  save_model_checkpoint(good, tiny_model_checkpoint());
  std::string bytes = read_bytes(good);

  SECTION("magic") {
    bytes[0] = 'X';
    write_bytes(bad, bytes);
    REQUIRE_THROWS_WITH(load_model_checkpoint(bad),
                        ContainsSubstring("bad magic"));
  }
  SECTION("version") {
    bytes[4] = 2;
    write_bytes(bad, bytes);
    REQUIRE_THROWS_WITH(load_model_checkpoint(bad),
                        ContainsSubstring("unsupported checkpoint version 2"));
  }
}

TEST_CASE("duplicate record names are rejected") {
  const std::string path = tmp_path("dup.bin");
  Tensor t({2});
  write_records(path, {{"a", t}, {"a", t}});
  REQUIRE_THROWS_WITH(read_records(path),
                      ContainsSubstring("duplicate record 'a'"));
}

TEST_CASE("a reloaded model keeps sampling byte for byte") {
  auto bp = make_bernoulli_product({0.2, 0.8, 0.5, 0.35}, 400, 5);
  NoiseSchedule sched = NoiseSchedule::linear(20, 1e-4, 2e-2);
  DenoiserConfig dc;
  dc.arch = DenoiserArch::mlp;
  dc.feature_dim = 4;
  dc.time_dim = 8;
  dc.hidden = 32;
  dc.hidden_layers = 2;
  Rng init(6);
  DenoiserModel model(dc, init);
  TrainConfig tc;
  tc.lr = 2e-3;
  tc.batch_size = 64;
  tc.steps = 150;
  tc.seed = 7;
  TrainResult tr = train(model, sched, bp.data.features, tc);

  ModelCheckpoint ck;
  ck.arch = dc;
  ck.betas = schedule_betas(sched);
  ck.kind = FeatureKind::binary;
  ck.train_seed = tc.seed;
  ck.train_steps = tc.steps;
  ck.final_loss = tr.loss_history.back();
  ck.params = model.params();
  const std::string path = tmp_path("trained.ckpt");
  save_model_checkpoint(path, ck);

  ModelCheckpoint ck2 = load_model_checkpoint(path);
  DenoiserModel model2 = ck2.model();
  NoiseSchedule sched2 = ck2.schedule();
  REQUIRE(sched2.steps() == 20);

  SampleConfig sc;
  sc.mode = SamplerMode::ddpm;
  sc.seed = 9;
  Tensor s1 = sample(model, sched, sc, 16).samples;
  Tensor s2 = sample(model2, sched2, sc, 16).samples;
  REQUIRE(same_bits(s1, s2));

  SampleConfig dd;
  dd.mode = SamplerMode::ddim;
  dd.seed = 11;
  AndersonConfig aa;
  aa.k = 2;
  Tensor a1 = accelerated_sample(model, sched, dd, aa, 8).samples;
  Tensor a2 = accelerated_sample(model2, sched2, dd, aa, 8).samples;
  REQUIRE(same_bits(a1, a2));
}

TEST_CASE("classifier checkpoints round trip and file kinds are distinguished") {
  ClassifierConfig cc;
  cc.kind = ClassifierKind::mlp;
  cc.feature_dim = 3;
  cc.num_classes = 2;
  cc.time_conditioned = true;
  cc.time_dim = 8;
  cc.hidden = 16;
  cc.hidden_layers = 1;
  Rng rng(4);
  GuidanceClassifier clf(cc, rng);

  ClassifierCheckpoint ck;
  ck.cfg = cc;
  ck.betas = schedule_betas(NoiseSchedule::linear(10, 1e-4, 1e-2));
  ck.train_seed = 77;
  ck.train_steps = 0;
  ck.final_loss = 0.0;
  ck.params = clf.params();
  const std::string cpath = tmp_path("clf.ckpt");
  const std::string cpath2 = tmp_path("clf_b.ckpt");
  save_classifier_checkpoint(cpath, ck);

  ClassifierCheckpoint ck2 = load_classifier_checkpoint(cpath);
  REQUIRE(ck2.cfg.kind == ClassifierKind::mlp);
  REQUIRE(ck2.cfg.feature_dim == 3);
  REQUIRE(ck2.cfg.hidden == 16);
  REQUIRE(ck2.betas.size() == 10);
  REQUIRE(same_params(ck2.params, ck.params));
  save_classifier_checkpoint(cpath2, ck2);
  REQUIRE(read_bytes(cpath) == read_bytes(cpath2));

  GuidanceClassifier clf2 = ck2.classifier();
  Rng xr(5);
  Tensor x = Tensor::randn({4, 3}, xr);
  std::vector<int> ts = {1, 3, 5, 7};
  REQUIRE(same_bits(clf.logits(x, ts), clf2.logits(x, ts)));

  const std::string mpath = tmp_path("not_clf.ckpt");
  save_model_checkpoint(mpath, tiny_model_checkpoint());
  REQUIRE_THROWS_WITH(load_classifier_checkpoint(mpath),
                      ContainsSubstring("not a classifier checkpoint"));
  REQUIRE_THROWS_WITH(load_model_checkpoint(cpath),
                      ContainsSubstring("missing record '!arch'"));
}

TEST_CASE("config defaults match the documented values") {
  RunConfig d;
  REQUIRE(d.T == 200);
  REQUIRE(d.beta_start == 1e-4);
  REQUIRE(d.beta_end == 1e-2);
  REQUIRE(d.lr == 0.001);
  REQUIRE(d.batch == 128);
  REQUIRE(d.steps == 1000);
  REQUIRE(d.k == 3);
  REQUIRE(d.residual_tol == 1e-3);
  REQUIRE(d.guidance_scale == 1.0);
  REQUIRE(d.threshold == 0.5);
  REQUIRE(d.arch == "unet1d");
  REQUIRE(d.hidden == 256);
  REQUIRE(d.hidden_layers == 3);
  REQUIRE(d.time_dim == 64);
  REQUIRE(d.channels == std::vector<int>{32, 64});
  REQUIRE(d.blocks == 2);
  REQUIRE(d.kernel == 3);
  REQUIRE(d.clf_kind == "mlp");
  REQUIRE(d.clf_hidden == 64);
  REQUIRE(d.clf_hidden_layers == 2);
  REQUIRE(d.clf_time_dim == 16);
  REQUIRE(d.clf_time_conditioned);

  RunConfig parsed = parse_config_text("");
  REQUIRE(parsed.T == d.T);
  REQUIRE(parsed.k == d.k);
  REQUIRE(parsed.arch == d.arch);
}

TEST_CASE("config text parses keys, comments, and whitespace") {
  RunConfig cfg = parse_config_text(
      "# schedule\n"
      "\n"
      "  T = 50\n"
      "beta_end=0.02\r\n"
      "k=0\n"
      "arch=mlp\n"
      "channels= 16 ,32\n"
      "clf_time_conditioned=false\n"
      "guidance_scale=2.5\n");
  REQUIRE(cfg.T == 50);
  REQUIRE(cfg.beta_end == 0.02);
  REQUIRE(cfg.k == 0);
  REQUIRE(cfg.arch == "mlp");
  REQUIRE(cfg.channels == std::vector<int>{16, 32});
  REQUIRE_FALSE(cfg.clf_time_conditioned);
  REQUIRE(cfg.guidance_scale == 2.5);
}

TEST_CASE("config parsing fails closed") {
  REQUIRE_THROWS_WITH(parse_config_text("momentum=0.9\n"),
                      ContainsSubstring("unknown key 'momentum'"));
  REQUIRE_THROWS_WITH(parse_config_text("T=10\nT=20\n"),
                      ContainsSubstring("duplicate key 'T'"));
  REQUIRE_THROWS_WITH(parse_config_text("T 10\n"),
                      ContainsSubstring("expected key=value"));
  REQUIRE_THROWS_WITH(parse_config_text("T=abc\n"),
                      ContainsSubstring("bad value 'abc' for key 'T'"));
  REQUIRE_THROWS_AS(parse_config_text("k=0.5\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("clf_time_conditioned=maybe\n"),
                    ConfigError);
  REQUIRE_THROWS_WITH(parse_config_text("=5\n"), ContainsSubstring("empty key"));
  REQUIRE_THROWS_AS(parse_config_text("channels=32,,64\n"), ConfigError);

  // validation after parsing
  REQUIRE_THROWS_AS(parse_config_text("T=0\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("beta_start=0.02\nbeta_end=0.01\n"),
                    ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("kernel=4\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("time_dim=7\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("arch=resnet\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("clf_kind=tree\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("k=-1\n"), ConfigError);
  REQUIRE_THROWS_AS(parse_config_text("lr=0\n"), ConfigError);

  REQUIRE_THROWS_AS(parse_config_file(tmp_path("no_such.cfg")), IoError);
}

TEST_CASE("config files load from disk") {
  const std::string path = tmp_path("run.cfg");
  write_text(path, "T=30\nsteps=250\nhidden=48\n");
  RunConfig cfg = parse_config_file(path);
  REQUIRE(cfg.T == 30);
  REQUIRE(cfg.steps == 250);
  REQUIRE(cfg.hidden == 48);
}

TEST_CASE("help text documents every config key") {
  const std::string help = config_keys_help();
  const std::vector<std::string> keys = {
      "T",        "beta_start",  "beta_end",        "lr",
      "batch",    "steps",       "k",               "residual_tol",
      "guidance_scale", "threshold", "arch",        "hidden",
      "hidden_layers",  "time_dim",  "channels",    "blocks",
      "kernel",   "clf_kind",    "clf_hidden",      "clf_hidden_layers",
      "clf_time_dim",   "clf_time_conditioned"};
  for (const auto& key : keys) {
    INFO("key " << key);
    REQUIRE(help.find("  " + key + "=") != std::string::npos);
  }
  REQUIRE_THAT(help, ContainsSubstring("T=200"));
  REQUIRE_THAT(help, ContainsSubstring("k=3"));
  REQUIRE_THAT(help, ContainsSubstring("arch=unet1d"));
}

TEST_CASE("flat config expands into module configs") {
  RunConfig cfg = parse_config_text(
      "arch=mlp\nhidden=32\nhidden_layers=2\ntime_dim=8\n"
      "clf_kind=logistic\nclf_time_conditioned=false\n");
  DenoiserConfig dc = denoiser_config(cfg, 6);
  REQUIRE(dc.arch == DenoiserArch::mlp);
  REQUIRE(dc.feature_dim == 6);
  REQUIRE(dc.hidden == 32);
  REQUIRE(dc.hidden_layers == 2);
  REQUIRE(dc.time_dim == 8);

  ClassifierConfig cc = classifier_config(cfg, 6, 3);
  REQUIRE(cc.kind == ClassifierKind::logistic);
  REQUIRE(cc.feature_dim == 6);
  REQUIRE(cc.num_classes == 3);
  REQUIRE_FALSE(cc.time_conditioned);

  RunConfig unet = parse_config_text("channels=8,16\nkernel=5\nblocks=1\n");
  DenoiserConfig du = denoiser_config(unet, 6);
  REQUIRE(du.arch == DenoiserArch::unet1d);
  REQUIRE(du.channels == std::vector<int>{8, 16});
  REQUIRE(du.kernel == 5);
  REQUIRE(du.blocks_per_level == 1);
}
