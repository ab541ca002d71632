#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "bil/checkpoint.hpp"
#include "bil/data.hpp"
#include "bil/errors.hpp"
#include "bil/metrics_io.hpp"
#include "bil/trainer.hpp"

using namespace bil;

namespace {

std::string tmp_path(const std::string& name) {
  return std::string("bil_test_") + name;
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void push_be32(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

struct IdxFixture {
  std::string images = tmp_path("images.idx");
  std::string labels = tmp_path("labels.idx");

  IdxFixture() {
    std::vector<unsigned char> img;
    push_be32(img, 0x00000803u);
    push_be32(img, 2);  // count
    push_be32(img, 4);  // rows
    push_be32(img, 4);  // cols
    for (int i = 0; i < 16; ++i) img.push_back(static_cast<unsigned char>(i * 17));  // 0..255
    for (int i = 0; i < 16; ++i) img.push_back(static_cast<unsigned char>(255 - i));
    write_bytes(images, img);

    std::vector<unsigned char> lbl;
    push_be32(lbl, 0x00000801u);
    push_be32(lbl, 2);
    lbl.push_back(7);
    lbl.push_back(2);
    write_bytes(labels, lbl);
  }
  ~IdxFixture() {
    std::remove(images.c_str());
    std::remove(labels.c_str());
  }
};

std::multiset<std::pair<double, int>> as_multiset(const Dataset& ds) {
  std::multiset<std::pair<double, int>> s;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    s.insert({ds.features[i][0] + 1000.0 * ds.features[i][1], ds.labels[i]});
  }
  return s;
}

}  // namespace

TEST_CASE("load_idx round-trips a hand-built fixture") {
  IdxFixture fx;
  auto ds = load_idx(fx.images, fx.labels);
  REQUIRE(ds.size() == 2);
  CHECK(ds.feature_shape == std::vector<int>{1, 4, 4});
  CHECK(ds.labels == std::vector<int>{7, 2});
  CHECK(ds.features[0][0] == 0.0);            // pixel 0 -> 0.0
  CHECK(ds.features[0][15] == 1.0);           // pixel 255 -> 1.0
  CHECK(ds.features[1][0] == 1.0);
  for (int i = 0; i < 16; ++i) {
    CHECK(ds.features[0][i] == doctest::Approx((i * 17) / 255.0).epsilon(1e-15));
  }
  CHECK(ds.num_classes == 8);
}

TEST_CASE("load_idx rejects malformed files") {
  IdxFixture fx;
  const std::string empty = tmp_path("empty.idx");
  write_bytes(empty, {});
  CHECK_THROWS_AS(load_idx(empty, fx.labels), FormatError);

  const std::string bad = tmp_path("bad.idx");
  std::vector<unsigned char> v;
  push_be32(v, 0x00000802u);
  write_bytes(bad, v);
  CHECK_THROWS_AS(load_idx(bad, fx.labels), FormatError);
  CHECK_THROWS_AS(load_idx(fx.images, fx.images), FormatError);  // wrong label magic

  // count mismatch
  const std::string lbl3 = tmp_path("lbl3.idx");
  std::vector<unsigned char> l;
  push_be32(l, 0x00000801u);
  push_be32(l, 3);
  l.push_back(0);
  l.push_back(1);
  l.push_back(2);
  write_bytes(lbl3, l);
  CHECK_THROWS_AS(load_idx(fx.images, lbl3), ConsistencyError);

  // truncated pixel payload
  const std::string trunc = tmp_path("trunc.idx");
  auto bytes = read_bytes(fx.images);
  bytes.resize(bytes.size() - 5);
  write_bytes(trunc, bytes);
  CHECK_THROWS_AS(load_idx(trunc, fx.labels), ConsistencyError);

  std::remove(empty.c_str());
  std::remove(bad.c_str());
  std::remove(lbl3.c_str());
  std::remove(trunc.c_str());
}

TEST_CASE("gen_synthetic determinism and zero-noise geometry") {
  auto a = gen_synthetic(SyntheticKind::Blobs, 30, 3, 0.2, 5);
  auto b = gen_synthetic(SyntheticKind::Blobs, 30, 3, 0.2, 5);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);

  auto clean = gen_synthetic(SyntheticKind::Blobs, 9, 3, 0.0, 6);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double theta = 2.0 * 3.14159265358979323846 * clean.labels[i] / 3.0;
    CHECK(clean.features[i][0] == doctest::Approx(std::cos(theta)).epsilon(1e-12));
    CHECK(clean.features[i][1] == doctest::Approx(std::sin(theta)).epsilon(1e-12));
  }

  // class balance within one
  std::map<int, int> counts;
  auto c = gen_synthetic(SyntheticKind::Blobs, 10, 3, 0.1, 7);
  for (int l : c.labels) counts[l]++;
  CHECK(counts[0] == 4);
  CHECK(counts[1] == 3);
  CHECK(counts[2] == 3);

  CHECK_THROWS_AS(gen_synthetic(SyntheticKind::Moons, 10, 3, 0.1, 8), ConfigError);
  CHECK_THROWS_AS(gen_synthetic(SyntheticKind::Blobs, 2, 3, 0.1, 8), ConfigError);
}

TEST_CASE("well-separated blobs are linearly classifiable at 99%") {
  // adjacent centers are sqrt(3) apart on the unit circle; noise = separation/10
  const double noise = std::sqrt(3.0) / 10.0;
  auto train = gen_synthetic(SyntheticKind::Blobs, 300, 3, noise, 9);
  auto test = gen_synthetic(SyntheticKind::Blobs, 300, 3, noise, 10);
  Rng rng(11);
  auto model = BayesModel::build(Architecture::parse("mlp:2-3"), Family::FT, rng);
  ElboConfig cfg;
  cfg.batch_size = 64;
  FitOptions opts;
  opts.epochs_per_stage = 60;
  opts.eval_samples = 1;
  opts.seed = 12;
  opts.adam.lr = 0.05;
  fit_direct(model, train, cfg, opts, test);
  Rng erng(13);
  CHECK(evaluate(model, test, 1, erng).accuracy >= 0.99);
}

TEST_CASE("moons generator produces two interleaved classes") {
  auto ds = gen_synthetic(SyntheticKind::Moons, 50, 2, 0.05, 14);
  CHECK(ds.num_classes == 2);
  CHECK(ds.size() == 50);
}

TEST_CASE("split_shards sizes and permutation property") {
  auto ds = gen_synthetic(SyntheticKind::Blobs, 10, 2, 0.3, 15);
  auto sharded = split_shards(ds, 3, 16);
  CHECK(sharded.shard(0).size() == 4);
  CHECK(sharded.shard(1).size() == 3);
  CHECK(sharded.shard(2).size() == 3);

  auto single = split_shards(ds, 1, 17);
  CHECK(single.shard(0).size() == ds.size());
  CHECK(as_multiset(single.shard(0)) == as_multiset(ds));

  CHECK_THROWS_AS(split_shards(ds, 0, 18), ConfigError);
  CHECK_THROWS_AS(split_shards(ds, 11, 18), ConfigError);
}

TEST_CASE("shards are disjoint and cover the source (property sweep)") {
  Rng rng(19);
  for (int rep = 0; rep < 25; ++rep) {
    const int n = 5 + static_cast<int>(rng.below(40));
    const int T = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
    auto ds = gen_synthetic(SyntheticKind::Blobs, n, 2, 0.5, 20 + rep);
    auto sharded = split_shards(ds, T, rng.below(1000));
    std::multiset<std::pair<double, int>> unioned;
    std::size_t total = 0;
    int max_size = 0, min_size = n + 1;
    for (int t = 0; t < T; ++t) {
      const auto& s = sharded.shard(t);
      total += s.size();
      max_size = std::max(max_size, static_cast<int>(s.size()));
      min_size = std::min(min_size, static_cast<int>(s.size()));
      auto m = as_multiset(s);
      unioned.insert(m.begin(), m.end());
    }
    CHECK(total == ds.size());
    CHECK(max_size - min_size <= 1);
    CHECK(unioned == as_multiset(ds));
  }
}

TEST_CASE("label_split partitions classes and records the mapping") {
  {
    auto ds = gen_synthetic(SyntheticKind::Blobs, 40, 2, 0.3, 21);
    auto split = label_split(ds, 22);
    CHECK(split.part_a.num_classes == 1);
    CHECK(split.part_b.num_classes == 1);
    CHECK(split.part_a.size() + split.part_b.size() == ds.size());
  }
  {
    auto ds = gen_synthetic(SyntheticKind::Blobs, 200, 10, 0.3, 23);
    auto split = label_split(ds, 24);
    CHECK(split.classes_a.size() == 5);
    CHECK(split.classes_b.size() == 5);
    for (int c : split.classes_a) {
      CHECK(std::find(split.classes_b.begin(), split.classes_b.end(), c) ==
            split.classes_b.end());
    }
    // the recorded mapping recovers original labels
    std::multiset<int> reconstructed;
    for (int l : split.part_a.labels) reconstructed.insert(split.classes_a[l]);
    for (int l : split.part_b.labels) reconstructed.insert(split.classes_b[l]);
    CHECK(reconstructed == std::multiset<int>(ds.labels.begin(), ds.labels.end()));
  }
  {
    auto ds = gen_synthetic(SyntheticKind::Blobs, 30, 3, 0.3, 25);
    CHECK_THROWS_AS(label_split(ds, 26), ConfigError);
  }
}

TEST_CASE("model checkpoint round-trip is byte identical") {
  Rng rng(27);
  auto model = BayesModel::build(Architecture::parse("mlp:3-5-2"), Family::MNF, rng);
  ckpt::ModelInfo info;
  info.stage_index = 4;
  info.seed = 99;
  info.kl_scale = 0.05;
  info.metrics_summary["test_accuracy"] = 0.875;

  const std::string p1 = tmp_path("a.ckpt"), p2 = tmp_path("b.ckpt");
  ckpt::save_model(p1, model, info);
  auto loaded = ckpt::load_model(p1);
  CHECK(loaded.info.stage_index == 4);
  CHECK(loaded.info.seed == 99);
  CHECK(loaded.info.kl_scale == 0.05);
  CHECK(loaded.info.metrics_summary.at("test_accuracy") == 0.875);
  ckpt::save_model(p2, loaded.model, loaded.info);
  CHECK(read_bytes(p1) == read_bytes(p2));

  // parameters and flows match bitwise
  auto pa = model.parameters(), pb = loaded.model.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data == pb[i]->data);
  CHECK(flows_equal(model.layers[0].flow, loaded.model.layers[0].flow));

  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint corruption and version checks") {
  Rng rng(28);
  auto model = BayesModel::build(Architecture::parse("mlp:2-3"), Family::FFG, rng);
  const std::string path = tmp_path("c.ckpt");
  ckpt::save_model(path, model, {});

  auto bytes = read_bytes(path);
  {  // truncated blob
    auto trunc = bytes;
    trunc.resize(trunc.size() - 8);
    const std::string p = tmp_path("trunc.ckpt");
    write_bytes(p, trunc);
    CHECK_THROWS_AS(ckpt::load_model(p), ConsistencyError);
    std::remove(p.c_str());
  }
  {  // flip a declared array length in the manifest
    std::string text(bytes.begin(), bytes.end());
    const auto at = text.find("\"bytes\":48");
    REQUIRE(at != std::string::npos);
    text.replace(at, 10, "\"bytes\":40");
    const std::string p = tmp_path("badlen.ckpt");
    write_bytes(p, std::vector<unsigned char>(text.begin(), text.end()));
    CHECK_THROWS_AS(ckpt::load_model(p), ConsistencyError);
    std::remove(p.c_str());
  }
  {  // version bump
    std::string text(bytes.begin(), bytes.end());
    const auto at = text.find("\"format_version\":1");
    REQUIRE(at != std::string::npos);
    text.replace(at, 18, "\"format_version\":9");
    const std::string p = tmp_path("badver.ckpt");
    write_bytes(p, std::vector<unsigned char>(text.begin(), text.end()));
    CHECK_THROWS_AS(ckpt::load_model(p), FormatError);
    std::remove(p.c_str());
  }
  {  // bad magic
    auto bad = bytes;
    bad[0] = 'X';
    const std::string p = tmp_path("badmagic.ckpt");
    write_bytes(p, bad);
    CHECK_THROWS_AS(ckpt::load_model(p), FormatError);
    std::remove(p.c_str());
  }
  CHECK_THROWS_AS(ckpt::load_model(tmp_path("missing.ckpt")), IoError);
  std::remove(path.c_str());
}

TEST_CASE("prior checkpoint round trip") {
  Rng rng(29);
  auto w_star = BayesModel::build(Architecture::parse("mlp:2-4-2"), Family::FT, rng);
  std::vector<std::vector<double>> sigma2{{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8},
                                          {0.9, 1.0, 1.1, 1.2},
                                          {1.3, 1.4, 1.5, 1.6, 1.7, 1.8, 1.9, 2.0},
                                          {2.1, 2.2}};
  ckpt::PriorInfo info;
  info.sigma_mode = "grid";
  info.chosen_sigma2 = 0.42;
  info.seed = 7;
  const std::string path = tmp_path("p.ckpt");
  ckpt::save_prior(path, w_star, sigma2, {true, false}, info);
  CHECK(ckpt::peek_kind(path) == "prior");

  auto loaded = ckpt::load_prior(path);
  CHECK(loaded.info.sigma_mode == "grid");
  CHECK(loaded.info.chosen_sigma2 == 0.42);
  CHECK(loaded.transfer_mask == std::vector<bool>{true, false});
  CHECK(loaded.sigma2_per_param == sigma2);
  CHECK(loaded.w_star.layers[0].point_w->data == w_star.layers[0].point_w->data);

  const std::string p2 = tmp_path("p2.ckpt");
  ckpt::save_prior(p2, loaded.w_star, loaded.sigma2_per_param, loaded.transfer_mask, loaded.info);
  CHECK(read_bytes(path) == read_bytes(p2));
  std::remove(path.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("resumed training matches uninterrupted training bitwise") {
  auto data = gen_synthetic(SyntheticKind::Blobs, 80, 3, 0.5, 30);
  auto eval = gen_synthetic(SyntheticKind::Blobs, 40, 3, 0.5, 31);
  auto shards = split_shards(data, 2, 32);

  ElboConfig cfg;
  cfg.batch_size = 20;
  FitOptions opts;
  opts.epochs_per_stage = 3;
  opts.eval_samples = 4;
  opts.seed = 33;

  // Uninterrupted run.
  Rng r1(34);
  auto full_model = BayesModel::build(Architecture::parse("mlp:2-6-3"), Family::MNF, r1);
  const auto full = incremental_fit(full_model, shards, cfg, opts, eval);

  // Interrupted at the stage-1 boundary, checkpointed, reloaded, resumed.
  Rng r2(34);
  auto part_model = BayesModel::build(Architecture::parse("mlp:2-6-3"), Family::MNF, r2);
  ShardedDataset first_only({shards.shard(0)}, 32, "iid_shards(2) stage 1");
  incremental_fit(part_model, first_only, cfg, opts, eval);

  const std::string path = tmp_path("resume.ckpt");
  ckpt::ModelInfo info;
  info.stage_index = 1;
  info.seed = opts.seed;
  ckpt::save_model(path, part_model, info);
  auto loaded = ckpt::load_model(path);

  const auto resumed = incremental_fit(loaded.model, shards, cfg, opts, eval, nullptr,
                                       loaded.info.stage_index + 1);
  REQUIRE(resumed.size() == 1);
  CHECK(resumed[0].stage == 2);
  CHECK(resumed[0].test_accuracy == full[1].test_accuracy);
  CHECK(resumed[0].test_nll == full[1].test_nll);
  REQUIRE(resumed[0].epochs.size() == full[1].epochs.size());
  for (std::size_t e = 0; e < resumed[0].epochs.size(); ++e) {
    CHECK(resumed[0].epochs[e].elbo == full[1].epochs[e].elbo);
    CHECK(resumed[0].epochs[e].data_term == full[1].epochs[e].data_term);
    CHECK(resumed[0].epochs[e].kl_term == full[1].epochs[e].kl_term);
  }
  auto pf = full_model.parameters(), pr = loaded.model.parameters();
  for (std::size_t i = 0; i < pf.size(); ++i) CHECK(pf[i]->data == pr[i]->data);
  std::remove(path.c_str());
}

TEST_CASE("metrics files: schema, round trip, ordering") {
  std::vector<StageMetrics> metrics;
  StageMetrics s1;
  s1.stage = 1;
  s1.epochs = {EpochRecord{-12.345678912, -10.0, 2.345678912}};
  s1.test_accuracy = 0.912345678;
  s1.test_nll = 0.34567;
  metrics.push_back(s1);

  const std::string csv = tmp_path("m.csv");
  write_metrics(metrics, csv, MetricsFormat::Csv);
  {
    std::ifstream in(csv);
    std::string l1, l2, l3;
    std::getline(in, l1);
    REQUIRE(std::getline(in, l2));
    CHECK(l1 == "stage,epoch,elbo,data_term,kl_term,test_accuracy,test_nll");
    CHECK_FALSE(std::getline(in, l3));  // one record -> header + single row
  }

  StageMetrics s2;
  s2.stage = 2;
  s2.epochs = {EpochRecord{-1.5, -1.0, 0.5}, EpochRecord{-1.25, -1.0, 0.25}};
  s2.test_accuracy = 1.0 / 3.0;
  s2.test_nll = 1.23456789e-7;
  metrics.push_back(s2);

  const std::string json = tmp_path("m.json");
  write_metrics(metrics, csv, MetricsFormat::Csv);
  write_metrics(metrics, json, MetricsFormat::Json);
  const auto from_csv = read_metrics_csv(csv);
  const auto from_json = read_metrics_json(json);
  REQUIRE(from_csv.size() == 3);
  REQUIRE(from_json.size() == 3);
  for (std::size_t i = 0; i < from_csv.size(); ++i) {
    CHECK(from_csv[i].stage == from_json[i].stage);
    CHECK(from_csv[i].epoch == from_json[i].epoch);
    CHECK(from_csv[i].elbo == from_json[i].elbo);
    CHECK(from_csv[i].data_term == from_json[i].data_term);
    CHECK(from_csv[i].kl_term == from_json[i].kl_term);
    CHECK(from_csv[i].test_accuracy == from_json[i].test_accuracy);
    CHECK(from_csv[i].test_nll == from_json[i].test_nll);
  }
  for (std::size_t i = 1; i < from_csv.size(); ++i) {
    CHECK(from_csv[i].stage >= from_csv[i - 1].stage);
  }

  CHECK_THROWS_AS(write_metrics({}, csv, MetricsFormat::Csv), ConfigError);
  CHECK_THROWS_AS(write_metrics(metrics, "no_such_dir/x/y.csv", MetricsFormat::Csv), IoError);
  std::remove(csv.c_str());
  std::remove(json.c_str());
}
