#include "bil/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "bil/errors.hpp"
#include "bil/rng.hpp"

namespace bil {

TensorPtr Dataset::batch(const std::vector<std::size_t>& indices) const {
  const auto per = shape_numel(feature_shape);
  std::vector<int> shape{static_cast<int>(indices.size())};
  shape.insert(shape.end(), feature_shape.begin(), feature_shape.end());
  std::vector<double> data;
  data.reserve(indices.size() * static_cast<std::size_t>(per));
  for (auto idx : indices) {
    const auto& f = features.at(idx);
    data.insert(data.end(), f.begin(), f.end());
  }
  return Tensor::from(std::move(shape), std::move(data));
}

std::vector<int> Dataset::batch_labels(const std::vector<std::size_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto idx : indices) out.push_back(labels.at(idx));
  return out;
}

ShardedDataset::ShardedDataset(std::vector<Dataset> shards, std::uint64_t split_seed,
                               std::string split_spec)
    : shards_(std::move(shards)), split_seed_(split_seed), split_spec_(std::move(split_spec)) {
  for (const auto& s : shards_) {
    if (s.size() == 0) throw ConfigError("empty shard in sharded dataset");
  }
}

const Dataset& ShardedDataset::shard(int t) const {
  if (t < 0 || t >= count()) {
    throw ConfigError("shard index " + std::to_string(t) + " outside [0, " +
                      std::to_string(count()) + ")");
  }
  access_log_.push_back(t);
  return shards_[static_cast<std::size_t>(t)];
}

namespace {

std::uint32_t read_be32(std::ifstream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw FormatError("truncated IDX header in " + path);
  }
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open " + images_path);
  std::ifstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw IoError("cannot open " + labels_path);

  const auto img_magic = read_be32(img, images_path);
  if (img_magic != 0x00000803u) {
    throw FormatError("bad IDX image magic in " + images_path);
  }
  const auto lbl_magic = read_be32(lbl, labels_path);
  if (lbl_magic != 0x00000801u) {
    throw FormatError("bad IDX label magic in " + labels_path);
  }
  const auto n_img = read_be32(img, images_path);
  const auto rows = read_be32(img, images_path);
  const auto cols = read_be32(img, images_path);
  const auto n_lbl = read_be32(lbl, labels_path);
  if (n_img != n_lbl) {
    throw ConsistencyError("IDX image count " + std::to_string(n_img) + " != label count " +
                           std::to_string(n_lbl));
  }

  Dataset ds;
  ds.feature_shape = {1, static_cast<int>(rows), static_cast<int>(cols)};
  ds.features.reserve(n_img);
  ds.labels.reserve(n_img);
  const std::size_t per = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> buf(per);
  int max_label = -1;
  for (std::uint32_t i = 0; i < n_img; ++i) {
    if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(per))) {
      throw ConsistencyError("truncated IDX image data in " + images_path);
    }
    std::vector<double> f(per);
    for (std::size_t p = 0; p < per; ++p) f[p] = static_cast<double>(buf[p]) / 255.0;
    ds.features.push_back(std::move(f));
    char lc = 0;
    if (!lbl.read(&lc, 1)) {
      throw ConsistencyError("truncated IDX label data in " + labels_path);
    }
    ds.labels.push_back(static_cast<int>(static_cast<unsigned char>(lc)));
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.num_classes = max_label + 1;
  return ds;
}

Dataset gen_synthetic(SyntheticKind kind, int n, int classes, double noise, std::uint64_t seed) {
  if (classes < 1 || n < classes) {
    throw ConfigError("gen_synthetic: need n >= classes >= 1");
  }
  Rng rng(derive_seed(seed, 0, 71));
  Dataset ds;
  ds.feature_shape = {2};
  ds.num_classes = classes;
  ds.features.reserve(static_cast<std::size_t>(n));
  ds.labels.reserve(static_cast<std::size_t>(n));
  constexpr double kPi = 3.14159265358979323846;

  if (kind == SyntheticKind::Blobs) {
    std::vector<std::pair<double, double>> centers;
    for (int c = 0; c < classes; ++c) {
      const double theta = 2.0 * kPi * c / classes;
      centers.emplace_back(std::cos(theta), std::sin(theta));
    }
    for (int i = 0; i < n; ++i) {
      const int c = i % classes;  // round-robin keeps counts balanced within 1
      ds.features.push_back({centers[static_cast<std::size_t>(c)].first + noise * rng.normal(),
                             centers[static_cast<std::size_t>(c)].second + noise * rng.normal()});
      ds.labels.push_back(c);
    }
    return ds;
  }

  if (classes != 2) throw ConfigError("moons requires exactly 2 classes");
  for (int i = 0; i < n; ++i) {
    const int c = i % 2;
    const double t = kPi * rng.uniform();
    double x = 0.0, y = 0.0;
    if (c == 0) {
      x = std::cos(t);
      y = std::sin(t);
    } else {
      x = 1.0 - std::cos(t);
      y = 0.5 - std::sin(t);
    }
    ds.features.push_back({x + noise * rng.normal(), y + noise * rng.normal()});
    ds.labels.push_back(c);
  }
  return ds;
}

ShardedDataset split_shards(const Dataset& dataset, int T, std::uint64_t seed) {
  if (T < 1 || static_cast<std::size_t>(T) > dataset.size()) {
    throw ConfigError("split_shards: T=" + std::to_string(T) + " outside [1, " +
                      std::to_string(dataset.size()) + "]");
  }
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0, 17));
  rng.shuffle(order);

  const std::size_t n = dataset.size();
  const std::size_t base = n / static_cast<std::size_t>(T);
  const std::size_t extra = n % static_cast<std::size_t>(T);
  std::vector<Dataset> shards;
  std::size_t at = 0;
  for (int t = 0; t < T; ++t) {
    const std::size_t len = base + (static_cast<std::size_t>(t) < extra ? 1 : 0);
    Dataset s;
    s.feature_shape = dataset.feature_shape;
    s.num_classes = dataset.num_classes;
    for (std::size_t i = 0; i < len; ++i, ++at) {
      s.features.push_back(dataset.features[order[at]]);
      s.labels.push_back(dataset.labels[order[at]]);
    }
    shards.push_back(std::move(s));
  }
  return ShardedDataset(std::move(shards), seed, "iid_shards(" + std::to_string(T) + ")");
}

LabelSplit label_split(const Dataset& dataset, std::uint64_t seed) {
  std::vector<int> present;
  for (int l : dataset.labels) {
    if (std::find(present.begin(), present.end(), l) == present.end()) present.push_back(l);
  }
  std::sort(present.begin(), present.end());
  if (present.size() % 2 != 0) {
    throw ConfigError("label_split: odd class count " + std::to_string(present.size()));
  }
  Rng rng(derive_seed(seed, 0, 23));
  rng.shuffle(present);
  const std::size_t half = present.size() / 2;

  LabelSplit out;
  out.classes_a.assign(present.begin(), present.begin() + static_cast<std::ptrdiff_t>(half));
  out.classes_b.assign(present.begin() + static_cast<std::ptrdiff_t>(half), present.end());

  auto fill = [&](Dataset& part, const std::vector<int>& cls) {
    part.feature_shape = dataset.feature_shape;
    part.num_classes = static_cast<int>(cls.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const int l = dataset.labels[i];
      auto it = std::find(cls.begin(), cls.end(), l);
      if (it == cls.end()) continue;
      part.features.push_back(dataset.features[i]);
      part.labels.push_back(static_cast<int>(it - cls.begin()));
    }
  };
  fill(out.part_a, out.classes_a);
  fill(out.part_b, out.classes_b);
  return out;
}

std::pair<Dataset, Dataset> holdout_split(const Dataset& dataset, double val_fraction,
                                          std::uint64_t seed) {
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ConfigError("holdout_split: val_fraction must be in (0,1)");
  }
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0, 29));
  rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction *
                                                           static_cast<double>(dataset.size())));
  Dataset train, val;
  train.feature_shape = val.feature_shape = dataset.feature_shape;
  train.num_classes = val.num_classes = dataset.num_classes;
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& dst = (i < n_val) ? val : train;
    dst.features.push_back(dataset.features[order[i]]);
    dst.labels.push_back(dataset.labels[order[i]]);
  }
  if (train.size() == 0 || val.size() == 0) {
    throw ConfigError("holdout_split: a side ended up empty");
  }
  return {std::move(train), std::move(val)};
}

}  // namespace bil
