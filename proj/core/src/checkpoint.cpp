#include "bil/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "bil/errors.hpp"

namespace bil {
namespace ckpt {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'B', 'I', 'L', 'C', 'K', 'P', 'T', '1'};
constexpr int kFormatVersion = 1;

struct ArrayRef {
  std::string name;
  std::vector<int> shape;
  const std::vector<double>* data;
};

void collect_layer_arrays(const BayesLayer& l, int idx, std::vector<ArrayRef>& out) {
  const std::string p = "layer" + std::to_string(idx) + ".";
  auto push = [&](const std::string& name, const TensorPtr& t) {
    out.push_back(ArrayRef{p + name, t->shape, &t->data});
  };
  if (l.family == Family::FT) {
    push("point_w", l.point_w);
    push("point_b", l.point_b);
    return;
  }
  push("w_mu", l.w_mu);
  if (l.family == Family::CFG) {
    push("l_raw", l.l_raw);
  } else {
    push("w_rho", l.w_rho);
  }
  push("b_mu", l.b_mu);
  push("b_rho", l.b_rho);
  for (std::size_t k = 0; k < l.flow.layers.size(); ++k) {
    const std::string fp = p + "flow" + std::to_string(k) + ".";
    out.push_back(ArrayRef{fp + "u", l.flow.layers[k].u->shape, &l.flow.layers[k].u->data});
    out.push_back(ArrayRef{fp + "w", l.flow.layers[k].w->shape, &l.flow.layers[k].w->data});
    out.push_back(ArrayRef{fp + "b", l.flow.layers[k].b->shape, &l.flow.layers[k].b->data});
  }
}

void write_file(const std::string& path, const json& manifest,
                const std::vector<ArrayRef>& arrays) {
  const std::string text = manifest.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = text.size();
    unsigned char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(lenb), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : arrays) {
      out.write(reinterpret_cast<const char*>(a.data->data()),
                static_cast<std::streamsize>(a.data->size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot rename " + tmp + " to " + path);
  }
}

json arrays_manifest(const std::vector<ArrayRef>& arrays, std::uint64_t& total_bytes) {
  json list = json::array();
  std::uint64_t offset = 0;
  for (const auto& a : arrays) {
    const std::uint64_t bytes = a.data->size() * sizeof(double);
    list.push_back(json{{"name", a.name}, {"shape", a.shape}, {"offset", offset},
                        {"bytes", bytes}});
    offset += bytes;
  }
  total_bytes = offset;
  return list;
}

struct RawFile {
  json manifest;
  std::vector<char> blob;
};

RawFile read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError("bad checkpoint magic in " + path);
  }
  unsigned char lenb[8];
  if (!in.read(reinterpret_cast<char*>(lenb), 8)) {
    throw FormatError("truncated checkpoint header in " + path);
  }
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(lenb[i]) << (8 * i);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw FormatError("truncated checkpoint manifest in " + path);
  }
  RawFile raw;
  try {
    raw.manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError("unparseable checkpoint manifest: " + std::string(e.what()));
  }
  const int version = raw.manifest.value("format_version", -1);
  if (version != kFormatVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  }
  raw.blob.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

  std::uint64_t declared = 0;
  for (const auto& a : raw.manifest.at("arrays")) {
    declared += a.at("bytes").get<std::uint64_t>();
  }
  if (declared != raw.blob.size() ||
      declared != raw.manifest.at("blob_bytes").get<std::uint64_t>()) {
    throw ConsistencyError("checkpoint blob length " + std::to_string(raw.blob.size()) +
                           " does not match declared " + std::to_string(declared));
  }
  return raw;
}

std::vector<double> extract_array(const RawFile& raw, const json& entry) {
  const auto offset = entry.at("offset").get<std::uint64_t>();
  const auto bytes = entry.at("bytes").get<std::uint64_t>();
  if (offset + bytes > raw.blob.size() || bytes % sizeof(double) != 0) {
    throw ConsistencyError("array '" + entry.at("name").get<std::string>() +
                           "' escapes the checkpoint blob");
  }
  std::vector<double> out(bytes / sizeof(double));
  std::memcpy(out.data(), raw.blob.data() + offset, bytes);
  return out;
}

void restore_tensor(const TensorPtr& t, const std::vector<double>& values,
                    const std::string& name) {
  if (t->data.size() != values.size()) {
    throw ConsistencyError("array '" + name + "' has " + std::to_string(values.size()) +
                           " values, model expects " + std::to_string(t->data.size()));
  }
  t->data = values;
}

}  // namespace

void save_model(const std::string& path, const BayesModel& model, const ModelInfo& info) {
  std::vector<ArrayRef> arrays;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    collect_layer_arrays(model.layers[i], static_cast<int>(i), arrays);
  }
  std::uint64_t total = 0;
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["kind"] = "model";
  manifest["arch"] = model.arch.name;
  manifest["family"] = family_name(model.family);
  manifest["flow_depth"] = model.flow_depth;
  manifest["stage_index"] = info.stage_index;
  manifest["seed"] = info.seed;
  manifest["kl_scale"] = info.kl_scale;
  manifest["metrics_summary"] = info.metrics_summary;
  manifest["arrays"] = arrays_manifest(arrays, total);
  manifest["blob_bytes"] = total;
  write_file(path, manifest, arrays);
}

LoadedModel load_model(const std::string& path) {
  auto raw = read_file(path);
  if (raw.manifest.value("kind", "") != "model") {
    throw FormatError("checkpoint at " + path + " is not a model checkpoint");
  }
  const auto arch = Architecture::parse(raw.manifest.at("arch").get<std::string>());
  const auto family = family_from_string(raw.manifest.at("family").get<std::string>());
  const int flow_depth = raw.manifest.value("flow_depth", 2);
  Rng rng(0);  // all parameters are overwritten below
  LoadedModel out{BayesModel::build(arch, family, rng, flow_depth), {}};
  out.info.stage_index = raw.manifest.at("stage_index").get<int>();
  out.info.seed = raw.manifest.at("seed").get<std::uint64_t>();
  out.info.kl_scale = raw.manifest.at("kl_scale").get<double>();
  for (auto it = raw.manifest.at("metrics_summary").begin();
       it != raw.manifest.at("metrics_summary").end(); ++it) {
    out.info.metrics_summary[it.key()] = it.value().get<double>();
  }

  std::map<std::string, json> entries;
  for (const auto& e : raw.manifest.at("arrays")) {
    entries[e.at("name").get<std::string>()] = e;
  }
  auto restore = [&](const std::string& name, const TensorPtr& t) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ConsistencyError("missing array '" + name + "'");
    restore_tensor(t, extract_array(raw, it->second), name);
  };
  for (std::size_t i = 0; i < out.model.layers.size(); ++i) {
    auto& l = out.model.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    if (l.family == Family::FT) {
      restore(p + "point_w", l.point_w);
      restore(p + "point_b", l.point_b);
      continue;
    }
    restore(p + "w_mu", l.w_mu);
    if (l.family == Family::CFG) {
      restore(p + "l_raw", l.l_raw);
    } else {
      restore(p + "w_rho", l.w_rho);
    }
    restore(p + "b_mu", l.b_mu);
    restore(p + "b_rho", l.b_rho);
    for (std::size_t k = 0; k < l.flow.layers.size(); ++k) {
      const std::string fp = p + "flow" + std::to_string(k) + ".";
      restore(fp + "u", l.flow.layers[k].u);
      restore(fp + "w", l.flow.layers[k].w);
      restore(fp + "b", l.flow.layers[k].b);
    }
  }
  return out;
}

void save_prior(const std::string& path, const BayesModel& w_star,
                const std::vector<std::vector<double>>& sigma2_per_param,
                const std::vector<bool>& transfer_mask, const PriorInfo& info) {
  if (w_star.family != Family::FT) {
    throw ContractError("save_prior: w_star must be an FT model");
  }
  if (sigma2_per_param.size() != 2 * w_star.layers.size()) {
    throw StructureError("save_prior: expected one sigma2 array per weight and bias tensor");
  }
  // sigma2 arrays are owned locally; keep them alive until write_file copies them out.
  std::vector<ArrayRef> arrays;
  for (std::size_t i = 0; i < w_star.layers.size(); ++i) {
    collect_layer_arrays(w_star.layers[i], static_cast<int>(i), arrays);
  }
  for (std::size_t i = 0; i < w_star.layers.size(); ++i) {
    arrays.push_back(ArrayRef{"layer" + std::to_string(i) + ".w_sigma2",
                              {static_cast<int>(sigma2_per_param[2 * i].size())},
                              &sigma2_per_param[2 * i]});
    arrays.push_back(ArrayRef{"layer" + std::to_string(i) + ".b_sigma2",
                              {static_cast<int>(sigma2_per_param[2 * i + 1].size())},
                              &sigma2_per_param[2 * i + 1]});
  }
  std::uint64_t total = 0;
  json manifest;
  manifest["format_version"] = kFormatVersion;
  manifest["kind"] = "prior";
  manifest["arch"] = w_star.arch.name;
  manifest["family"] = family_name(w_star.family);
  manifest["flow_depth"] = w_star.flow_depth;
  manifest["sigma_mode"] = info.sigma_mode;
  manifest["chosen_sigma2"] = info.chosen_sigma2;
  manifest["seed"] = info.seed;
  json mask = json::array();
  for (bool b : transfer_mask) mask.push_back(b);
  manifest["transfer_mask"] = mask;
  manifest["arrays"] = arrays_manifest(arrays, total);
  manifest["blob_bytes"] = total;
  write_file(path, manifest, arrays);
}

LoadedPrior load_prior(const std::string& path) {
  auto raw = read_file(path);
  if (raw.manifest.value("kind", "") != "prior") {
    throw FormatError("checkpoint at " + path + " is not a prior checkpoint");
  }
  const auto arch = Architecture::parse(raw.manifest.at("arch").get<std::string>());
  Rng rng(0);
  LoadedPrior out{BayesModel::build(arch, Family::FT, rng, 2), {}, {}, {}};
  out.info.sigma_mode = raw.manifest.at("sigma_mode").get<std::string>();
  out.info.chosen_sigma2 = raw.manifest.at("chosen_sigma2").get<double>();
  out.info.seed = raw.manifest.at("seed").get<std::uint64_t>();
  for (const auto& b : raw.manifest.at("transfer_mask")) {
    out.transfer_mask.push_back(b.get<bool>());
  }

  std::map<std::string, json> entries;
  for (const auto& e : raw.manifest.at("arrays")) {
    entries[e.at("name").get<std::string>()] = e;
  }
  auto get = [&](const std::string& name) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ConsistencyError("missing array '" + name + "'");
    return extract_array(raw, it->second);
  };
  for (std::size_t i = 0; i < out.w_star.layers.size(); ++i) {
    auto& l = out.w_star.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    restore_tensor(l.point_w, get(p + "point_w"), p + "point_w");
    restore_tensor(l.point_b, get(p + "point_b"), p + "point_b");
    out.sigma2_per_param.push_back(get(p + "w_sigma2"));
    out.sigma2_per_param.push_back(get(p + "b_sigma2"));
  }
  return out;
}

std::string peek_kind(const std::string& path) {
  auto raw = read_file(path);
  return raw.manifest.value("kind", "");
}

}  // namespace ckpt
}  // namespace bil
