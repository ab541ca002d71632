#include "bil/model.hpp"

#include <sstream>

#include "bil/errors.hpp"

namespace bil {

namespace {

std::vector<int> split_dims(const std::string& s) {
  std::vector<int> dims;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, '-')) {
    try {
      dims.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad mlp spec segment '" + item + "'");
    }
    if (dims.back() <= 0) throw ConfigError("mlp dims must be positive");
  }
  return dims;
}

ArchBlock dense_block(int in, int out) {
  ArchBlock b;
  b.type = ArchBlock::Type::Dense;
  b.dense_in = in;
  b.dense_out = out;
  return b;
}

ArchBlock conv_block(int filters, int channels, int k, int stride, int padding) {
  ArchBlock b;
  b.type = ArchBlock::Type::Conv;
  b.conv = ConvDims{filters, channels, k, k, stride, padding};
  return b;
}

ArchBlock relu_block() {
  ArchBlock b;
  b.type = ArchBlock::Type::Relu;
  return b;
}

ArchBlock pool_block(int window, int stride) {
  ArchBlock b;
  b.type = ArchBlock::Type::MaxPool;
  b.pool_window = window;
  b.pool_stride = stride;
  b.pool_padding = 0;
  return b;
}

ArchBlock flatten_block() {
  ArchBlock b;
  b.type = ArchBlock::Type::Flatten;
  return b;
}

}  // namespace

bool Architecture::has_conv() const {
  for (const auto& b : blocks) {
    if (b.type == ArchBlock::Type::Conv) return true;
  }
  return false;
}

Architecture Architecture::parse(const std::string& spec) {
  Architecture a;
  a.name = spec;
  if (spec == "lenet5") {
    a.input_shape = {1, 28, 28};
    a.num_classes = 10;
    a.blocks = {conv_block(20, 1, 5, 1, 0), relu_block(), pool_block(2, 2),
                conv_block(50, 20, 5, 1, 0), relu_block(), pool_block(2, 2),
                flatten_block(),
                dense_block(800, 500), relu_block(),
                dense_block(500, 10)};
    return a;
  }
  if (spec == "conv3fc3") {
    a.input_shape = {3, 32, 32};
    a.num_classes = 10;
    a.blocks = {conv_block(32, 3, 5, 1, 2), relu_block(), pool_block(3, 2),
                conv_block(64, 32, 5, 1, 2), relu_block(), pool_block(3, 2),
                conv_block(128, 64, 5, 1, 2), relu_block(), pool_block(3, 2),
                flatten_block(),
                dense_block(1152, 1000), relu_block(),
                dense_block(1000, 1000), relu_block(),
                dense_block(1000, 10)};
    return a;
  }
  if (spec.rfind("mlp:", 0) == 0) {
    auto dims = split_dims(spec.substr(4));
    if (dims.size() < 2) throw ConfigError("mlp spec needs at least input and output dims");
    a.input_shape = {dims[0]};
    a.num_classes = dims.back();
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      a.blocks.push_back(dense_block(dims[i], dims[i + 1]));
      if (i + 2 < dims.size()) a.blocks.push_back(relu_block());
    }
    return a;
  }
  throw ConfigError("unknown architecture '" + spec + "' (expected lenet5|conv3fc3|mlp:...)");
}

BayesModel BayesModel::build(const Architecture& arch, Family family, Rng& rng, int flow_depth) {
  if (family == Family::CFG && !arch.has_conv()) {
    throw ConfigError("CFG requires convolutional layers");
  }
  BayesModel m;
  m.arch = arch;
  m.family = family;
  m.flow_depth = flow_depth;
  m.blocks = arch.blocks;
  m.block_layer_index.assign(arch.blocks.size(), -1);
  for (std::size_t i = 0; i < arch.blocks.size(); ++i) {
    const auto& b = arch.blocks[i];
    if (b.type == ArchBlock::Type::Dense) {
      // Dense layers of a CFG model stay fully factorized; channel blocks are
      // only defined over conv kernels.
      const Family eff = (family == Family::CFG) ? Family::FFG : family;
      m.block_layer_index[i] = static_cast<int>(m.layers.size());
      m.layers.push_back(BayesLayer::dense(b.dense_in, b.dense_out, eff, rng, flow_depth));
    } else if (b.type == ArchBlock::Type::Conv) {
      m.block_layer_index[i] = static_cast<int>(m.layers.size());
      m.layers.push_back(BayesLayer::conv2d(b.conv, family, rng, flow_depth));
    }
  }
  return m;
}

TensorPtr BayesModel::forward(Tape& tape, const TensorPtr& input, const NoiseBundle& noise) const {
  if (noise.slots.size() != layers.size()) {
    throw ContractError("noise bundle has " + std::to_string(noise.slots.size()) +
                        " slots for " + std::to_string(layers.size()) + " layers");
  }
  TensorPtr x = input;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    switch (b.type) {
      case ArchBlock::Type::Dense:
      case ArchBlock::Type::Conv: {
        const auto& layer = layers[static_cast<std::size_t>(block_layer_index[i])];
        x = layer_forward(tape, layer, x, noise.slots[static_cast<std::size_t>(block_layer_index[i])]);
        break;
      }
      case ArchBlock::Type::Relu:
        x = ops::activation(tape, Act::Relu, x);
        break;
      case ArchBlock::Type::MaxPool:
        x = ops::maxpool2d(tape, x, b.pool_window, b.pool_stride, b.pool_padding);
        break;
      case ArchBlock::Type::Flatten: {
        const int M = x->shape[0];
        const int rest = static_cast<int>(x->size() / M);
        x = ops::reshape(tape, x, {M, rest});
        break;
      }
    }
  }
  return x;
}

TensorPtr BayesModel::kl(Tape& tape, const PriorSnapshot& prior, const NoiseBundle& noise) const {
  check_prior(prior);
  if (noise.slots.size() != layers.size()) {
    throw ContractError("noise bundle incongruent with model layers");
  }
  TensorPtr acc = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    acc = ops::add(tape, acc, layer_kl(tape, layers[i], prior.layers[i], noise.slots[i]));
  }
  return acc;
}

std::vector<TensorPtr> BayesModel::parameters() const {
  std::vector<TensorPtr> out;
  for (const auto& l : layers) {
    auto p = l.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

NoiseBundle BayesModel::draw_noise(Rng& rng) const {
  NoiseBundle nb;
  nb.slots.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.family == Family::FT) continue;
    auto& slot = nb.slots[i];
    slot.weight_eps = Tensor::from(l.weight_shape(), rng.normal_vec(
        static_cast<std::size_t>(l.weight_count())));
    slot.bias_eps = Tensor::from({l.bias_count()}, rng.normal_vec(
        static_cast<std::size_t>(l.bias_count())));
    if (l.family == Family::MNF) {
      slot.z0 = Tensor::from({l.z_dim()}, rng.normal_vec(static_cast<std::size_t>(l.z_dim())));
    }
  }
  return nb;
}

NoiseBundle BayesModel::zero_noise() const {
  NoiseBundle nb;
  nb.slots.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.family == Family::FT) continue;
    auto& slot = nb.slots[i];
    slot.weight_eps = Tensor::zeros(l.weight_shape());
    slot.bias_eps = Tensor::zeros({l.bias_count()});
    if (l.family == Family::MNF) slot.z0 = Tensor::zeros({l.z_dim()});
  }
  return nb;
}

PriorSnapshot BayesModel::snapshot() const {
  PriorSnapshot s;
  s.fixed_analytic = false;
  s.layers.reserve(layers.size());
  for (const auto& l : layers) s.layers.push_back(snapshot_layer(l));
  return s;
}

PriorSnapshot BayesModel::standard_normal_prior() const {
  PriorSnapshot s;
  s.fixed_analytic = true;
  s.layers.reserve(layers.size());
  for (const auto& l : layers) s.layers.push_back(bil::standard_normal_prior(l));
  return s;
}

void BayesModel::check_prior(const PriorSnapshot& prior) const {
  if (prior.layers.size() != layers.size()) {
    throw StructureError("prior snapshot has " + std::to_string(prior.layers.size()) +
                         " layers, model has " + std::to_string(layers.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) check_congruent(layers[i], prior.layers[i]);
}

std::vector<std::pair<std::string, std::vector<int>>> BayesModel::shape_trace(int M) const {
  std::vector<std::pair<std::string, std::vector<int>>> trace;
  std::vector<int> shape = arch.input_shape;
  shape.insert(shape.begin(), M);
  for (const auto& b : blocks) {
    switch (b.type) {
      case ArchBlock::Type::Dense:
        trace.emplace_back("dense " + std::to_string(b.dense_out), shape);
        shape = {M, b.dense_out};
        break;
      case ArchBlock::Type::Conv: {
        trace.emplace_back("conv " + std::to_string(b.conv.filters), shape);
        const int H = shape[2], W = shape[3];
        shape = {M, b.conv.filters,
                 (H + 2 * b.conv.padding - b.conv.kh) / b.conv.stride + 1,
                 (W + 2 * b.conv.padding - b.conv.kw) / b.conv.stride + 1};
        break;
      }
      case ArchBlock::Type::Relu:
        trace.emplace_back("relu", shape);
        break;
      case ArchBlock::Type::MaxPool: {
        trace.emplace_back("pool " + std::to_string(b.pool_window), shape);
        const int H = shape[2], W = shape[3];
        shape = {M, shape[1],
                 (H + 2 * b.pool_padding - b.pool_window) / b.pool_stride + 1,
                 (W + 2 * b.pool_padding - b.pool_window) / b.pool_stride + 1};
        break;
      }
      case ArchBlock::Type::Flatten: {
        trace.emplace_back("flatten", shape);
        int rest = 1;
        for (std::size_t k = 1; k < shape.size(); ++k) rest *= shape[k];
        shape = {M, rest};
        break;
      }
    }
  }
  trace.emplace_back("logits", shape);
  return trace;
}

}  // namespace bil
