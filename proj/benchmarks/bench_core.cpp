#include <benchmark/benchmark.h>

#include "bil/data.hpp"
#include "bil/model.hpp"
#include "bil/trainer.hpp"

namespace {

using namespace bil;

void BM_MatmulForwardBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  auto a = Tensor::from({n, n}, rng.normal_vec(static_cast<std::size_t>(n) * n), true);
  auto b = Tensor::from({n, n}, rng.normal_vec(static_cast<std::size_t>(n) * n), true);
  for (auto _ : state) {
    Tape tape;
    auto loss = ops::sum(tape, ops::matmul(tape, a, b));
    tape.backward(loss);
    benchmark::DoNotOptimize(loss->value());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_MatmulForwardBackward)->Arg(32)->Arg(64)->Arg(128);

void BM_Conv2dForward(benchmark::State& state) {
  Rng rng(2);
  auto x = Tensor::from({8, 1, 28, 28}, rng.normal_vec(8 * 28 * 28));
  auto k = Tensor::from({20, 1, 5, 5}, rng.normal_vec(20 * 25));
  for (auto _ : state) {
    Tape tape(false);
    auto out = ops::conv2d(tape, x, k, 1, 0);
    benchmark::DoNotOptimize(out->data.data());
  }
}
BENCHMARK(BM_Conv2dForward);

void BM_ElboStep(benchmark::State& state) {
  Rng rng(3);
  auto model = BayesModel::build(Architecture::parse("mlp:2-32-32-3"), Family::FFG, rng);
  auto data = gen_synthetic(SyntheticKind::Blobs, 256, 3, 0.5, 4);
  auto prior = model.standard_normal_prior();
  auto params = model.parameters();
  AdamState adam;
  adam.bind(params);
  ElboConfig cfg;
  cfg.dataset_size = 256;
  cfg.batch_size = 128;
  std::vector<std::size_t> idx(128);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Batch batch{data.batch(idx), data.batch_labels(idx)};
  Rng noise(5);
  for (auto _ : state) {
    Tape tape;
    auto res = elbo_minibatch(tape, model, batch, prior, cfg, noise);
    tape.backward(res.loss);
    adam.step(params);
    benchmark::DoNotOptimize(res.data_term);
  }
}
BENCHMARK(BM_ElboStep);

void BM_MnfElboStep(benchmark::State& state) {
  Rng rng(6);
  auto model = BayesModel::build(Architecture::parse("mlp:2-32-32-3"), Family::MNF, rng);
  auto data = gen_synthetic(SyntheticKind::Blobs, 256, 3, 0.5, 7);
  auto prior = model.snapshot();
  auto params = model.parameters();
  AdamState adam;
  adam.bind(params);
  ElboConfig cfg;
  cfg.dataset_size = 256;
  cfg.batch_size = 128;
  std::vector<std::size_t> idx(128);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Batch batch{data.batch(idx), data.batch_labels(idx)};
  Rng noise(8);
  for (auto _ : state) {
    Tape tape;
    auto res = elbo_minibatch(tape, model, batch, prior, cfg, noise);
    tape.backward(res.loss);
    adam.step(params);
    benchmark::DoNotOptimize(res.kl_term);
  }
}
BENCHMARK(BM_MnfElboStep);

void BM_FlowForward(benchmark::State& state) {
  const int d = static_cast<int>(state.range(0));
  Rng rng(9);
  auto flow = FlowStack::init(d, 2, rng, 0.5);
  auto z0 = Tensor::from({d}, rng.normal_vec(static_cast<std::size_t>(d)));
  for (auto _ : state) {
    Tape tape(false);
    auto fw = nf_forward(tape, flow, z0);
    benchmark::DoNotOptimize(fw.log_det_sum->value());
  }
}
BENCHMARK(BM_FlowForward)->Arg(8)->Arg(64);

void BM_PredictAvg100(benchmark::State& state) {
  Rng rng(10);
  auto model = BayesModel::build(Architecture::parse("mlp:2-32-32-3"), Family::FFG, rng);
  auto data = gen_synthetic(SyntheticKind::Blobs, 128, 3, 0.5, 11);
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  auto inputs = data.batch(idx);
  Rng prng(12);
  for (auto _ : state) {
    auto probs = predict_avg(model, inputs, 100, prng);
    benchmark::DoNotOptimize(probs.data());
  }
}
BENCHMARK(BM_PredictAvg100);

}  // namespace

BENCHMARK_MAIN();
