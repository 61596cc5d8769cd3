#include <benchmark/benchmark.h>

#include "lope/config.hpp"
#include "lope/pipeline.hpp"
#include "lope/training.hpp"

namespace {

using namespace lope;

void BM_ForwardBackwardBatch(benchmark::State& state) {
  config::ExperimentConfig cfg;
  auto data = tasks::gen_dataset(cfg.task, 16);
  numerics::RngStream rng(cfg.seed, 1);
  auto bb = model::make_backbone(cfg.model, rng);
  const auto batch = model::Batch::from_examples(data.examples);
  const auto regime = static_cast<adapter::Regime>(state.range(0));
  auto theta = model::ModelTheta::zeros(bb);
  for (auto _ : state) {
    auto r = model::forward_loss(bb, batch, regime, &theta, std::nullopt, nullptr);
    benchmark::DoNotOptimize(model::backward_full(bb, r.trace, regime));
  }
  state.SetLabel(std::string(adapter::to_string(regime)));
  state.SetItemsProcessed(state.iterations() * 16);
}
BENCHMARK(BM_ForwardBackwardBatch)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMicrosecond);

// One Stage-I epoch on the default task (hybrid noise, 2000 examples).
void BM_Stage1Epoch(benchmark::State& state) {
  config::ExperimentConfig cfg;
  cfg.stage1.epochs = 1;
  cfg.record_wall_time = false;
  const auto data = pipeline::make_data(cfg);
  numerics::RngStream rng(cfg.seed, 1);
  const auto init = model::make_backbone(cfg.model, rng);
  for (auto _ : state) {
    auto bb = init;
    benchmark::DoNotOptimize(
        training::train_stage1(bb, data.split.train, cfg.stage1_config(), {nullptr, false}));
  }
}
BENCHMARK(BM_Stage1Epoch)->Unit(benchmark::kMillisecond);

void BM_Evaluate(benchmark::State& state) {
  config::ExperimentConfig cfg;
  const auto eval = tasks::gen_dataset(cfg.task, 1000, 7);
  numerics::RngStream rng(cfg.seed, 1);
  const auto bb = model::make_backbone(cfg.model, rng);
  const auto theta = model::ModelTheta::zeros(bb);
  for (auto _ : state) {
    benchmark::DoNotOptimize(model::accuracy(bb, eval, model::InferenceMode::Masked, &theta));
  }
  state.SetItemsProcessed(state.iterations() * 1000);
}
BENCHMARK(BM_Evaluate)->Unit(benchmark::kMillisecond);

void BM_GradCheckSuite(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(training::grad_check_suite(614));
}
BENCHMARK(BM_GradCheckSuite)->Unit(benchmark::kMillisecond);

}  // namespace
