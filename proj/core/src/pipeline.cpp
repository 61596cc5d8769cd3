#include "lope/pipeline.hpp"

#include "lope/errors.hpp"

namespace lope::pipeline {

namespace {

constexpr std::uint64_t kInitStream = 0x494e;
constexpr std::uint64_t kCalibrationStream = 0x6361;

}  // namespace

ExperimentData make_data(const config::ExperimentConfig& config) {
  config.validate();
  auto task = config.task;
  task.seed = config.seed;
  return {tasks::make_noisy_split(task, config.train_size, config.eval_size, config.data_noise()),
          tasks::gen_dataset(task, config.calib_size, kCalibrationStream)};
}

PipelineResult run_pipeline(const config::ExperimentConfig& config, const ExperimentData& data) {
  config.validate();
  const auto hash = config::config_hash(config);
  training::TrainOptions options;
  options.eval = &data.split.eval;
  options.record_wall_time = config.record_wall_time;

  numerics::RngStream init(config.seed, kInitStream);
  auto backbone = model::make_backbone(config.model, init);
  std::optional<model::Backbone> baseline;
  if (config.train_baseline) baseline = backbone;

  const auto& train = data.split.train;
  auto report = training::train_stage1(backbone, train, config.stage1_config(), options);
  report.append(
      training::train_stage2(backbone, train, config.stage2_config(), &data.calibration, options));
  auto theta = training::calibrate_dependencies(backbone, data.calibration);

  PipelineResult result{
      training::Checkpoint{training::kCheckpointVersion,
                           std::move(backbone),
                           std::move(theta),
                           {init.seed(), init.stream_id(), init.draws()},
                           hash},
      std::move(report), std::nullopt, {}};

  if (baseline) {
    // Same epoch budget as both LoPE stages together, on the same noisy data.
    auto cfg = config.stage2_config();
    cfg.epochs = config.stage1.epochs + config.stage2.epochs;
    result.baseline_report = training::train_joint(*baseline, train, cfg, options);
    result.baseline = std::move(baseline);
  }
  return result;
}

PipelineResult run_pipeline(const config::ExperimentConfig& config) {
  return run_pipeline(config, make_data(config));
}

EvalResult evaluate(const config::ExperimentConfig& config, const training::Checkpoint& checkpoint,
                    const noise::Dataset& eval, const model::Backbone* baseline) {
  if (checkpoint.backbone.stage != model::StageMarker::PostStage2) {
    throw ValidationError("evaluation needs a checkpoint that finished stage 2");
  }
  if (!checkpoint.theta) throw ValidationError("checkpoint has no dependency vectors");
  const auto& bb = checkpoint.backbone;
  auto theta = *checkpoint.theta;
  if (config.compensated_experts) {
    theta = training::restrict_compensation(bb, theta, *config.compensated_experts);
  }
  EvalResult r;
  r.masked = model::accuracy(bb, eval, model::InferenceMode::Masked, &theta);
  r.masked_nocomp = model::accuracy(bb, eval, model::InferenceMode::MaskedNoComp, nullptr);
  r.unmasked = model::accuracy(bb, eval, model::InferenceMode::Unmasked, nullptr);
  if (baseline != nullptr) {
    r.baseline = model::accuracy(*baseline, eval, model::InferenceMode::Unmasked, nullptr);
  }
  return r;
}

}  // namespace lope::pipeline
