#pragma once

#include <optional>

#include "lope/config.hpp"
#include "lope/model.hpp"
#include "lope/tasks.hpp"
#include "lope/training.hpp"

// End-to-end runs: data, init, Stage I, Stage II, calibration, evaluation.
namespace lope::pipeline {

struct ExperimentData {
  tasks::NoisySplit split;       // noisy train, clean eval
  noise::Dataset calibration;    // clean, disjoint stream
};

ExperimentData make_data(const config::ExperimentConfig& config);

struct PipelineResult {
  training::Checkpoint checkpoint;
  training::TrainReport report;
  std::optional<model::Backbone> baseline;
  training::TrainReport baseline_report;
};

/// init -> stage1 -> stage2 -> calibrate. The baseline (same architecture,
/// single-stage, all experts trainable) is trained when the config asks.
PipelineResult run_pipeline(const config::ExperimentConfig& config, const ExperimentData& data);
PipelineResult run_pipeline(const config::ExperimentConfig& config);

struct EvalResult {
  double masked = 0.0;         // poisoning experts masked, compensated
  double masked_nocomp = 0.0;  // masked, theta = 0
  double unmasked = 0.0;       // all experts mix
  std::optional<double> baseline;
};

/// Clean-eval accuracy of a trained checkpoint under every inference mode.
/// inference.compensated_experts restricts the compensation.
EvalResult evaluate(const config::ExperimentConfig& config, const training::Checkpoint& checkpoint,
                    const noise::Dataset& eval, const model::Backbone* baseline = nullptr);

}  // namespace lope::pipeline
