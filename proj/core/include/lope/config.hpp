#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lope/model.hpp"
#include "lope/noise.hpp"
#include "lope/tasks.hpp"
#include "lope/training.hpp"

// Experiment configuration: a flat `key = value` text file. Blank lines and
// lines starting with '#' are ignored; every key has a default, unknown or
// repeated keys are errors.
namespace lope::config {

struct ExperimentConfig {
  std::uint64_t seed = 614;

  tasks::TaskSpec task;

  std::size_t train_size = 2000;
  std::size_t eval_size = 1000;
  std::size_t calib_size = 200;
  // Corruption of the training split (the noisy "original" data).
  double data_noise_rate = 0.05;
  std::vector<noise::NoiseOp> data_noise_ops = {noise::NoiseOp::Shuffle, noise::NoiseOp::Insert,
                                                noise::NoiseOp::Delete};

  model::BackboneConfig model;

  // Stage I defaults: hybrid noise, 5% discrete edits, alpha 0.05.
  training::StageConfig stage1 = [] {
    training::StageConfig c;
    c.discrete.ops = {noise::NoiseOp::Shuffle, noise::NoiseOp::Insert, noise::NoiseOp::Delete,
                      noise::NoiseOp::Replace};
    c.discrete.rate = 0.05;
    c.continuous.alpha = 0.05;
    return c;
  }();
  // Stage II starts with a frozen, already useful poisoning expert; a smaller
  // step keeps the first epochs from overshooting.
  training::StageConfig stage2 = [] {
    training::StageConfig c;
    c.learning_rate = 0.01;
    c.hynoise = training::HyNoiseType::None;
    return c;
  }();

  // Normal experts that keep their compensation at inference; nullopt = all.
  std::optional<std::size_t> compensated_experts;
  bool train_baseline = false;
  bool record_wall_time = true;

  void validate() const;

  // Stage-I noise specs with the alphabet and seeds filled in.
  noise::DiscreteNoiseSpec data_noise() const;
  training::StageConfig stage1_config() const;
  training::StageConfig stage2_config() const;
};

/// Every key with its current value, one per line, in a fixed order.
std::string serialize(const ExperimentConfig& config);
ExperimentConfig parse(std::string_view text);
ExperimentConfig load(const std::filesystem::path& path);

/// Applies one `key=value` assignment (as used by CLI overrides).
void set_value(ExperimentConfig& config, std::string_view key, std::string_view value);

/// FNV-1a of the serialized form.
std::uint64_t config_hash(const ExperimentConfig& config);

struct KeyDoc {
  std::string key;
  std::string default_value;
  std::string description;
};

/// Documentation table of every accepted key.
std::vector<KeyDoc> documented_keys();

}  // namespace lope::config
