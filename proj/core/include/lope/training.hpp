#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lope/model.hpp"
#include "lope/noise.hpp"

namespace lope::training {

using model::Backbone;
using model::ModelTheta;

// Which halves of hybrid noise injection Stage I applies.
enum class HyNoiseType : std::uint8_t { None, Continuous, Discrete, Hybrid };

std::string_view to_string(HyNoiseType type);
HyNoiseType parse_hynoise(std::string_view name);

struct StageConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
  double momentum = 0.9;
  // Stage I only.
  HyNoiseType hynoise = HyNoiseType::Hybrid;
  noise::DiscreteNoiseSpec discrete;
  noise::ContinuousNoiseSpec continuous;
  // Probability that an example receives continuous noise (1 = every example).
  double continuous_prob = 1.0;
  // Stage II only: recalibrate theta every epoch and train with compensation.
  bool compensate_during_stage2 = false;
  std::uint64_t seed = 614;

  void validate() const;
  bool has_noise() const { return hynoise != HyNoiseType::None; }
};

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
  std::int64_t wall_ms = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct BlockChecksum {
  std::string block;  // "embedding", "L1.W0", "L2.B3", ...
  std::uint64_t before = 0;
  std::uint64_t after = 0;
  bool trainable = false;
};

struct StageChecksums {
  std::string stage;
  std::vector<BlockChecksum> blocks;

  // Blocks whose checksum changed during the stage.
  std::vector<std::string> changed() const;
  // True when every block the stage froze is bit-identical.
  bool frozen_intact() const;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::vector<StageChecksums> checksums;

  void append(const TrainReport& other);
};

struct TrainOptions {
  const noise::Dataset* eval = nullptr;  // per-epoch eval accuracy when set
  bool record_wall_time = true;
};

/// SGD with heavy-ball momentum: v <- mu v + g; p <- p - lr v.
/// Only blocks the regime leaves trainable are touched.
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum);

  void step(Backbone& backbone, const model::ModelGradients& grads);

 private:
  void update(const std::string& key, numerics::Matrix& param, const numerics::Matrix& grad,
              bool frozen);

  double learning_rate_;
  double momentum_;
  std::map<std::string, numerics::Matrix> velocity_;
};

/// Checksums of every parameter block, keyed like BlockChecksum::block.
std::vector<std::pair<std::string, std::uint64_t>> block_checksums(const Backbone& backbone);

/// Stage I: A and the poisoning experts learn on hybrid-noise data. Discrete
/// corruption is drawn once per stage; continuous noise is fixed per example.
/// Requires stage marker Init.
TrainReport train_stage1(Backbone& backbone, const noise::Dataset& train, const StageConfig& cfg,
                         const TrainOptions& options = {});

/// Stage II: A, normal experts and gate learn on the training data as given,
/// without injected noise, with the poisoning experts frozen. Requires stage
/// marker PostStage1.
/// With compensate_during_stage2, theta starts at zero and is recalibrated
/// on `calibration` after every epoch.
TrainReport train_stage2(Backbone& backbone, const noise::Dataset& train, const StageConfig& cfg,
                         const noise::Dataset* calibration = nullptr,
                         const TrainOptions& options = {});

/// Single-stage baseline: every adapter block trains together, no masking.
TrainReport train_joint(Backbone& backbone, const noise::Dataset& train, const StageConfig& cfg,
                        const TrainOptions& options = {});

/// Per-layer dependency vectors from the calibration set's token positions.
/// Layer-2 inputs are the stage-2 activations. Requires a trained backbone.
ModelTheta calibrate_dependencies(const Backbone& backbone, const noise::Dataset& calibration);

/// Keeps dependency compensation only for the `count` normal experts with the
/// largest theta (ties to the lower index); zeroes the rest.
ModelTheta restrict_compensation(const Backbone& backbone, const ModelTheta& theta,
                                 std::size_t count);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
  std::uint64_t draws = 0;

  friend bool operator==(const RngState&, const RngState&) = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  Backbone backbone;
  std::optional<ModelTheta> theta;
  RngState rng;
  std::uint64_t config_hash = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::string serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckOptions {
  std::size_t configs_per_regime = 20;
  double step = 1e-5;
  double tolerance = 1e-6;
  bool include_model = true;
  // Test hook: receives every analytic gradient block before comparison.
  std::function<void(std::string_view block, numerics::Matrix& grad)> tamper;
};

struct GradCheckEntry {
  std::string level;   // "layer" or "model"
  std::string regime;
  std::size_t config = 0;
  std::string block;   // "A", "B", "W_gate", "x" (layer); prefixed by L1./L2. (model)
  double rel_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  bool passed() const;
  // Worst relative error per (level, regime, block).
  std::map<std::string, double> worst_by_block() const;
  std::size_t configs_checked(std::string_view level, std::string_view regime) const;
};

/// Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor). Central
/// differences carry roughly 1e-11 of absolute round-off at h = 1e-5, so
/// blocks whose gradient is nearly zero are judged on absolute error.
inline constexpr double kGradNormFloor = 1e-4;
double block_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                            double floor = kGradNormFloor);

/// Compares analytic gradients with central differences on random layers
/// (every regime) and random tiny backbones (every trainable regime).
GradCheckReport grad_check_suite(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace lope::training
