#include "lope/training.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "lope/errors.hpp"

namespace lope::training {

using adapter::Regime;
using model::Batch;
using model::StageMarker;
using numerics::Matrix;
using numerics::RngStream;

namespace {
constexpr std::uint64_t kStage1Stream = 0x5331;
constexpr std::uint64_t kStage2Stream = 0x5332;
constexpr std::uint64_t kJointStream = 0x4a4f;
constexpr std::uint64_t kAugmentStream = 0x4859;
constexpr std::uint64_t kContinuousStream = 0x434e;
constexpr std::uint64_t kContinuousGateStream = 0x4347;
}  // namespace

std::string_view to_string(HyNoiseType type) {
  switch (type) {
    case HyNoiseType::None: return "none";
    case HyNoiseType::Continuous: return "continuous";
    case HyNoiseType::Discrete: return "discrete";
    case HyNoiseType::Hybrid: return "hybrid";
  }
  return "unknown";
}

HyNoiseType parse_hynoise(std::string_view name) {
  for (auto t : {HyNoiseType::None, HyNoiseType::Continuous, HyNoiseType::Discrete,
                 HyNoiseType::Hybrid}) {
    if (to_string(t) == name) return t;
  }
  throw ValidationError(
      fmt::format("unknown noise type '{}' (expected none, continuous, discrete, hybrid)", name));
}

void StageConfig::validate() const {
  if (!(learning_rate >= 0.0)) {
    throw ValidationError(fmt::format("learning rate must be >= 0, got {}", learning_rate));
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ValidationError(fmt::format("momentum must lie in [0, 1), got {}", momentum));
  }
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
  if (!(continuous_prob >= 0.0 && continuous_prob <= 1.0)) {
    throw ValidationError(fmt::format("continuous noise probability {} outside [0, 1]", continuous_prob));
  }
  discrete.validate();
  continuous.validate();
}

std::vector<std::string> StageChecksums::changed() const {
  std::vector<std::string> out;
  for (const auto& b : blocks) {
    if (b.before != b.after) out.push_back(b.block);
  }
  return out;
}

bool StageChecksums::frozen_intact() const {
  return std::all_of(blocks.begin(), blocks.end(),
                     [](const BlockChecksum& b) { return b.trainable || b.before == b.after; });
}

void TrainReport::append(const TrainReport& other) {
  epochs.insert(epochs.end(), other.epochs.begin(), other.epochs.end());
  checksums.insert(checksums.end(), other.checksums.begin(), other.checksums.end());
}

SgdMomentum::SgdMomentum(double learning_rate, double momentum)
    : learning_rate_(learning_rate), momentum_(momentum) {}

void SgdMomentum::update(const std::string& key, Matrix& param, const Matrix& grad, bool frozen) {
  if (frozen) throw ValidationError(fmt::format("gradient produced for frozen block {}", key));
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) {
    throw ShapeError(fmt::format("gradient {} for {} does not match parameter {}", grad.shape_string(),
                                 key, param.shape_string()));
  }
  auto [it, inserted] = velocity_.try_emplace(key, param.rows(), param.cols());
  auto v = it->second.data();
  auto p = param.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum_ * v[i] + g[i];
    p[i] -= learning_rate_ * v[i];
  }
}

void SgdMomentum::step(Backbone& backbone, const model::ModelGradients& grads) {
  auto apply = [&](const char* prefix, adapter::LopeLayer& layer, const adapter::LayerGradients& g) {
    const auto& frozen = layer.freeze();
    if (g.a) update(fmt::format("{}.A", prefix), layer.mutable_a(), *g.a, frozen.a);
    for (std::size_t i = 0; i < g.experts.size(); ++i) {
      if (g.experts[i]) {
        update(fmt::format("{}.B{}", prefix, i), layer.mutable_expert(i), *g.experts[i],
               frozen.experts[i] != 0);
      }
    }
    if (g.gate) update(fmt::format("{}.W_gate", prefix), layer.mutable_gate_weights(), *g.gate, frozen.gate);
  };
  apply("L1", backbone.layer1, grads.layer1);
  apply("L2", backbone.layer2, grads.layer2);
}

std::vector<std::pair<std::string, std::uint64_t>> block_checksums(const Backbone& backbone) {
  std::vector<std::pair<std::string, std::uint64_t>> out;
  out.emplace_back("embedding", numerics::checksum(backbone.embedding));
  auto add = [&](const char* prefix, const adapter::LopeLayer& layer) {
    out.emplace_back(fmt::format("{}.W0", prefix), numerics::checksum(layer.base()));
    out.emplace_back(fmt::format("{}.A", prefix), numerics::checksum(layer.a()));
    for (std::size_t i = 0; i < layer.num_experts(); ++i) {
      out.emplace_back(fmt::format("{}.B{}", prefix, i), numerics::checksum(layer.expert(i)));
    }
    out.emplace_back(fmt::format("{}.W_gate", prefix), numerics::checksum(layer.gate_weights()));
  };
  add("L1", backbone.layer1);
  add("L2", backbone.layer2);
  return out;
}

namespace {

bool block_trainable(const std::string& name, const Backbone& backbone, Regime regime) {
  if (name == "embedding") return false;
  const bool first = name.rfind("L1.", 0) == 0;
  const auto& layer = first ? backbone.layer1 : backbone.layer2;
  const auto f = adapter::freeze_for(regime, layer.num_experts(), layer.poison());
  const std::string block = name.substr(3);
  if (block == "W0") return false;
  if (block == "A") return !f.a;
  if (block == "W_gate") return !f.gate;
  const auto idx = static_cast<std::size_t>(std::stoul(block.substr(1)));
  return f.experts[idx] == 0;
}

double cross_entropy(const model::ExampleTrace& ex) {
  const auto& z = ex.logits;
  const double hi = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - hi);
  return hi + std::log(s) - z[ex.label];
}

struct EpochLoop {
  Regime regime;
  std::string stage;
  std::uint64_t stream;
  // Stage-I data and noise; other stages use the training set as is.
  const noise::Dataset* data = nullptr;
  std::optional<noise::ContinuousNoiseSpec> continuous = std::nullopt;
  double continuous_prob = 1.0;
  // Compensated stage II.
  const noise::Dataset* calibration = nullptr;
};

TrainReport run_epochs(Backbone& backbone, const noise::Dataset& train, const StageConfig& cfg,
                       const EpochLoop& loop, const TrainOptions& options) {
  cfg.validate();
  train.validate();
  using Clock = std::chrono::steady_clock;

  backbone.layer1.configure_for(loop.regime);
  backbone.layer2.configure_for(loop.regime);
  const auto before = block_checksums(backbone);

  const noise::Dataset& data = loop.data ? *loop.data : train;
  const RngStream root(cfg.seed, loop.stream);
  const RngStream continuous_rng = root.child(kContinuousStream);
  const RngStream gate_rng = root.child(kContinuousGateStream);
  std::vector<std::uint8_t> noisy(data.size(), 1);
  if (loop.continuous) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      RngStream g = gate_rng.child(i);
      noisy[i] = g.bernoulli(loop.continuous_prob) ? 1 : 0;
    }
  }

  std::optional<ModelTheta> theta;
  if (loop.regime == Regime::Stage2Compensated) theta = ModelTheta::zeros(backbone);
  const ModelTheta* theta_ptr = theta ? &*theta : nullptr;

  SgdMomentum optimizer(cfg.learning_rate, cfg.momentum);
  TrainReport report;
  std::vector<std::size_t> order(data.size());
  std::vector<double> example_loss(data.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle = root.child(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

    for (std::size_t start_idx = 0; start_idx < order.size(); start_idx += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start_idx + cfg.batch_size);
      std::vector<noise::Example> examples;
      std::vector<std::uint64_t> ids;
      for (std::size_t k = start_idx; k < end; ++k) {
        examples.push_back(data.examples[order[k]]);
        ids.push_back(order[k]);
      }
      Batch batch = Batch::from_examples(examples, ids);
      for (std::size_t k = 0; k < ids.size(); ++k) batch.noisy[k] = noisy[ids[k]];
      RngStream noise_rng = continuous_rng;
      auto result = model::forward_loss(backbone, batch, loop.regime, theta_ptr, loop.continuous,
                                        loop.continuous ? &noise_rng : nullptr);
      for (std::size_t k = 0; k < ids.size(); ++k) {
        example_loss[ids[k]] = cross_entropy(result.trace.examples[k]);
      }
      const auto grads = model::backward_full(backbone, result.trace, loop.regime);
      optimizer.step(backbone, grads);
    }

    EpochRecord rec;
    rec.stage = loop.stage;
    rec.epoch = epoch;
    // Summed in dataset order so the value does not depend on the shuffle.
    double loss_sum = 0.0;
    for (double l : example_loss) loss_sum += l;
    rec.loss = loss_sum / static_cast<double>(data.size());
    rec.train_acc = model::regime_accuracy(backbone, train, loop.regime, theta_ptr);
    if (options.eval) rec.eval_acc = model::regime_accuracy(backbone, *options.eval, loop.regime, theta_ptr);
    if (theta && loop.calibration) {
      // Recalibrate on the updated experts for the next epoch.
      theta = calibrate_dependencies(backbone, *loop.calibration);
      theta_ptr = &*theta;
    }
    if (options.record_wall_time) {
      rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start).count();
    }
    report.epochs.push_back(rec);
  }

  const auto after = block_checksums(backbone);
  StageChecksums sums;
  sums.stage = loop.stage;
  for (std::size_t i = 0; i < before.size(); ++i) {
    sums.blocks.push_back({before[i].first, before[i].second, after[i].second,
                           block_trainable(before[i].first, backbone, loop.regime)});
  }
  report.checksums.push_back(std::move(sums));
  return report;
}

void require_stage(const Backbone& backbone, StageMarker expected, const char* what) {
  if (backbone.stage != expected) {
    throw ValidationError(fmt::format("{} requires stage marker {}, backbone is at {}", what,
                                      model::to_string(expected), model::to_string(backbone.stage)));
  }
}

}  // namespace

TrainReport train_stage1(Backbone& backbone, const noise::Dataset& train, const StageConfig& cfg,
                         const TrainOptions& options) {
  require_stage(backbone, StageMarker::Init, "stage1 training");
  cfg.validate();
  EpochLoop loop{.regime = Regime::Stage1, .stage = "stage1", .stream = kStage1Stream};
  std::optional<noise::Dataset> augmented;
  if (cfg.hynoise == HyNoiseType::Discrete || cfg.hynoise == HyNoiseType::Hybrid) {
    augmented = noise::augment_dataset(train, cfg.discrete, RngStream(cfg.discrete.seed, kAugmentStream))
                    .dataset;
    loop.data = &*augmented;
  }
  if (cfg.hynoise == HyNoiseType::Continuous || cfg.hynoise == HyNoiseType::Hybrid) {
    loop.continuous = cfg.continuous;
    loop.continuous_prob = cfg.continuous_prob;
  }
  auto report = run_epochs(backbone, train, cfg, loop, options);
  backbone.stage = StageMarker::PostStage1;
  return report;
}

TrainReport train_stage2(Backbone& backbone, const noise::Dataset& train, const StageConfig& cfg,
                         const noise::Dataset* calibration, const TrainOptions& options) {
  require_stage(backbone, StageMarker::PostStage1, "stage2 training");
  EpochLoop loop{
      .regime = cfg.compensate_during_stage2 ? Regime::Stage2Compensated : Regime::Stage2,
      .stage = "stage2",
      .stream = kStage2Stream};
  if (cfg.compensate_during_stage2) {
    loop.calibration = calibration ? calibration : &train;
  }
  auto report = run_epochs(backbone, train, cfg, loop, options);
  backbone.stage = StageMarker::PostStage2;
  return report;
}

TrainReport train_joint(Backbone& backbone, const noise::Dataset& train, const StageConfig& cfg,
                        const TrainOptions& options) {
  require_stage(backbone, StageMarker::Init, "joint training");
  EpochLoop loop{.regime = Regime::Joint, .stage = "joint", .stream = kJointStream};
  auto report = run_epochs(backbone, train, cfg, loop, options);
  backbone.stage = StageMarker::PostStage2;
  return report;
}

ModelTheta calibrate_dependencies(const Backbone& backbone, const noise::Dataset& calibration) {
  if (calibration.examples.empty()) throw ValidationError("calibration set is empty");
  if (backbone.stage == StageMarker::Init) {
    throw ValidationError("dependency calibration needs a trained backbone");
  }
  std::vector<numerics::Vector> inputs1;
  std::vector<numerics::Vector> inputs2;
  for (const auto& ex : calibration.examples) {
    for (auto tok : ex.tokens) {
      if (tok >= backbone.vocab_size()) throw ValidationError("calibration token outside vocabulary");
      const auto row = backbone.embedding.row(tok);
      numerics::Vector e(row.begin(), row.end());
      const auto t1 = adapter::forward_stage2(backbone.layer1, e);
      numerics::Vector act(t1.y.size());
      std::transform(t1.y.begin(), t1.y.end(), act.begin(), [](double u) { return std::tanh(u); });
      inputs1.push_back(std::move(e));
      inputs2.push_back(std::move(act));
    }
  }
  return {adapter::calibrate_theta(backbone.layer1, inputs1),
          adapter::calibrate_theta(backbone.layer2, inputs2)};
}

ModelTheta restrict_compensation(const Backbone& backbone, const ModelTheta& theta,
                                 std::size_t count) {
  auto restrict = [count](const adapter::LopeLayer& layer, const adapter::DependencyVector& dep) {
    const auto normals = layer.normal_experts();
    const auto keep = adapter::top_k_indices(dep.theta, normals, count);
    adapter::DependencyVector out = adapter::DependencyVector::zeros(layer.num_experts());
    for (auto i : keep) out.theta[i] = dep.theta[i];
    return out;
  };
  return {restrict(backbone.layer1, theta.layer1), restrict(backbone.layer2, theta.layer2)};
}

}  // namespace lope::training
