#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "lope/adapter.hpp"
#include "lope/noise.hpp"
#include "lope/numerics.hpp"

// Desk-scale classifier around two LoPE layers:
//
//   e_t   = E[token_t]            (frozen embedding, optional continuous noise)
//   a_t   = tanh(L1(e_t))         (d -> h)
//   z_t   = L2(a_t)               (h -> C)
//   logit = mean of z_t over valid positions
//
// Routing happens per token, so every position gets its own gate weights.
namespace lope::model {

using adapter::DependencyVector;
using adapter::LopeLayer;
using adapter::Regime;
using numerics::Matrix;
using numerics::Vector;

enum class StageMarker : std::uint8_t { Init = 0, PostStage1 = 1, PostStage2 = 2 };

std::string_view to_string(StageMarker marker);

struct BackboneConfig {
  std::size_t vocab_size = 32;
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t num_classes = 4;
  std::size_t rank = 4;
  std::size_t num_experts = 4;
  std::size_t num_poison = 1;  // poisoning experts occupy the last indices
  std::size_t top_k = 3;

  void validate() const;
  std::vector<std::size_t> poison_indices() const;
};

struct Backbone {
  Matrix embedding;  // V x d, frozen
  LopeLayer layer1;
  LopeLayer layer2;
  StageMarker stage = StageMarker::Init;

  std::size_t vocab_size() const { return embedding.rows(); }
  std::size_t num_classes() const { return layer2.d_out(); }

  friend bool operator==(const Backbone&, const Backbone&) = default;
};

/// Fresh backbone: Gaussian embedding and base weights stand in for a frozen
/// pretrained model; adapters start at zero output.
Backbone make_backbone(const BackboneConfig& config, numerics::RngStream& rng);

struct ModelTheta {
  DependencyVector layer1;
  DependencyVector layer2;

  static ModelTheta zeros(const Backbone& backbone);
  friend bool operator==(const ModelTheta&, const ModelTheta&) = default;
};

struct Batch {
  std::vector<noise::TokenSeq> tokens;        // padded to a common length
  std::vector<std::vector<std::uint8_t>> mask;  // 1 on valid positions
  std::vector<std::size_t> labels;
  // Dataset indices; continuous noise for an example is drawn from the child
  // stream with this id, so it does not depend on batch composition.
  std::vector<std::uint64_t> ids;
  // Examples that receive continuous noise when a noise spec is supplied.
  std::vector<std::uint8_t> noisy;

  // ids default to 0..n-1 and every example is noise-eligible.
  static Batch from_examples(std::span<const noise::Example> examples,
                             std::span<const std::uint64_t> ids = {});
  std::size_t size() const { return tokens.size(); }
};

struct TokenTrace {
  adapter::ForwardTrace layer1;
  Vector activation;
  adapter::ForwardTrace layer2;
};

struct ExampleTrace {
  std::vector<TokenTrace> tokens;  // valid positions only
  Vector logits;
  Vector probs;
  std::size_t label = 0;
};

struct ModelTrace {
  Regime regime = Regime::Stage1;
  std::vector<ExampleTrace> examples;
};

struct LossResult {
  double loss = 0.0;
  ModelTrace trace;
};

/// Mean cross-entropy over the batch. Continuous noise is a Stage-I mechanism
/// and is rejected in any other regime; example b draws it from
/// rng->child(batch.ids[b]) and `rng` itself is not advanced. `theta` is required for
/// Stage2Compensated and Inference.
///
/// `replay` (oracle support) pins every token's active set and beta to the
/// values recorded in an earlier trace of the same batch, so finite
/// differences see the same stop-gradient constants as backward_full.
LossResult forward_loss(const Backbone& backbone, const Batch& batch, Regime regime,
                        const ModelTheta* theta,
                        const std::optional<noise::ContinuousNoiseSpec>& continuous_noise,
                        numerics::RngStream* rng, const ModelTrace* replay = nullptr);

struct ModelGradients {
  adapter::LayerGradients layer1;
  adapter::LayerGradients layer2;

  std::vector<std::string> block_names() const;  // "L1.A", "L2.B3", ...
};

/// Gradients of the mean cross-entropy for the regime's trainable blocks.
ModelGradients backward_full(const Backbone& backbone, const ModelTrace& trace, Regime regime);

/// Same chain rule with caller-supplied dL/dlogits per example.
ModelGradients backward_from_logits(const Backbone& backbone, const ModelTrace& trace,
                                    std::span<const Vector> dlogits, Regime regime);

enum class InferenceMode : std::uint8_t {
  Masked,          // poisoning experts masked, compensated by theta
  MaskedNoComp,    // poisoning experts masked, theta = 0
  Unmasked,        // every expert mixes with its gate weight
};

std::string_view to_string(InferenceMode mode);

std::size_t predict(const Backbone& backbone, const noise::Example& example, InferenceMode mode,
                    const ModelTheta* theta);

/// Fraction of examples whose argmax class equals the label.
double accuracy(const Backbone& backbone, const noise::Dataset& dataset, InferenceMode mode,
                const ModelTheta* theta);

/// Accuracy under a training regime's forward (used for per-epoch reports).
double regime_accuracy(const Backbone& backbone, const noise::Dataset& dataset, Regime regime,
                       const ModelTheta* theta);

}  // namespace lope::model
