#include "lope/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "lope/errors.hpp"

namespace lope::model {

std::string_view to_string(StageMarker marker) {
  switch (marker) {
    case StageMarker::Init: return "init";
    case StageMarker::PostStage1: return "post-stage1";
    case StageMarker::PostStage2: return "post-stage2";
  }
  return "unknown";
}

std::string_view to_string(InferenceMode mode) {
  switch (mode) {
    case InferenceMode::Masked: return "masked";
    case InferenceMode::MaskedNoComp: return "masked_nocomp";
    case InferenceMode::Unmasked: return "unmasked";
  }
  return "unknown";
}

void BackboneConfig::validate() const {
  if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1 || rank < 1) {
    throw ValidationError("backbone dimensions must be positive");
  }
  if (num_classes < 2) throw ValidationError("backbone needs at least two classes");
  if (num_poison < 1 || num_poison >= num_experts) {
    throw ValidationError(fmt::format(
        "need 1 <= poisoning experts < experts, got {} of {}", num_poison, num_experts));
  }
  if (top_k < 1 || top_k > num_experts) {
    throw ValidationError(fmt::format("top_k {} outside [1, {}]", top_k, num_experts));
  }
}

std::vector<std::size_t> BackboneConfig::poison_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = num_experts - num_poison; i < num_experts; ++i) out.push_back(i);
  return out;
}

Backbone make_backbone(const BackboneConfig& config, numerics::RngStream& rng) {
  config.validate();
  numerics::RngStream embed_rng = rng.child(1);
  numerics::RngStream l1_rng = rng.child(2);
  numerics::RngStream l2_rng = rng.child(3);
  Matrix embedding = numerics::random_normal(config.vocab_size, config.embed_dim, 1.0, embed_rng);
  Matrix w1 = numerics::random_normal(config.hidden_dim, config.embed_dim,
                                      1.0 / std::sqrt(static_cast<double>(config.embed_dim)), l1_rng);
  Matrix w2 = numerics::random_normal(config.num_classes, config.hidden_dim,
                                      1.0 / std::sqrt(static_cast<double>(config.hidden_dim)), l2_rng);
  auto layer1 = LopeLayer::initialize(std::move(w1), config.rank, config.num_experts,
                                      config.poison_indices(), config.top_k, l1_rng);
  auto layer2 = LopeLayer::initialize(std::move(w2), config.rank, config.num_experts,
                                      config.poison_indices(), config.top_k, l2_rng);
  return {std::move(embedding), std::move(layer1), std::move(layer2), StageMarker::Init};
}

ModelTheta ModelTheta::zeros(const Backbone& backbone) {
  return {DependencyVector::zeros(backbone.layer1.num_experts()),
          DependencyVector::zeros(backbone.layer2.num_experts())};
}

Batch Batch::from_examples(std::span<const noise::Example> examples,
                           std::span<const std::uint64_t> ids) {
  if (!ids.empty() && ids.size() != examples.size()) {
    throw ShapeError("batch ids must match the number of examples");
  }
  Batch b;
  std::size_t longest = 0;
  for (const auto& ex : examples) longest = std::max(longest, ex.tokens.size());
  for (const auto& ex : examples) {
    if (ex.tokens.empty()) throw ValidationError("batch example has no tokens");
    noise::TokenSeq padded = ex.tokens;
    std::vector<std::uint8_t> mask(longest, 0);
    std::fill(mask.begin(), mask.begin() + static_cast<std::ptrdiff_t>(ex.tokens.size()), 1);
    padded.resize(longest, 0);
    b.tokens.push_back(std::move(padded));
    b.mask.push_back(std::move(mask));
    b.labels.push_back(ex.label);
  }
  for (std::size_t i = 0; i < examples.size(); ++i) b.ids.push_back(ids.empty() ? i : ids[i]);
  b.noisy.assign(examples.size(), 1);
  return b;
}

namespace {

const DependencyVector* layer_theta(const ModelTheta* theta, int layer) {
  if (theta == nullptr) return nullptr;
  return layer == 1 ? &theta->layer1 : &theta->layer2;
}

adapter::ForwardOverrides replay_overrides(const adapter::ForwardTrace* source, Regime regime) {
  adapter::ForwardOverrides o;
  if (source == nullptr) return o;
  o.active = source->active;
  if (regime == Regime::Stage2Compensated || regime == Regime::Inference) o.beta = source->beta;
  return o;
}

ExampleTrace forward_example(const Backbone& backbone, const Matrix& embedded,
                             std::span<const std::uint8_t> mask, Regime regime,
                             const ModelTheta* theta, const ExampleTrace* replay = nullptr) {
  ExampleTrace ex;
  Vector logits(backbone.num_classes(), 0.0);
  for (std::size_t t = 0; t < embedded.rows(); ++t) {
    if (mask[t] == 0) continue;
    TokenTrace tok;
    const auto e = embedded.row(t);
    const TokenTrace* source = nullptr;
    if (replay != nullptr) {
      if (ex.tokens.size() >= replay->tokens.size()) throw ShapeError("replay trace is too short");
      source = &replay->tokens[ex.tokens.size()];
    }
    tok.layer1 = adapter::forward(backbone.layer1, e, regime, layer_theta(theta, 1),
                                  replay_overrides(source ? &source->layer1 : nullptr, regime));
    tok.activation.resize(tok.layer1.y.size());
    std::transform(tok.layer1.y.begin(), tok.layer1.y.end(), tok.activation.begin(),
                   [](double u) { return std::tanh(u); });
    tok.layer2 = adapter::forward(backbone.layer2, tok.activation, regime, layer_theta(theta, 2),
                                  replay_overrides(source ? &source->layer2 : nullptr, regime));
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += tok.layer2.y[c];
    ex.tokens.push_back(std::move(tok));
  }
  if (ex.tokens.empty()) throw ValidationError("example has no valid positions");
  const double inv = 1.0 / static_cast<double>(ex.tokens.size());
  for (auto& v : logits) v *= inv;
  ex.probs = numerics::softmax(logits);
  ex.logits = std::move(logits);
  return ex;
}

Matrix embed(const Backbone& backbone, std::span<const noise::Token> tokens) {
  Matrix out(tokens.size(), backbone.embedding.cols());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= backbone.vocab_size()) {
      throw ValidationError(
          fmt::format("token {} outside vocabulary of {}", tokens[t], backbone.vocab_size()));
    }
    const auto src = backbone.embedding.row(tokens[t]);
    std::copy(src.begin(), src.end(), out.row(t).begin());
  }
  return out;
}

double log_sum_exp(std::span<const double> v) {
  const double hi = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - hi);
  return hi + std::log(s);
}

void accumulate(std::optional<Matrix>& into, const std::optional<Matrix>& g) {
  if (!g) return;
  if (!into) {
    into = *g;
    return;
  }
  auto dst = into->data();
  auto src = g->data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void accumulate(adapter::LayerGradients& into, const adapter::LayerGradients& g) {
  accumulate(into.a, g.a);
  if (into.experts.size() < g.experts.size()) into.experts.resize(g.experts.size());
  for (std::size_t i = 0; i < g.experts.size(); ++i) accumulate(into.experts[i], g.experts[i]);
  accumulate(into.gate, g.gate);
}

// Materializes zero gradients for every block the regime trains, so an
// all-zero upstream gradient still yields the full (zero) gradient set.
adapter::LayerGradients zero_gradients(const LopeLayer& layer, Regime regime) {
  const auto frozen = adapter::freeze_for(regime, layer.num_experts(), layer.poison());
  adapter::LayerGradients g;
  g.experts.resize(layer.num_experts());
  if (!frozen.a) g.a = Matrix(layer.rank(), layer.d_in());
  for (std::size_t i = 0; i < layer.num_experts(); ++i) {
    if (!frozen.experts[i]) g.experts[i] = Matrix(layer.d_out(), layer.rank());
  }
  if (!frozen.gate) g.gate = Matrix(layer.rank(), layer.num_experts());
  return g;
}

}  // namespace

LossResult forward_loss(const Backbone& backbone, const Batch& batch, Regime regime,
                        const ModelTheta* theta,
                        const std::optional<noise::ContinuousNoiseSpec>& continuous_noise,
                        numerics::RngStream* rng, const ModelTrace* replay) {
  if (continuous_noise && regime != Regime::Stage1) {
    throw ValidationError(fmt::format("continuous noise is only legal in stage1, not {}",
                                      adapter::to_string(regime)));
  }
  if (continuous_noise && rng == nullptr) {
    throw ValidationError("continuous noise needs a random stream");
  }
  if ((regime == Regime::Stage2Compensated || regime == Regime::Inference) && theta == nullptr) {
    throw ValidationError(
        fmt::format("regime {} needs dependency vectors", adapter::to_string(regime)));
  }
  if (batch.size() == 0) throw ValidationError("empty batch");

  LossResult result;
  result.trace.regime = regime;
  double total = 0.0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch.labels[b] >= backbone.num_classes()) {
      throw ValidationError(fmt::format("label {} outside {} classes", batch.labels[b],
                                        backbone.num_classes()));
    }
    Matrix embedded = embed(backbone, batch.tokens[b]);
    if (continuous_noise && batch.noisy[b] != 0) {
      numerics::RngStream example_rng = rng->child(batch.ids[b]);
      embedded = noise::inject_continuous(embedded, batch.mask[b], *continuous_noise, example_rng);
    }
    const ExampleTrace* source = nullptr;
    if (replay != nullptr) {
      if (replay->examples.size() != batch.size()) throw ShapeError("replay trace batch mismatch");
      source = &replay->examples[b];
    }
    ExampleTrace ex = forward_example(backbone, embedded, batch.mask[b], regime, theta, source);
    ex.label = batch.labels[b];
    total += log_sum_exp(ex.logits) - ex.logits[ex.label];
    result.trace.examples.push_back(std::move(ex));
  }
  result.loss = total / static_cast<double>(batch.size());
  return result;
}

ModelGradients backward_from_logits(const Backbone& backbone, const ModelTrace& trace,
                                    std::span<const Vector> dlogits, Regime regime) {
  if (trace.regime != regime) {
    throw ValidationError(fmt::format("backward for regime {} given a {} trace",
                                      adapter::to_string(regime), adapter::to_string(trace.regime)));
  }
  if (dlogits.size() != trace.examples.size()) {
    throw ShapeError("one logit gradient per traced example is required");
  }
  ModelGradients grads{zero_gradients(backbone.layer1, regime),
                       zero_gradients(backbone.layer2, regime)};
  for (std::size_t b = 0; b < trace.examples.size(); ++b) {
    const auto& ex = trace.examples[b];
    Vector dz = dlogits[b];
    const double inv = 1.0 / static_cast<double>(ex.tokens.size());
    for (auto& v : dz) v *= inv;
    for (const auto& tok : ex.tokens) {
      auto g2 = adapter::backward(backbone.layer2, tok.layer2, dz, regime);
      Vector du(g2.dx.size());
      for (std::size_t k = 0; k < du.size(); ++k) {
        du[k] = g2.dx[k] * (1.0 - tok.activation[k] * tok.activation[k]);
      }
      auto g1 = adapter::backward(backbone.layer1, tok.layer1, du, regime);
      accumulate(grads.layer2, g2);
      accumulate(grads.layer1, g1);
    }
  }
  return grads;
}

ModelGradients backward_full(const Backbone& backbone, const ModelTrace& trace, Regime regime) {
  std::vector<Vector> dlogits;
  dlogits.reserve(trace.examples.size());
  const double inv_batch = 1.0 / static_cast<double>(trace.examples.size());
  for (const auto& ex : trace.examples) {
    Vector d = ex.probs;
    d[ex.label] -= 1.0;
    for (auto& v : d) v *= inv_batch;
    dlogits.push_back(std::move(d));
  }
  return backward_from_logits(backbone, trace, dlogits, regime);
}

std::vector<std::string> ModelGradients::block_names() const {
  std::vector<std::string> out;
  for (const auto& n : layer1.block_names()) out.push_back("L1." + n);
  for (const auto& n : layer2.block_names()) out.push_back("L2." + n);
  return out;
}

std::size_t predict(const Backbone& backbone, const noise::Example& example, InferenceMode mode,
                    const ModelTheta* theta) {
  Regime regime = Regime::Stage2;
  ModelTheta zeros;
  if (mode == InferenceMode::Masked) {
    if (theta == nullptr) throw ValidationError("masked inference needs dependency vectors");
    regime = Regime::Inference;
  } else if (mode == InferenceMode::MaskedNoComp) {
    zeros = ModelTheta::zeros(backbone);
    theta = &zeros;
    regime = Regime::Inference;
  }
  const Matrix embedded = embed(backbone, example.tokens);
  const std::vector<std::uint8_t> mask(example.tokens.size(), 1);
  const auto ex = forward_example(backbone, embedded, mask, regime, theta);
  return static_cast<std::size_t>(
      std::max_element(ex.logits.begin(), ex.logits.end()) - ex.logits.begin());
}

double accuracy(const Backbone& backbone, const noise::Dataset& dataset, InferenceMode mode,
                const ModelTheta* theta) {
  if (dataset.examples.empty()) throw ValidationError("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (const auto& ex : dataset.examples) {
    if (predict(backbone, ex, mode, theta) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double regime_accuracy(const Backbone& backbone, const noise::Dataset& dataset, Regime regime,
                       const ModelTheta* theta) {
  if (dataset.examples.empty()) throw ValidationError("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (const auto& ex : dataset.examples) {
    const Matrix embedded = embed(backbone, ex.tokens);
    const std::vector<std::uint8_t> mask(ex.tokens.size(), 1);
    const auto tr = forward_example(backbone, embedded, mask, regime, theta);
    const auto cls = static_cast<std::size_t>(
        std::max_element(tr.logits.begin(), tr.logits.end()) - tr.logits.begin());
    if (cls == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

}  // namespace lope::model
