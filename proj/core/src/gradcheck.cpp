#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "lope/errors.hpp"
#include "lope/training.hpp"

namespace lope::training {

using adapter::LopeLayer;
using adapter::Regime;
using numerics::Matrix;
using numerics::RngStream;
using numerics::Vector;

bool GradCheckReport::passed() const {
  return !entries.empty() &&
         std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
}

std::map<std::string, double> GradCheckReport::worst_by_block() const {
  std::map<std::string, double> out;
  for (const auto& e : entries) {
    auto key = fmt::format("{}/{}/{}", e.level, e.regime, e.block);
    auto [it, inserted] = out.emplace(key, e.rel_error);
    if (!inserted) it->second = std::max(it->second, e.rel_error);
  }
  return out;
}

std::size_t GradCheckReport::configs_checked(std::string_view level, std::string_view regime) const {
  std::set<std::size_t> seen;
  for (const auto& e : entries) {
    if (e.level == level && e.regime == regime) seen.insert(e.config);
  }
  return seen.size();
}

double block_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                            double floor) {
  if (analytic.size() != numeric.size()) {
    throw ShapeError(fmt::format("gradient blocks differ in size ({} vs {})", analytic.size(),
                                 numeric.size()));
  }
  double diff = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double d = analytic[i] - numeric[i];
    diff += d * d;
  }
  diff = std::sqrt(diff);
  return diff / std::max({numerics::norm(analytic), numerics::norm(numeric), floor});
}

namespace {

constexpr std::uint64_t kLayerStream = 0x474c;
constexpr std::uint64_t kModelStream = 0x474d;

constexpr Regime kAllRegimes[] = {Regime::Stage1, Regime::Stage2, Regime::Stage2Compensated,
                                  Regime::Inference, Regime::Joint};
constexpr Regime kTrainableRegimes[] = {Regime::Stage1, Regime::Stage2,
                                        Regime::Stage2Compensated, Regime::Joint};

std::size_t between(RngStream& rng, std::size_t lo, std::size_t hi) {
  return lo + rng.index(hi - lo + 1);
}

Vector random_vector(std::size_t n, double stddev, RngStream& rng) {
  Vector v(n);
  for (auto& x : v) x = stddev * rng.normal();
  return v;
}

std::vector<std::size_t> random_poison(std::size_t n, RngStream& rng) {
  const auto count = between(rng, 1, n - 1);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.index(n - i)]);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

LopeLayer random_layer(std::size_t d_in, std::size_t d_out, std::size_t rank, std::size_t n,
                       std::vector<std::size_t> poison, std::size_t top_k, RngStream& rng) {
  auto base = numerics::random_normal(d_out, d_in, 0.5, rng);
  auto a = numerics::random_normal(rank, d_in, 0.5, rng);
  std::vector<Matrix> experts;
  for (std::size_t i = 0; i < n; ++i) experts.push_back(numerics::random_normal(d_out, rank, 0.5, rng));
  auto gate = numerics::random_normal(rank, n, 0.5, rng);
  return {std::move(base), std::move(a), std::move(experts), std::move(gate), std::move(poison), top_k};
}

adapter::DependencyVector random_theta(const LopeLayer& layer, RngStream& rng) {
  auto theta = adapter::DependencyVector::zeros(layer.num_experts());
  for (auto i : layer.normal_experts()) theta.theta[i] = rng.uniform(-0.9, 0.9);
  return theta;
}

Matrix& block_ref(LopeLayer& layer, std::string_view name) {
  if (name == "A") return layer.mutable_a();
  if (name == "W_gate") return layer.mutable_gate_weights();
  if (name.size() > 1 && name[0] == 'B') {
    return layer.mutable_expert(std::stoul(std::string(name.substr(1))));
  }
  throw ValidationError(fmt::format("unknown block {}", name));
}

const Matrix* layer_grad(const adapter::LayerGradients& g, std::string_view name) {
  if (name == "A") return g.a ? &*g.a : nullptr;
  if (name == "W_gate") return g.gate ? &*g.gate : nullptr;
  const auto i = std::stoul(std::string(name.substr(1)));
  return g.experts.at(i) ? &*g.experts[i] : nullptr;
}

// Central differences over the entries of `param`, which the closure reads
// through the owning object.
Vector numeric_gradient(Matrix& param, const std::function<double()>& f, double h) {
  Vector grad(param.size());
  auto data = param.data();
  for (std::size_t k = 0; k < data.size(); ++k) {
    const double saved = data[k];
    data[k] = saved + h;
    const double up = f();
    data[k] = saved - h;
    const double down = f();
    data[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw ValidationError(fmt::format("non-finite loss perturbing coordinate {}", k));
    }
    grad[k] = (up - down) / (2.0 * h);
  }
  return grad;
}

void record(GradCheckReport& report, const GradCheckOptions& options, std::string level,
            Regime regime, std::size_t config, std::string block, Vector analytic,
            const Vector& numeric) {
  if (options.tamper) {
    const auto n = analytic.size();
    Matrix m(1, n, std::move(analytic));
    options.tamper(block, m);
    analytic = m.values();
  }
  const double err = block_relative_error(analytic, numeric);
  report.entries.push_back({std::move(level), std::string(adapter::to_string(regime)), config,
                            std::move(block), err, err <= options.tolerance});
}

void check_layer(GradCheckReport& report, const GradCheckOptions& options, Regime regime,
                 std::size_t config, RngStream rng) {
  const auto d_in = between(rng, 2, 5);
  const auto d_out = between(rng, 2, 4);
  const auto rank = between(rng, 1, 3);
  const auto n = between(rng, 2, 4);
  auto poison = random_poison(n, rng);
  const auto top_k = between(rng, 1, n);
  LopeLayer layer = random_layer(d_in, d_out, rank, n, std::move(poison), top_k, rng);
  const auto theta = random_theta(layer, rng);
  const auto x = random_vector(d_in, 1.0, rng);
  const auto dy = random_vector(d_out, 1.0, rng);
  const bool uses_theta = regime == Regime::Stage2Compensated || regime == Regime::Inference;

  const auto trace = adapter::forward(layer, x, regime, &theta);
  const auto grads = adapter::backward(layer, trace, dy, regime);

  adapter::ForwardOverrides pinned;
  pinned.active = trace.active;
  if (uses_theta) pinned.beta = trace.beta;

  Vector probe = x;
  auto loss = [&] {
    const auto t = adapter::forward(layer, probe, regime, &theta, pinned);
    return numerics::dot(dy, t.y);
  };

  for (const auto& name : grads.block_names()) {
    Matrix& param = block_ref(layer, name);
    const auto numeric = numeric_gradient(param, loss, options.step);
    record(report, options, "layer", regime, config, name, layer_grad(grads, name)->values(),
           numeric);
  }
  Matrix x_param(1, x.size(), x);
  auto x_loss = [&] {
    const auto t = adapter::forward(layer, x_param.row(0), regime, &theta, pinned);
    return numerics::dot(dy, t.y);
  };
  const auto numeric_dx = numeric_gradient(x_param, x_loss, options.step);
  record(report, options, "layer", regime, config, "x", grads.dx, numeric_dx);
}

void check_model(GradCheckReport& report, const GradCheckOptions& options, Regime regime,
                 std::size_t config, RngStream rng) {
  model::BackboneConfig cfg;
  cfg.vocab_size = 6;
  cfg.embed_dim = 4;
  cfg.hidden_dim = 3;
  cfg.num_classes = 2;
  cfg.rank = 2;
  cfg.num_experts = 3;
  cfg.num_poison = 1;
  cfg.top_k = between(rng, 1, 3);
  const auto poison = cfg.poison_indices();

  auto embedding = numerics::random_normal(cfg.vocab_size, cfg.embed_dim, 1.0, rng);
  auto layer1 = random_layer(cfg.embed_dim, cfg.hidden_dim, cfg.rank, cfg.num_experts, poison,
                             cfg.top_k, rng);
  auto layer2 = random_layer(cfg.hidden_dim, cfg.num_classes, cfg.rank, cfg.num_experts, poison,
                             cfg.top_k, rng);
  model::Backbone backbone{std::move(embedding), std::move(layer1), std::move(layer2),
                           model::StageMarker::PostStage1};

  model::ModelTheta theta{random_theta(backbone.layer1, rng), random_theta(backbone.layer2, rng)};

  std::vector<noise::Example> examples(between(rng, 2, 3));
  for (auto& ex : examples) {
    ex.tokens.resize(between(rng, 2, 4));
    for (auto& t : ex.tokens) t = static_cast<noise::Token>(rng.index(cfg.vocab_size));
    ex.label = rng.index(cfg.num_classes);
  }
  const auto batch = model::Batch::from_examples(examples);

  const auto result = model::forward_loss(backbone, batch, regime, &theta, std::nullopt, nullptr);
  const auto grads = model::backward_full(backbone, result.trace, regime);

  auto loss = [&] {
    return model::forward_loss(backbone, batch, regime, &theta, std::nullopt, nullptr,
                               &result.trace)
        .loss;
  };

  const std::pair<LopeLayer*, const adapter::LayerGradients*> layers[] = {
      {&backbone.layer1, &grads.layer1}, {&backbone.layer2, &grads.layer2}};
  for (std::size_t l = 0; l < 2; ++l) {
    auto [layer, g] = layers[l];
    for (const auto& name : g->block_names()) {
      Matrix& param = block_ref(*layer, name);
      const auto numeric = numeric_gradient(param, loss, options.step);
      record(report, options, "model", regime, config, fmt::format("L{}.{}", l + 1, name),
             layer_grad(*g, name)->values(), numeric);
    }
  }
}

}  // namespace

GradCheckReport grad_check_suite(std::uint64_t seed, const GradCheckOptions& options) {
  if (options.configs_per_regime == 0) throw ValidationError("configs_per_regime must be positive");
  if (!(options.step > 0.0) || !(options.tolerance > 0.0)) {
    throw ValidationError("gradient check step and tolerance must be positive");
  }
  GradCheckReport report;
  report.tolerance = options.tolerance;
  const RngStream layer_root(seed, kLayerStream);
  const RngStream model_root(seed, kModelStream);
  for (auto regime : kAllRegimes) {
    const auto r = static_cast<std::uint64_t>(regime);
    for (std::size_t c = 0; c < options.configs_per_regime; ++c) {
      check_layer(report, options, regime, c, layer_root.child(r * 100000 + c));
    }
  }
  if (options.include_model) {
    for (auto regime : kTrainableRegimes) {
      const auto r = static_cast<std::uint64_t>(regime);
      for (std::size_t c = 0; c < options.configs_per_regime; ++c) {
        check_model(report, options, regime, c, model_root.child(r * 100000 + c));
      }
    }
  }
  return report;
}

}  // namespace lope::training
