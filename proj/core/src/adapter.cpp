#include "lope/adapter.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lope/errors.hpp"

namespace lope::adapter {

using numerics::RngStream;

std::string_view to_string(Regime regime) {
  switch (regime) {
    case Regime::Stage1: return "stage1";
    case Regime::Stage2: return "stage2";
    case Regime::Stage2Compensated: return "stage2_compensated";
    case Regime::Inference: return "inference";
    case Regime::Joint: return "joint";
  }
  return "unknown";
}

Regime parse_regime(std::string_view name) {
  for (auto r : {Regime::Stage1, Regime::Stage2, Regime::Stage2Compensated, Regime::Inference,
                 Regime::Joint}) {
    if (to_string(r) == name) return r;
  }
  throw ValidationError(fmt::format("unknown regime '{}'", name));
}

LopeLayer::LopeLayer(Matrix base, Matrix a, std::vector<Matrix> experts, Matrix gate,
                     std::vector<std::size_t> poison, std::size_t top_k)
    : base_(std::move(base)),
      a_(std::move(a)),
      experts_(std::move(experts)),
      gate_(std::move(gate)),
      poison_(std::move(poison)),
      top_k_(top_k) {
  std::sort(poison_.begin(), poison_.end());
  validate();
  freeze_.experts.assign(experts_.size(), 0);
}

LopeLayer LopeLayer::initialize(Matrix base, std::size_t rank, std::size_t num_experts,
                                std::vector<std::size_t> poison, std::size_t top_k,
                                RngStream& rng) {
  const std::size_t d_in = base.cols();
  const std::size_t d_out = base.rows();
  Matrix a = numerics::random_normal(rank, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)), rng);
  std::vector<Matrix> experts(num_experts, Matrix(d_out, rank));
  Matrix gate(rank, num_experts);
  return {std::move(base), std::move(a), std::move(experts), std::move(gate), std::move(poison),
          top_k};
}

void LopeLayer::validate() const {
  const std::size_t n = experts_.size();
  if (n == 0) throw ValidationError("LopeLayer needs at least one expert");
  if (top_k_ < 1 || top_k_ > n) {
    throw ValidationError(fmt::format("top_k {} outside [1, {}]", top_k_, n));
  }
  if (poison_.empty()) throw ValidationError("LopeLayer needs at least one poisoning expert");
  for (std::size_t i = 0; i < poison_.size(); ++i) {
    if (poison_[i] >= n) {
      throw ValidationError(fmt::format("poison index {} outside [0, {})", poison_[i], n));
    }
    if (i > 0 && poison_[i] == poison_[i - 1]) {
      throw ValidationError(fmt::format("duplicate poison index {}", poison_[i]));
    }
  }
  if (a_.cols() != base_.cols()) {
    throw ShapeError(fmt::format("A {} does not match W0 {} (d_in)", a_.shape_string(),
                                 base_.shape_string()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (experts_[i].rows() != base_.rows() || experts_[i].cols() != a_.rows()) {
      throw ShapeError(fmt::format("expert B{} is {}, expected {}x{}", i, experts_[i].shape_string(),
                                   base_.rows(), a_.rows()));
    }
  }
  if (gate_.rows() != a_.rows() || gate_.cols() != n) {
    throw ShapeError(
        fmt::format("W_gate is {}, expected {}x{}", gate_.shape_string(), a_.rows(), n));
  }
}

std::vector<std::size_t> LopeLayer::normal_experts() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < experts_.size(); ++i) {
    if (!is_poison(i)) out.push_back(i);
  }
  return out;
}

bool LopeLayer::is_poison(std::size_t expert) const {
  return std::binary_search(poison_.begin(), poison_.end(), expert);
}

void LopeLayer::set_freeze(FreezeFlags flags) {
  if (flags.experts.size() != experts_.size()) {
    throw ShapeError(fmt::format("freeze flags cover {} experts, layer has {}",
                                 flags.experts.size(), experts_.size()));
  }
  freeze_ = std::move(flags);
}

void LopeLayer::configure_for(Regime regime) {
  set_freeze(freeze_for(regime, experts_.size(), poison_));
}

FreezeFlags freeze_for(Regime regime, std::size_t num_experts,
                       std::span<const std::size_t> poison) {
  auto poisoned = [&](std::size_t i) {
    return std::find(poison.begin(), poison.end(), i) != poison.end();
  };
  FreezeFlags f;
  f.experts.assign(num_experts, 0);
  switch (regime) {
    case Regime::Stage1:
      f.gate = true;
      for (std::size_t i = 0; i < num_experts; ++i) f.experts[i] = poisoned(i) ? 0 : 1;
      break;
    case Regime::Stage2:
    case Regime::Stage2Compensated:
      for (std::size_t i = 0; i < num_experts; ++i) f.experts[i] = poisoned(i) ? 1 : 0;
      break;
    case Regime::Inference:
      f.a = true;
      f.gate = true;
      f.experts.assign(num_experts, 1);
      break;
    case Regime::Joint:
      break;
  }
  return f;
}

void DependencyVector::validate(std::size_t num_experts, std::span<const std::size_t> poison) const {
  if (theta.size() != num_experts) {
    throw ShapeError(
        fmt::format("dependency vector has {} entries, layer has {} experts", theta.size(), num_experts));
  }
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (!(std::abs(theta[i]) <= 1.0)) {
      throw ValidationError(fmt::format("theta[{}] = {} outside [-1, 1]", i, theta[i]));
    }
  }
  for (auto p : poison) {
    if (theta[p] != 0.0) {
      throw ValidationError(fmt::format("theta at poison index {} must be 0, got {}", p, theta[p]));
    }
  }
}

std::vector<std::size_t> top_k_indices(std::span<const double> omega,
                                       std::span<const std::size_t> candidates, std::size_t k) {
  std::vector<std::size_t> order(candidates.begin(), candidates.end());
  std::stable_sort(order.begin(), order.end(), [&](std::size_t lhs, std::size_t rhs) {
    if (omega[lhs] != omega[rhs]) return omega[lhs] > omega[rhs];
    return lhs < rhs;
  });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

void check_input(const LopeLayer& layer, std::span<const double> x) {
  if (x.size() != layer.d_in()) {
    throw ShapeError(fmt::format("input has length {}, layer expects d_in = {}", x.size(), layer.d_in()));
  }
}

// Shared front half of every regime: A x, router, expert outputs.
ForwardTrace begin_trace(const LopeLayer& layer, std::span<const double> x, Regime regime,
                         const ForwardOverrides& overrides) {
  check_input(layer, x);
  ForwardTrace t;
  t.regime = regime;
  t.x.assign(x.begin(), x.end());
  t.ax = numerics::matvec(layer.a(), x);
  if (overrides.omega) {
    if (overrides.omega->size() != layer.num_experts()) {
      throw ShapeError("omega override has the wrong length");
    }
    t.omega = *overrides.omega;
    t.overridden = true;
  } else {
    t.logits = numerics::matvec_t(layer.gate_weights(), t.ax);
    t.omega = numerics::softmax(t.logits);
  }
  t.expert_outputs.reserve(layer.num_experts());
  for (const auto& b : layer.experts()) t.expert_outputs.push_back(numerics::matvec(b, t.ax));
  return t;
}

std::vector<std::size_t> select_active(const LopeLayer& layer, const ForwardTrace& t,
                                       const ForwardOverrides& overrides) {
  if (overrides.active) {
    for (auto i : *overrides.active) {
      if (i >= layer.num_experts() || layer.is_poison(i)) {
        throw ValidationError(fmt::format("active override contains invalid expert {}", i));
      }
    }
    return *overrides.active;
  }
  const auto normals = layer.normal_experts();
  // Logits order the experts like omega but do not tie on underflow.
  return top_k_indices(t.logits.empty() ? t.omega : t.logits, normals, layer.top_k());
}

// Gate weights of the active experts rescaled to sum to one. From the logits
// this is a softmax over the active subset, which cannot underflow to 0/0.
Vector renormalized(const ForwardTrace& t) {
  Vector out;
  out.reserve(t.active.size());
  if (!t.logits.empty()) {
    for (auto i : t.active) out.push_back(t.logits[i]);
    return numerics::softmax(out);
  }
  double mass = 0.0;
  for (auto i : t.active) mass += t.omega[i];
  if (!(mass > 0.0)) throw ValidationError("active normal experts carry no gate weight");
  for (auto i : t.active) out.push_back(t.omega[i] / mass);
  return out;
}

void finish_trace(const LopeLayer& layer, ForwardTrace& t) {
  Vector y = numerics::matvec(layer.base(), t.x);
  for (std::size_t i = 0; i < layer.num_experts(); ++i) {
    const double c = t.coefficients[i];
    if (c == 0.0) continue;
    const auto& yi = t.expert_outputs[i];
    for (std::size_t o = 0; o < y.size(); ++o) y[o] += c * yi[o];
  }
  numerics::require_finite(y, "adapter forward output");
  t.y = std::move(y);
}

ForwardTrace mix_training(const LopeLayer& layer, std::span<const double> x, Regime regime,
                          const DependencyVector* theta, const ForwardOverrides& overrides) {
  if (layer.masked()) {
    throw ValidationError("a masked layer only supports the inference regime");
  }
  ForwardTrace t = begin_trace(layer, x, regime, overrides);
  if (overrides.active) t.overridden = true;
  t.active = select_active(layer, t, overrides);
  t.coefficients.assign(layer.num_experts(), 0.0);

  if (theta == nullptr) {
    for (auto p : layer.poison()) t.coefficients[p] = t.omega[p];
    for (auto i : t.active) t.coefficients[i] = t.omega[i];
    t.beta = 1.0;
  } else {
    theta->validate(layer.num_experts(), layer.poison());
    t.theta = theta->theta;
    double plain = 0.0;
    double amplified = 0.0;
    for (auto i : t.active) {
      plain += t.omega[i];
      amplified += (1.0 + t.theta[i]) * t.omega[i];
    }
    if (overrides.beta) {
      t.beta = *overrides.beta;
    } else if (amplified > 0.0) {
      t.beta = plain / amplified;
    } else if (plain == 0.0) {
      t.beta = 1.0;
    } else {
      throw ValidationError("compensated weights of the active experts sum to zero");
    }
    for (auto p : layer.poison()) t.coefficients[p] = t.beta * t.omega[p];
    for (auto i : t.active) t.coefficients[i] = t.beta * ((1.0 + t.theta[i]) * t.omega[i]);
  }
  finish_trace(layer, t);
  return t;
}

}  // namespace

GateOutput gate(const LopeLayer& layer, std::span<const double> x) {
  check_input(layer, x);
  GateOutput g;
  g.omega = numerics::softmax(numerics::matvec_t(layer.gate_weights(), numerics::matvec(layer.a(), x)));
  std::vector<std::size_t> all(layer.num_experts());
  std::iota(all.begin(), all.end(), std::size_t{0});
  g.active = top_k_indices(g.omega, all, layer.top_k());
  return g;
}

ForwardTrace forward_stage1(const LopeLayer& layer, std::span<const double> x,
                            const ForwardOverrides& overrides) {
  return mix_training(layer, x, Regime::Stage1, nullptr, overrides);
}

ForwardTrace forward_stage2(const LopeLayer& layer, std::span<const double> x,
                            const DependencyVector* theta, const ForwardOverrides& overrides) {
  return mix_training(layer, x, theta ? Regime::Stage2Compensated : Regime::Stage2, theta,
                      overrides);
}

ForwardTrace forward_inference(const LopeLayer& layer, std::span<const double> x,
                               const DependencyVector& theta, const ForwardOverrides& overrides) {
  if (layer.normal_experts().empty()) {
    throw ValidationError("no normal experts remain after masking");
  }
  theta.validate(layer.num_experts(), layer.poison());
  ForwardTrace t = begin_trace(layer, x, Regime::Inference, overrides);
  if (overrides.active) t.overridden = true;
  t.active = select_active(layer, t, overrides);
  t.theta = theta.theta;
  t.coefficients.assign(layer.num_experts(), 0.0);

  const Vector renorm = renormalized(t);
  double amplified = 0.0;
  for (std::size_t k = 0; k < t.active.size(); ++k) {
    amplified += (1.0 + t.theta[t.active[k]]) * renorm[k];
  }
  if (overrides.beta) {
    t.beta = *overrides.beta;
  } else if (amplified > 0.0) {
    t.beta = 1.0 / amplified;
  } else {
    throw ValidationError("compensated weights of the active experts sum to zero");
  }
  for (std::size_t k = 0; k < t.active.size(); ++k) {
    const auto i = t.active[k];
    t.coefficients[i] = t.beta * ((1.0 + t.theta[i]) * renorm[k]);
  }
  finish_trace(layer, t);
  return t;
}

ForwardTrace forward_masked(const LopeLayer& masked_layer, std::span<const double> x,
                            const DependencyVector& theta) {
  if (!masked_layer.masked()) throw ValidationError("forward_masked needs a masked layer");
  return forward_inference(masked_layer, x, theta);
}

ForwardTrace forward(const LopeLayer& layer, std::span<const double> x, Regime regime,
                     const DependencyVector* theta, const ForwardOverrides& overrides) {
  switch (regime) {
    case Regime::Stage1:
      return forward_stage1(layer, x, overrides);
    case Regime::Stage2:
    case Regime::Joint: {
      auto t = forward_stage2(layer, x, nullptr, overrides);
      t.regime = regime;
      return t;
    }
    case Regime::Stage2Compensated:
      if (theta == nullptr) throw ValidationError("compensated regime needs a dependency vector");
      return forward_stage2(layer, x, theta, overrides);
    case Regime::Inference:
      if (theta == nullptr) throw ValidationError("inference regime needs a dependency vector");
      return forward_inference(layer, x, *theta, overrides);
  }
  throw ValidationError("unknown regime");
}

std::vector<std::string> LayerGradients::block_names() const {
  std::vector<std::string> names;
  if (a) names.emplace_back("A");
  for (std::size_t i = 0; i < experts.size(); ++i) {
    if (experts[i]) names.push_back(fmt::format("B{}", i));
  }
  if (gate) names.emplace_back("W_gate");
  return names;
}

LayerGradients backward(const LopeLayer& layer, const ForwardTrace& trace,
                        std::span<const double> dy, Regime regime) {
  const bool traced_as_joint = trace.regime == Regime::Stage2 && regime == Regime::Joint;
  if (trace.regime != regime && !traced_as_joint) {
    throw ValidationError(fmt::format("backward for regime {} given a {} trace", to_string(regime),
                                      to_string(trace.regime)));
  }
  if (trace.overridden) throw ValidationError("cannot differentiate a trace built from overrides");
  if (dy.size() != layer.d_out()) {
    throw ShapeError(fmt::format("dy has length {}, layer d_out is {}", dy.size(), layer.d_out()));
  }
  const std::size_t n = layer.num_experts();
  const FreezeFlags frozen = freeze_for(regime, n, layer.poison());

  // dL/dc_i = dy · y_i, then dL/domega_i through the regime's coefficient map.
  Vector domega(n, 0.0);
  switch (regime) {
    case Regime::Stage1:
    case Regime::Stage2:
    case Regime::Joint:
      for (auto p : layer.poison()) domega[p] = numerics::dot(dy, trace.expert_outputs[p]);
      for (auto i : trace.active) domega[i] = numerics::dot(dy, trace.expert_outputs[i]);
      break;
    case Regime::Stage2Compensated:
      for (auto p : layer.poison()) domega[p] = trace.beta * numerics::dot(dy, trace.expert_outputs[p]);
      for (auto i : trace.active) {
        domega[i] = trace.beta * (1.0 + trace.theta[i]) * numerics::dot(dy, trace.expert_outputs[i]);
      }
      break;
    case Regime::Inference:
      break;
  }

  Vector dlogits(n, 0.0);
  if (regime == Regime::Inference) {
    // c_i = beta (1 + theta_i) w_i with w the softmax over the active logits,
    // so only the active logits receive gradient.
    const Vector w = renormalized(trace);
    Vector dw(w.size());
    double inner = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const auto i = trace.active[k];
      dw[k] = trace.beta * (1.0 + trace.theta[i]) * numerics::dot(dy, trace.expert_outputs[i]);
      inner += w[k] * dw[k];
    }
    for (std::size_t k = 0; k < w.size(); ++k) dlogits[trace.active[k]] = w[k] * (dw[k] - inner);
  } else {
    // Softmax backward: dlogit_j = omega_j (domega_j - sum_k omega_k domega_k).
    const double inner = numerics::dot(trace.omega, domega);
    for (std::size_t j = 0; j < n; ++j) dlogits[j] = trace.omega[j] * (domega[j] - inner);
  }

  LayerGradients g;
  g.experts.resize(n);

  Vector dax = numerics::matvec(layer.gate_weights(), dlogits);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = trace.coefficients[i];
    if (c != 0.0) {
      const Vector back = numerics::matvec_t(layer.expert(i), dy);
      for (std::size_t k = 0; k < dax.size(); ++k) dax[k] += c * back[k];
    }
    if (!frozen.experts[i]) {
      Matrix db(layer.d_out(), layer.rank());
      numerics::add_outer(db, dy, trace.ax, c);
      g.experts[i] = std::move(db);
    }
  }
  if (!frozen.gate) {
    Matrix dgate(layer.rank(), n);
    numerics::add_outer(dgate, trace.ax, dlogits);
    g.gate = std::move(dgate);
  }
  if (!frozen.a) {
    Matrix da(layer.rank(), layer.d_in());
    numerics::add_outer(da, dax, trace.x);
    g.a = std::move(da);
  }
  g.dx = numerics::matvec_t(layer.base(), dy);
  const Vector via_a = numerics::matvec_t(layer.a(), dax);
  for (std::size_t k = 0; k < g.dx.size(); ++k) g.dx[k] += via_a[k];
  return g;
}

DependencyVector calibrate_theta(const LopeLayer& layer, std::span<const Vector> inputs) {
  if (layer.num_experts() < 2) throw ValidationError("calibration needs at least two experts");
  if (inputs.empty()) throw ValidationError("calibration set is empty");
  DependencyVector dep = DependencyVector::zeros(layer.num_experts());
  const auto normals = layer.normal_experts();
  for (const auto& x : inputs) {
    check_input(layer, x);
    const Vector ax = numerics::matvec(layer.a(), x);
    std::vector<Vector> poison_out;
    for (auto p : layer.poison()) poison_out.push_back(numerics::matvec(layer.expert(p), ax));
    for (auto i : normals) {
      const Vector yi = numerics::matvec(layer.expert(i), ax);
      double s = 0.0;
      for (const auto& yd : poison_out) s += numerics::cosine_sim(yi, yd);
      dep.theta[i] += s / static_cast<double>(poison_out.size());
    }
  }
  for (auto i : normals) {
    dep.theta[i] = std::clamp(dep.theta[i] / static_cast<double>(inputs.size()), -1.0, 1.0);
  }
  return dep;
}

LopeLayer mask_poison(const LopeLayer& layer) {
  if (layer.normal_experts().empty()) {
    throw ValidationError("no normal experts remain after masking");
  }
  LopeLayer out = layer;
  out.masked_ = true;
  out.configure_for(Regime::Inference);
  return out;
}

}  // namespace lope::adapter
