#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lope/numerics.hpp"

// Asymmetric LoRA layer with dedicated poisoning experts.
//
//   y = W0 x + sum_i c_i B_i A x
//
// A (r x d_in) is shared; each expert B_i is d_out x r. The router produces
// omega = softmax(W_gateᵀ A x) with W_gate of shape r x N. How the mixing
// coefficients c_i are derived from omega is what distinguishes the regimes.
namespace lope::adapter {

using numerics::Matrix;
using numerics::Vector;

enum class Regime : std::uint8_t {
  Stage1,             // A and poisoning experts train; normal experts and gate frozen
  Stage2,             // A, normal experts and gate train; poisoning experts frozen
  Stage2Compensated,  // Stage2 with dependency-weighted mixing
  Inference,          // poisoning experts masked, everything frozen
  Joint,              // single-stage baseline: every adapter block trains
};

std::string_view to_string(Regime regime);
Regime parse_regime(std::string_view name);

// Which blocks are frozen. experts[i] != 0 means B_i is frozen.
struct FreezeFlags {
  bool a = false;
  std::vector<std::uint8_t> experts;
  bool gate = false;

  friend bool operator==(const FreezeFlags&, const FreezeFlags&) = default;
};

class LopeLayer {
 public:
  LopeLayer(Matrix base, Matrix a, std::vector<Matrix> experts, Matrix gate,
            std::vector<std::size_t> poison, std::size_t top_k);

  /// Zero-output initialization: A ~ N(0, 1/sqrt(d_in)), every B_i = 0,
  /// W_gate = 0 (uniform routing).
  static LopeLayer initialize(Matrix base, std::size_t rank, std::size_t num_experts,
                              std::vector<std::size_t> poison, std::size_t top_k,
                              numerics::RngStream& rng);

  std::size_t d_in() const { return base_.cols(); }
  std::size_t d_out() const { return base_.rows(); }
  std::size_t rank() const { return a_.rows(); }
  std::size_t num_experts() const { return experts_.size(); }
  std::size_t top_k() const { return top_k_; }

  const std::vector<std::size_t>& poison() const { return poison_; }
  std::vector<std::size_t> normal_experts() const;
  bool is_poison(std::size_t expert) const;

  const Matrix& base() const { return base_; }
  const Matrix& a() const { return a_; }
  const Matrix& expert(std::size_t i) const { return experts_.at(i); }
  const std::vector<Matrix>& experts() const { return experts_; }
  const Matrix& gate_weights() const { return gate_; }

  Matrix& mutable_a() { return a_; }
  Matrix& mutable_expert(std::size_t i) { return experts_.at(i); }
  Matrix& mutable_gate_weights() { return gate_; }

  const FreezeFlags& freeze() const { return freeze_; }
  void set_freeze(FreezeFlags flags);
  // Sets the freeze flags that `regime` prescribes.
  void configure_for(Regime regime);

  // A masked layer only runs the inference regime.
  bool masked() const { return masked_; }

  friend LopeLayer mask_poison(const LopeLayer& layer);
  friend bool operator==(const LopeLayer&, const LopeLayer&) = default;

 private:
  void validate() const;

  Matrix base_;
  Matrix a_;
  std::vector<Matrix> experts_;
  Matrix gate_;
  std::vector<std::size_t> poison_;
  std::size_t top_k_;
  FreezeFlags freeze_;
  bool masked_ = false;
};

/// Freeze flags a regime prescribes for a layer with this poison set.
FreezeFlags freeze_for(Regime regime, std::size_t num_experts,
                       std::span<const std::size_t> poison);

struct GateOutput {
  Vector omega;
  // Indices of the K largest omega over all experts, ascending. Ties favor the
  // lower index.
  std::vector<std::size_t> active;
};

/// Per-expert dependency on the poisoning experts; zero at poison indices.
struct DependencyVector {
  Vector theta;

  void validate(std::size_t num_experts, std::span<const std::size_t> poison) const;
  static DependencyVector zeros(std::size_t num_experts) { return {Vector(num_experts, 0.0)}; }

  friend bool operator==(const DependencyVector&, const DependencyVector&) = default;
};

struct ForwardTrace {
  Regime regime = Regime::Stage1;
  Vector x;
  Vector ax;
  Vector logits;  // router logits; empty when omega was overridden
  Vector omega;
  std::vector<Vector> expert_outputs;  // y_i = B_i A x for every expert
  std::vector<std::size_t> active;     // normal experts selected for mixing
  Vector theta;                        // empty unless compensated/inference
  Vector coefficients;                 // effective c_i; zero outside the mixing set
  double beta = 1.0;
  Vector y;
  // Set when omega or the active set came from an override; such traces are
  // for identity checks only and cannot be differentiated.
  bool overridden = false;
};

/// Knobs used by oracles and identity checks. Production callers pass none.
struct ForwardOverrides {
  std::optional<Vector> omega;                     // replaces the router output
  std::optional<std::vector<std::size_t>> active;  // replaces top-K selection
  std::optional<double> beta;                      // replaces the beta rule
};

/// Top-k of `omega` restricted to `candidates`, returned in ascending index
/// order. Ties favor the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> omega,
                                       std::span<const std::size_t> candidates, std::size_t k);

GateOutput gate(const LopeLayer& layer, std::span<const double> x);

/// Poisoning experts always mix with weight omega_D; normal experts mix when
/// they are among the top-K normal experts. Numerically identical to
/// forward_stage2 without dependencies.
ForwardTrace forward_stage1(const LopeLayer& layer, std::span<const double> x,
                            const ForwardOverrides& overrides = {});

/// Without `theta`: plain mixing, beta = 1. With `theta`: every active normal
/// expert's weight is amplified by (1 + theta_i) and the whole adapter term is
/// scaled by beta = sum(omega_i) / sum((1 + theta_i) omega_i) over the active
/// normal experts, so their combined weight is conserved.
ForwardTrace forward_stage2(const LopeLayer& layer, std::span<const double> x,
                            const DependencyVector* theta = nullptr,
                            const ForwardOverrides& overrides = {});

/// Poisoning experts are removed before top-K selection; the gate weights of
/// the surviving active experts are renormalized to sum to one and then
/// compensated as in forward_stage2, so the effective weights sum to one.
ForwardTrace forward_inference(const LopeLayer& layer, std::span<const double> x,
                               const DependencyVector& theta,
                               const ForwardOverrides& overrides = {});

/// Inference forward for a layer returned by mask_poison.
ForwardTrace forward_masked(const LopeLayer& masked_layer, std::span<const double> x,
                            const DependencyVector& theta);

struct LayerGradients {
  std::optional<Matrix> a;
  std::vector<std::optional<Matrix>> experts;
  std::optional<Matrix> gate;
  Vector dx;

  // Names of the blocks that carry a gradient, e.g. {"A", "B0", "W_gate"}.
  std::vector<std::string> block_names() const;
};

/// Analytic gradients of dyᵀ y for the blocks `regime` leaves trainable, plus
/// dL/dx. theta and beta are constants (stop-gradient). Inference returns dx
/// only.
LayerGradients backward(const LopeLayer& layer, const ForwardTrace& trace,
                        std::span<const double> dy, Regime regime);

/// theta_i = mean over inputs (and poisoning experts) of
/// cosine_sim(B_i A x, B_D A x); zero at poison indices.
DependencyVector calibrate_theta(const LopeLayer& layer, std::span<const Vector> inputs);

/// Copy of `layer` with the poisoning experts excluded from gating and mixing.
/// Idempotent; parameters are untouched.
LopeLayer mask_poison(const LopeLayer& layer);

/// Dispatches to the forward for `regime`. `theta` is required for
/// Stage2Compensated and Inference, ignored otherwise.
ForwardTrace forward(const LopeLayer& layer, std::span<const double> x, Regime regime,
                     const DependencyVector* theta, const ForwardOverrides& overrides = {});

}  // namespace lope::adapter
