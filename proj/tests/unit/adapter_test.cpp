#include <gtest/gtest.h>

#include <cmath>

#include "lope/adapter.hpp"
#include "lope/errors.hpp"

namespace lope::adapter {
namespace {

using numerics::RngStream;

LopeLayer random_layer(std::size_t d_in, std::size_t d_out, std::size_t r, std::size_t n,
                       std::vector<std::size_t> poison, std::size_t k, RngStream& rng) {
  std::vector<Matrix> experts;
  for (std::size_t i = 0; i < n; ++i) experts.push_back(numerics::random_normal(d_out, r, 0.7, rng));
  return {numerics::random_normal(d_out, d_in, 1.0, rng), numerics::random_normal(r, d_in, 1.0, rng),
          std::move(experts), numerics::random_normal(r, n, 1.0, rng), std::move(poison), k};
}

Vector random_input(std::size_t d, RngStream& rng) {
  Vector x(d);
  for (double& v : x) v = rng.normal();
  return x;
}

DependencyVector random_theta(const LopeLayer& layer, RngStream& rng) {
  auto dep = DependencyVector::zeros(layer.num_experts());
  for (auto i : layer.normal_experts()) dep.theta[i] = rng.uniform(-0.9, 0.9);
  return dep;
}

// Expected y from coefficients, written out without the library's mixing code.
Vector mix(const LopeLayer& layer, std::span<const double> x, std::span<const double> c) {
  Vector ax(layer.rank(), 0.0);
  for (std::size_t k = 0; k < layer.rank(); ++k) {
    for (std::size_t j = 0; j < layer.d_in(); ++j) ax[k] += layer.a()(k, j) * x[j];
  }
  Vector y(layer.d_out(), 0.0);
  for (std::size_t o = 0; o < layer.d_out(); ++o) {
    for (std::size_t j = 0; j < layer.d_in(); ++j) y[o] += layer.base()(o, j) * x[j];
    for (std::size_t i = 0; i < layer.num_experts(); ++i) {
      double bi = 0.0;
      for (std::size_t k = 0; k < layer.rank(); ++k) bi += layer.expert(i)(o, k) * ax[k];
      y[o] += c[i] * bi;
    }
  }
  return y;
}

TEST(Gate, ZeroWeightsGiveUniformRouting) {
  RngStream rng(1, 1);
  auto layer = LopeLayer::initialize(Matrix(3, 5, 1.0), 2, 4, {3}, 2, rng);
  auto g = gate(layer, Vector{1, -1, 2, 0, 1});
  for (double w : g.omega) EXPECT_DOUBLE_EQ(w, 0.25);
  EXPECT_EQ(g.active, (std::vector<std::size_t>{0, 1}));
}

TEST(Gate, ClosedFormSoftmax) {
  LopeLayer layer(Matrix(1, 1), Matrix::from_rows({{1}}), {Matrix(1, 1), Matrix(1, 1)},
                  Matrix::from_rows({{std::log(3.0), 0.0}}), {1}, 2);
  auto g = gate(layer, Vector{1.0});
  EXPECT_NEAR(g.omega[0], 0.75, 1e-15);
  EXPECT_NEAR(g.omega[1], 0.25, 1e-15);
  EXPECT_EQ(g.active, (std::vector<std::size_t>{0, 1}));
}

TEST(Gate, SumsToOne) {
  RngStream rng(2, 2);
  for (int t = 0; t < 50; ++t) {
    auto layer = random_layer(4, 3, 2, 5, {4}, 3, rng);
    auto g = gate(layer, random_input(4, rng));
    double s = 0.0;
    for (double w : g.omega) s += w;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(TopK, TiesFavorLowerIndex) {
  Vector w = {0.2, 0.3, 0.3, 0.2};
  std::vector<std::size_t> all = {0, 1, 2, 3};
  EXPECT_EQ(top_k_indices(w, all, 3), (std::vector<std::size_t>{0, 1, 2}));
  std::vector<std::size_t> some = {0, 3};
  EXPECT_EQ(top_k_indices(w, some, 1), (std::vector<std::size_t>{0}));
}

TEST(Layer, ShapeValidation) {
  EXPECT_THROW(LopeLayer(Matrix(2, 3), Matrix(2, 4), {Matrix(2, 2), Matrix(2, 2)}, Matrix(2, 2), {1}, 1),
               ShapeError);
  EXPECT_THROW(LopeLayer(Matrix(2, 3), Matrix(2, 3), {Matrix(2, 2), Matrix(2, 2)}, Matrix(2, 2), {2}, 1),
               ValidationError);
  EXPECT_THROW(LopeLayer(Matrix(2, 3), Matrix(2, 3), {Matrix(2, 2), Matrix(2, 2)}, Matrix(2, 2), {1}, 3),
               ValidationError);
  RngStream rng(1, 1);
  auto layer = random_layer(3, 2, 2, 3, {2}, 2, rng);
  EXPECT_THROW((void)forward_stage1(layer, Vector{1, 2}), ShapeError);
}

TEST(ForwardStage1, ZeroExpertsGiveBaseOutput) {
  RngStream rng(3, 3);
  auto layer = LopeLayer::initialize(numerics::random_normal(3, 4, 1.0, rng), 2, 3, {2}, 2, rng);
  Vector x = {0.5, -1, 2, 1};
  EXPECT_EQ(forward_stage1(layer, x).y, numerics::matvec(layer.base(), x));
}

TEST(ForwardStage1, ScalarHandExample) {
  // W0 = 2, A = 1, B_D = 3, x = 1, omega = [1]: y = 2 + 3.
  LopeLayer layer(Matrix::from_rows({{2}}), Matrix::from_rows({{1}}), {Matrix::from_rows({{3}})},
                  Matrix(1, 1), {0}, 1);
  auto t = forward_stage1(layer, Vector{1.0});
  ASSERT_EQ(t.y.size(), 1u);
  EXPECT_DOUBLE_EQ(t.y[0], 5.0);
}

TEST(ForwardStage1, PoisonAlwaysMixes) {
  RngStream rng(4, 4);
  auto layer = random_layer(3, 2, 2, 4, {3}, 1, rng);
  auto x = random_input(3, rng);
  auto t = forward_stage1(layer, x);
  ASSERT_EQ(t.active.size(), 1u);
  Vector c(4, 0.0);
  c[3] = t.omega[3];
  c[t.active[0]] = t.omega[t.active[0]];
  auto want = mix(layer, x, c);
  for (std::size_t o = 0; o < 2; ++o) EXPECT_NEAR(t.y[o], want[o], 1e-12);
}

TEST(ForwardStage2, BetaHandExample) {
  // omega [0.6, 0.4], theta_0 = 0.5: amplified 0.9, beta 2/3, weight back to 0.6.
  LopeLayer layer(Matrix(1, 1), Matrix::from_rows({{1}}), {Matrix(1, 1, 1.0), Matrix(1, 1, 1.0)},
                  Matrix(1, 2), {1}, 1);
  DependencyVector theta{{0.5, 0.0}};
  ForwardOverrides o;
  o.omega = Vector{0.6, 0.4};
  auto t = forward_stage2(layer, Vector{1.0}, &theta, o);
  EXPECT_EQ(t.active, (std::vector<std::size_t>{0}));
  EXPECT_NEAR(t.beta, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(t.coefficients[0], 0.6, 1e-15);
  EXPECT_NEAR(t.coefficients[1], 0.4 * 2.0 / 3.0, 1e-15);
}

TEST(ForwardStage2, ZeroThetaIsBitwisePlainPath) {
  RngStream rng(5, 5);
  for (int t = 0; t < 50; ++t) {
    auto layer = random_layer(4, 3, 2, 5, {3, 4}, 2, rng);
    auto x = random_input(4, rng);
    auto zero = DependencyVector::zeros(5);
    auto comp = forward_stage2(layer, x, &zero);
    auto plain = forward_stage2(layer, x, nullptr);
    EXPECT_EQ(comp.beta, 1.0);
    EXPECT_EQ(comp.coefficients, plain.coefficients);
    EXPECT_EQ(comp.y, plain.y);
  }
}

TEST(ForwardStage2, CompensationConservesActiveWeight) {
  RngStream rng(6, 6);
  for (int t = 0; t < 100; ++t) {
    auto layer = random_layer(3, 2, 2, 4, {3}, 2, rng);
    auto theta = random_theta(layer, rng);
    auto tr = forward_stage2(layer, random_input(3, rng), &theta);
    double plain = 0.0, amplified = 0.0, effective = 0.0;
    for (auto i : tr.active) {
      plain += tr.omega[i];
      amplified += (1.0 + theta.theta[i]) * tr.omega[i];
      effective += tr.coefficients[i];
    }
    EXPECT_NEAR(tr.beta * amplified, plain, 1e-12);
    EXPECT_NEAR(effective, plain, 1e-12);
  }
}

TEST(ForwardStage2, ZeroExpertsIgnoreTheta) {
  RngStream rng(7, 7);
  auto layer = LopeLayer::initialize(numerics::random_normal(2, 3, 1.0, rng), 2, 3, {2}, 2, rng);
  DependencyVector theta{{0.7, -0.4, 0.0}};
  Vector x = {1, 2, 3};
  EXPECT_EQ(forward_stage2(layer, x, &theta).y, numerics::matvec(layer.base(), x));
}

TEST(ForwardInference, SingleSurvivor) {
  RngStream rng(8, 8);
  auto layer = random_layer(3, 2, 2, 2, {1}, 1, rng);
  for (double th : {-0.8, 0.0, 0.3, 0.9}) {
    DependencyVector theta{{th, 0.0}};
    auto x = random_input(3, rng);
    auto t = forward_inference(layer, x, theta);
    EXPECT_EQ(t.active, (std::vector<std::size_t>{0}));
    EXPECT_NEAR(t.coefficients[0], 1.0, 1e-15);
    EXPECT_EQ(t.coefficients[1], 0.0);
    auto want = mix(layer, x, Vector{1.0, 0.0});
    for (std::size_t o = 0; o < 2; ++o) EXPECT_NEAR(t.y[o], want[o], 1e-12);
  }
}

TEST(ForwardInference, UniformGateAveragesActiveExperts) {
  RngStream rng(9, 9);
  auto layer = random_layer(3, 2, 2, 5, {4}, 3, rng);
  layer.mutable_gate_weights() = Matrix(2, 5);
  auto x = random_input(3, rng);
  auto t = forward_inference(layer, x, DependencyVector::zeros(5));
  EXPECT_EQ(t.active, (std::vector<std::size_t>{0, 1, 2}));
  auto want = mix(layer, x, Vector{1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0, 0.0});
  for (std::size_t o = 0; o < 2; ++o) EXPECT_NEAR(t.y[o], want[o], 1e-12);
}

TEST(ForwardInference, EqualExpertsAreThetaInvariant) {
  RngStream rng(10, 10);
  auto layer = random_layer(3, 2, 2, 4, {3}, 2, rng);
  const auto bbar = layer.expert(0);
  for (std::size_t i = 1; i < 3; ++i) layer.mutable_expert(i) = bbar;
  for (int t = 0; t < 20; ++t) {
    auto x = random_input(3, rng);
    auto tr = forward_inference(layer, x, random_theta(layer, rng));
    auto want = mix(layer, x, Vector{1.0, 0.0, 0.0, 0.0});
    for (std::size_t o = 0; o < 2; ++o) EXPECT_NEAR(tr.y[o], want[o], 1e-12);
  }
}

TEST(ForwardInference, PoisonNeverMixes) {
  RngStream rng(11, 11);
  auto layer = random_layer(3, 2, 2, 4, {0, 2}, 2, rng);
  // Strongly prefer the poisoning experts in the router.
  for (std::size_t k = 0; k < 2; ++k) {
    layer.mutable_gate_weights()(k, 0) = 50.0;
    layer.mutable_gate_weights()(k, 2) = 50.0;
  }
  auto t = forward_inference(layer, Vector{1, 1, 1}, DependencyVector::zeros(4));
  EXPECT_EQ(t.active, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(t.coefficients[0], 0.0);
  EXPECT_EQ(t.coefficients[2], 0.0);
}

TEST(ForwardInference, NoNormalExpertsIsAnError) {
  LopeLayer layer(Matrix(1, 1), Matrix(1, 1), {Matrix(1, 1)}, Matrix(1, 1), {0}, 1);
  EXPECT_THROW((void)forward_inference(layer, Vector{1.0}, DependencyVector::zeros(1)),
               ValidationError);
  EXPECT_THROW((void)mask_poison(layer), ValidationError);
}

// forward_inference equals forward_stage2 once omega_D is forced to zero and
// the surviving active weights are renormalized, with beta recomputed.
TEST(Masking, EqualsStage2WithPoisonWeightRemoved) {
  RngStream rng(12, 12);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.index(4);
    const std::size_t poisons = 1 + rng.index(n - 1);
    std::vector<std::size_t> poison;
    for (std::size_t p = n - poisons; p < n; ++p) poison.push_back(p);
    const std::size_t k = 1 + rng.index(n - poisons);
    auto layer = random_layer(2 + rng.index(4), 1 + rng.index(3), 1 + rng.index(3), n, poison, k, rng);
    auto x = random_input(layer.d_in(), rng);
    auto theta = random_theta(layer, rng);

    auto inf = forward_inference(layer, x, theta);
    auto g = gate(layer, x);
    auto active = top_k_indices(g.omega, layer.normal_experts(), k);
    double mass = 0.0;
    for (auto i : active) mass += g.omega[i];
    Vector omega(n, 0.0);
    for (auto i : active) omega[i] = g.omega[i] / mass;
    ForwardOverrides o;
    o.omega = omega;
    o.active = active;
    auto s2 = forward_stage2(layer, x, &theta, o);
    EXPECT_EQ(inf.active, active);
    for (std::size_t j = 0; j < inf.y.size(); ++j) EXPECT_NEAR(inf.y[j], s2.y[j], 1e-12);
  }
}

TEST(Masking, IdempotentAndDefinitional) {
  RngStream rng(13, 13);
  auto layer = random_layer(3, 2, 2, 4, {3}, 2, rng);
  auto once = mask_poison(layer);
  EXPECT_TRUE(once.masked());
  EXPECT_EQ(mask_poison(once), once);
  EXPECT_EQ(once.a(), layer.a());
  EXPECT_EQ(once.experts(), layer.experts());
  auto theta = random_theta(layer, rng);
  auto x = random_input(3, rng);
  EXPECT_EQ(forward_masked(once, x, theta).y, forward_inference(layer, x, theta).y);
  EXPECT_THROW((void)forward_stage2(once, x, &theta), ValidationError);
  EXPECT_THROW((void)forward_masked(layer, x, theta), ValidationError);
}

TEST(Freeze, RegimeSets) {
  std::vector<std::size_t> poison = {2};
  auto s1 = freeze_for(Regime::Stage1, 3, poison);
  EXPECT_TRUE(s1.gate);
  EXPECT_FALSE(s1.a);
  EXPECT_EQ(s1.experts, (std::vector<std::uint8_t>{1, 1, 0}));
  auto s2 = freeze_for(Regime::Stage2, 3, poison);
  EXPECT_FALSE(s2.gate);
  EXPECT_EQ(s2.experts, (std::vector<std::uint8_t>{0, 0, 1}));
  EXPECT_EQ(freeze_for(Regime::Stage2Compensated, 3, poison), s2);
  auto inf = freeze_for(Regime::Inference, 3, poison);
  EXPECT_TRUE(inf.a && inf.gate);
  EXPECT_EQ(inf.experts, (std::vector<std::uint8_t>{1, 1, 1}));
  auto joint = freeze_for(Regime::Joint, 3, poison);
  EXPECT_FALSE(joint.a || joint.gate);
}

TEST(Backward, GradientSetsFollowRegime) {
  RngStream rng(14, 14);
  auto layer = random_layer(3, 2, 2, 3, {2}, 2, rng);
  auto x = random_input(3, rng);
  Vector dy = {1.0, -0.5};
  auto theta = random_theta(layer, rng);
  auto names = [&](Regime r) {
    return backward(layer, forward(layer, x, r, &theta), dy, r).block_names();
  };
  using Names = std::vector<std::string>;
  EXPECT_EQ(names(Regime::Stage1), (Names{"A", "B2"}));
  EXPECT_EQ(names(Regime::Stage2), (Names{"A", "B0", "B1", "W_gate"}));
  EXPECT_EQ(names(Regime::Stage2Compensated), (Names{"A", "B0", "B1", "W_gate"}));
  EXPECT_EQ(names(Regime::Inference), Names{});
  EXPECT_EQ(names(Regime::Joint), (Names{"A", "B0", "B1", "B2", "W_gate"}));
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
  RngStream rng(15, 15);
  auto layer = random_layer(3, 2, 2, 3, {2}, 2, rng);
  auto theta = random_theta(layer, rng);
  auto t = forward_stage2(layer, random_input(3, rng), &theta);
  auto g = backward(layer, t, Vector{0.0, 0.0}, Regime::Stage2Compensated);
  for (double v : g.a->values()) EXPECT_EQ(v, 0.0);
  for (double v : g.gate->values()) EXPECT_EQ(v, 0.0);
  for (double v : g.experts[0]->values()) EXPECT_EQ(v, 0.0);
  for (double v : g.dx) EXPECT_EQ(v, 0.0);
}

TEST(Backward, InputGradientMatchesFiniteDifferences) {
  RngStream rng(16, 16);
  auto layer = random_layer(4, 3, 2, 4, {3}, 2, rng);
  auto theta = random_theta(layer, rng);
  auto x = random_input(4, rng);
  Vector dy = {0.3, -1.0, 0.6};
  for (auto regime : {Regime::Stage1, Regime::Stage2, Regime::Stage2Compensated, Regime::Inference}) {
    auto t = forward(layer, x, regime, &theta);
    auto g = backward(layer, t, dy, regime);
    ForwardOverrides pin;
    pin.active = t.active;
    if (regime == Regime::Stage2Compensated || regime == Regime::Inference) pin.beta = t.beta;
    auto f = [&](std::span<const double> p) {
      return numerics::dot(dy, forward(layer, p, regime, &theta, pin).y);
    };
    auto fd = numerics::finite_diff_grad(f, x, 1e-5);
    EXPECT_LT(numerics::max_relative_error(g.dx, fd, 1e-4), 1e-6) << to_string(regime);
  }
}

TEST(Backward, RejectsMismatchedOrOverriddenTraces) {
  RngStream rng(17, 17);
  auto layer = random_layer(3, 2, 2, 3, {2}, 2, rng);
  auto x = random_input(3, rng);
  Vector dy = {1.0, 1.0};
  auto t = forward_stage1(layer, x);
  EXPECT_THROW((void)backward(layer, t, dy, Regime::Stage2), ValidationError);
  ForwardOverrides o;
  o.omega = Vector{0.2, 0.3, 0.5};
  EXPECT_THROW((void)backward(layer, forward_stage1(layer, x, o), dy, Regime::Stage1), ValidationError);
  EXPECT_THROW((void)backward(layer, t, Vector{1.0}, Regime::Stage1), ShapeError);
}

TEST(CalibrateTheta, IdenticalExpertGivesOne) {
  RngStream rng(18, 18);
  auto layer = random_layer(3, 2, 2, 3, {2}, 2, rng);
  layer.mutable_expert(1) = layer.expert(2);
  std::vector<Vector> inputs = {random_input(3, rng), random_input(3, rng)};
  auto dep = calibrate_theta(layer, inputs);
  EXPECT_NEAR(dep.theta[1], 1.0, 1e-12);
  EXPECT_EQ(dep.theta[2], 0.0);
}

TEST(CalibrateTheta, OrthogonalAndZeroPoison) {
  // B_0 reads the first rank coordinate, B_D the second: outputs are orthogonal.
  LopeLayer layer(Matrix(2, 2), Matrix::identity(2),
                  {Matrix::from_rows({{1, 0}, {0, 0}}), Matrix::from_rows({{0, 0}, {0, 1}})},
                  Matrix(2, 2), {1}, 1);
  std::vector<Vector> inputs = {{1, 2}, {-3, 0.5}};
  EXPECT_EQ(calibrate_theta(layer, inputs).theta[0], 0.0);
  layer.mutable_expert(1) = Matrix(2, 2);
  EXPECT_EQ(calibrate_theta(layer, inputs).theta[0], 0.0);
}

TEST(CalibrateTheta, MeanOfSimilarities) {
  // B_D = I and B_0 projects on the first axis, so the cosine is x_1 / |x|.
  LopeLayer layer(Matrix(2, 2), Matrix::identity(2),
                  {Matrix::from_rows({{1, 0}, {0, 0}}), Matrix::identity(2)}, Matrix(2, 2), {1}, 1);
  std::vector<Vector> inputs = {{0.2, std::sqrt(1 - 0.04)}, {0.6, 0.8}};
  EXPECT_NEAR(calibrate_theta(layer, inputs).theta[0], 0.4, 1e-15);
  EXPECT_THROW((void)calibrate_theta(layer, std::vector<Vector>{}), ValidationError);
}

TEST(DependencyVector, Validation) {
  std::vector<std::size_t> poison = {1};
  EXPECT_NO_THROW(DependencyVector({{0.5, 0.0}}).validate(2, poison));
  EXPECT_THROW(DependencyVector({{0.5, 0.1}}).validate(2, poison), ValidationError);
  EXPECT_THROW(DependencyVector({{1.5, 0.0}}).validate(2, poison), ValidationError);
  EXPECT_THROW(DependencyVector({{0.5}}).validate(2, poison), ShapeError);
}

TEST(Regime, NamesRoundTrip) {
  for (auto r : {Regime::Stage1, Regime::Stage2, Regime::Stage2Compensated, Regime::Inference,
                 Regime::Joint}) {
    EXPECT_EQ(parse_regime(to_string(r)), r);
  }
}

}  // namespace
}  // namespace lope::adapter
