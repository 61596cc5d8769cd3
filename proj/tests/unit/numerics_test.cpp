#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "lope/errors.hpp"
#include "lope/numerics.hpp"

namespace lope::numerics {
namespace {

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  }
  return c;
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  RngStream rng(1, 0);
  auto x = random_normal(3, 3, 1.0, rng);
  EXPECT_EQ(matmul(Matrix::identity(3), x), x);
}

TEST(Matmul, HandArithmetic) {
  auto c = matmul(Matrix::from_rows({{1, 2}, {3, 4}}), Matrix::from_rows({{0}, {1}}));
  EXPECT_EQ(c, Matrix::from_rows({{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoopExactly) {
  RngStream rng(2, 0);
  auto a = random_normal(5, 4, 1.0, rng);
  auto b = random_normal(4, 3, 1.0, rng);
  EXPECT_EQ(matmul(a, b), naive_product(a, b));
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    (void)matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
  }
}

TEST(Matvec, AgreesWithMatmul) {
  RngStream rng(3, 0);
  auto m = random_normal(4, 3, 1.0, rng);
  Vector v = {0.5, -1.0, 2.0};
  auto col = matmul(m, Matrix(3, 1, v));
  auto mv = matvec(m, v);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(mv[i], col(i, 0));
  Vector u = {1.0, 2.0, -1.0, 0.25};
  auto mtv = matvec_t(m, u);
  for (std::size_t j = 0; j < 3; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += m(i, j) * u[i];
    EXPECT_DOUBLE_EQ(mtv[j], s);
  }
}

TEST(Softmax, Uniform) {
  for (double p : softmax(Vector{0, 0, 0, 0})) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Softmax, DirectExponentiation) {
  auto p = softmax(Vector{1, 2, 3});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-14);
  EXPECT_NEAR(p[1], std::exp(2.0) / z, 1e-14);
  EXPECT_NEAR(p[2], std::exp(3.0) / z, 1e-14);
}

TEST(Softmax, ClosedFormTwoWay) {
  auto p = softmax(Vector{std::log(3.0), 0.0});
  EXPECT_NEAR(p[0], 0.75, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
}

TEST(Softmax, LargeLogitsStayFinite) {
  auto p = softmax(Vector{1000.0, 1000.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
}

TEST(Softmax, EmptyThrows) { EXPECT_THROW((void)softmax(Vector{}), ValidationError); }

TEST(Cosine, Cases) {
  Vector v = {1.0, -2.0, 0.5};
  Vector neg = {-1.0, 2.0, -0.5};
  EXPECT_NEAR(cosine_sim(v, v), 1.0, 1e-15);
  EXPECT_EQ(cosine_sim(Vector{1, 0}, Vector{0, 1}), 0.0);
  EXPECT_NEAR(cosine_sim(v, neg), -1.0, 1e-15);
  EXPECT_EQ(cosine_sim(v, Vector{0, 0, 0}), 0.0);
  EXPECT_THROW((void)cosine_sim(v, Vector{1, 2}), ShapeError);
}

TEST(FiniteDiff, Quadratic) {
  auto g = finite_diff_grad([](std::span<const double> p) { return dot(p, p); }, Vector{1, 2}, 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
}

TEST(FiniteDiff, Constant) {
  auto g = finite_diff_grad([](std::span<const double>) { return 3.0; }, Vector{1, 2, 3}, 1e-5);
  for (double v : g) EXPECT_NEAR(v, 0.0, 1e-10);
}

TEST(FiniteDiff, SoftmaxCrossEntropy) {
  const std::size_t label = 1;
  auto ce = [&](std::span<const double> z) { return -std::log(softmax(z)[label]); };
  Vector z = {0.3, -1.2, 2.0, 0.1};
  auto g = finite_diff_grad(ce, z, 1e-5);
  auto p = softmax(z);
  for (std::size_t k = 0; k < z.size(); ++k) {
    EXPECT_NEAR(g[k], p[k] - (k == label ? 1.0 : 0.0), 1e-7);
  }
}

TEST(FiniteDiff, NonFiniteNamesCoordinate) {
  auto f = [](std::span<const double> p) { return p[1] > 1.0 ? std::log(-1.0) : 0.0; };
  try {
    (void)finite_diff_grad(f, Vector{0.0, 1.0}, 1e-3);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find('1'), std::string::npos);
  }
}

TEST(RelativeError, Floor) {
  EXPECT_EQ(max_relative_error(Vector{1.0}, Vector{1.0}), 0.0);
  EXPECT_NEAR(max_relative_error(Vector{2.0}, Vector{1.0}), 0.5, 1e-15);
  EXPECT_NEAR(max_relative_error(Vector{1e-9}, Vector{0.0}, 1e-6), 1e-3, 1e-15);
}

TEST(Fnv1a, KnownVectors) {
  // Reference values of the 64-bit FNV-1a test suite.
  EXPECT_EQ(fnv1a({}), 0xcbf29ce484222325ULL);
  const char a = 'a';
  EXPECT_EQ(fnv1a(std::as_bytes(std::span(&a, 1))), 0xaf63dc4c8601ec8cULL);
  const std::string foobar = "foobar";
  EXPECT_EQ(fnv1a(std::as_bytes(std::span(foobar.data(), foobar.size()))), 0x85944171f73967e8ULL);
}

TEST(Checksum, SensitiveToOneBit) {
  Matrix m(2, 2, 1.0);
  auto before = checksum(m);
  m(1, 1) = std::nextafter(1.0, 2.0);
  EXPECT_NE(before, checksum(m));
  EXPECT_NE(checksum(Matrix(1, 4, 0.0)), checksum(Matrix(2, 2, 0.0)));
}

TEST(Rng, DeterministicAndRestorable) {
  RngStream a(614, 7), b(614, 7), c(614, 8);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(RngStream(614, 7).next_u64(), c.next_u64());

  RngStream s(5, 1);
  for (int i = 0; i < 13; ++i) (void)s.normal();
  auto r = RngStream::restore(s.seed(), s.stream_id(), s.draws());
  EXPECT_EQ(s.next_u64(), r.next_u64());
}

TEST(Rng, ChildDoesNotAdvanceParent) {
  RngStream a(1, 2), b(1, 2);
  auto child = a.child(3);
  (void)child.next_u64();
  EXPECT_EQ(a.draws(), 0u);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(a.child(3).stream_id(), a.child(4).stream_id());
}

TEST(Rng, Ranges) {
  RngStream rng(9, 9);
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform01();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    double s = rng.symmetric_unit();
    ASSERT_GT(s, -1.0);
    ASSERT_LT(s, 1.0);
    ASSERT_LT(rng.index(7), 7u);
    sum += rng.normal();
  }
  EXPECT_NEAR(sum / n, 0.0, 0.03);
}

TEST(RequireFinite, RejectsNan) {
  Vector v = {1.0, std::numeric_limits<double>::quiet_NaN()};
  EXPECT_THROW(require_finite(v, "v"), ValidationError);
}

}  // namespace
}  // namespace lope::numerics
