#include "lope/numerics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include "lope/errors.hpp"

namespace lope::numerics {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, Vector data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError(fmt::format("matrix data length {} does not match shape {}x{}", data_.size(),
                                 rows_, cols_));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return {};
  const std::size_t cols = rows.front().size();
  Vector data;
  data.reserve(rows.size() * cols);
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged rows in Matrix::from_rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return {rows.size(), cols, std::move(data)};
}

std::string Matrix::shape_string() const { return fmt::format("{}x{}", rows_, cols_); }

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {
std::uint64_t engine_seed(std::uint64_t seed, std::uint64_t stream_id) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream_id ^ 0x5851f42d4c957f2dULL));
}
}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), engine_(engine_seed(seed, stream_id)) {}

RngStream RngStream::child(std::uint64_t child_id) const {
  // Children live in a disjoint region of stream-id space derived by hashing.
  return {seed_, splitmix64(stream_id_ * 0x9e3779b97f4a7c15ULL + child_id + 1)};
}

RngStream RngStream::restore(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t draws) {
  RngStream s(seed, stream_id);
  s.engine_.discard(draws);
  s.draws_ = draws;
  return s;
}

std::uint64_t RngStream::next_u64() {
  ++draws_;
  return engine_();
}

double RngStream::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

double RngStream::symmetric_unit() {
  // Rejection of the single value that would map to exactly -1.
  for (;;) {
    const std::uint64_t bits = next_u64() >> 10;  // 54 bits
    if (bits == 0) continue;
    return static_cast<double>(bits) * 0x1.0p-53 - 1.0;
  }
}

double RngStream::normal() {
  double u1 = uniform01();
  while (u1 <= 0.0) u1 = uniform01();
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

bool RngStream::bernoulli(double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return uniform01() < p;
}

std::size_t RngStream::index(std::size_t n) {
  if (n == 0) throw ValidationError("RngStream::index called with n == 0");
  // Lemire-style rejection keeps the draw unbiased.
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound);
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x < limit) return static_cast<std::size_t>(x % bound);
  }
}

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, RngStream& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = stddev * rng.normal();
  return m;
}

Matrix random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, RngStream& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

void require_finite(std::span<const double> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw ValidationError(fmt::format("{}: non-finite value at index {}", what, i));
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError(
        fmt::format("matmul: shapes {} and {} are incompatible", a.shape_string(), b.shape_string()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  require_finite(out.data(), "matmul");
  return out;
}

Vector matvec(const Matrix& m, std::span<const double> v) {
  if (m.cols() != v.size()) {
    throw ShapeError(
        fmt::format("matvec: matrix {} cannot multiply vector of length {}", m.shape_string(), v.size()));
  }
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double acc = 0.0;
    const auto r = m.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) acc += r[k] * v[k];
    out[i] = acc;
  }
  return out;
}

Vector matvec_t(const Matrix& m, std::span<const double> v) {
  if (m.rows() != v.size()) {
    throw ShapeError(fmt::format("matvec_t: transposed matrix {} cannot multiply vector of length {}",
                                 m.shape_string(), v.size()));
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j] * v[i];
  }
  return out;
}

void add_outer(Matrix& m, std::span<const double> u, std::span<const double> v, double scale) {
  if (m.rows() != u.size() || m.cols() != v.size()) {
    throw ShapeError(fmt::format("add_outer: target {} vs outer product {}x{}", m.shape_string(),
                                 u.size(), v.size()));
  }
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double s = scale * u[i];
    auto r = m.row(i);
    for (std::size_t j = 0; j < v.size(); ++j) r[j] += s * v[j];
  }
}

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError(fmt::format("dot: length mismatch {} vs {}", u.size(), v.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  return acc;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double frobenius(const Matrix& m) { return norm(m.data()); }

Matrix subtract(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(fmt::format("subtract: {} vs {}", a.shape_string(), b.shape_string()));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Vector softmax(std::span<const double> logits) {
  if (logits.empty()) throw ValidationError("softmax of an empty vector");
  require_finite(logits, "softmax input");
  const double hi = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - hi);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

double cosine_sim(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) {
    throw ShapeError(fmt::format("cosine_sim: length mismatch {} vs {}", u.size(), v.size()));
  }
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu < kZeroNormThreshold || nv < kZeroNormThreshold) return 0.0;
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

Vector finite_diff_grad(const ScalarField& f, std::span<const double> point, double h) {
  Vector p(point.begin(), point.end());
  Vector grad(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double saved = p[k];
    p[k] = saved + h;
    const double fp = f(p);
    p[k] = saved - h;
    const double fm = f(p);
    p[k] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw ValidationError(fmt::format("finite_diff_grad: non-finite evaluation at coordinate {}", k));
    }
    grad[k] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) {
    throw ShapeError(fmt::format("max_relative_error: length mismatch {} vs {}", a.size(), b.size()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (auto b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t checksum(const Matrix& m) {
  const std::uint64_t dims[2] = {m.rows(), m.cols()};
  std::uint64_t h = fnv1a(std::as_bytes(std::span(dims)));
  return fnv1a(std::as_bytes(m.data()), h);
}

}  // namespace lope::numerics
