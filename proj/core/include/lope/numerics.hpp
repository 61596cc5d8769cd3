#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lope::numerics {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
///
/// Element (i, j) lives at data()[i * cols() + j]. Every public operation in
/// this module leaves entries finite; non-finite results raise ValidationError.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, Vector data);

  static Matrix identity(std::size_t n);
  // Nested initializer for small literal matrices in tests and examples.
  static Matrix from_rows(const std::vector<Vector>& rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const Vector& values() const { return data_; }

  std::string shape_string() const;

  Matrix transposed() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

/// Deterministic random stream identified by (seed, stream id).
///
/// The raw engine is std::mt19937_64, whose output sequence is fixed by the
/// C++ standard. Floating-point transforms are implemented here rather than
/// with <random> distributions so results match across standard libraries.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  // Number of raw 64-bit words drawn so far; with (seed, stream id) this fully
  // determines the engine state.
  std::uint64_t draws() const { return draws_; }

  // Independent child stream keyed by `child_id`; does not advance this stream.
  RngStream child(std::uint64_t child_id) const;

  // Restores a stream that has already produced `draws` words.
  static RngStream restore(std::uint64_t seed, std::uint64_t stream_id, std::uint64_t draws);

  std::uint64_t next_u64();
  double uniform01();                  // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);  // [lo, hi)
  double symmetric_unit();             // (-1, 1)
  double normal();                     // standard normal (Box-Muller)
  bool bernoulli(double p);
  std::size_t index(std::size_t n);    // uniform in [0, n)

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, RngStream& rng);
Matrix random_uniform(std::size_t rows, std::size_t cols, double lo, double hi, RngStream& rng);

/// Standard product. Accumulation runs row by row, left to right over the
/// inner index, so results are bit-reproducible.
Matrix matmul(const Matrix& a, const Matrix& b);

// m · v
Vector matvec(const Matrix& m, std::span<const double> v);
// mᵀ · v
Vector matvec_t(const Matrix& m, std::span<const double> v);
// m += scale · (u ⊗ v)
void add_outer(Matrix& m, std::span<const double> u, std::span<const double> v, double scale = 1.0);

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> v);
double frobenius(const Matrix& m);
Matrix subtract(const Matrix& a, const Matrix& b);

/// Numerically stable softmax (max subtraction). Throws on empty input.
Vector softmax(std::span<const double> logits);

/// u·v / (‖u‖‖v‖); returns 0 when either norm is below 1e-12.
double cosine_sim(std::span<const double> u, std::span<const double> v);

inline constexpr double kZeroNormThreshold = 1e-12;

using ScalarField = std::function<double(std::span<const double>)>;

/// Central-difference gradient (f(p + h e_k) - f(p - h e_k)) / 2h.
/// Throws ValidationError naming the coordinate if any evaluation is non-finite.
Vector finite_diff_grad(const ScalarField& f, std::span<const double> point, double h);

/// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor); `floor` keeps near-zero
/// entries from dominating.
double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6);

/// FNV-1a 64-bit hash over raw bytes.
std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);
/// Checksum over the bit patterns of a matrix's shape and entries.
std::uint64_t checksum(const Matrix& m);

void require_finite(std::span<const double> values, const char* what);

}  // namespace lope::numerics
