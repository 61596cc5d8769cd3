// Binary checkpoint layout (all integers little-endian, doubles as IEEE-754
// bit patterns in little-endian order):
//
//   magic        8 bytes  "LOPECKPT"
//   version      u32
//   stage        u32      0 init, 1 post-stage1, 2 post-stage2
//   config_hash  u64
//   embedding    block
//   layer1       layer
//   layer2       layer
//   has_theta    u8       then, if 1: theta1, theta2 as vectors
//   rng          u64 seed, u64 stream, u64 draws
//   trailer      u64      FNV-1a of every preceding byte
//
//   layer  := u64 d_in, u64 d_out, u64 rank, u64 experts, u64 top_k,
//             u64 poison_count, poison_count x u64 index,
//             block W0, block A, experts x block B_i, block W_gate
//   block  := u64 rows, u64 cols, rows*cols x f64 (row-major)
//   vector := u64 length, length x f64

#include <fmt/format.h>

#include <array>
#include <bit>
#include <cstring>

#include "lope/errors.hpp"
#include "lope/io.hpp"
#include "lope/training.hpp"

namespace lope::training {

using numerics::Matrix;

namespace {

constexpr std::array<char, 8> kMagic = {'L', 'O', 'P', 'E', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void block(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    for (double v : m.data()) f64(v);
  }
  void vector(const numerics::Vector& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void raw(std::string_view s) { out_.append(s); }

  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::uint8_t u8() {
    need(1, "u8");
    return static_cast<std::uint8_t>(in_[pos_++]);
  }
  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_++])) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::uint64_t count(const char* what, std::uint64_t limit) {
    const auto n = u64();
    if (n > limit) throw FormatError(fmt::format("checkpoint {} count {} is implausible", what, n));
    return n;
  }
  Matrix block(const char* what) {
    const auto rows = count(what, 1u << 20);
    const auto cols = count(what, 1u << 20);
    if (rows * cols * 8 > in_.size() - pos_) {
      throw FormatError(fmt::format("checkpoint truncated inside block {}", what));
    }
    numerics::Vector data(rows * cols);
    for (auto& v : data) v = f64();
    return {rows, cols, std::move(data)};
  }
  numerics::Vector vector(const char* what) {
    const auto n = count(what, 1u << 20);
    numerics::Vector v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n, "bytes");
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw FormatError(fmt::format("checkpoint truncated reading {} at byte {}", what, pos_));
    }
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

void write_layer(Writer& w, const adapter::LopeLayer& layer) {
  w.u64(layer.d_in());
  w.u64(layer.d_out());
  w.u64(layer.rank());
  w.u64(layer.num_experts());
  w.u64(layer.top_k());
  w.u64(layer.poison().size());
  for (auto p : layer.poison()) w.u64(p);
  w.block(layer.base());
  w.block(layer.a());
  for (const auto& b : layer.experts()) w.block(b);
  w.block(layer.gate_weights());
}

adapter::LopeLayer read_layer(Reader& r, const char* name) {
  const auto d_in = r.u64();
  const auto d_out = r.u64();
  const auto rank = r.u64();
  const auto experts = r.count("expert", 4096);
  const auto top_k = r.u64();
  const auto poison_count = r.count("poison", experts);
  std::vector<std::size_t> poison(poison_count);
  for (auto& p : poison) p = r.u64();
  Matrix base = r.block("W0");
  Matrix a = r.block("A");
  std::vector<Matrix> bs;
  for (std::uint64_t i = 0; i < experts; ++i) bs.push_back(r.block("B"));
  Matrix gate = r.block("W_gate");
  if (base.cols() != d_in || base.rows() != d_out || a.rows() != rank) {
    throw FormatError(fmt::format("{}: block shapes disagree with the declared dimensions", name));
  }
  try {
    return {std::move(base), std::move(a), std::move(bs), std::move(gate), std::move(poison), top_k};
  } catch (const std::exception& e) {
    throw FormatError(fmt::format("{}: {}", name, e.what()));
  }
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.raw(std::string_view(kMagic.data(), kMagic.size()));
  w.u32(checkpoint.version);
  w.u32(static_cast<std::uint32_t>(checkpoint.backbone.stage));
  w.u64(checkpoint.config_hash);
  w.block(checkpoint.backbone.embedding);
  write_layer(w, checkpoint.backbone.layer1);
  write_layer(w, checkpoint.backbone.layer2);
  w.u8(checkpoint.theta ? 1 : 0);
  if (checkpoint.theta) {
    w.vector(checkpoint.theta->layer1.theta);
    w.vector(checkpoint.theta->layer2.theta);
  }
  w.u64(checkpoint.rng.seed);
  w.u64(checkpoint.rng.stream);
  w.u64(checkpoint.rng.draws);
  const auto digest = numerics::fnv1a(std::as_bytes(std::span(w.str().data(), w.str().size())));
  w.u64(digest);
  return std::move(w.str());
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  const auto magic = r.take(kMagic.size());
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) {
    throw FormatError("not a LoPE checkpoint (bad magic)");
  }
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(fmt::format("checkpoint format version {} is not supported (expected {})",
                                  version, kCheckpointVersion));
  }
  if (bytes.size() < 8) throw FormatError("checkpoint truncated");
  const auto body = bytes.substr(0, bytes.size() - 8);
  Reader trailer(bytes.substr(bytes.size() - 8));
  if (numerics::fnv1a(std::as_bytes(std::span(body.data(), body.size()))) != trailer.u64()) {
    throw FormatError("checkpoint checksum mismatch (file corrupted or truncated)");
  }
  const auto stage = r.u32();
  if (stage > 2) throw FormatError(fmt::format("invalid stage marker {}", stage));
  const auto config_hash = r.u64();
  Matrix embedding = r.block("embedding");
  auto layer1 = read_layer(r, "layer1");
  auto layer2 = read_layer(r, "layer2");
  Checkpoint c{version,
               {std::move(embedding), std::move(layer1), std::move(layer2),
                static_cast<model::StageMarker>(stage)},
               std::nullopt,
               {},
               config_hash};
  if (c.backbone.layer1.d_in() != c.backbone.embedding.cols() ||
      c.backbone.layer2.d_in() != c.backbone.layer1.d_out()) {
    throw FormatError("checkpoint layers do not chain");
  }
  const auto has_theta = r.u8();
  if (has_theta > 1) throw FormatError("invalid theta flag");
  if (has_theta) {
    ModelTheta theta{{r.vector("theta1")}, {r.vector("theta2")}};
    try {
      theta.layer1.validate(c.backbone.layer1.num_experts(), c.backbone.layer1.poison());
      theta.layer2.validate(c.backbone.layer2.num_experts(), c.backbone.layer2.poison());
    } catch (const std::exception& e) {
      throw FormatError(fmt::format("checkpoint dependency vectors invalid: {}", e.what()));
    }
    c.theta = std::move(theta);
  }
  c.rng.seed = r.u64();
  c.rng.stream = r.u64();
  c.rng.draws = r.u64();
  if (r.position() != body.size()) throw FormatError("trailing bytes after checkpoint body");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  io::write_file_atomic(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize_checkpoint(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

}  // namespace lope::training
