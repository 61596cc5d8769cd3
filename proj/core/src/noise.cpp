#include "lope/noise.hpp"

#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "lope/errors.hpp"
#include "lope/io.hpp"

namespace lope::noise {

using numerics::Matrix;
using numerics::RngStream;

std::string_view to_string(NoiseOp op) {
  switch (op) {
    case NoiseOp::Shuffle: return "shuffle";
    case NoiseOp::Insert: return "insert";
    case NoiseOp::Delete: return "delete";
    case NoiseOp::Replace: return "replace";
    case NoiseOp::LabelFlip: return "label_flip";
  }
  return "unknown";
}

NoiseOp parse_noise_op(std::string_view name) {
  for (auto op : {NoiseOp::Shuffle, NoiseOp::Insert, NoiseOp::Delete, NoiseOp::Replace,
                  NoiseOp::LabelFlip}) {
    if (to_string(op) == name) return op;
  }
  throw ValidationError(fmt::format(
      "unknown noise op '{}' (expected shuffle, insert, delete, replace, label_flip)", name));
}

bool DiscreteNoiseSpec::has(NoiseOp op) const {
  return std::find(ops.begin(), ops.end(), op) != ops.end();
}

std::vector<NoiseOp> DiscreteNoiseSpec::token_ops() const {
  std::vector<NoiseOp> out;
  for (auto op : ops) {
    if (op != NoiseOp::LabelFlip && std::find(out.begin(), out.end(), op) == out.end()) {
      out.push_back(op);
    }
  }
  return out;
}

void DiscreteNoiseSpec::validate() const {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw ValidationError(fmt::format("noise rate {} outside [0, 1]", rate));
  }
  if (rate > 0.0 && ops.empty()) throw ValidationError("noise rate > 0 but no noise ops enabled");
  if ((has(NoiseOp::Insert) || has(NoiseOp::Replace)) && alphabet.empty()) {
    throw ValidationError("insert/replace noise requires a non-empty alphabet");
  }
}

void ContinuousNoiseSpec::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw ValidationError(fmt::format("continuous noise ratio alpha must be >= 0, got {}", alpha));
  }
}

void Dataset::validate() const {
  if (examples.empty()) throw ValidationError("dataset is empty");
  if (num_classes < 1) throw ValidationError("dataset has no classes");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.label >= num_classes) {
      throw ValidationError(
          fmt::format("example {}: label {} outside {} classes", i, ex.label, num_classes));
    }
    for (auto t : ex.tokens) {
      if (t >= vocab_size) {
        throw ValidationError(
            fmt::format("example {}: token {} outside vocabulary of {}", i, t, vocab_size));
      }
    }
  }
}

DiscreteResult inject_discrete(std::span<const Token> tokens, const DiscreteNoiseSpec& spec,
                               RngStream& rng) {
  if (tokens.empty()) throw ValidationError("inject_discrete: empty token sequence");
  spec.validate();

  DiscreteResult result{TokenSeq(tokens.begin(), tokens.end()), {}};
  const auto ops = spec.token_ops();
  if (spec.rate == 0.0 || ops.empty()) return result;

  struct Pending {
    std::size_t position;
    NoiseOp op;
    Token token;
  };
  std::vector<Pending> pending;
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    if (!rng.bernoulli(spec.rate)) continue;
    const NoiseOp op = ops[rng.index(ops.size())];
    Token tok = 0;
    if (op == NoiseOp::Insert || op == NoiseOp::Replace) {
      tok = spec.alphabet[rng.index(spec.alphabet.size())];
    }
    pending.push_back({pos, op, tok});
  }

  auto& seq = result.tokens;
  result.manifest.resize(pending.size());
  for (std::size_t k = pending.size(); k-- > 0;) {
    const auto& p = pending[k];
    bool skipped = false;
    switch (p.op) {
      case NoiseOp::Shuffle:
        if (seq.size() < 2) {
          skipped = true;
        } else if (p.position + 1 < seq.size()) {
          std::swap(seq[p.position], seq[p.position + 1]);
        } else {
          std::swap(seq[p.position], seq[p.position - 1]);
        }
        break;
      case NoiseOp::Insert:
        seq.insert(seq.begin() + static_cast<std::ptrdiff_t>(p.position) + 1, p.token);
        break;
      case NoiseOp::Delete:
        if (seq.size() <= 1) {
          skipped = true;
        } else {
          seq.erase(seq.begin() + static_cast<std::ptrdiff_t>(p.position));
        }
        break;
      case NoiseOp::Replace:
        seq[p.position] = p.token;
        break;
      case NoiseOp::LabelFlip:
        break;
    }
    result.manifest[k] = Edit{p.position, p.op, skipped};
  }
  return result;
}

Matrix inject_continuous(const Matrix& embeddings, std::span<const std::uint8_t> mask,
                         const ContinuousNoiseSpec& spec, RngStream& rng) {
  spec.validate();
  if (mask.size() != embeddings.rows()) {
    throw ShapeError(fmt::format("inject_continuous: mask length {} vs embedding rows {}",
                                 mask.size(), embeddings.rows()));
  }
  Matrix out = embeddings;
  if (spec.alpha == 0.0) return out;
  for (std::size_t t = 0; t < out.rows(); ++t) {
    if (mask[t] == 0) continue;
    auto row = out.row(t);
    for (double& v : row) {
      const double base = v;
      double moved = base + spec.alpha * rng.symmetric_unit();
      // Rounding of the sum can overshoot the bound by half an ulp; step back.
      while (std::abs(moved - base) > spec.alpha) {
        moved = std::nextafter(moved, base);
      }
      v = moved;
    }
  }
  return out;
}

AugmentResult augment_dataset(const Dataset& dataset, const DiscreteNoiseSpec& spec,
                              const RngStream& rng) {
  spec.validate();
  AugmentResult out;
  out.dataset.vocab_size = dataset.vocab_size;
  out.dataset.num_classes = dataset.num_classes;
  out.dataset.examples.reserve(dataset.size());
  const bool flip = spec.has(NoiseOp::LabelFlip) && dataset.num_classes >= 2;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& ex = dataset.examples[i];
    RngStream child = rng.child(i);
    auto edited = inject_discrete(ex.tokens, spec, child);
    Example noisy{std::move(edited.tokens), ex.label};
    for (auto& e : edited.manifest) out.manifest.push_back({i, e});
    if (flip && child.bernoulli(spec.rate)) {
      const std::size_t shift = 1 + child.index(dataset.num_classes - 1);
      noisy.label = (ex.label + shift) % dataset.num_classes;
      out.manifest.push_back({i, Edit{std::nullopt, NoiseOp::LabelFlip, false}});
    }
    out.dataset.examples.push_back(std::move(noisy));
  }
  return out;
}

namespace {

template <typename T>
T parse_number(std::string_view text, std::size_t line_no, const char* what) {
  T value{};
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw FormatError(fmt::format("line {}: malformed {} '{}'", line_no, what, text));
  }
  return value;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(s.substr(start));
      return parts;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    if (!line.empty()) fn(line, line_no);
    start = end + 1;
  }
}

}  // namespace

std::string format_dataset(const Dataset& dataset) {
  std::string out;
  for (const auto& ex : dataset.examples) {
    out += fmt::format("{}\t{}\n", ex.label, fmt::join(ex.tokens, " "));
  }
  return out;
}

Dataset parse_dataset(std::string_view text, std::size_t vocab_size, std::size_t num_classes) {
  Dataset ds;
  ds.vocab_size = vocab_size;
  ds.num_classes = num_classes;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const auto fields = split(line, '\t');
    if (fields.size() != 2) {
      throw FormatError(fmt::format("line {}: expected `label<TAB>tokens`", line_no));
    }
    Example ex;
    ex.label = parse_number<std::size_t>(fields[0], line_no, "label");
    for (auto tok : split(fields[1], ' ')) {
      if (tok.empty()) continue;
      ex.tokens.push_back(parse_number<Token>(tok, line_no, "token id"));
    }
    if (ex.tokens.empty()) throw FormatError(fmt::format("line {}: no tokens", line_no));
    ds.examples.push_back(std::move(ex));
  });
  ds.validate();
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  io::write_file_atomic(path, format_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path, std::size_t vocab_size,
                     std::size_t num_classes) {
  try {
    return parse_dataset(io::read_file(path), vocab_size, num_classes);
  } catch (const FormatError& e) {
    throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string format_manifest(const std::vector<ManifestEntry>& manifest) {
  std::string out;
  for (const auto& m : manifest) {
    std::string op(to_string(m.edit.op));
    if (m.edit.skipped) op += "_skipped";
    const std::string pos = m.edit.position ? std::to_string(*m.edit.position) : "-";
    out += fmt::format("{}\t{}\t{}\n", m.example_index, pos, op);
  }
  return out;
}

std::vector<ManifestEntry> parse_manifest(std::string_view text) {
  std::vector<ManifestEntry> out;
  for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const auto fields = split(line, '\t');
    if (fields.size() != 3) {
      throw FormatError(fmt::format("manifest line {}: expected 3 tab-separated fields", line_no));
    }
    ManifestEntry m;
    m.example_index = parse_number<std::size_t>(fields[0], line_no, "example index");
    if (fields[1] != "-") m.edit.position = parse_number<std::size_t>(fields[1], line_no, "position");
    std::string_view op = fields[2];
    constexpr std::string_view kSkipped = "_skipped";
    if (op.size() > kSkipped.size() && op.substr(op.size() - kSkipped.size()) == kSkipped) {
      m.edit.skipped = true;
      op.remove_suffix(kSkipped.size());
    }
    m.edit.op = parse_noise_op(op);
    out.push_back(m);
  });
  return out;
}

void write_manifest(const std::vector<ManifestEntry>& manifest, const std::filesystem::path& path) {
  io::write_file_atomic(path, format_manifest(manifest));
}

}  // namespace lope::noise
