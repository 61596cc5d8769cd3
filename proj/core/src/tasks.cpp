#include "lope/tasks.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <vector>

#include "lope/errors.hpp"

namespace lope::tasks {

using noise::Token;
using numerics::RngStream;

namespace {
constexpr std::uint64_t kTrainStream = 0x7472;  // "tr"
constexpr std::uint64_t kEvalStream = 0x6576;   // "ev"
constexpr std::uint64_t kNoiseStream = 0x6e6f;  // "no"
constexpr int kMaxRejections = 10000;

std::vector<std::size_t> class_counts(const TaskSpec& spec, std::span<const Token> tokens) {
  std::vector<std::size_t> counts(spec.num_classes, 0);
  for (auto t : tokens) ++counts[t % spec.num_classes];
  return counts;
}
}  // namespace

std::string_view to_string(Rule rule) {
  switch (rule) {
    case Rule::KeywordCount: return "keyword_count";
    case Rule::MajoritySymbol: return "majority_symbol";
  }
  return "unknown";
}

Rule parse_rule(std::string_view name) {
  if (name == "keyword_count") return Rule::KeywordCount;
  if (name == "majority_symbol") return Rule::MajoritySymbol;
  throw ValidationError(
      fmt::format("unknown task rule '{}' (expected keyword_count or majority_symbol)", name));
}

void TaskSpec::validate() const {
  if (num_classes < 2) throw ValidationError("task needs at least two classes");
  if (min_length < 1 || min_length > max_length) {
    throw ValidationError(fmt::format("invalid length range [{}, {}]", min_length, max_length));
  }
  if (vocab_size < num_classes) {
    throw ValidationError(
        fmt::format("vocabulary of {} cannot cover {} classes", vocab_size, num_classes));
  }
  if (rule == Rule::KeywordCount) {
    if (keyword >= vocab_size) throw ValidationError("keyword token outside vocabulary");
    if (vocab_size < 2) throw ValidationError("keyword task needs a non-keyword token");
    if (max_length + 1 < num_classes) {
      throw ValidationError("sequences too short to express every keyword count class");
    }
  }
}

std::size_t label_of(const TaskSpec& spec, std::span<const Token> tokens) {
  if (spec.rule == Rule::KeywordCount) {
    const auto n = static_cast<std::size_t>(std::count(tokens.begin(), tokens.end(), spec.keyword));
    return n % spec.num_classes;
  }
  const auto counts = class_counts(spec, tokens);
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

bool has_clear_label(const TaskSpec& spec, std::span<const Token> tokens) {
  if (spec.rule == Rule::KeywordCount) return true;
  const auto counts = class_counts(spec, tokens);
  const auto top = *std::max_element(counts.begin(), counts.end());
  return std::count(counts.begin(), counts.end(), top) == 1;
}

namespace {

noise::Example keyword_example(const TaskSpec& spec, RngStream& rng) {
  const std::size_t len = spec.min_length + rng.index(spec.max_length - spec.min_length + 1);
  const std::size_t label = rng.index(spec.num_classes);
  // Keyword counts congruent to the label that fit in the sequence.
  std::vector<std::size_t> options;
  for (std::size_t k = label; k <= len; k += spec.num_classes) options.push_back(k);
  if (options.empty()) {
    // Sequence too short for this class; fall back to a length that fits.
    return keyword_example(spec, rng);
  }
  const std::size_t count = options[rng.index(options.size())];
  noise::Example ex;
  ex.tokens.resize(len);
  for (auto& t : ex.tokens) {
    Token tok = static_cast<Token>(rng.index(spec.vocab_size - 1));
    if (tok >= spec.keyword) ++tok;  // skip the keyword
    t = tok;
  }
  // Partial Fisher-Yates picks `count` distinct keyword positions.
  std::vector<std::size_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.index(len - i);
    std::swap(positions[i], positions[j]);
    ex.tokens[positions[i]] = spec.keyword;
  }
  ex.label = label;
  return ex;
}

noise::Example majority_example(const TaskSpec& spec, RngStream& rng) {
  for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
    const std::size_t len = spec.min_length + rng.index(spec.max_length - spec.min_length + 1);
    noise::Example ex;
    ex.tokens.resize(len);
    for (auto& t : ex.tokens) t = static_cast<Token>(rng.index(spec.vocab_size));
    if (!has_clear_label(spec, ex.tokens)) continue;
    ex.label = label_of(spec, ex.tokens);
    return ex;
  }
  throw ValidationError("could not draw an untied majority example; widen the length range");
}

}  // namespace

noise::Dataset gen_dataset(const TaskSpec& spec, std::size_t count, std::uint64_t stream) {
  spec.validate();
  if (count < 1) throw ValidationError("dataset size must be at least 1");
  noise::Dataset ds;
  ds.vocab_size = spec.vocab_size;
  ds.num_classes = spec.num_classes;
  ds.examples.reserve(count);
  const RngStream root(spec.seed, stream);
  for (std::size_t i = 0; i < count; ++i) {
    RngStream rng = root.child(i);
    ds.examples.push_back(spec.rule == Rule::KeywordCount ? keyword_example(spec, rng)
                                                          : majority_example(spec, rng));
  }
  return ds;
}

NoisySplit make_noisy_split(const TaskSpec& spec, std::size_t train_size, std::size_t eval_size,
                            const noise::DiscreteNoiseSpec& noise) {
  NoisySplit split;
  const auto clean_train = gen_dataset(spec, train_size, kTrainStream);
  auto augmented = noise::augment_dataset(clean_train, noise, RngStream(noise.seed, kNoiseStream));
  split.train = std::move(augmented.dataset);
  split.manifest = std::move(augmented.manifest);
  split.eval = gen_dataset(spec, eval_size, kEvalStream);
  return split;
}

double label_inconsistency(const TaskSpec& spec, const noise::Dataset& dataset) {
  if (dataset.examples.empty()) throw ValidationError("empty dataset");
  std::size_t bad = 0;
  for (const auto& ex : dataset.examples) {
    if (label_of(spec, ex.tokens) != ex.label) ++bad;
  }
  return static_cast<double>(bad) / static_cast<double>(dataset.size());
}

}  // namespace lope::tasks
