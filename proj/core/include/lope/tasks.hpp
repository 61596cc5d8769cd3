#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

#include "lope/noise.hpp"

// Synthetic classification tasks whose labels are a fixed rule of the clean
// token sequence.
namespace lope::tasks {

enum class Rule : std::uint8_t {
  KeywordCount,    // label = (number of keyword tokens) mod C
  MajoritySymbol,  // label = most frequent token class, class(t) = t mod C
};

std::string_view to_string(Rule rule);
Rule parse_rule(std::string_view name);

struct TaskSpec {
  std::size_t vocab_size = 32;
  std::size_t min_length = 8;
  std::size_t max_length = 16;
  std::size_t num_classes = 4;
  Rule rule = Rule::MajoritySymbol;
  noise::Token keyword = 0;
  std::uint64_t seed = 614;

  void validate() const;
};

/// Applies the task rule. MajoritySymbol ties resolve to the lowest class.
std::size_t label_of(const TaskSpec& spec, std::span<const noise::Token> tokens);

/// True when the MajoritySymbol count has a unique maximum (always true for
/// KeywordCount).
bool has_clear_label(const TaskSpec& spec, std::span<const noise::Token> tokens);

/// `count` rule-consistent examples drawn from `stream` of the spec's seed.
/// KeywordCount draws the label uniformly and places matching keywords;
/// MajoritySymbol draws uniform tokens and rejects tied sequences.
noise::Dataset gen_dataset(const TaskSpec& spec, std::size_t count, std::uint64_t stream = 0);

struct NoisySplit {
  noise::Dataset train;  // corrupted tokens, labels of the clean sequence
  noise::Dataset eval;   // clean
  std::vector<noise::ManifestEntry> manifest;
};

/// Train and eval come from disjoint random streams; only train is corrupted.
NoisySplit make_noisy_split(const TaskSpec& spec, std::size_t train_size, std::size_t eval_size,
                            const noise::DiscreteNoiseSpec& noise);

/// Fraction of examples whose stored label differs from the rule applied to
/// the stored tokens.
double label_inconsistency(const TaskSpec& spec, const noise::Dataset& dataset);

}  // namespace lope::tasks
