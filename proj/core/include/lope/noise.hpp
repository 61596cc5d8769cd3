#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lope/numerics.hpp"

// Hybrid noise injection: discrete token-level corruption and bounded
// continuous noise on embeddings.
namespace lope::noise {

using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

enum class NoiseOp : std::uint8_t { Shuffle, Insert, Delete, Replace, LabelFlip };

std::string_view to_string(NoiseOp op);
NoiseOp parse_noise_op(std::string_view name);

struct DiscreteNoiseSpec {
  std::vector<NoiseOp> ops;
  double rate = 0.0;
  std::vector<Token> alphabet;
  std::uint64_t seed = 0;

  bool has(NoiseOp op) const;
  // Ops that edit token positions (everything but LabelFlip), in declared order.
  std::vector<NoiseOp> token_ops() const;
  void validate() const;
};

struct ContinuousNoiseSpec {
  double alpha = 0.0;

  void validate() const;
};

struct Example {
  TokenSeq tokens;
  std::size_t label = 0;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  std::vector<Example> examples;
  std::size_t vocab_size = 0;
  std::size_t num_classes = 0;

  std::size_t size() const { return examples.size(); }
  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Edit {
  // Position in the original sequence; nullopt for label edits.
  std::optional<std::size_t> position;
  NoiseOp op = NoiseOp::Shuffle;
  // The op was selected but could not apply (Delete on a length-1 sequence,
  // Shuffle without a neighbor).
  bool skipped = false;

  friend bool operator==(const Edit&, const Edit&) = default;
};

struct DiscreteResult {
  TokenSeq tokens;
  std::vector<Edit> manifest;  // ascending by position
};

struct ManifestEntry {
  std::size_t example_index = 0;
  Edit edit;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct AugmentResult {
  Dataset dataset;
  std::vector<ManifestEntry> manifest;
};

/// Corrupts one token sequence.
///
/// Every position is selected independently with probability `spec.rate`; a
/// selected position receives one token op drawn uniformly from the enabled
/// ones. Selections and draws happen left to right, edits are then applied
/// right to left so that Insert/Delete never shift a pending position.
///   Shuffle  swaps with the right neighbor (the last position swaps left)
///   Insert   puts a random alphabet token after the position
///   Delete   removes the token unless the sequence would become empty
///   Replace  substitutes a random alphabet token
DiscreteResult inject_discrete(std::span<const Token> tokens, const DiscreteNoiseSpec& spec,
                               numerics::RngStream& rng);

/// E'[t,:] = E[t,:] + alpha * n_t with n_t ~ U(-1,1)^d on rows where mask[t]
/// is set; other rows are copied bit for bit. |E' - E| <= alpha holds exactly
/// in floating point.
numerics::Matrix inject_continuous(const numerics::Matrix& embeddings,
                                   std::span<const std::uint8_t> mask,
                                   const ContinuousNoiseSpec& spec, numerics::RngStream& rng);

/// Applies inject_discrete to each example with its own child stream, then
/// (if LabelFlip is enabled) flips each label to a different uniformly drawn
/// class with probability `spec.rate`.
AugmentResult augment_dataset(const Dataset& dataset, const DiscreteNoiseSpec& spec,
                              const numerics::RngStream& rng);

// Dataset file: one record per line, `label<TAB>tok tok tok`.
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path, std::size_t vocab_size,
                     std::size_t num_classes);
std::string format_dataset(const Dataset& dataset);
Dataset parse_dataset(std::string_view text, std::size_t vocab_size, std::size_t num_classes);

// Manifest file: `example_index<TAB>position<TAB>op`, position `-` for labels.
void write_manifest(const std::vector<ManifestEntry>& manifest, const std::filesystem::path& path);
std::string format_manifest(const std::vector<ManifestEntry>& manifest);
std::vector<ManifestEntry> parse_manifest(std::string_view text);

}  // namespace lope::noise
