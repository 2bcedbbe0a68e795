#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "selmask/corpus.hpp"
#include "selmask/model.hpp"
#include "selmask/selector.hpp"

namespace selmask {

enum class Corruption : std::uint8_t { kMask, kRandom, kKeep };
enum class PolicyTag : std::uint8_t { kRandom, kSelective, kFallback };

std::string_view to_string(PolicyTag tag);
PolicyTag parse_policy(std::string_view name);

/// Replacement applied at every masked position: [MASK] / random token /
/// unchanged.
struct CorruptionRule {
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;

  static CorruptionRule pure_mask() { return {1.0, 0.0, 0.0}; }
  void validate() const;
};

struct RandomPolicy {
  double rate = 0.15;
  void validate() const;
};

struct SelectivePolicy {
  /// Maximum fraction of a sequence that may be masked.
  double cap = 0.5;
  /// Random rate for sequences where nothing is selected.
  double fallback_rate = 0.15;
  void validate() const;
};

struct MaskedExample {
  std::vector<TokenId> input_ids;        // after corruption
  std::vector<std::size_t> positions;    // ascending, distinct
  std::vector<TokenId> targets;          // original ids at positions
  std::vector<Corruption> outcomes;      // parallel to positions
  PolicyTag policy = PolicyTag::kRandom;

  MlmExample to_mlm() const { return {input_ids, positions, targets}; }
  bool operator==(const MaskedExample&) const = default;
};

/// round-half-up(rate * n) with a minimum of one.
std::size_t masked_count(double rate, std::size_t n);

/// Chooses masked_count(rate, eligible) positions uniformly without
/// replacement among non-framing tokens, then corrupts per rule. Throws
/// std::invalid_argument for a sequence with no maskable token.
MaskedExample apply_random_masking(std::span<const TokenId> ids, const RandomPolicy& policy,
                                   const CorruptionRule& rule, std::size_t vocab_size, std::uint64_t seed);

/// Masks the selected positions, uniformly down-sampled to floor(cap * n)
/// when over the cap. Falls back to random masking at fallback_rate (tag
/// kFallback) when nothing is selected or the cap admits no position.
MaskedExample apply_selective_masking(std::span<const TokenId> ids, const SelectionMask& mask,
                                      const SelectivePolicy& policy, const CorruptionRule& rule,
                                      std::size_t vocab_size, std::uint64_t seed);

/// Original sequence recovered by writing targets back at positions.
std::vector<TokenId> reconstruct(const MaskedExample& example);

struct MaskingStats {
  std::size_t examples = 0;
  std::size_t tokens = 0;
  std::size_t masked = 0;
  std::size_t random_examples = 0;
  std::size_t selective_examples = 0;
  std::size_t fallback_examples = 0;
  std::size_t mask_outcomes = 0;
  std::size_t random_outcomes = 0;
  std::size_t keep_outcomes = 0;

  double realized_rate() const {
    return tokens ? static_cast<double>(masked) / static_cast<double>(tokens) : 0.0;
  }
  double fallback_frequency() const {
    return examples ? static_cast<double>(fallback_examples) / static_cast<double>(examples) : 0.0;
  }
};

MaskingStats masking_stats(std::span<const MaskedExample> examples);

/// Per-sequence seeds derive from (seed, index); output does not depend on
/// the worker count. Empty sequences are skipped.
std::vector<MaskedExample> mask_corpus_random(const CorpusTier& corpus, const RandomPolicy& policy,
                                              const CorruptionRule& rule, std::size_t vocab_size,
                                              std::uint64_t seed, std::size_t workers = 1);

std::vector<MaskedExample> mask_corpus_selective(std::span<const SelectionMask> masks, const SelectivePolicy& policy,
                                                 const CorruptionRule& rule, std::size_t vocab_size,
                                                 std::uint64_t seed, std::size_t workers = 1);

}  // namespace selmask
