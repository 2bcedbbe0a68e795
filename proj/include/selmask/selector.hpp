#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "selmask/corpus.hpp"
#include "selmask/importance.hpp"
#include "selmask/model.hpp"
#include "selmask/training.hpp"

namespace selmask {

inline constexpr double kSelectorLabelWeight = 1.5;
inline constexpr double kSelectorThreshold = 0.5;

/// Token sequences with per-token importance labels; classification labels
/// are not carried over.
struct SelectorTrainingSet {
  std::vector<TokenExample> examples;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::vector<std::string> warnings;

  double positive_rate() const {
    const auto n = positives + negatives;
    return n ? static_cast<double>(positives) / static_cast<double>(n) : 0.0;
  }
};

SelectorTrainingSet build_selector_training_set(std::span<const ImportanceRecord> annotations);

struct TokenScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

TokenScores token_scores(std::size_t true_positive, std::size_t false_positive, std::size_t false_negative);

struct SelectorEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  TokenScores heldout;
};

struct SelectorFit {
  Parameters params;
  std::vector<SelectorEpoch> log;
};

/// Trains the token head (and trunk) from `init` with weighted cross-entropy.
/// Empty config.label_weights default to (1, 1.5). A deterministic
/// `heldout_fraction` slice is kept out of training for per-epoch F1.
SelectorFit train_selector(Parameters init, const SelectorTrainingSet& data, TrainConfig config,
                           double heldout_fraction = 0.1, double threshold = kSelectorThreshold);

struct SelectionMask {
  TokenSequence seq;
  std::vector<std::uint8_t> selected;
  std::vector<double> probabilities;

  std::size_t selected_count() const;
};

/// Throws ConfigError unless threshold lies in (0, 1).
void validate_selection_threshold(double threshold);

SelectionMask select_tokens(const Parameters& selector, const TokenSequence& seq,
                            double threshold = kSelectorThreshold);

struct SelectionSummary {
  std::size_t sequences = 0;
  std::size_t tokens = 0;
  std::size_t selected = 0;
  std::size_t zero_selection = 0;
  /// Per-sequence selected-rate histogram, 10 bins over [0, 1].
  std::array<std::size_t, 10> histogram{};

  double selected_rate() const {
    return tokens ? static_cast<double>(selected) / static_cast<double>(tokens) : 0.0;
  }
  void add(const SelectionMask& mask);
  void merge(const SelectionSummary& other);
};

/// Scores every sequence of a Domain (or General) tier. A Task tier is
/// rejected.
std::vector<SelectionMask> mask_indomain_corpus(const Parameters& selector, const CorpusTier& domain,
                                                double threshold = kSelectorThreshold,
                                                SelectionSummary* summary = nullptr, std::size_t workers = 1);

}  // namespace selmask
