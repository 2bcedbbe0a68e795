#pragma once

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "selmask/corpus.hpp"
#include "selmask/model.hpp"

namespace selmask {

/// Anything that maps a content token sequence to a class distribution.
class SequenceClassifier {
 public:
  virtual ~SequenceClassifier() = default;
  virtual std::vector<double> class_probabilities(std::span<const TokenId> ids) const = 0;
  /// Longest content sequence accepted.
  virtual std::size_t max_length() const = 0;
};

/// Adapter over a frozen fine-tuned model (inference mode).
class ModelClassifier final : public SequenceClassifier {
 public:
  explicit ModelClassifier(const Parameters& params) : params_(params) {}
  std::vector<double> class_probabilities(std::span<const TokenId> ids) const override {
    return seq_classify(params_, ids);
  }
  std::size_t max_length() const override { return params_.config.max_content_length(); }

 private:
  const Parameters& params_;
};

/// Importance threshold; a token is important when its score is strictly
/// below delta.
class Threshold {
 public:
  static constexpr double kDefault = 0.05;
  explicit Threshold(double delta = kDefault);
  double value() const { return delta_; }

 private:
  double delta_;
};

/// Running subsequence of already-processed tokens that were not judged
/// important. Positions refer to the source sequence.
class ScoringBuffer {
 public:
  void push(TokenId id, std::size_t position);
  void pop();
  std::span<const TokenId> ids() const { return ids_; }
  std::span<const std::size_t> positions() const { return positions_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }

 private:
  std::vector<TokenId> ids_;
  std::vector<std::size_t> positions_;
};

/// full_confidence - P(label | buffer ++ [token]). Throws
/// std::invalid_argument when buffer ++ [token] exceeds the classifier limit.
double score_token(const SequenceClassifier& classifier, int label, double full_confidence,
                   const ScoringBuffer& buffer, TokenId token);

struct ImportanceOptions {
  Threshold delta{};
  /// Skip sequences the classifier gets wrong on the full input.
  bool skip_misclassified = false;
  /// Additionally require argmax P(. | buffer ++ [token]) == label.
  bool require_buffer_argmax = false;
};

struct ImportanceRecord {
  TokenSequence seq;
  int label = 0;
  std::vector<double> scores;
  std::vector<std::uint8_t> important;
  double full_confidence = 0.0;
  /// Source positions left in the buffer after the last token.
  std::vector<std::size_t> final_buffer;
  bool misclassified = false;

  std::size_t important_count() const;
};

ImportanceRecord find_important_tokens(const SequenceClassifier& classifier, const TokenSequence& seq, int label,
                                       const ImportanceOptions& options = {});

struct AnnotationSummary {
  std::size_t sequences = 0;
  std::size_t tokens = 0;
  std::size_t important = 0;
  std::size_t misclassified = 0;
  std::size_t skipped = 0;
  /// Sequences where every token was judged important (empty final buffer).
  std::size_t all_important = 0;
  std::size_t no_important = 0;
  struct ClassCounts {
    std::size_t sequences = 0;
    std::size_t tokens = 0;
    std::size_t important = 0;
  };
  std::map<int, ClassCounts> per_class;

  double important_fraction() const {
    return tokens ? static_cast<double>(important) / static_cast<double>(tokens) : 0.0;
  }
};

/// Annotates every labeled record of a task corpus (optionally one split).
/// With skip_misclassified, misclassified sequences are counted in the
/// summary but no record is emitted for them.
std::vector<ImportanceRecord> annotate_corpus(const SequenceClassifier& classifier, const CorpusTier& task,
                                              const ImportanceOptions& options,
                                              std::optional<Split> split = std::nullopt,
                                              AnnotationSummary* summary = nullptr, std::size_t workers = 1);

}  // namespace selmask
