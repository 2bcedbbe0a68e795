#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace selmask {

using TokenId = std::int32_t;

/// Reserved entries occupy ids 0..4 in this order in every vocabulary.
enum ReservedId : TokenId {
  kPadId = 0,
  kUnkId = 1,
  kClsId = 2,
  kSepId = 3,
  kMaskId = 4,
};
inline constexpr std::size_t kNumReserved = 5;
inline constexpr std::array<std::string_view, kNumReserved> kReservedTokens = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

/// Framing tokens are added by the model's input builder and are never
/// scored or masked.
inline bool is_framing(TokenId id) { return id == kPadId || id == kClsId || id == kSepId; }

inline constexpr std::size_t kNoLengthLimit = std::numeric_limits<std::size_t>::max();

/// Default content lengths for classification / selector data and for
/// pre-training corpora.
inline constexpr std::size_t kFinetuneMaxLength = 128;
inline constexpr std::size_t kPretrainMaxLength = 256;

class Vocab {
 public:
  Vocab() = default;

  /// Builds a vocabulary from tokens in id order. Throws ConfigError when a
  /// reserved token is missing / misplaced or a token is duplicated.
  static Vocab from_tokens(std::vector<std::string> tokens);

  /// One token per line, UTF-8, reserved tokens first.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::optional<TokenId> find(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_continuation(std::string_view token) { return token.starts_with("##"); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline Vocab load_vocab(const std::filesystem::path& path) { return Vocab::load(path); }

struct TokenSequence {
  std::vector<std::string> tokens;
  std::vector<TokenId> ids;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Lowercase, split on whitespace, split ASCII punctuation into standalone
/// words, then greedy longest-match-first wordpiece per word. A word with no
/// full decomposition becomes a single [UNK]. Reserved token strings written
/// verbatim (e.g. "[UNK]") are kept as-is. Truncates from the right to
/// max_length tokens.
TokenSequence tokenize(std::string_view text, const Vocab& vocab,
                       std::size_t max_length = kNoLengthLimit);

/// Joins "##" pieces to their predecessor; other tokens are space-separated.
/// Throws MalformedSequenceError when the first token is a continuation.
std::string detokenize(const TokenSequence& seq);

/// Rebuilds the token strings for a list of ids.
TokenSequence sequence_from_ids(std::span<const TokenId> ids, const Vocab& vocab);

enum class Tier { kGeneral, kDomain, kTask };
enum class Split { kTrain, kDev, kTest };

std::string_view to_string(Tier tier);
std::string_view to_string(Split split);
Split parse_split(std::string_view name);
Tier parse_tier(std::string_view name);

struct LabeledSequence {
  TokenSequence seq;
  int label = 0;
  Split split = Split::kTrain;
};

/// One line of a corpus file. Task-tier records always carry label and
/// split; General/Domain records never do.
struct CorpusRecord {
  TokenSequence seq;
  std::optional<int> label;
  std::optional<Split> split;
};

struct CorpusTier {
  Tier tier = Tier::kDomain;
  std::vector<CorpusRecord> records;
  std::size_t word_count = 0;
  int num_classes = 0;

  std::size_t size() const { return records.size(); }
  /// Task tier only.
  std::vector<LabeledSequence> labeled(std::optional<Split> split = std::nullopt) const;
  std::size_t count(Split split) const;
  void recount();
};

/// Reads line-delimited JSON records ({"text"} or {"text","label","split"}).
/// Task tier requires label and split on every record; labels on other tiers
/// are dropped. num_classes, when given, bounds the labels; otherwise it is
/// inferred as max label + 1.
CorpusTier load_corpus(const std::filesystem::path& path, Tier tier, const Vocab& vocab,
                       std::size_t max_length = kNoLengthLimit,
                       std::optional<int> num_classes = std::nullopt);

void save_corpus(const CorpusTier& corpus, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic planted-lexicon benchmark

struct SynthSpec {
  std::size_t vocab_size = 600;  // including the five reserved tokens
  std::size_t num_classes = 2;
  std::size_t lexicon_words_per_class = 60;
  /// Optional explicit lexicon (word, class). When empty one is generated.
  std::vector<std::pair<std::string, int>> lexicon;
  /// Class-correlated context words that are not part of the lexicon.
  std::size_t cue_words_per_class = 20;
  double cue_rate = 0.15;
  double cue_agreement = 0.7;

  std::size_t min_length = 8;
  std::size_t max_length = 20;
  double planted_rate = 0.12;
  /// Probability that a planted word (task/domain) matches the latent class.
  double agreement = 0.85;
  /// Label-flip probability applied after the majority rule.
  double noise_rate = 0.0;
  /// Sequences with fewer planted words get extra ones at random positions.
  std::size_t min_planted = 1;

  std::size_t task_train = 400;
  std::size_t task_dev = 100;
  std::size_t task_test = 1000;
  std::size_t domain_size = 20000;
  std::size_t general_size = 20000;

  std::uint64_t seed = 7;

  void validate() const;
};

struct SynthCorpora {
  Vocab vocab;
  CorpusTier task;
  CorpusTier domain;
  CorpusTier general;
  /// Planted positions per sequence, parallel to task / domain records.
  std::vector<std::vector<std::size_t>> task_truth;
  std::vector<std::vector<std::size_t>> domain_truth;
  /// Lexicon token id -> class.
  std::unordered_map<TokenId, int> lexicon;
};

SynthCorpora generate_synth(const SynthSpec& spec);

}  // namespace selmask
