#include "selmask/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "selmask/error.hpp"

namespace selmask {

namespace {

constexpr std::size_t kMaxCharsPerWord = 100;

bool is_space(unsigned char c) { return std::isspace(c) != 0; }
bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }

bool is_reserved(std::string_view word) {
  return std::find(kReservedTokens.begin(), kReservedTokens.end(), word) != kReservedTokens.end();
}

// Whitespace split, then ASCII punctuation as standalone words. Reserved
// strings survive untouched; everything else is lowercased.
std::vector<std::string> basic_split(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(static_cast<unsigned char>(text[j]))) ++j;
    if (j == i) break;
    std::string_view chunk = text.substr(i, j - i);
    i = j;
    if (is_reserved(chunk)) {
      words.emplace_back(chunk);
      continue;
    }
    std::string current;
    for (char ch : chunk) {
      auto c = static_cast<unsigned char>(ch);
      if (is_punct(c)) {
        if (!current.empty()) words.push_back(std::move(current));
        current.clear();
        words.emplace_back(1, ch);
      } else {
        current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
      }
    }
    if (!current.empty()) words.push_back(std::move(current));
  }
  return words;
}

void wordpiece(const std::string& word, const Vocab& vocab, TokenSequence& out) {
  if (word.size() > kMaxCharsPerWord) {
    out.tokens.emplace_back(kReservedTokens[kUnkId]);
    out.ids.push_back(kUnkId);
    return;
  }
  std::vector<std::pair<std::string, TokenId>> pieces;
  std::size_t start = 0;
  while (start < word.size()) {
    std::size_t end = word.size();
    std::optional<TokenId> found;
    std::string piece;
    while (start < end) {
      piece = word.substr(start, end - start);
      if (start > 0) piece.insert(0, "##");
      found = vocab.find(piece);
      if (found) break;
      --end;
    }
    if (!found) {
      out.tokens.emplace_back(kReservedTokens[kUnkId]);
      out.ids.push_back(kUnkId);
      return;
    }
    pieces.emplace_back(std::move(piece), *found);
    start = end;
  }
  for (auto& [tok, id] : pieces) {
    out.tokens.push_back(std::move(tok));
    out.ids.push_back(id);
  }
}

}  // namespace

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  for (std::size_t r = 0; r < kNumReserved; ++r) {
    auto it = std::find(tokens.begin(), tokens.end(), kReservedTokens[r]);
    if (it == tokens.end())
      throw ConfigError("vocab: missing reserved token " + std::string(kReservedTokens[r]));
    if (static_cast<std::size_t>(it - tokens.begin()) != r)
      throw ConfigError("vocab: reserved token " + std::string(kReservedTokens[r]) +
                        " must be on line " + std::to_string(r + 1));
  }
  Vocab vocab;
  vocab.index_.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty()) throw ConfigError("vocab: empty token on line " + std::to_string(i + 1));
    auto [it, inserted] = vocab.index_.emplace(tokens[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw ConfigError("vocab: duplicate token \"" + tokens[i] + "\" on lines " +
                        std::to_string(it->second + 1) + " and " + std::to_string(i + 1));
    }
  }
  vocab.tokens_ = std::move(tokens);
  return vocab;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("vocab: cannot open " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  // Tolerate a trailing newline at end of file.
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("vocab: cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenSequence tokenize(std::string_view text, const Vocab& vocab, std::size_t max_length) {
  TokenSequence out;
  for (const auto& word : basic_split(text)) {
    if (out.size() >= max_length) break;
    if (auto id = vocab.find(word); id && is_reserved(word)) {
      out.tokens.push_back(word);
      out.ids.push_back(*id);
      continue;
    }
    wordpiece(word, vocab, out);
  }
  if (out.size() > max_length) {
    out.tokens.resize(max_length);
    out.ids.resize(max_length);
  }
  return out;
}

std::string detokenize(const TokenSequence& seq) {
  std::string text;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    const std::string& tok = seq.tokens[i];
    if (Vocab::is_continuation(tok)) {
      if (i == 0) throw MalformedSequenceError("detokenize: sequence starts with continuation \"" + tok + "\"");
      text.append(tok, 2, std::string::npos);
    } else {
      if (i > 0) text.push_back(' ');
      text += tok;
    }
  }
  return text;
}

TokenSequence sequence_from_ids(std::span<const TokenId> ids, const Vocab& vocab) {
  TokenSequence seq;
  seq.ids.assign(ids.begin(), ids.end());
  seq.tokens.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size())
      throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of size " +
                        std::to_string(vocab.size()));
    seq.tokens.push_back(vocab.token(id));
  }
  return seq;
}

std::string_view to_string(Tier tier) {
  switch (tier) {
    case Tier::kGeneral: return "general";
    case Tier::kDomain: return "domain";
    case Tier::kTask: return "task";
  }
  return "?";
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kDev: return "dev";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "dev") return Split::kDev;
  if (name == "test") return Split::kTest;
  throw ConfigError("unknown split \"" + std::string(name) + "\" (expected train, dev or test)");
}

Tier parse_tier(std::string_view name) {
  if (name == "general") return Tier::kGeneral;
  if (name == "domain") return Tier::kDomain;
  if (name == "task") return Tier::kTask;
  throw ConfigError("unknown tier \"" + std::string(name) + "\"");
}

std::vector<LabeledSequence> CorpusTier::labeled(std::optional<Split> split) const {
  if (tier != Tier::kTask) throw ConfigError("labeled sequences requested from unlabeled tier " + std::string(to_string(tier)));
  std::vector<LabeledSequence> out;
  for (const auto& r : records) {
    if (split && r.split != split) continue;
    out.push_back({r.seq, *r.label, *r.split});
  }
  return out;
}

std::size_t CorpusTier::count(Split split) const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                [&](const CorpusRecord& r) { return r.split == split; }));
}

void CorpusTier::recount() {
  word_count = 0;
  for (const auto& r : records) word_count += r.seq.size();
}

CorpusTier load_corpus(const std::filesystem::path& path, Tier tier, const Vocab& vocab,
                       std::size_t max_length, std::optional<int> num_classes) {
  std::ifstream in(path);
  if (!in) throw ConfigError("corpus: cannot open " + path.string());
  CorpusTier corpus;
  corpus.tier = tier;
  int max_label = -1;
  std::string line;
  std::size_t line_no = 0;
  auto where = [&] { return path.string() + ":" + std::to_string(line_no); };
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](char c) { return is_space(static_cast<unsigned char>(c)); }))
      continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(where() + ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
      throw ConfigError(where() + ": record lacks a string \"text\" field");
    CorpusRecord rec;
    rec.seq = tokenize(j["text"].get<std::string>(), vocab, max_length);
    if (tier == Tier::kTask) {
      if (!j.contains("label")) throw ConfigError(where() + ": task record missing \"label\"");
      if (!j.contains("split")) throw ConfigError(where() + ": task record missing \"split\"");
      if (!j["label"].is_number_integer() || j["label"].get<int>() < 0)
        throw ConfigError(where() + ": \"label\" must be a non-negative integer");
      if (!j["split"].is_string()) throw ConfigError(where() + ": \"split\" must be a string");
      rec.label = j["label"].get<int>();
      try {
        rec.split = parse_split(j["split"].get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(where() + ": " + e.what());
      }
      if (num_classes && *rec.label >= *num_classes)
        throw ConfigError(where() + ": label " + std::to_string(*rec.label) + " >= declared classes " +
                          std::to_string(*num_classes));
      max_label = std::max(max_label, *rec.label);
    }
    corpus.word_count += rec.seq.size();
    corpus.records.push_back(std::move(rec));
  }
  if (tier == Tier::kTask) corpus.num_classes = num_classes.value_or(max_label + 1);
  return corpus;
}

void save_corpus(const CorpusTier& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("corpus: cannot write " + path.string());
  for (const auto& r : corpus.records) {
    nlohmann::json j;
    j["text"] = detokenize(r.seq);
    if (corpus.tier == Tier::kTask) {
      j["label"] = *r.label;
      j["split"] = std::string(to_string(*r.split));
    }
    out << j.dump() << '\n';
  }
}

}  // namespace selmask
