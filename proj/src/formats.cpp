#include "selmask/formats.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "selmask/error.hpp"

namespace selmask {

using nlohmann::json;

namespace {

void write_lines(const std::filesystem::path& path, std::size_t n, const std::function<json(std::size_t)>& row) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    out += row(i).dump();
    out += '\n';
  }
  write_text_file(path, out);
}

void read_lines(const std::filesystem::path& path, const std::function<void(const json&)>& row) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      row(json::parse(line));
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

TokenSequence sequence_from_tokens(const std::vector<std::string>& tokens, const Vocab& vocab) {
  TokenSequence seq;
  seq.tokens = tokens;
  for (const auto& t : tokens) {
    auto id = vocab.find(t);
    if (!id) throw ConfigError("token \"" + t + "\" not in vocabulary");
    seq.ids.push_back(*id);
  }
  return seq;
}

}  // namespace

void write_annotations(const std::filesystem::path& path, std::span<const ImportanceRecord> records) {
  write_lines(path, records.size(), [&](std::size_t i) {
    const auto& r = records[i];
    std::vector<int> important(r.important.begin(), r.important.end());
    return json{{"tokens", r.seq.tokens}, {"label", r.label}, {"scores", r.scores}, {"important", important}};
  });
}

std::vector<ImportanceRecord> read_annotations(const std::filesystem::path& path, const Vocab& vocab) {
  std::vector<ImportanceRecord> out;
  read_lines(path, [&](const json& j) {
    ImportanceRecord r;
    r.seq = sequence_from_tokens(j.at("tokens").get<std::vector<std::string>>(), vocab);
    r.label = j.at("label").get<int>();
    r.scores = j.at("scores").get<std::vector<double>>();
    for (int v : j.at("important").get<std::vector<int>>()) {
      if (v != 0 && v != 1) throw ConfigError("important flags must be 0 or 1");
      r.important.push_back(static_cast<std::uint8_t>(v));
    }
    if (r.scores.size() != r.seq.size() || r.important.size() != r.seq.size())
      throw ConfigError("scores / important not parallel to tokens");
    out.push_back(std::move(r));
  });
  return out;
}

void write_selections(const std::filesystem::path& path, std::span<const SelectionMask> masks) {
  write_lines(path, masks.size(), [&](std::size_t i) {
    const auto& m = masks[i];
    std::vector<int> selected(m.selected.begin(), m.selected.end());
    return json{{"tokens", m.seq.tokens}, {"selected", selected}, {"probs", m.probabilities}};
  });
}

std::vector<SelectionMask> read_selections(const std::filesystem::path& path, const Vocab& vocab) {
  std::vector<SelectionMask> out;
  read_lines(path, [&](const json& j) {
    SelectionMask m;
    m.seq = sequence_from_tokens(j.at("tokens").get<std::vector<std::string>>(), vocab);
    for (int v : j.at("selected").get<std::vector<int>>()) {
      if (v != 0 && v != 1) throw ConfigError("selected flags must be 0 or 1");
      m.selected.push_back(static_cast<std::uint8_t>(v));
    }
    m.probabilities = j.at("probs").get<std::vector<double>>();
    if (m.selected.size() != m.seq.size() || m.probabilities.size() != m.seq.size())
      throw ConfigError("selected / probs not parallel to tokens");
    out.push_back(std::move(m));
  });
  return out;
}

void write_masked(const std::filesystem::path& path, std::span<const MaskedExample> examples) {
  write_lines(path, examples.size(), [&](std::size_t i) {
    const auto& e = examples[i];
    return json{{"input_ids", e.input_ids},
                {"positions", e.positions},
                {"targets", e.targets},
                {"policy", std::string(to_string(e.policy))}};
  });
}

std::vector<MaskedExample> read_masked(const std::filesystem::path& path) {
  std::vector<MaskedExample> out;
  read_lines(path, [&](const json& j) {
    MaskedExample e;
    e.input_ids = j.at("input_ids").get<std::vector<TokenId>>();
    e.positions = j.at("positions").get<std::vector<std::size_t>>();
    e.targets = j.at("targets").get<std::vector<TokenId>>();
    e.policy = parse_policy(j.at("policy").get<std::string>());
    if (e.positions.size() != e.targets.size()) throw ConfigError("positions / targets differ in length");
    if (e.positions.empty()) throw ConfigError("masked example without positions");
    for (std::size_t k = 0; k < e.positions.size(); ++k) {
      const auto p = e.positions[k];
      if (p >= e.input_ids.size()) throw ConfigError("masked position out of range");
      if (k && p <= e.positions[k - 1]) throw ConfigError("masked positions must be ascending");
      const TokenId in = e.input_ids[p];
      e.outcomes.push_back(in == kMaskId ? Corruption::kMask
                           : in == e.targets[k] ? Corruption::kKeep
                                                : Corruption::kRandom);
    }
    out.push_back(std::move(e));
  });
  return out;
}

void write_truth(const std::filesystem::path& path, std::span<const std::vector<std::size_t>> truth) {
  write_lines(path, truth.size(), [&](std::size_t i) { return json{{"positions", truth[i]}}; });
}

std::vector<std::vector<std::size_t>> read_truth(const std::filesystem::path& path) {
  std::vector<std::vector<std::size_t>> out;
  read_lines(path, [&](const json& j) { out.push_back(j.at("positions").get<std::vector<std::size_t>>()); });
  return out;
}

}  // namespace selmask
