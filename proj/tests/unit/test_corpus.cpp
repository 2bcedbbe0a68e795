#include <doctest.h>

#include <set>

#include "selmask/error.hpp"
#include "selmask/rng.hpp"
#include "test_util.hpp"

using namespace selmask;
using selmask::testing::make_vocab;
using selmask::testing::temp_dir;
using selmask::testing::write_lines;

namespace {

std::vector<std::string> strings(const TokenSequence& s) { return s.tokens; }

}  // namespace

TEST_CASE("vocab with only reserved lines") {
  auto dir = temp_dir("vocab");
  write_lines(dir / "v.txt", {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"});
  auto v = Vocab::load(dir / "v.txt");
  CHECK(v.size() == 5);
  CHECK(v.find("[MASK]") == kMaskId);
}

TEST_CASE("vocab continuation pieces") {
  auto v = make_vocab({"aw", "##sum"});
  REQUIRE(v.contains("aw"));
  REQUIRE(v.contains("##sum"));
  CHECK(Vocab::is_continuation("##sum"));
  CHECK_FALSE(Vocab::is_continuation("aw"));
}

TEST_CASE("vocab duplicate cites both lines") {
  auto dir = temp_dir("vocab_dup");
  std::vector<std::string> lines = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "a", "good", "b", "c", "d", "e", "good"};
  write_lines(dir / "v.txt", lines);
  try {
    Vocab::load(dir / "v.txt");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    CHECK(msg.find("7") != std::string::npos);
    CHECK(msg.find("12") != std::string::npos);
  }
}

TEST_CASE("vocab requires reserved tokens in order") {
  CHECK_THROWS_AS(Vocab::from_tokens({"[UNK]", "[PAD]", "[CLS]", "[SEP]", "[MASK]"}), ConfigError);
  CHECK_THROWS_AS(Vocab::from_tokens({"a", "b"}), ConfigError);
}

TEST_CASE("vocab save/load round trip") {
  auto dir = temp_dir("vocab_rt");
  auto v = make_vocab({"x", "##y", "z"});
  v.save(dir / "v.txt");
  CHECK(Vocab::load(dir / "v.txt").tokens() == v.tokens());
}

TEST_CASE("tokenize basics") {
  auto v = make_vocab({"aw", "##sum", "cakes", "are", "egg", "##less", "pan", "##ini", "##ist", "art", ",", "!"});
  CHECK(tokenize("", v).empty());
  CHECK(strings(tokenize("awsum", v)) == std::vector<std::string>{"aw", "##sum"});
  CHECK(strings(tokenize("Cakes are AWSUM!", v)) == std::vector<std::string>{"cakes", "are", "aw", "##sum", "!"});
  CHECK(strings(tokenize("qzx", v)) == std::vector<std::string>{"[UNK]"});
  CHECK(strings(tokenize("eggless, panini", v)) == std::vector<std::string>{"egg", "##less", ",", "pan", "##ini"});
  CHECK(strings(tokenize("artist", v)) == std::vector<std::string>{"art", "##ist"});
  CHECK(tokenize("awsum", v).ids == std::vector<TokenId>{*v.find("aw"), *v.find("##sum")});
}

TEST_CASE("tokenize prefers the longest piece") {
  auto v = make_vocab({"a", "ab", "abc", "##c", "##bc", "##d"});
  CHECK(strings(tokenize("abcd", v)) == std::vector<std::string>{"abc", "##d"});
  CHECK(strings(tokenize("abd", v)) == std::vector<std::string>{"ab", "##d"});
}

TEST_CASE("tokenize keeps reserved strings and truncates") {
  auto v = make_vocab({"a", "b"});
  CHECK(strings(tokenize("a [MASK] b", v)) == std::vector<std::string>{"a", "[MASK]", "b"});
  CHECK(tokenize("a b a b", v, 3).size() == 3);
}

TEST_CASE("detokenize") {
  auto v = make_vocab({"aw", "##sum", "x"});
  CHECK(detokenize(sequence_from_ids(std::vector<TokenId>{*v.find("aw"), *v.find("##sum")}, v)) == "awsum");
  CHECK(detokenize({}) == "");
  CHECK_THROWS_AS(detokenize(sequence_from_ids(std::vector<TokenId>{*v.find("##sum")}, v)), MalformedSequenceError);
}

TEST_CASE("tokenize after detokenize is the identity on random in-vocab sequences") {
  auto v = make_vocab({"aw", "##sum", "good", "food", "ba", "##na", "##ba", "cat", "##s", "dog", ".", "?"});
  std::vector<std::string> words = {"awsum", "good", "food", "banana", "bana", "cats", "dog", ".", "?", "cat", "ba"};
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    std::string text;
    const std::size_t n = rng.below(8);
    for (std::size_t i = 0; i < n; ++i) text += words[rng.below(words.size())] + " ";
    auto seq = tokenize(text, v);
    CHECK(tokenize(detokenize(seq), v) == seq);
  }
}

TEST_CASE("load_corpus tiers") {
  auto dir = temp_dir("corpus");
  auto v = make_vocab({"good", "bad", "food"});
  write_lines(dir / "d.jsonl", {R"({"text":"good food"})", R"({"text":"bad"})", R"({"text":"food food good"})"});
  auto d = load_corpus(dir / "d.jsonl", Tier::kDomain, v);
  CHECK(d.size() == 3);
  CHECK(d.word_count == 6);
  for (const auto& r : d.records) CHECK_FALSE(r.label.has_value());

  write_lines(dir / "t.jsonl", {R"({"text":"good","label":1,"split":"train"})", R"({"text":"bad","split":"dev"})"});
  try {
    load_corpus(dir / "t.jsonl", Tier::kTask, v);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
}

TEST_CASE("load_corpus preserves split counts") {
  auto dir = temp_dir("splits");
  auto v = make_vocab({"good", "bad"});
  std::vector<std::string> lines;
  auto add = [&](int n, const char* split) {
    for (int i = 0; i < n; ++i)
      lines.push_back(std::string(R"({"text":"good bad","label":)") + std::to_string(i % 2) + R"(,"split":")" + split +
                      "\"}");
  };
  add(8534, "train");
  add(1078, "dev");
  add(1050, "test");
  write_lines(dir / "t.jsonl", lines);
  auto t = load_corpus(dir / "t.jsonl", Tier::kTask, v);
  CHECK(t.count(Split::kTrain) == 8534);
  CHECK(t.count(Split::kDev) == 1078);
  CHECK(t.count(Split::kTest) == 1050);
  CHECK(t.num_classes == 2);
}

TEST_CASE("save_corpus round trip") {
  auto dir = temp_dir("corpus_rt");
  SynthSpec spec;
  spec.domain_size = 50;
  spec.general_size = 50;
  auto synth = generate_synth(spec);
  save_corpus(synth.task, dir / "task.jsonl");
  auto back = load_corpus(dir / "task.jsonl", Tier::kTask, synth.vocab);
  REQUIRE(back.size() == synth.task.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back.records[i].seq == synth.task.records[i].seq);
    CHECK(back.records[i].label == synth.task.records[i].label);
    CHECK(back.records[i].split == synth.task.records[i].split);
  }
}

TEST_CASE("generate_synth single planted word decides the label") {
  SynthSpec spec;
  spec.planted_rate = 0.0;
  spec.noise_rate = 0.0;
  spec.min_planted = 1;
  spec.domain_size = 20;
  spec.general_size = 20;
  // planted_rate 0 with noise 0 is rejected even with min_planted.
  CHECK_THROWS_AS(generate_synth(spec), ConfigError);
  spec.planted_rate = 1e-9;
  auto s = generate_synth(spec);
  for (std::size_t i = 0; i < s.task.size(); ++i) {
    REQUIRE(s.task_truth[i].size() == 1);
    const TokenId w = s.task.records[i].seq.ids[s.task_truth[i][0]];
    CHECK(s.lexicon.at(w) == *s.task.records[i].label);
  }
}

TEST_CASE("generate_synth determinism and truth") {
  SynthSpec spec;
  spec.domain_size = 300;
  spec.general_size = 300;
  auto a = generate_synth(spec);
  auto b = generate_synth(spec);
  CHECK(a.vocab.tokens() == b.vocab.tokens());
  CHECK(a.task_truth == b.task_truth);
  CHECK(a.domain_truth == b.domain_truth);
  for (std::size_t i = 0; i < a.domain.size(); ++i) CHECK(a.domain.records[i].seq == b.domain.records[i].seq);

  auto check_truth = [&](const CorpusTier& tier, const std::vector<std::vector<std::size_t>>& truth) {
    REQUIRE(truth.size() == tier.size());
    for (std::size_t i = 0; i < tier.size(); ++i) {
      const auto& ids = tier.records[i].seq.ids;
      std::set<std::size_t> planted(truth[i].begin(), truth[i].end());
      for (std::size_t p = 0; p < ids.size(); ++p)
        CHECK((planted.count(p) == 1) == (a.lexicon.count(ids[p]) == 1));
    }
  };
  check_truth(a.task, a.task_truth);
  check_truth(a.domain, a.domain_truth);

  std::size_t words = 0;
  for (const auto& r : a.domain.records) words += r.seq.size();
  CHECK(a.domain.word_count == words);
}

TEST_CASE("generate_synth planted density matches rate times length") {
  SynthSpec spec;
  spec.min_planted = 0;
  spec.domain_size = 10000;
  spec.general_size = 10;
  spec.planted_rate = 0.12;
  auto s = generate_synth(spec);
  double planted = 0.0;
  for (const auto& t : s.domain_truth) planted += static_cast<double>(t.size());
  const double mean_len = 0.5 * static_cast<double>(spec.min_length + spec.max_length);
  const double expected = spec.planted_rate * mean_len;
  CHECK(planted / 10000.0 == doctest::Approx(expected).epsilon(0.03));
}

TEST_CASE("generate_synth majority rule without noise") {
  SynthSpec spec;
  spec.domain_size = 10;
  spec.general_size = 10;
  spec.agreement = 0.6;
  auto s = generate_synth(spec);
  for (std::size_t i = 0; i < s.task.size(); ++i) {
    int votes[2] = {0, 0};
    for (auto p : s.task_truth[i]) ++votes[s.lexicon.at(s.task.records[i].seq.ids[p])];
    const int label = *s.task.records[i].label;
    CHECK(votes[label] >= votes[1 - label]);
  }
}

TEST_CASE("generate_synth rejects bad specs") {
  SynthSpec spec;
  spec.num_classes = 1;
  CHECK_THROWS_AS(generate_synth(spec), ConfigError);
  spec = {};
  spec.vocab_size = 50;
  CHECK_THROWS_AS(generate_synth(spec), ConfigError);
  spec = {};
  spec.lexicon = {{"good", 0}, {"good", 1}};
  CHECK_THROWS_AS(generate_synth(spec), ConfigError);
}
