#include <doctest.h>

#include "selmask/error.hpp"
#include "selmask/formats.hpp"
#include "test_util.hpp"

using namespace selmask;
using namespace selmask::testing;

TEST_CASE("annotation file round trip") {
  auto dir = temp_dir("fmt_ann");
  auto v = make_vocab({"the", "food", "is", "good"});
  PresenceMock clf(*v.find("good"));
  std::vector<ImportanceRecord> recs = {find_important_tokens(clf, tokenize("the food is good", v), 1)};
  write_annotations(dir / "a.jsonl", recs);
  auto back = read_annotations(dir / "a.jsonl", v);
  REQUIRE(back.size() == 1);
  CHECK(back[0].seq == recs[0].seq);
  CHECK(back[0].important == recs[0].important);
  CHECK(back[0].scores == recs[0].scores);

  auto other = make_vocab({"the", "food"});
  CHECK_THROWS_AS(read_annotations(dir / "a.jsonl", other), ConfigError);
}

TEST_CASE("masked file round trip recovers outcomes") {
  auto dir = temp_dir("fmt_masked");
  MaskedExample ex;
  ex.input_ids = {kMaskId, 9, 12, 7};
  ex.positions = {0, 1, 2};
  ex.targets = {5, 9, 8};
  ex.outcomes = {Corruption::kMask, Corruption::kKeep, Corruption::kRandom};
  ex.policy = PolicyTag::kFallback;
  std::vector<MaskedExample> all = {ex};
  write_masked(dir / "m.jsonl", all);
  auto back = read_masked(dir / "m.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0] == ex);
}

TEST_CASE("malformed lines report their location") {
  auto dir = temp_dir("fmt_bad");
  write_lines(dir / "t.jsonl", {R"({"positions":[1,2]})", "{oops"});
  try {
    read_truth(dir / "t.jsonl");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("t.jsonl:2") != std::string::npos);
  }
}

TEST_CASE("sha256 of a known string") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("text files are written atomically into new directories") {
  auto dir = temp_dir("fmt_txt");
  write_text_file(dir / "a" / "b" / "c.txt", "hello");
  CHECK(read_text_file(dir / "a" / "b" / "c.txt") == "hello");
  CHECK_FALSE(std::filesystem::exists(dir / "a" / "b" / "c.txt.tmp"));
}
