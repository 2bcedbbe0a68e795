#include <doctest.h>

#include <set>

#include "selmask/importance.hpp"
#include "selmask/selector.hpp"
#include "test_util.hpp"

using namespace selmask;
using namespace selmask::testing;

namespace {

struct Mock {
  Vocab vocab = make_vocab({"the", "food", "is", "good", "bad"});
  TokenId good = *vocab.find("good");
  PresenceMock clf{good, 0.9, 0.5};
  TokenSequence seq = tokenize("the food is good", vocab);
};

}  // namespace

TEST_CASE("score_token against the presence mock") {
  Mock m;
  const double full = 0.9;
  ScoringBuffer empty;
  CHECK(score_token(m.clf, 1, full, empty, m.seq.ids[0]) == doctest::Approx(0.4).epsilon(1e-9));

  ScoringBuffer buf;
  for (std::size_t i = 0; i < 3; ++i) buf.push(m.seq.ids[i], i);
  CHECK(std::abs(score_token(m.clf, 1, full, buf, m.good)) <= 1e-9);
}

TEST_CASE("score is zero when the buffer restores full confidence") {
  Mock m;
  ScoringBuffer buf;
  CHECK(score_token(m.clf, 1, 0.9, buf, m.good) == 0.0);
}

TEST_CASE("find_important_tokens on the mock example") {
  Mock m;
  auto rec = find_important_tokens(m.clf, m.seq, 1);
  CHECK(rec.important == std::vector<std::uint8_t>{0, 0, 0, 1});
  CHECK(rec.final_buffer == std::vector<std::size_t>{0, 1, 2});
  CHECK(rec.full_confidence == doctest::Approx(0.9));
  CHECK(rec.important_count() == 1);
}

TEST_CASE("empty sequence gives an empty record") {
  Mock m;
  auto rec = find_important_tokens(m.clf, TokenSequence{}, 1);
  CHECK(rec.scores.empty());
  CHECK(rec.important.empty());
}

TEST_CASE("strict threshold boundary") {
  // Dyadic probabilities keep the subtraction exact: 0.75 - 0.6875 = 0.0625.
  Mock m;
  PresenceMock clf(m.good, 0.75, 0.6875);
  ImportanceOptions at, above;
  at.delta = Threshold(0.0625);
  above.delta = Threshold(std::nextafter(0.0625, 1.0));
  auto seq = tokenize("the good", m.vocab);
  auto r1 = find_important_tokens(clf, seq, 1, at);
  CHECK(r1.scores[0] == 0.0625);
  CHECK(r1.important[0] == 0);
  auto r2 = find_important_tokens(clf, seq, 1, above);
  CHECK(r2.important[0] == 1);
}

TEST_CASE("default delta boundary both sides") {
  Mock m;
  auto seq = tokenize("the good", m.vocab);
  // full = 0.9; the first token scores 0.9 - lo.
  PresenceMock just_below(m.good, 0.9, 0.9 - 0.05 + 1e-6);
  PresenceMock just_above(m.good, 0.9, 0.9 - 0.05 - 1e-6);
  CHECK(find_important_tokens(just_below, seq, 1).important[0] == 1);
  CHECK(find_important_tokens(just_above, seq, 1).important[0] == 0);
  CHECK(Threshold().value() == 0.05);
}

TEST_CASE("threshold validation") {
  CHECK_THROWS(Threshold(0.0));
  CHECK_THROWS(Threshold(1.0));
  CHECK_THROWS(Threshold(-0.1));
  CHECK_NOTHROW(Threshold(0.5));
}

TEST_CASE("over-length buffer is an error") {
  struct Short final : MockClassifier {
    double p1(std::span<const TokenId>) const override { return 0.5; }
    std::size_t max_length() const override { return 2; }
  } clf;
  ScoringBuffer buf;
  buf.push(5, 0);
  buf.push(6, 1);
  CHECK_THROWS_AS(score_token(clf, 1, 0.5, buf, 7), std::invalid_argument);
}

TEST_CASE("buffer matches the brute-force simulator on exhaustive small inputs") {
  const std::vector<TokenId> alphabet = {5, 6, 7, 8, 9};
  PresenceMock presence(5);
  CountMock count(5, 6);
  PositionMock position;
  const std::vector<const MockClassifier*> mocks = {&presence, &count, &position};
  std::size_t mismatches = 0, compared = 0;
  for (const auto& ids : all_sequences(alphabet, 4)) {
    TokenSequence seq{std::vector<std::string>(ids.size(), "t"), ids};
    for (const auto* clf : mocks)
      for (int label : {0, 1}) {
        auto got = find_important_tokens(*clf, seq, label);
        auto want = simulate_buffer(*clf, ids, label, 0.05);
        ++compared;
        std::vector<TokenId> kept;
        for (auto p : got.final_buffer) kept.push_back(ids[p]);
        bool same = got.scores == want.scores && kept == want.kept;
        for (std::size_t i = 0; same && i < ids.size(); ++i) same = (got.important[i] != 0) == (want.important[i] != 0);
        mismatches += !same;
      }
  }
  CHECK(compared == 3 * 2 * 781);
  CHECK(mismatches == 0);
}

TEST_CASE("buffer never holds an important position and stays a prefix subsequence") {
  CountMock clf(5, 6);
  for (const auto& ids : all_sequences({5, 6, 7}, 5)) {
    TokenSequence seq{std::vector<std::string>(ids.size(), "t"), ids};
    auto rec = find_important_tokens(clf, seq, 1);
    for (std::size_t k = 0; k < rec.final_buffer.size(); ++k) {
      CHECK(rec.important[rec.final_buffer[k]] == 0);
      if (k) CHECK(rec.final_buffer[k - 1] < rec.final_buffer[k]);
    }
    std::size_t unimportant = 0;
    for (auto f : rec.important) unimportant += f == 0;
    CHECK(rec.final_buffer.size() == unimportant);
    for (std::size_t i = 0; i < ids.size(); ++i) CHECK((rec.important[i] != 0) == (rec.scores[i] < 0.05));
  }
}

TEST_CASE("presence-family mock marks every restoring lexicon word") {
  // P depends only on which lexicon words are present.
  CountMock clf(5, 6);
  for (const auto& ids : all_sequences({5, 7, 8}, 5)) {
    TokenSequence seq{std::vector<std::string>(ids.size(), "t"), ids};
    auto rec = find_important_tokens(clf, seq, 1);
    std::vector<TokenId> kept;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto candidate = kept;
      candidate.push_back(ids[i]);
      if (ids[i] == 5 && clf.p1(candidate) >= clf.p1(ids)) CHECK(rec.important[i] == 1);
      if (!rec.important[i]) kept = candidate;
    }
  }
}

TEST_CASE("require_buffer_argmax and skip_misclassified") {
  Mock m;
  // Label 0 while the classifier prefers label 1 on the full input.
  auto rec = find_important_tokens(m.clf, m.seq, 0);
  CHECK(rec.misclassified);

  PresenceMock weak(m.good, 0.45, 0.42);
  ImportanceOptions plain, argmax;
  argmax.require_buffer_argmax = true;
  auto seq = tokenize("the good", m.vocab);
  CHECK(find_important_tokens(weak, seq, 1, plain).important[1] == 1);
  CHECK(find_important_tokens(weak, seq, 1, argmax).important[1] == 0);

  CorpusTier task;
  task.tier = Tier::kTask;
  task.num_classes = 2;
  task.records.push_back({m.seq, 1, Split::kTrain});
  task.records.push_back({m.seq, 0, Split::kTrain});
  ImportanceOptions skip;
  skip.skip_misclassified = true;
  AnnotationSummary summary;
  auto recs = annotate_corpus(m.clf, task, skip, std::nullopt, &summary);
  CHECK(recs.size() == 1);
  CHECK(summary.skipped == 1);
  CHECK(summary.misclassified == 1);
}

TEST_CASE("annotate_corpus summary and purity") {
  Mock m;
  CorpusTier task;
  task.tier = Tier::kTask;
  task.num_classes = 2;
  task.records.push_back({m.seq, 1, Split::kTrain});
  AnnotationSummary s1;
  auto one = annotate_corpus(m.clf, task, {}, std::nullopt, &s1);
  REQUIRE(one.size() == 1);
  CHECK(s1.important_fraction() == doctest::Approx(0.25));
  CHECK(s1.per_class[1].important == 1);

  task.records.push_back({m.seq, 1, Split::kTrain});
  task.records.push_back({tokenize("bad food", m.vocab), 0, Split::kDev});
  auto many = annotate_corpus(m.clf, task, {}, std::nullopt, nullptr, 3);
  REQUIRE(many.size() == 3);
  CHECK(many[0].important == many[1].important);
  CHECK(many[0].scores == many[1].scores);
  CHECK(annotate_corpus(m.clf, task, {}, Split::kDev).size() == 1);

  auto serial = annotate_corpus(m.clf, task, {});
  for (std::size_t i = 0; i < serial.size(); ++i) CHECK(serial[i].scores == many[i].scores);

  CorpusTier unlabeled;
  unlabeled.tier = Tier::kDomain;
  unlabeled.records.push_back({m.seq, std::nullopt, std::nullopt});
  CHECK_THROWS(annotate_corpus(m.clf, unlabeled, {}));
}

TEST_CASE("selector training set from annotations") {
  Mock m;
  auto rec = find_important_tokens(m.clf, m.seq, 1);
  std::vector<ImportanceRecord> recs = {rec};
  auto set = build_selector_training_set(recs);
  CHECK(set.positives == 1);
  CHECK(set.negatives == 3);
  CHECK(set.positive_rate() == doctest::Approx(0.25));
  CHECK(set.examples[0].labels == std::vector<int>{0, 0, 0, 1});

  rec.important.assign(4, 0);
  std::vector<ImportanceRecord> zeros = {rec};
  CHECK_FALSE(build_selector_training_set(zeros).warnings.empty());
  CHECK_THROWS(build_selector_training_set(std::span<const ImportanceRecord>{}));
}
