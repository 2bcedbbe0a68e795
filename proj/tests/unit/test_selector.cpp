#include <doctest.h>

#include "selmask/error.hpp"
#include "selmask/rng.hpp"
#include "selmask/selector.hpp"
#include "test_util.hpp"

using namespace selmask;

namespace {

ModelConfig small_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.dim = 16;
  c.layers = 1;
  c.heads = 2;
  c.hidden = 32;
  c.max_positions = 16;
  c.seed = 2;
  return c;
}

// Tokens 5..9 are the lexicon, 10..29 fillers.
std::vector<ImportanceRecord> lexicon_annotations(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ImportanceRecord> out;
  for (std::size_t i = 0; i < n; ++i) {
    ImportanceRecord r;
    const std::size_t len = 4 + rng.below(8);
    for (std::size_t k = 0; k < len; ++k) {
      const bool lex = rng.bernoulli(0.2);
      r.seq.ids.push_back(static_cast<TokenId>(lex ? 5 + rng.below(5) : 10 + rng.below(20)));
      r.seq.tokens.push_back("w");
      r.important.push_back(lex);
      r.scores.push_back(0.0);
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

TEST_CASE("selector learns a fixed lexicon") {
  auto train = build_selector_training_set(lexicon_annotations(300, 1));
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 4;
  tc.learning_rate = 3e-3;
  auto fit = train_selector(init_parameters(small_config(30)), train, tc);
  REQUIRE(fit.log.size() == 3);
  CHECK(fit.log.back().heldout.f1 >= 0.95);

  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& r : lexicon_annotations(200, 99)) {
    auto m = select_tokens(fit.params, r.seq);
    for (std::size_t k = 0; k < r.important.size(); ++k) {
      tp += m.selected[k] && r.important[k];
      fp += m.selected[k] && !r.important[k];
      fn += !m.selected[k] && r.important[k];
    }
  }
  CHECK(token_scores(tp, fp, fn).f1 >= 0.95);

  auto again = train_selector(init_parameters(small_config(30)), train, tc);
  CHECK(again.params == fit.params);
}

TEST_CASE("label weight scales label-1 gradient contributions") {
  auto p = init_parameters(small_config(30));
  auto set = build_selector_training_set(lexicon_annotations(4, 5));
  Batch b{set.examples, "b"};
  std::vector<double> w1 = {0.0, 1.0}, w15 = {0.0, 1.5};
  auto g1 = p.zeros_like(), g15 = p.zeros_like();
  loss_and_gradient(p, b, w1, &g1);
  loss_and_gradient(p, b, w15, &g15);
  CHECK((g15.tok_w - 1.5 * g1.tok_w).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((g15.token_embedding - 1.5 * g1.token_embedding).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("select_tokens contracts") {
  auto p = init_parameters(small_config(30));
  CHECK(select_tokens(p, TokenSequence{}).selected.empty());
  CHECK_THROWS_AS(select_tokens(p, TokenSequence{}, 1.0 + 1e-9), ConfigError);
  CHECK_THROWS_AS(select_tokens(p, TokenSequence{}, 0.0), ConfigError);

  TokenSequence seq{{"a", "b", "c", "d"}, {5, 12, 7, 20}};
  auto lo = select_tokens(p, seq, 0.2);
  auto hi = select_tokens(p, seq, 0.7);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(lo.probabilities[k] == hi.probabilities[k]);
    if (hi.selected[k]) CHECK(lo.selected[k]);
    CHECK((hi.selected[k] != 0) == (hi.probabilities[k] >= 0.7));
  }
}

TEST_CASE("mask_indomain_corpus purity and summary") {
  auto p = init_parameters(small_config(30));
  CorpusTier domain;
  domain.tier = Tier::kDomain;
  TokenSequence a{{"a", "b", "c"}, {5, 12, 7}};
  TokenSequence b{{"d", "e"}, {20, 6}};
  domain.records = {{a, {}, {}}, {b, {}, {}}, {a, {}, {}}};
  SelectionSummary s;
  auto masks = mask_indomain_corpus(p, domain, 0.5, &s, 2);
  REQUIRE(masks.size() == 3);
  CHECK(masks[0].selected == masks[2].selected);
  CHECK(masks[0].probabilities == masks[2].probabilities);
  std::size_t selected = 0;
  for (const auto& m : masks) selected += m.selected_count();
  CHECK(s.tokens == 8);
  CHECK(s.selected_rate() == doctest::Approx(static_cast<double>(selected) / 8.0));
  auto serial = mask_indomain_corpus(p, domain, 0.5);
  CHECK(serial[1].probabilities == masks[1].probabilities);

  CorpusTier task;
  task.tier = Tier::kTask;
  CHECK_THROWS_AS(mask_indomain_corpus(p, task), ConfigError);
}
