#include <doctest.h>

#include <cmath>
#include <set>

#include "selmask/error.hpp"
#include "selmask/masking.hpp"
#include "selmask/rng.hpp"

using namespace selmask;

namespace {

constexpr std::size_t kVocab = 50;

std::vector<TokenId> random_ids(Rng& rng, std::size_t n) {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(static_cast<TokenId>(kNumReserved + rng.below(kVocab - kNumReserved)));
  return ids;
}

SelectionMask mask_of(std::span<const TokenId> ids, std::vector<std::uint8_t> selected) {
  SelectionMask m;
  m.seq.ids.assign(ids.begin(), ids.end());
  m.seq.tokens.assign(ids.size(), "t");
  m.selected = std::move(selected);
  m.probabilities.assign(ids.size(), 0.5);
  return m;
}

}  // namespace

TEST_CASE("masked_count rounding") {
  CHECK(masked_count(0.15, 100) == 15);
  CHECK(masked_count(0.15, 3) == 1);
  CHECK(masked_count(0.15, 20) == 3);
  CHECK(masked_count(0.15, 10) == 2);  // 1.5 rounds up
  CHECK(masked_count(0.15, 30) == 5);  // 4.5 rounds up
  CHECK(masked_count(0.5, 1) == 1);
  CHECK(masked_count(0.99, 4) == 4);
}

TEST_CASE("random masking contract") {
  Rng rng(1);
  auto ids = random_ids(rng, 100);
  auto ex = apply_random_masking(ids, {0.15}, {}, kVocab, 7);
  CHECK(ex.positions.size() == 15);
  CHECK(ex.policy == PolicyTag::kRandom);
  CHECK(reconstruct(ex) == ids);
  CHECK(std::is_sorted(ex.positions.begin(), ex.positions.end()));
  CHECK(std::set<std::size_t>(ex.positions.begin(), ex.positions.end()).size() == 15);
  CHECK(apply_random_masking(ids, {0.15}, {}, kVocab, 7) == ex);
  CHECK_FALSE(apply_random_masking(ids, {0.15}, {}, kVocab, 8) == ex);
  CHECK_THROWS_AS(apply_random_masking(std::vector<TokenId>{}, {0.15}, {}, kVocab, 1), std::invalid_argument);
  CHECK_THROWS_AS(apply_random_masking(ids, {0.0}, {}, kVocab, 1), ConfigError);
  CHECK_THROWS_AS(apply_random_masking(ids, {0.15}, {0.8, 0.1, 0.2}, kVocab, 1), ConfigError);
}

TEST_CASE("framing tokens are never masked") {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    auto ids = random_ids(rng, 4 + rng.below(20));
    ids.front() = kClsId;
    ids.back() = kSepId;
    ids[ids.size() / 2] = kPadId;
    auto ex = apply_random_masking(ids, {0.5}, {}, kVocab, rng.below(1000));
    for (auto p : ex.positions) CHECK_FALSE(is_framing(ids[p]));
    CHECK(ex.positions.size() == masked_count(0.5, ids.size() - 3));
  }
}

TEST_CASE("pure mask rule writes [MASK] everywhere") {
  Rng rng(3);
  auto ids = random_ids(rng, 40);
  auto ex = apply_random_masking(ids, {0.3}, CorruptionRule::pure_mask(), kVocab, 1);
  for (auto p : ex.positions) CHECK(ex.input_ids[p] == kMaskId);
}

TEST_CASE("selective masking below, above and without selections") {
  Rng rng(4);
  auto ids = random_ids(rng, 10);
  auto two = apply_selective_masking(ids, mask_of(ids, {0, 1, 0, 0, 0, 0, 1, 0, 0, 0}), {}, {}, kVocab, 1);
  CHECK(two.positions == std::vector<std::size_t>{1, 6});
  CHECK(two.policy == PolicyTag::kSelective);

  std::vector<std::uint8_t> eight = {1, 1, 1, 1, 0, 1, 1, 0, 1, 1};
  auto capped = apply_selective_masking(ids, mask_of(ids, eight), {}, {}, kVocab, 1);
  CHECK(capped.positions.size() == 5);
  for (auto p : capped.positions) CHECK(eight[p] == 1);

  auto twenty = random_ids(rng, 20);
  auto fb = apply_selective_masking(twenty, mask_of(twenty, std::vector<std::uint8_t>(20, 0)), {}, {}, kVocab, 1);
  CHECK(fb.positions.size() == 3);
  CHECK(fb.policy == PolicyTag::kFallback);
  CHECK(to_string(fb.policy) == "fallback");

  // A cap that admits no position also falls back.
  auto one = random_ids(rng, 1);
  auto tiny = apply_selective_masking(one, mask_of(one, {1}), {}, {}, kVocab, 1);
  CHECK(tiny.policy == PolicyTag::kFallback);
  CHECK(tiny.positions.size() == 1);

  CHECK_THROWS_AS(apply_selective_masking(ids, mask_of(twenty, std::vector<std::uint8_t>(20, 0)), {}, {}, kVocab, 1),
                  ConfigError);
  CHECK_THROWS_AS(apply_selective_masking(ids, mask_of(ids, eight), {0.1, 0.15}, {}, kVocab, 1), ConfigError);
}

TEST_CASE("selective masking properties on random inputs") {
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.below(30);
    auto ids = random_ids(rng, n);
    std::vector<std::uint8_t> sel(n);
    const double density = rng.uniform();
    for (auto& s : sel) s = rng.bernoulli(density);
    SelectivePolicy policy{0.2 + 0.6 * rng.uniform(), 0.15};
    auto ex = apply_selective_masking(ids, mask_of(ids, sel), policy, {}, kVocab, trial);
    CHECK(reconstruct(ex) == ids);
    if (ex.policy == PolicyTag::kSelective) {
      CHECK(static_cast<double>(ex.positions.size()) <= policy.cap * static_cast<double>(n) + 1e-9);
      for (auto p : ex.positions) CHECK(sel[p] == 1);
    } else {
      CHECK(ex.positions.size() == masked_count(0.15, n));
    }
    CHECK(apply_selective_masking(ids, mask_of(ids, sel), policy, {}, kVocab, trial) == ex);
  }
}

TEST_CASE("masking_stats") {
  MaskingStats empty = masking_stats({});
  CHECK(empty.examples == 0);
  CHECK(empty.realized_rate() == 0.0);
  CHECK(empty.fallback_frequency() == 0.0);

  Rng rng(6);
  std::vector<MaskedExample> stream;
  std::size_t tokens = 0, after_cap = 0;
  for (int i = 0; i < 50; ++i) {
    auto ids = random_ids(rng, 10);
    std::vector<std::uint8_t> sel(10, 0);
    for (int k = 0; k < i % 8; ++k) sel[k] = 1;
    stream.push_back(apply_selective_masking(ids, mask_of(ids, sel), {}, {}, kVocab, i));
    tokens += 10;
    after_cap += stream.back().positions.size();
  }
  auto s = masking_stats(stream);
  CHECK(s.realized_rate() == doctest::Approx(static_cast<double>(after_cap) / static_cast<double>(tokens)));
  CHECK(s.selective_examples + s.fallback_examples == 50);
  CHECK(s.mask_outcomes + s.random_outcomes + s.keep_outcomes == s.masked);
}

TEST_CASE("mask_corpus is independent of the worker count and skips empty records") {
  Rng rng(7);
  CorpusTier tier;
  tier.tier = Tier::kDomain;
  for (int i = 0; i < 40; ++i) {
    CorpusRecord r;
    r.seq.ids = i == 3 ? std::vector<TokenId>{} : random_ids(rng, 5 + rng.below(10));
    r.seq.tokens.assign(r.seq.ids.size(), "t");
    tier.records.push_back(r);
  }
  auto one = mask_corpus_random(tier, {}, {}, kVocab, 9, 1);
  auto four = mask_corpus_random(tier, {}, {}, kVocab, 9, 4);
  CHECK(one.size() == 39);
  CHECK(one == four);
}
