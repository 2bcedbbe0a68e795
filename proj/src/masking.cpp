#include "selmask/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "selmask/error.hpp"
#include "selmask/rng.hpp"
#include "selmask/training.hpp"

namespace selmask {

namespace {

bool in_open_unit(double x) { return x > 0.0 && x < 1.0; }

std::vector<std::size_t> eligible_positions(std::span<const TokenId> ids) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!is_framing(ids[i])) out.push_back(i);
  return out;
}

// Uniform k-subset via partial Fisher-Yates, returned sorted.
std::vector<std::size_t> sample_subset(std::vector<std::size_t> pool, std::size_t k, Rng& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

MaskedExample corrupt(std::span<const TokenId> ids, std::vector<std::size_t> positions, PolicyTag tag,
                      const CorruptionRule& rule, std::size_t vocab_size, Rng& rng) {
  if (vocab_size <= kNumReserved) throw std::invalid_argument("corruption needs a vocabulary beyond reserved tokens");
  MaskedExample ex;
  ex.input_ids.assign(ids.begin(), ids.end());
  ex.policy = tag;
  ex.positions = std::move(positions);
  for (std::size_t pos : ex.positions) {
    ex.targets.push_back(ids[pos]);
    const double u = rng.uniform();
    if (u < rule.p_mask) {
      ex.input_ids[pos] = kMaskId;
      ex.outcomes.push_back(Corruption::kMask);
    } else if (u < rule.p_mask + rule.p_random) {
      ex.input_ids[pos] = static_cast<TokenId>(kNumReserved + rng.below(vocab_size - kNumReserved));
      ex.outcomes.push_back(Corruption::kRandom);
    } else {
      ex.outcomes.push_back(Corruption::kKeep);
    }
  }
  return ex;
}

}  // namespace

std::string_view to_string(PolicyTag tag) {
  switch (tag) {
    case PolicyTag::kRandom: return "random";
    case PolicyTag::kSelective: return "selective";
    case PolicyTag::kFallback: return "fallback";
  }
  return "?";
}

PolicyTag parse_policy(std::string_view name) {
  if (name == "random") return PolicyTag::kRandom;
  if (name == "selective") return PolicyTag::kSelective;
  if (name == "fallback") return PolicyTag::kFallback;
  throw ConfigError("unknown masking policy \"" + std::string(name) + "\"");
}

void CorruptionRule::validate() const {
  for (double p : {p_mask, p_random, p_keep})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("corruption probabilities must lie in [0, 1]");
  if (std::abs(p_mask + p_random + p_keep - 1.0) > 1e-9) throw ConfigError("corruption probabilities must sum to 1");
}

void RandomPolicy::validate() const {
  if (!in_open_unit(rate)) throw ConfigError("random masking rate must lie in (0, 1)");
}

void SelectivePolicy::validate() const {
  if (!in_open_unit(cap) || !in_open_unit(fallback_rate))
    throw ConfigError("selective cap and fallback rate must lie in (0, 1)");
  if (cap < fallback_rate) throw ConfigError("selective cap must be >= the fallback rate");
}

std::size_t masked_count(double rate, std::size_t n) {
  // Small epsilon so products like 0.15 * 30 that land a hair under .5 still round up.
  const auto k = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 0.5 + 1e-9));
  return std::max<std::size_t>(1, std::min(k, n));
}

MaskedExample apply_random_masking(std::span<const TokenId> ids, const RandomPolicy& policy,
                                   const CorruptionRule& rule, std::size_t vocab_size, std::uint64_t seed) {
  policy.validate();
  rule.validate();
  auto pool = eligible_positions(ids);
  if (pool.empty()) throw std::invalid_argument("apply_random_masking: no maskable token in sequence");
  Rng rng(seed);
  const std::size_t k = masked_count(policy.rate, pool.size());
  auto positions = sample_subset(std::move(pool), k, rng);
  return corrupt(ids, std::move(positions), PolicyTag::kRandom, rule, vocab_size, rng);
}

MaskedExample apply_selective_masking(std::span<const TokenId> ids, const SelectionMask& mask,
                                      const SelectivePolicy& policy, const CorruptionRule& rule,
                                      std::size_t vocab_size, std::uint64_t seed) {
  policy.validate();
  rule.validate();
  if (mask.selected.size() != ids.size())
    throw ConfigError("apply_selective_masking: mask of length " + std::to_string(mask.selected.size()) +
                      " for sequence of length " + std::to_string(ids.size()));
  auto pool = eligible_positions(ids);
  if (pool.empty()) throw std::invalid_argument("apply_selective_masking: no maskable token in sequence");
  std::vector<std::size_t> chosen;
  for (std::size_t pos : pool)
    if (mask.selected[pos]) chosen.push_back(pos);
  const auto limit = static_cast<std::size_t>(std::floor(policy.cap * static_cast<double>(pool.size()) + 1e-9));
  Rng rng(seed);
  if (chosen.empty() || limit == 0) {
    auto positions = sample_subset(std::move(pool), masked_count(policy.fallback_rate, pool.size()), rng);
    return corrupt(ids, std::move(positions), PolicyTag::kFallback, rule, vocab_size, rng);
  }
  if (chosen.size() > limit) chosen = sample_subset(std::move(chosen), limit, rng);
  return corrupt(ids, std::move(chosen), PolicyTag::kSelective, rule, vocab_size, rng);
}

std::vector<TokenId> reconstruct(const MaskedExample& example) {
  std::vector<TokenId> ids = example.input_ids;
  for (std::size_t k = 0; k < example.positions.size(); ++k) ids.at(example.positions[k]) = example.targets[k];
  return ids;
}

MaskingStats masking_stats(std::span<const MaskedExample> examples) {
  MaskingStats s;
  for (const auto& ex : examples) {
    ++s.examples;
    s.tokens += ex.input_ids.size();
    s.masked += ex.positions.size();
    switch (ex.policy) {
      case PolicyTag::kRandom: ++s.random_examples; break;
      case PolicyTag::kSelective: ++s.selective_examples; break;
      case PolicyTag::kFallback: ++s.fallback_examples; break;
    }
    for (auto o : ex.outcomes) {
      switch (o) {
        case Corruption::kMask: ++s.mask_outcomes; break;
        case Corruption::kRandom: ++s.random_outcomes; break;
        case Corruption::kKeep: ++s.keep_outcomes; break;
      }
    }
  }
  return s;
}

std::vector<MaskedExample> mask_corpus_random(const CorpusTier& corpus, const RandomPolicy& policy,
                                              const CorruptionRule& rule, std::size_t vocab_size,
                                              std::uint64_t seed, std::size_t workers) {
  std::vector<MaskedExample> out(corpus.records.size());
  std::vector<char> keep(corpus.records.size(), 0);
  parallel_for(out.size(), workers, [&](std::size_t i) {
    const auto& ids = corpus.records[i].seq.ids;
    if (eligible_positions(ids).empty()) return;
    out[i] = apply_random_masking(ids, policy, rule, vocab_size, derive_seed({seed, i}));
    keep[i] = 1;
  });
  std::vector<MaskedExample> kept;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (keep[i]) kept.push_back(std::move(out[i]));
  return kept;
}

std::vector<MaskedExample> mask_corpus_selective(std::span<const SelectionMask> masks, const SelectivePolicy& policy,
                                                 const CorruptionRule& rule, std::size_t vocab_size,
                                                 std::uint64_t seed, std::size_t workers) {
  std::vector<MaskedExample> out(masks.size());
  std::vector<char> keep(masks.size(), 0);
  parallel_for(out.size(), workers, [&](std::size_t i) {
    const auto& ids = masks[i].seq.ids;
    if (eligible_positions(ids).empty()) return;
    out[i] = apply_selective_masking(ids, masks[i], policy, rule, vocab_size, derive_seed({seed, i}));
    keep[i] = 1;
  });
  std::vector<MaskedExample> kept;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (keep[i]) kept.push_back(std::move(out[i]));
  return kept;
}

}  // namespace selmask
