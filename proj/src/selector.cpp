#include "selmask/selector.hpp"

#include <algorithm>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "selmask/error.hpp"

namespace selmask {

SelectorTrainingSet build_selector_training_set(std::span<const ImportanceRecord> annotations) {
  if (annotations.empty()) throw ConfigError("selector: empty annotation stream");
  SelectorTrainingSet set;
  set.examples.reserve(annotations.size());
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    const auto& rec = annotations[i];
    if (rec.important.size() != rec.seq.size() || rec.seq.ids.size() != rec.seq.tokens.size())
      throw ConfigError("selector: annotation " + std::to_string(i) + " has " + std::to_string(rec.important.size()) +
                        " flags for " + std::to_string(rec.seq.size()) + " tokens");
    TokenExample ex;
    ex.ids = rec.seq.ids;
    ex.labels.reserve(rec.important.size());
    for (auto flag : rec.important) {
      ex.labels.push_back(flag ? 1 : 0);
      ++(flag ? set.positives : set.negatives);
    }
    set.examples.push_back(std::move(ex));
  }
  if (set.positives == 0) set.warnings.emplace_back("no token is annotated important; the selector would learn a constant");
  if (set.negatives == 0) set.warnings.emplace_back("every token is annotated important; the selector would learn a constant");
  for (const auto& w : set.warnings) spdlog::warn("selector training set: {}", w);
  return set;
}

TokenScores token_scores(std::size_t tp, std::size_t fp, std::size_t fn) {
  TokenScores s;
  s.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  s.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

namespace {

TokenScores evaluate(const Parameters& params, std::span<const TokenExample> data, double threshold) {
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& ex : data) {
    auto probs = token_classify(params, ex.ids);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const bool predicted = probs[i] >= threshold;
      const bool actual = ex.labels[i] == 1;
      tp += predicted && actual;
      fp += predicted && !actual;
      fn += !predicted && actual;
    }
  }
  return token_scores(tp, fp, fn);
}

}  // namespace

SelectorFit train_selector(Parameters init, const SelectorTrainingSet& data, TrainConfig config,
                           double heldout_fraction, double threshold) {
  if (config.label_weights.empty()) config.label_weights = {1.0, kSelectorLabelWeight};
  if (config.label_weights.size() != 2) throw ConfigError("selector: expected two label weights");
  config.validate();
  if (data.positives == 0 || data.negatives == 0)
    throw ConfigError("selector: training data contains a single class; the decision boundary is undefined");
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0))
    throw ConfigError("selector: heldout_fraction must lie in [0, 1)");

  auto order = epoch_order(data.examples.size(), config.seed, 0);
  const auto heldout_n = static_cast<std::size_t>(heldout_fraction * static_cast<double>(order.size()));
  std::vector<TokenExample> train, heldout;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& ex = data.examples[order[k]];
    if (ex.ids.empty()) continue;
    (k < heldout_n ? heldout : train).push_back(ex);
  }
  if (train.empty()) throw ConfigError("selector: no non-empty training sequences");

  SelectorFit fit;
  Parameters params = std::move(init);
  OptimizerState opt = make_optimizer_state(params);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto perm = epoch_order(train.size(), config.seed, epoch);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < perm.size(); start += config.batch_size) {
      std::vector<TokenExample> items;
      for (std::size_t k = start; k < std::min(perm.size(), start + config.batch_size); ++k)
        items.push_back(train[perm[k]]);
      Batch batch{std::move(items), "selector epoch " + std::to_string(epoch) + " offset " + std::to_string(start)};
      loss_sum += train_step(params, opt, batch, Head::kToken, config);
      ++batches;
    }
    SelectorEpoch log{epoch, loss_sum / static_cast<double>(batches), {}};
    if (!heldout.empty()) log.heldout = evaluate(params, heldout, threshold);
    spdlog::info("selector epoch {} loss {:.4f} heldout P {:.3f} R {:.3f} F1 {:.3f}", epoch, log.train_loss,
                 log.heldout.precision, log.heldout.recall, log.heldout.f1);
    fit.log.push_back(log);
  }
  fit.params = std::move(params);
  return fit;
}

std::size_t SelectionMask::selected_count() const {
  return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), 1));
}

void validate_selection_threshold(double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ConfigError("selection threshold " + std::to_string(threshold) + " must lie in (0, 1)");
}

SelectionMask select_tokens(const Parameters& selector, const TokenSequence& seq, double threshold) {
  validate_selection_threshold(threshold);
  SelectionMask mask;
  mask.seq = seq;
  mask.probabilities = token_classify(selector, seq.ids);
  mask.selected.reserve(seq.size());
  for (double p : mask.probabilities) mask.selected.push_back(p >= threshold ? 1 : 0);
  return mask;
}

void SelectionSummary::add(const SelectionMask& mask) {
  const std::size_t n = mask.seq.size();
  const std::size_t s = mask.selected_count();
  ++sequences;
  tokens += n;
  selected += s;
  if (s == 0) ++zero_selection;
  const double rate = n ? static_cast<double>(s) / static_cast<double>(n) : 0.0;
  const auto bin = std::min<std::size_t>(histogram.size() - 1, static_cast<std::size_t>(rate * histogram.size()));
  ++histogram[bin];
}

void SelectionSummary::merge(const SelectionSummary& other) {
  sequences += other.sequences;
  tokens += other.tokens;
  selected += other.selected;
  zero_selection += other.zero_selection;
  for (std::size_t b = 0; b < histogram.size(); ++b) histogram[b] += other.histogram[b];
}

std::vector<SelectionMask> mask_indomain_corpus(const Parameters& selector, const CorpusTier& domain,
                                                double threshold, SelectionSummary* summary, std::size_t workers) {
  if (domain.tier == Tier::kTask)
    throw ConfigError("mask_indomain_corpus: expected an unlabeled Domain tier, got the labeled Task tier");
  validate_selection_threshold(threshold);
  std::vector<SelectionMask> masks(domain.records.size());
  parallel_for(masks.size(), workers,
               [&](std::size_t i) { masks[i] = select_tokens(selector, domain.records[i].seq, threshold); });
  if (summary) {
    SelectionSummary s;
    for (const auto& m : masks) s.add(m);
    *summary = s;
  }
  return masks;
}

}  // namespace selmask
