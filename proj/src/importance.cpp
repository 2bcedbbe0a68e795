#include "selmask/importance.hpp"

#include <algorithm>
#include <stdexcept>

#include "selmask/error.hpp"
#include "selmask/training.hpp"

namespace selmask {

namespace {

double confidence(const std::vector<double>& probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size())
    throw std::invalid_argument("label " + std::to_string(label) + " outside classifier classes");
  return probs[static_cast<std::size_t>(label)];
}

bool argmax_is(const std::vector<double>& probs, int label) {
  return std::max_element(probs.begin(), probs.end()) - probs.begin() == label;
}

}  // namespace

Threshold::Threshold(double delta) : delta_(delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("importance threshold delta must lie in (0, 1)");
}

void ScoringBuffer::push(TokenId id, std::size_t position) {
  ids_.push_back(id);
  positions_.push_back(position);
}

void ScoringBuffer::pop() {
  ids_.pop_back();
  positions_.pop_back();
}

double score_token(const SequenceClassifier& classifier, int label, double full_confidence,
                   const ScoringBuffer& buffer, TokenId token) {
  if (buffer.size() + 1 > classifier.max_length())
    throw std::invalid_argument("score_token: buffer plus token exceeds classifier limit of " +
                                std::to_string(classifier.max_length()));
  std::vector<TokenId> probe(buffer.ids().begin(), buffer.ids().end());
  probe.push_back(token);
  return full_confidence - confidence(classifier.class_probabilities(probe), label);
}

std::size_t ImportanceRecord::important_count() const {
  return static_cast<std::size_t>(std::count(important.begin(), important.end(), 1));
}

ImportanceRecord find_important_tokens(const SequenceClassifier& classifier, const TokenSequence& seq, int label,
                                       const ImportanceOptions& options) {
  ImportanceRecord rec;
  rec.seq = seq;
  rec.label = label;
  if (seq.size() > classifier.max_length())
    throw std::invalid_argument("find_important_tokens: sequence of " + std::to_string(seq.size()) +
                                " tokens exceeds classifier limit");
  const auto full = classifier.class_probabilities(seq.ids);
  rec.full_confidence = confidence(full, label);
  rec.misclassified = !argmax_is(full, label);
  if (rec.misclassified && options.skip_misclassified) return rec;

  const double delta = options.delta.value();
  rec.scores.reserve(seq.size());
  rec.important.reserve(seq.size());
  ScoringBuffer buffer;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    buffer.push(seq.ids[i], i);
    const auto probs = classifier.class_probabilities(buffer.ids());
    const double score = rec.full_confidence - confidence(probs, label);
    bool important = score < delta;
    if (important && options.require_buffer_argmax) important = argmax_is(probs, label);
    rec.scores.push_back(score);
    rec.important.push_back(important ? 1 : 0);
    if (important) buffer.pop();
  }
  rec.final_buffer.assign(buffer.positions().begin(), buffer.positions().end());
  return rec;
}

std::vector<ImportanceRecord> annotate_corpus(const SequenceClassifier& classifier, const CorpusTier& task,
                                              const ImportanceOptions& options, std::optional<Split> split,
                                              AnnotationSummary* summary, std::size_t workers) {
  std::vector<const CorpusRecord*> selected;
  for (std::size_t i = 0; i < task.records.size(); ++i) {
    const auto& r = task.records[i];
    if (!r.label)
      throw ConfigError("annotate_corpus: record " + std::to_string(i) + " (\"" + detokenize(r.seq) +
                        "\") has no label");
    if (split && r.split != split) continue;
    selected.push_back(&r);
  }

  std::vector<ImportanceRecord> records(selected.size());
  parallel_for(selected.size(), workers, [&](std::size_t i) {
    records[i] = find_important_tokens(classifier, selected[i]->seq, *selected[i]->label, options);
  });

  AnnotationSummary local;
  std::vector<ImportanceRecord> out;
  out.reserve(records.size());
  for (auto& rec : records) {
    ++local.sequences;
    if (rec.misclassified) ++local.misclassified;
    if (rec.misclassified && options.skip_misclassified) {
      ++local.skipped;
      continue;
    }
    const std::size_t imp = rec.important_count();
    local.tokens += rec.seq.size();
    local.important += imp;
    if (!rec.seq.empty() && rec.final_buffer.empty()) ++local.all_important;
    if (imp == 0) ++local.no_important;
    auto& cls = local.per_class[rec.label];
    ++cls.sequences;
    cls.tokens += rec.seq.size();
    cls.important += imp;
    out.push_back(std::move(rec));
  }
  if (summary) *summary = std::move(local);
  return out;
}

}  // namespace selmask
