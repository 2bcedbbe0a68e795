#include <algorithm>
#include <set>

#include "selmask/corpus.hpp"
#include "selmask/error.hpp"
#include "selmask/rng.hpp"

namespace selmask {

namespace {

constexpr std::array<std::string_view, 20> kSyllables = {
    "ba", "ko", "mi", "te", "ru", "sa", "lo", "ni", "vu", "de",
    "fa", "go", "hi", "ja", "ke", "lu", "mo", "pe", "ri", "zo"};

class NameGenerator {
 public:
  explicit NameGenerator(std::size_t count) {
    while (capacity() < count) ++width_;
  }
  std::string operator()(std::size_t index) const {
    std::string name;
    for (std::size_t k = 0; k < width_; ++k) {
      name += kSyllables[index % kSyllables.size()];
      index /= kSyllables.size();
    }
    return name;
  }

 private:
  std::size_t capacity() const {
    std::size_t c = 1;
    for (std::size_t k = 0; k < width_; ++k) c *= kSyllables.size();
    return c;
  }
  std::size_t width_ = 2;
};

enum class Stream : std::uint64_t { kTask = 1, kDomain = 2, kGeneral = 3 };

struct WordTables {
  std::vector<std::vector<TokenId>> lexicon;  // per class
  std::vector<std::vector<TokenId>> cues;     // per class
  std::vector<TokenId> fillers;
};

struct Generated {
  std::vector<TokenId> ids;
  std::vector<std::size_t> planted;
  int label = 0;
};

std::size_t other_class(Rng& rng, std::size_t classes, std::size_t c) {
  std::size_t k = rng.below(classes - 1);
  return k >= c ? k + 1 : k;
}

Generated generate_one(const SynthSpec& spec, const WordTables& words, bool coherent, Rng& rng) {
  const std::size_t classes = spec.num_classes;
  const std::size_t length = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
  const std::size_t latent = rng.below(classes);

  auto pick_class = [&](double agreement) {
    if (!coherent) return rng.below(classes);
    return rng.bernoulli(agreement) ? latent : other_class(rng, classes, latent);
  };
  auto pick = [&](const std::vector<TokenId>& pool) { return pool[rng.below(pool.size())]; };

  Generated g;
  g.ids.resize(length);
  std::vector<int> planted_class(length, -1);
  for (std::size_t pos = 0; pos < length; ++pos) {
    const double u = rng.uniform();
    if (u < spec.planted_rate) {
      std::size_t k = pick_class(spec.agreement);
      planted_class[pos] = static_cast<int>(k);
      g.ids[pos] = pick(words.lexicon[k]);
    } else if (u < spec.planted_rate + spec.cue_rate && !words.cues.empty() && !words.cues[0].empty()) {
      g.ids[pos] = pick(words.cues[pick_class(spec.cue_agreement)]);
    } else {
      g.ids[pos] = pick(words.fillers);
    }
  }
  auto planted_count = [&] {
    return static_cast<std::size_t>(std::count_if(planted_class.begin(), planted_class.end(), [](int k) { return k >= 0; }));
  };
  while (planted_count() < std::min(spec.min_planted, length)) {
    std::size_t pos = rng.below(length);
    if (planted_class[pos] >= 0) continue;
    std::size_t k = pick_class(spec.agreement);
    planted_class[pos] = static_cast<int>(k);
    g.ids[pos] = pick(words.lexicon[k]);
  }

  std::vector<std::size_t> votes(classes, 0);
  for (std::size_t pos = 0; pos < length; ++pos) {
    if (planted_class[pos] >= 0) {
      g.planted.push_back(pos);
      ++votes[static_cast<std::size_t>(planted_class[pos])];
    }
  }
  // Majority polarity; ties go to the latent class when it is among the
  // tied classes, otherwise to the lowest tied class.
  const std::size_t best = *std::max_element(votes.begin(), votes.end());
  std::size_t label = classes;
  if (votes[latent] == best) {
    label = latent;
  } else {
    label = static_cast<std::size_t>(std::find(votes.begin(), votes.end(), best) - votes.begin());
  }
  if (spec.noise_rate > 0.0 && rng.bernoulli(spec.noise_rate)) label = other_class(rng, classes, label);
  g.label = static_cast<int>(label);
  return g;
}

}  // namespace

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
  const std::size_t lexicon_size = lexicon.empty() ? lexicon_words_per_class * num_classes : lexicon.size();
  if (lexicon_size == 0) throw ConfigError("synth: lexicon is empty");
  if (vocab_size < kNumReserved + lexicon_size + cue_words_per_class * num_classes + 1)
    throw ConfigError("synth: vocab_size too small for lexicon, cue words and at least one filler");
  if (min_length == 0 || min_length > max_length) throw ConfigError("synth: need 1 <= min_length <= max_length");
  for (double p : {planted_rate, cue_rate, cue_agreement, agreement, noise_rate})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("synth: probabilities must lie in [0, 1]");
  if (planted_rate + cue_rate > 1.0) throw ConfigError("synth: planted_rate + cue_rate exceeds 1");
  if (planted_rate == 0.0 && noise_rate == 0.0)
    throw ConfigError("synth: planted_rate 0 with noise_rate 0 leaves labels undefined");
  if (!lexicon.empty()) {
    std::vector<std::size_t> per_class(num_classes, 0);
    for (const auto& [word, k] : lexicon) {
      if (k < 0 || static_cast<std::size_t>(k) >= num_classes)
        throw ConfigError("synth: lexicon word \"" + word + "\" has class outside [0, num_classes)");
      ++per_class[static_cast<std::size_t>(k)];
    }
    if (std::find(per_class.begin(), per_class.end(), 0u) != per_class.end())
      throw ConfigError("synth: every class needs at least one lexicon word");
  }
}

SynthCorpora generate_synth(const SynthSpec& spec) {
  spec.validate();
  const std::size_t classes = spec.num_classes;

  std::vector<std::string> tokens(kReservedTokens.begin(), kReservedTokens.end());
  std::set<std::string> used(tokens.begin(), tokens.end());
  WordTables words;
  words.lexicon.resize(classes);
  words.cues.resize(classes);

  auto add = [&](std::string name) {
    used.insert(name);
    tokens.push_back(std::move(name));
    return static_cast<TokenId>(tokens.size() - 1);
  };

  SynthCorpora out;
  for (const auto& [word, k] : spec.lexicon) {
    if (used.contains(word)) throw ConfigError("synth: duplicate lexicon word \"" + word + "\"");
    TokenId id = add(word);
    words.lexicon[static_cast<std::size_t>(k)].push_back(id);
  }

  NameGenerator names(spec.vocab_size * 2);
  std::size_t next_name = 0;
  auto fresh = [&] {
    std::string n;
    do n = names(next_name++); while (used.contains(n));
    return n;
  };
  if (spec.lexicon.empty()) {
    for (std::size_t k = 0; k < classes; ++k)
      for (std::size_t i = 0; i < spec.lexicon_words_per_class; ++i) words.lexicon[k].push_back(add(fresh()));
  }
  for (std::size_t k = 0; k < classes; ++k)
    for (std::size_t i = 0; i < spec.cue_words_per_class; ++i) words.cues[k].push_back(add(fresh()));
  while (tokens.size() < spec.vocab_size) words.fillers.push_back(add(fresh()));
  if (words.fillers.empty()) throw ConfigError("synth: vocab_size leaves no filler words");

  out.vocab = Vocab::from_tokens(tokens);
  for (std::size_t k = 0; k < classes; ++k)
    for (TokenId id : words.lexicon[k]) out.lexicon.emplace(id, static_cast<int>(k));

  auto make_record = [&](const Generated& g) {
    CorpusRecord rec;
    rec.seq = sequence_from_ids(g.ids, out.vocab);
    return rec;
  };

  out.task.tier = Tier::kTask;
  out.task.num_classes = static_cast<int>(classes);
  const std::size_t task_total = spec.task_train + spec.task_dev + spec.task_test;
  for (std::size_t i = 0; i < task_total; ++i) {
    Rng rng(derive_seed({spec.seed, static_cast<std::uint64_t>(Stream::kTask), i}));
    Generated g = generate_one(spec, words, /*coherent=*/true, rng);
    CorpusRecord rec = make_record(g);
    rec.label = g.label;
    rec.split = i < spec.task_train ? Split::kTrain
                : i < spec.task_train + spec.task_dev ? Split::kDev
                                                      : Split::kTest;
    out.task.records.push_back(std::move(rec));
    out.task_truth.push_back(std::move(g.planted));
  }

  out.domain.tier = Tier::kDomain;
  for (std::size_t i = 0; i < spec.domain_size; ++i) {
    Rng rng(derive_seed({spec.seed, static_cast<std::uint64_t>(Stream::kDomain), i}));
    Generated g = generate_one(spec, words, /*coherent=*/true, rng);
    out.domain.records.push_back(make_record(g));
    out.domain_truth.push_back(std::move(g.planted));
  }

  out.general.tier = Tier::kGeneral;
  for (std::size_t i = 0; i < spec.general_size; ++i) {
    Rng rng(derive_seed({spec.seed, static_cast<std::uint64_t>(Stream::kGeneral), i}));
    Generated g = generate_one(spec, words, /*coherent=*/false, rng);
    out.general.records.push_back(make_record(g));
  }

  out.task.recount();
  out.domain.recount();
  out.general.recount();
  return out;
}

}  // namespace selmask
