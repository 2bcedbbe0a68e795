#include "selmask/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <set>

#include <spdlog/spdlog.h>

#include "selmask/error.hpp"
#include "selmask/formats.hpp"
#include "selmask/optimizer.hpp"
#include "selmask/rng.hpp"
#include "selmask/training.hpp"

namespace selmask {

using nlohmann::json;

namespace {

class Timer {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Reads keys from a JSON object and rejects any key never asked for.
class StrictObject {
 public:
  StrictObject(const json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j.is_object()) throw ConfigError(context_ + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(context_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(context_ + ": unknown key \"" + k + "\"");
  }

 private:
  const json& j_;
  std::string context_;
  std::set<std::string> seen_;
};

std::string checkpoint_name(std::size_t step) { return "step_" + std::to_string(step) + ".ckpt"; }

void require_ids_in_vocab(std::span<const MaskedExample> corpus, std::size_t vocab_size, const std::string& what) {
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (TokenId id : corpus[i].input_ids)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
        throw ConfigError(what + ": example " + std::to_string(i) + " has token id " + std::to_string(id) +
                          " outside the model vocabulary of " + std::to_string(vocab_size));
    for (TokenId id : corpus[i].targets)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size)
        throw ConfigError(what + ": example " + std::to_string(i) + " has target id " + std::to_string(id) +
                          " outside the model vocabulary of " + std::to_string(vocab_size));
  }
}

std::vector<SequenceExample> sequence_examples(const CorpusTier& task, Split split) {
  std::vector<SequenceExample> out;
  for (const auto& r : task.records)
    if (r.split == split && !r.seq.empty()) out.push_back({r.seq.ids, *r.label});
  return out;
}

void require_splits(const CorpusTier& task) {
  if (task.tier != Tier::kTask) throw ConfigError("fine-tuning needs the Task tier");
  for (Split s : {Split::kTrain, Split::kDev, Split::kTest})
    if (task.count(s) == 0) throw ConfigError("task corpus has no " + std::string(to_string(s)) + " split");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

json synth_spec_to_json(const SynthSpec& s) {
  json lex = json::array();
  for (const auto& [w, c] : s.lexicon) lex.push_back({w, c});
  return {{"vocab_size", s.vocab_size},
          {"num_classes", s.num_classes},
          {"lexicon_words_per_class", s.lexicon_words_per_class},
          {"lexicon", lex},
          {"cue_words_per_class", s.cue_words_per_class},
          {"cue_rate", s.cue_rate},
          {"cue_agreement", s.cue_agreement},
          {"min_length", s.min_length},
          {"max_length", s.max_length},
          {"planted_rate", s.planted_rate},
          {"agreement", s.agreement},
          {"noise_rate", s.noise_rate},
          {"min_planted", s.min_planted},
          {"task_train", s.task_train},
          {"task_dev", s.task_dev},
          {"task_test", s.task_test},
          {"domain_size", s.domain_size},
          {"general_size", s.general_size},
          {"seed", s.seed}};
}

SynthSpec synth_spec_from_json(const json& j) {
  SynthSpec s;
  StrictObject o(j, "synth");
  o.read("vocab_size", s.vocab_size);
  o.read("num_classes", s.num_classes);
  o.read("lexicon_words_per_class", s.lexicon_words_per_class);
  if (const json* lex = o.child("lexicon")) {
    try {
      if (lex->is_object()) {
        for (const auto& [w, c] : lex->items()) s.lexicon.emplace_back(w, c.get<int>());
      } else {
        for (const auto& e : *lex) s.lexicon.emplace_back(e.at(0).get<std::string>(), e.at(1).get<int>());
      }
    } catch (const json::exception& e) {
      throw ConfigError(std::string("synth.lexicon: ") + e.what());
    }
  }
  o.read("cue_words_per_class", s.cue_words_per_class);
  o.read("cue_rate", s.cue_rate);
  o.read("cue_agreement", s.cue_agreement);
  o.read("min_length", s.min_length);
  o.read("max_length", s.max_length);
  o.read("planted_rate", s.planted_rate);
  o.read("agreement", s.agreement);
  o.read("noise_rate", s.noise_rate);
  o.read("min_planted", s.min_planted);
  o.read("task_train", s.task_train);
  o.read("task_dev", s.task_dev);
  o.read("task_test", s.task_test);
  o.read("domain_size", s.domain_size);
  o.read("general_size", s.general_size);
  o.read("seed", s.seed);
  o.finish();
  s.validate();
  return s;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("experiment: seed list is empty");
  if (genept_steps == 0) throw ConfigError("experiment: genept_steps must be positive");
  if (taskpt_steps == 0) throw ConfigError("experiment: taskpt_steps must be positive");
  if (finetune_epochs == 0) throw ConfigError("experiment: finetune_epochs must be positive");
  if (selector_epochs == 0) throw ConfigError("experiment: selector_epochs must be positive");
  if (checkpoint_fractions.empty()) throw ConfigError("experiment: checkpoint_fractions is empty");
  for (double f : checkpoint_fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("experiment: checkpoint fractions must lie in (0, 1]");
  for (std::size_t b : {pretrain_batch, finetune_batch, selector_batch})
    if (b == 0) throw ConfigError("experiment: batch sizes must be positive");
  for (double lr : {pretrain_lr, finetune_lr, selector_lr})
    if (!(lr > 0.0)) throw ConfigError("experiment: learning rates must be positive");
  if (!(selector_label_weight > 0.0)) throw ConfigError("experiment: selector_label_weight must be positive");
  if (!(selector_heldout >= 0.0 && selector_heldout < 1.0))
    throw ConfigError("experiment: selector_heldout must lie in [0, 1)");
  (void)Threshold{delta};
  validate_selection_threshold(selector_threshold);
  random.validate();
  selective.validate();
  corruption.validate();
  if (arms.empty()) throw ConfigError("experiment: no arms");
  for (const auto& a : arms)
    if (a != "general" && a != "random" && a != "selective")
      throw ConfigError("experiment: unknown arm \"" + a + "\" (expected general, random or selective)");
  if (!synth && (corpora.vocab.empty() || corpora.general.empty() || corpora.domain.empty() || corpora.task.empty()))
    throw ConfigError("experiment: either synth or all of corpora.{vocab,general,domain,task} is required");
  if (synth) {
    synth->validate();
    if (synth->max_length > model.max_content_length())
      throw ConfigError("experiment: synthetic sequences of " + std::to_string(synth->max_length) +
                        " tokens exceed the model's " + std::to_string(model.max_content_length()));
  }
  if (num_classes < 2) throw ConfigError("experiment: num_classes must be >= 2");
  if (finetune_max_length == 0 || pretrain_max_length == 0)
    throw ConfigError("experiment: max lengths must be positive");
  ModelConfig probe = model;
  probe.vocab_size = std::max<std::size_t>(probe.vocab_size, kNumReserved + 1);
  probe.num_classes = static_cast<std::size_t>(num_classes);
  probe.validate();
}

std::vector<std::size_t> ExperimentConfig::checkpoint_steps() const {
  std::set<std::size_t> steps;
  for (double f : checkpoint_fractions)
    steps.insert(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * static_cast<double>(genept_steps)))));
  return {steps.begin(), steps.end()};
}

json ExperimentConfig::to_json() const {
  json j;
  if (synth) j["synth"] = synth_spec_to_json(*synth);
  else
    j["corpora"] = {{"vocab", corpora.vocab.string()},
                    {"general", corpora.general.string()},
                    {"domain", corpora.domain.string()},
                    {"task", corpora.task.string()}};
  j["num_classes"] = num_classes;
  j["model"] = model.to_json();
  j["genept_steps"] = genept_steps;
  j["checkpoint_fractions"] = checkpoint_fractions;
  j["taskpt_steps"] = taskpt_steps;
  j["pretrain_batch"] = pretrain_batch;
  j["pretrain_lr"] = pretrain_lr;
  j["finetune_epochs"] = finetune_epochs;
  j["finetune_batch"] = finetune_batch;
  j["finetune_lr"] = finetune_lr;
  j["delta"] = delta;
  j["skip_misclassified"] = skip_misclassified;
  j["require_buffer_argmax"] = require_buffer_argmax;
  j["scoring_subsample_copies"] = scoring_subsample_copies;
  j["selector_epochs"] = selector_epochs;
  j["selector_batch"] = selector_batch;
  j["selector_lr"] = selector_lr;
  j["selector_label_weight"] = selector_label_weight;
  j["selector_threshold"] = selector_threshold;
  j["selector_heldout"] = selector_heldout;
  j["random_rate"] = random.rate;
  j["selective_cap"] = selective.cap;
  j["fallback_rate"] = selective.fallback_rate;
  j["corruption"] = {corruption.p_mask, corruption.p_random, corruption.p_keep};
  j["pure_mask"] = pure_mask;
  j["finetune_max_length"] = finetune_max_length;
  j["pretrain_max_length"] = pretrain_max_length;
  j["arms"] = arms;
  j["seeds"] = seeds;
  j["classifier_seed"] = classifier_seed;
  j["pretrain_seed"] = pretrain_seed;
  j["masking_seed"] = masking_seed;
  j["output_dir"] = output_dir.string();
  j["workers"] = workers;
  j["significance"] = significance;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  StrictObject o(j, "experiment");
  if (const json* s = o.child("synth")) c.synth = synth_spec_from_json(*s);
  if (const json* p = o.child("corpora")) {
    StrictObject po(*p, "corpora");
    std::string vocab, general, domain, task;
    po.read("vocab", vocab);
    po.read("general", general);
    po.read("domain", domain);
    po.read("task", task);
    po.finish();
    c.corpora = {vocab, general, domain, task};
  }
  o.read("num_classes", c.num_classes);
  if (const json* m = o.child("model")) {
    try {
      c.model = ModelConfig::from_json(*m);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("model: ") + e.what());
    }
  }
  o.read("genept_steps", c.genept_steps);
  o.read("checkpoint_fractions", c.checkpoint_fractions);
  o.read("taskpt_steps", c.taskpt_steps);
  o.read("pretrain_batch", c.pretrain_batch);
  o.read("pretrain_lr", c.pretrain_lr);
  o.read("finetune_epochs", c.finetune_epochs);
  o.read("finetune_batch", c.finetune_batch);
  o.read("finetune_lr", c.finetune_lr);
  o.read("delta", c.delta);
  o.read("skip_misclassified", c.skip_misclassified);
  o.read("require_buffer_argmax", c.require_buffer_argmax);
  o.read("scoring_subsample_copies", c.scoring_subsample_copies);
  o.read("selector_epochs", c.selector_epochs);
  o.read("selector_batch", c.selector_batch);
  o.read("selector_lr", c.selector_lr);
  o.read("selector_label_weight", c.selector_label_weight);
  o.read("selector_threshold", c.selector_threshold);
  o.read("selector_heldout", c.selector_heldout);
  o.read("random_rate", c.random.rate);
  o.read("selective_cap", c.selective.cap);
  o.read("fallback_rate", c.selective.fallback_rate);
  std::vector<double> rule;
  o.read("corruption", rule);
  if (!rule.empty()) {
    if (rule.size() != 3) throw ConfigError("corruption: expected [p_mask, p_random, p_keep]");
    c.corruption = {rule[0], rule[1], rule[2]};
  }
  o.read("pure_mask", c.pure_mask);
  o.read("finetune_max_length", c.finetune_max_length);
  o.read("pretrain_max_length", c.pretrain_max_length);
  o.read("arms", c.arms);
  o.read("seeds", c.seeds);
  o.read("classifier_seed", c.classifier_seed);
  o.read("pretrain_seed", c.pretrain_seed);
  o.read("masking_seed", c.masking_seed);
  std::string out = c.output_dir.string();
  o.read("output_dir", out);
  c.output_dir = out;
  o.read("workers", c.workers);
  o.read("significance", c.significance);
  o.finish();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto c = from_json(j);
  const auto base = path.parent_path();
  for (auto* p : {&c.corpora.vocab, &c.corpora.general, &c.corpora.domain, &c.corpora.task})
    if (!p->empty() && p->is_relative()) *p = base / *p;
  if (const char* env = std::getenv(kOutputDirEnv); env && *env) c.output_dir = env;
  return c;
}

ExperimentData load_experiment_data(const ExperimentConfig& config) {
  ExperimentData d;
  if (config.synth) {
    auto s = generate_synth(*config.synth);
    d.vocab = std::move(s.vocab);
    d.general = std::move(s.general);
    d.domain = std::move(s.domain);
    d.task = std::move(s.task);
    d.domain_truth = std::move(s.domain_truth);
    return d;
  }
  const auto& p = config.corpora;
  for (const auto* f : {&p.vocab, &p.general, &p.domain, &p.task})
    if (!std::filesystem::exists(*f)) throw ConfigError("missing input file " + f->string());
  d.vocab = Vocab::load(p.vocab);
  // Framing positions count against max_positions, so content is clipped to what the model holds.
  const std::size_t cap = config.model.max_content_length();
  d.general = load_corpus(p.general, Tier::kGeneral, d.vocab, std::min(cap, config.pretrain_max_length));
  d.domain = load_corpus(p.domain, Tier::kDomain, d.vocab, std::min(cap, config.pretrain_max_length));
  d.task = load_corpus(p.task, Tier::kTask, d.vocab, std::min(cap, config.finetune_max_length), config.num_classes);
  return d;
}

// ---------------------------------------------------------------------------
// Reports

json StageReport::to_json() const {
  json curve = json::array();
  for (const auto& [s, l] : loss_curve) curve.push_back({s, l});
  return {{"stage", stage},          {"policy", policy},    {"steps", steps},   {"seconds", seconds},
          {"final_loss", final_loss}, {"checkpoint", checkpoint.string()}, {"loss_curve", curve}};
}

StageReport StageReport::from_json(const json& j) {
  StageReport r;
  r.stage = j.at("stage").get<std::string>();
  r.policy = j.value("policy", "");
  r.steps = j.at("steps").get<std::size_t>();
  r.seconds = j.at("seconds").get<double>();
  r.final_loss = j.at("final_loss").get<double>();
  r.checkpoint = j.value("checkpoint", "");
  for (const auto& e : j.value("loss_curve", json::array()))
    r.loss_curve.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<double>());
  return r;
}

json Metrics::to_json() const {
  return {{"seeds", seeds},         {"test_accuracy", test_accuracy}, {"dev_accuracy", dev_accuracy},
          {"best_epoch", best_epoch}, {"mean", mean},                   {"stddev", stddev}};
}

Metrics Metrics::from_json(const json& j) {
  Metrics m;
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.test_accuracy = j.at("test_accuracy").get<std::vector<double>>();
  m.dev_accuracy = j.at("dev_accuracy").get<std::vector<double>>();
  m.best_epoch = j.at("best_epoch").get<std::vector<std::size_t>>();
  m.mean = j.at("mean").get<double>();
  m.stddev = j.at("stddev").get<double>();
  return m;
}

json ArmResult::to_json() const {
  return {{"arm", arm},
          {"genept_steps", genept_steps},
          {"taskpt_steps", taskpt_steps},
          {"genept_sha256", genept_sha256},
          {"metrics", metrics.to_json()},
          {"finetune_seconds", finetune_seconds},
          {"selection_seconds", selection_seconds},
          {"taskpt_seconds", taskpt_seconds}};
}

ArmResult ArmResult::from_json(const json& j) {
  ArmResult a;
  a.arm = j.at("arm").get<std::string>();
  a.genept_steps = j.at("genept_steps").get<std::size_t>();
  a.taskpt_steps = j.at("taskpt_steps").get<std::size_t>();
  a.genept_sha256 = j.value("genept_sha256", "");
  a.metrics = Metrics::from_json(j.at("metrics"));
  a.finetune_seconds = j.value("finetune_seconds", std::vector<double>{});
  a.selection_seconds = j.value("selection_seconds", 0.0);
  a.taskpt_seconds = j.value("taskpt_seconds", 0.0);
  return a;
}

const ArmResult* ExperimentResult::find(std::string_view arm, std::size_t genept_steps) const {
  for (const auto& a : arms)
    if (a.arm == arm && a.genept_steps == genept_steps) return &a;
  return nullptr;
}

json ExperimentResult::to_json() const {
  json j;
  j["config"] = config;
  j["stages"] = json::array();
  for (const auto& s : stages) j["stages"].push_back(s.to_json());
  j["arms"] = json::array();
  for (const auto& a : arms) j["arms"].push_back(a.to_json());
  j["diagnostics"] = diagnostics;
  if (failed_stage) j["failed_stage"] = *failed_stage;
  return j;
}

ExperimentResult ExperimentResult::from_json(const json& j) {
  ExperimentResult r;
  r.config = j.value("config", json::object());
  for (const auto& s : j.value("stages", json::array())) r.stages.push_back(StageReport::from_json(s));
  for (const auto& a : j.at("arms")) r.arms.push_back(ArmResult::from_json(a));
  r.diagnostics = j.value("diagnostics", json::object());
  if (j.contains("failed_stage")) r.failed_stage = j.at("failed_stage").get<std::string>();
  return r;
}

// ---------------------------------------------------------------------------
// Stages

StageReport pretrain_mlm(Parameters& params, std::optional<OptimizerState> state,
                         std::span<const MaskedExample> corpus, const PretrainOptions& options,
                         std::vector<CheckpointRef>* checkpoints) {
  if (corpus.empty()) throw ConfigError(options.stage + ": empty masked corpus");
  if (options.steps == 0) throw ConfigError(options.stage + ": step budget must be positive");
  require_ids_in_vocab(corpus, params.config.vocab_size, options.stage);
  for (std::size_t i = 0; i < corpus.size(); ++i)
    if (corpus[i].input_ids.size() > params.config.max_content_length())
      throw ConfigError(options.stage + ": example " + std::to_string(i) + " longer than the model accepts");

  Timer timer;
  OptimizerState opt = state ? std::move(*state) : make_optimizer_state(params);
  TrainConfig tc;
  tc.learning_rate = options.learning_rate;
  tc.batch_size = options.batch_size;
  tc.steps = options.steps;
  tc.seed = options.seed;
  tc.validate();

  std::set<std::size_t> ckpt_steps(options.checkpoint_steps.begin(), options.checkpoint_steps.end());
  const std::size_t window = std::max<std::size_t>(1, options.steps / std::max<std::size_t>(1, options.loss_windows));

  StageReport report;
  report.stage = options.stage;
  report.policy = options.policy;
  double window_sum = 0.0;
  std::size_t window_n = 0;
  double last_loss = 0.0;

  if (opt.step > options.steps)
    throw ConfigError(options.stage + ": resume step " + std::to_string(opt.step) + " beyond budget " +
                      std::to_string(options.steps));
  while (opt.step < options.steps) {
    const std::size_t step = opt.step;
    Rng rng(derive_seed({options.seed, step, 0xB47C}));
    std::vector<MlmExample> items;
    items.reserve(options.batch_size);
    for (std::size_t b = 0; b < options.batch_size; ++b) items.push_back(corpus[rng.below(corpus.size())].to_mlm());
    Batch batch{std::move(items), options.stage + " step " + std::to_string(step + 1)};
    last_loss = train_step(params, opt, batch, Head::kMaskedLm, tc);
    window_sum += last_loss;
    ++window_n;
    if (opt.step % window == 0 || opt.step == options.steps) {
      report.loss_curve.emplace_back(opt.step, window_sum / static_cast<double>(window_n));
      spdlog::debug("{} step {} loss {:.4f}", options.stage, opt.step, window_sum / static_cast<double>(window_n));
      window_sum = 0.0;
      window_n = 0;
    }
    if (ckpt_steps.count(opt.step) && !options.output_dir.empty()) {
      const auto path = options.output_dir / checkpoint_name(opt.step);
      Checkpoint ck{params, {options.stage, opt.step, options.seed, options.policy}, opt};
      save_checkpoint(ck, path);
      if (checkpoints) checkpoints->push_back({opt.step, path, sha256_file(path)});
      report.checkpoint = path;
      spdlog::info("{}: checkpoint at step {} -> {}", options.stage, opt.step, path.string());
    }
  }
  report.steps = opt.step;
  report.final_loss = report.loss_curve.empty() ? last_loss : report.loss_curve.back().second;
  report.seconds = timer.seconds();
  return report;
}

GeneptResult run_genept(const ExperimentConfig& config, const ExperimentData& data,
                        const std::optional<std::filesystem::path>& resume) {
  if (data.general.records.empty()) throw ConfigError("genept: the General corpus is empty");
  ModelConfig mc = config.model;
  mc.vocab_size = data.vocab.size();
  mc.num_classes = static_cast<std::size_t>(config.num_classes);
  mc.seed = config.pretrain_seed;

  Parameters params;
  std::optional<OptimizerState> state;
  if (resume) {
    auto ck = load_checkpoint(*resume, mc);
    if (!ck.optimizer) throw ConfigError("genept: checkpoint " + resume->string() + " has no optimizer state");
    params = std::move(ck.params);
    state = std::move(ck.optimizer);
    spdlog::info("genept: resuming from step {}", state->step);
  } else {
    params = init_parameters(mc);
  }

  Timer mask_timer;
  auto masked = mask_corpus_random(data.general, config.random, config.effective_corruption(), data.vocab.size(),
                                   derive_seed({config.masking_seed, 0x6E7E}), config.workers);
  if (masked.empty()) throw ConfigError("genept: the General corpus has no maskable sequence");
  spdlog::info("genept: {} masked examples ({:.1f}s)", masked.size(), mask_timer.seconds());

  PretrainOptions opt;
  opt.stage = "genept";
  opt.policy = "random";
  opt.steps = config.genept_steps;
  opt.batch_size = config.pretrain_batch;
  opt.learning_rate = config.pretrain_lr;
  opt.seed = config.pretrain_seed;
  opt.checkpoint_steps = config.checkpoint_steps();
  opt.output_dir = config.output_dir / "genept";

  GeneptResult result;
  result.report = pretrain_mlm(params, std::move(state), masked, opt, &result.checkpoints);
  // Checkpoints written before a resume are still part of the run.
  for (std::size_t step : opt.checkpoint_steps) {
    const auto path = opt.output_dir / checkpoint_name(step);
    const bool listed = std::any_of(result.checkpoints.begin(), result.checkpoints.end(),
                                    [&](const CheckpointRef& c) { return c.step == step; });
    if (!listed && std::filesystem::exists(path)) result.checkpoints.push_back({step, path, sha256_file(path)});
  }
  std::sort(result.checkpoints.begin(), result.checkpoints.end(),
            [](const CheckpointRef& a, const CheckpointRef& b) { return a.step < b.step; });
  spdlog::info("genept: {} steps in {:.1f}s, final loss {:.4f}", result.report.steps, result.report.seconds,
               result.report.final_loss);
  return result;
}

StageReport run_taskpt(const ExperimentConfig& config, const Parameters& start, std::span<const MaskedExample> corpus,
                       PolicyTag policy, const std::filesystem::path& output) {
  Parameters params = start;
  PretrainOptions opt;
  opt.stage = "taskpt";
  opt.policy = std::string(to_string(policy));
  opt.steps = config.taskpt_steps;
  opt.batch_size = config.pretrain_batch;
  opt.learning_rate = config.pretrain_lr;
  opt.seed = derive_seed({config.pretrain_seed, 0x7A5C});
  auto report = pretrain_mlm(params, std::nullopt, corpus, opt);
  if (!output.empty()) {
    save_checkpoint({params, {"taskpt", report.steps, opt.seed, opt.policy}, std::nullopt}, output);
    report.checkpoint = output;
  }
  spdlog::info("taskpt[{}]: {} steps in {:.1f}s, final loss {:.4f}", opt.policy, report.steps, report.seconds,
               report.final_loss);
  return report;
}

FinetuneRun run_finetune(const ExperimentConfig& config, const Parameters& start, const CorpusTier& task) {
  require_splits(task);
  if (static_cast<std::size_t>(task.num_classes) > start.config.num_classes)
    throw ConfigError("finetune: task has " + std::to_string(task.num_classes) + " classes, model head has " +
                      std::to_string(start.config.num_classes));
  const auto train = sequence_examples(task, Split::kTrain);
  const auto dev = sequence_examples(task, Split::kDev);
  const auto test = sequence_examples(task, Split::kTest);

  const std::size_t n = config.seeds.size();
  FinetuneRun run;
  run.metrics.seeds = config.seeds;
  run.metrics.test_accuracy.assign(n, 0.0);
  run.metrics.dev_accuracy.assign(n, 0.0);
  run.metrics.best_epoch.assign(n, 0);
  run.seconds.assign(n, 0.0);
  parallel_for(n, config.workers, [&](std::size_t i) {
    Timer timer;
    Parameters init = start;
    reset_classifier_head(init, config.seeds[i]);
    TrainConfig tc;
    tc.learning_rate = config.finetune_lr;
    tc.batch_size = config.finetune_batch;
    tc.epochs = config.finetune_epochs;
    tc.seed = config.seeds[i];
    auto fit = fit_sequence_classifier(std::move(init), train, dev, tc);
    run.metrics.test_accuracy[i] = accuracy(fit.params, test);
    run.metrics.dev_accuracy[i] = fit.best_dev_accuracy;
    run.metrics.best_epoch[i] = fit.best_epoch;
    run.seconds[i] = timer.seconds();
  });
  double sum = 0.0;
  for (double a : run.metrics.test_accuracy) sum += a;
  run.metrics.mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (double a : run.metrics.test_accuracy) ss += (a - run.metrics.mean) * (a - run.metrics.mean);
  run.metrics.stddev = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
  return run;
}

std::vector<SequenceExample> subsample_augment(std::span<const SequenceExample> examples, std::size_t copies,
                                               std::uint64_t seed) {
  std::vector<SequenceExample> out(examples.begin(), examples.end());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.ids.empty()) continue;
    for (std::size_t c = 0; c < copies; ++c) {
      Rng rng(derive_seed({seed, i, c}));
      const double keep = rng.uniform();
      SequenceExample sub{{}, ex.label};
      for (TokenId id : ex.ids)
        if (rng.uniform() < keep) sub.ids.push_back(id);
      if (sub.ids.empty()) sub.ids.push_back(ex.ids[rng.below(ex.ids.size())]);
      out.push_back(std::move(sub));
    }
  }
  return out;
}

ClassifierFit finetune_scoring_classifier(const ExperimentConfig& config, const Parameters& start,
                                          const CorpusTier& task) {
  require_splits(task);
  Parameters init = start;
  reset_classifier_head(init, config.classifier_seed);
  TrainConfig tc;
  tc.learning_rate = config.finetune_lr;
  tc.batch_size = config.finetune_batch;
  tc.epochs = config.finetune_epochs;
  tc.seed = config.classifier_seed;
  auto train = sequence_examples(task, Split::kTrain);
  if (config.scoring_subsample_copies > 0)
    train = subsample_augment(train, config.scoring_subsample_copies, derive_seed({config.classifier_seed, 0x5AB5}));
  return fit_sequence_classifier(std::move(init), train, sequence_examples(task, Split::kDev), tc, config.workers);
}

SelectionQuality selection_quality(std::span<const SelectionMask> masks,
                                   std::span<const std::vector<std::size_t>> truth) {
  if (masks.size() != truth.size())
    throw ConfigError("selection_quality: " + std::to_string(masks.size()) + " masks for " +
                      std::to_string(truth.size()) + " truth rows");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    std::vector<std::uint8_t> planted(masks[i].selected.size(), 0);
    for (auto p : truth[i])
      if (p < planted.size()) planted[p] = 1;
    for (std::size_t k = 0; k < planted.size(); ++k) {
      const bool s = masks[i].selected[k] != 0;
      tp += s && planted[k];
      fp += s && !planted[k];
      fn += !s && planted[k];
    }
  }
  const auto sc = token_scores(tp, fp, fn);
  return {sc.precision, sc.recall, sc.f1};
}

SelectiveCorpus build_selective_corpus(const ExperimentConfig& config, const Parameters& genept,
                                       const ExperimentData& data, const std::filesystem::path& dir) {
  Timer timer;
  SelectiveCorpus out;

  auto clf = finetune_scoring_classifier(config, genept, data.task);
  out.classifier_dev_accuracy = clf.best_dev_accuracy;
  spdlog::info("selective: scoring classifier dev accuracy {:.4f} (epoch {})", clf.best_dev_accuracy, clf.best_epoch);

  ImportanceOptions io;
  io.delta = Threshold{config.delta};
  io.skip_misclassified = config.skip_misclassified;
  io.require_buffer_argmax = config.require_buffer_argmax;
  ModelClassifier scorer(clf.params);
  auto annotations = annotate_corpus(scorer, data.task, io, Split::kTrain, &out.annotation, config.workers);
  spdlog::info("selective: annotated {} sequences, {:.3f} of tokens important", out.annotation.sequences,
               out.annotation.important_fraction());

  auto set = build_selector_training_set(annotations);
  TrainConfig tc;
  tc.learning_rate = config.selector_lr;
  tc.batch_size = config.selector_batch;
  tc.epochs = config.selector_epochs;
  tc.seed = derive_seed({config.classifier_seed, 0x5E1});
  tc.label_weights = {1.0, config.selector_label_weight};
  auto fit = train_selector(genept, set, tc, config.selector_heldout, config.selector_threshold);
  out.selector_log = fit.log;

  auto masks = mask_indomain_corpus(fit.params, data.domain, config.selector_threshold, &out.selection, config.workers);
  if (!data.domain_truth.empty()) out.quality = selection_quality(masks, data.domain_truth);
  spdlog::info("selective: selected rate {:.3f}, zero-selection sequences {}", out.selection.selected_rate(),
               out.selection.zero_selection);
  if (out.quality)
    spdlog::info("selective: precision {:.3f} recall {:.3f} against planted truth", out.quality->precision,
                 out.quality->recall);

  out.examples = mask_corpus_selective(masks, config.selective, config.effective_corruption(), data.vocab.size(),
                                       derive_seed({config.masking_seed, 0x5E1EC7}), config.workers);
  out.seconds = timer.seconds();

  if (!dir.empty()) {
    std::filesystem::create_directories(dir);
    save_checkpoint({clf.params, {"finetune-clf", clf.best_epoch, config.classifier_seed, ""}, std::nullopt},
                    dir / "classifier.ckpt");
    write_annotations(dir / "annotations.jsonl", annotations);
    save_checkpoint({fit.params, {"selector", config.selector_epochs, tc.seed, ""}, std::nullopt},
                    dir / "selector.ckpt");
    write_selections(dir / "selections.jsonl", masks);
    write_masked(dir / "masked_selective.jsonl", out.examples);
  }
  return out;
}

ExperimentResult run_full_experiment(const ExperimentConfig& config) {
  config.validate();
  ExperimentData data;
  try {
    data = load_experiment_data(config);
  } catch (const Error& e) {
    throw StageError("load", e.what());
  }
  return run_full_experiment(config, data);
}

ExperimentResult run_full_experiment(const ExperimentConfig& config, const ExperimentData& data) {
  config.validate();
  ExperimentResult result;
  result.config = config.to_json();
  std::filesystem::create_directories(config.output_dir);
  const bool want_general = std::count(config.arms.begin(), config.arms.end(), "general") > 0;
  const bool want_random = std::count(config.arms.begin(), config.arms.end(), "random") > 0;
  const bool want_selective = std::count(config.arms.begin(), config.arms.end(), "selective") > 0;

  std::string stage = "genept";
  try {
    auto genept = run_genept(config, data);
    result.stages.push_back(genept.report);

    ModelConfig mc = config.model;
    mc.vocab_size = data.vocab.size();
    mc.num_classes = static_cast<std::size_t>(config.num_classes);
    mc.seed = config.pretrain_seed;

    std::vector<MaskedExample> random_corpus;
    if (want_random) {
      stage = "mask-random";
      random_corpus = mask_corpus_random(data.domain, config.random, config.effective_corruption(), data.vocab.size(),
                                         derive_seed({config.masking_seed, 0xD0A1}), config.workers);
      write_masked(config.output_dir / "masked_random.jsonl", random_corpus);
    }

    for (const auto& ck : genept.checkpoints) {
      const auto dir = config.output_dir / ("ckpt_" + std::to_string(ck.step));
      stage = "load-checkpoint";
      const auto base = load_checkpoint(ck.path, mc);
      if (sha256_file(ck.path) != ck.sha256) throw Error("checkpoint " + ck.path.string() + " changed on disk");

      auto record = [&](const std::string& arm, std::size_t taskpt, const FinetuneRun& run, double sel, double tpt) {
        ArmResult a;
        a.arm = arm;
        a.genept_steps = ck.step;
        a.taskpt_steps = taskpt;
        a.genept_sha256 = ck.sha256;
        a.metrics = run.metrics;
        a.finetune_seconds = run.seconds;
        a.selection_seconds = sel;
        a.taskpt_seconds = tpt;
        spdlog::info("arm {} @ {}: mean test acc {:.4f} (sd {:.4f})", arm, ck.step, a.metrics.mean, a.metrics.stddev);
        result.arms.push_back(std::move(a));
      };

      if (want_general) {
        stage = "finetune[general@" + std::to_string(ck.step) + "]";
        record("general", 0, run_finetune(config, base.params, data.task), 0.0, 0.0);
      }
      if (want_random) {
        stage = "taskpt[random@" + std::to_string(ck.step) + "]";
        auto rep = run_taskpt(config, base.params, random_corpus, PolicyTag::kRandom, dir / "taskpt_random.ckpt");
        result.stages.push_back(rep);
        auto tp = load_checkpoint(rep.checkpoint, mc);
        stage = "finetune[random@" + std::to_string(ck.step) + "]";
        record("random", rep.steps, run_finetune(config, tp.params, data.task), 0.0, rep.seconds);
      }
      if (want_selective) {
        stage = "selection@" + std::to_string(ck.step);
        auto sel = build_selective_corpus(config, base.params, data, dir);
        json diag = {{"classifier_dev_accuracy", sel.classifier_dev_accuracy},
                     {"important_fraction", sel.annotation.important_fraction()},
                     {"misclassified", sel.annotation.misclassified},
                     {"selected_rate", sel.selection.selected_rate()},
                     {"zero_selection", sel.selection.zero_selection},
                     {"selection_seconds", sel.seconds}};
        if (sel.quality)
          diag["quality"] = {{"precision", sel.quality->precision},
                             {"recall", sel.quality->recall},
                             {"f1", sel.quality->f1}};
        const auto stats = masking_stats(sel.examples);
        diag["realized_mask_rate"] = stats.realized_rate();
        diag["fallback_frequency"] = stats.fallback_frequency();
        result.diagnostics[std::to_string(ck.step)] = diag;

        stage = "taskpt[selective@" + std::to_string(ck.step) + "]";
        auto rep = run_taskpt(config, base.params, sel.examples, PolicyTag::kSelective, dir / "taskpt_selective.ckpt");
        result.stages.push_back(rep);
        auto tp = load_checkpoint(rep.checkpoint, mc);
        stage = "finetune[selective@" + std::to_string(ck.step) + "]";
        record("selective", rep.steps, run_finetune(config, tp.params, data.task), sel.seconds, rep.seconds);
      }
    }
  } catch (const Error& e) {
    result.failed_stage = stage;
    write_text_file(config.output_dir / "results.partial.json", result.to_json().dump(2));
    throw StageError(stage, e.what());
  } catch (const std::exception& e) {
    result.failed_stage = stage;
    write_text_file(config.output_dir / "results.partial.json", result.to_json().dump(2));
    throw StageError(stage, e.what());
  }
  return result;
}

}  // namespace selmask
