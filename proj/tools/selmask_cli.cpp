#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "selmask/checkpoint.hpp"
#include "selmask/corpus.hpp"
#include "selmask/error.hpp"
#include "selmask/formats.hpp"
#include "selmask/importance.hpp"
#include "selmask/masking.hpp"
#include "selmask/pipeline.hpp"
#include "selmask/report.hpp"
#include "selmask/rng.hpp"
#include "selmask/selector.hpp"
#include "selmask/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace selmask;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitStage = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string dashed(std::string key) {
  for (auto& c : key)
    if (c == '_') c = '-';
  return key;
}

// Option values resolved as: built-in default < --config file < flag.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "JSON file with option values (flags take precedence)");
  }

  template <typename T>
  void option(const std::string& key, T def, const std::string& help, bool required = false) {
    defaults_[key] = def;
    auto slot = std::make_shared<T>(def);
    CLI::Option* opt = app_->add_option("--" + dashed(key), *slot, help);
    if constexpr (CLI::detail::is_mutable_container<T>::value) opt->delimiter(',');
    if (!required) opt->capture_default_str();
    if (required) required_.push_back(key);
    flags_.push_back({key, opt, [slot] { return json(*slot); }});
  }

  void flag(const std::string& key, const std::string& help) {
    defaults_[key] = false;
    auto slot = std::make_shared<bool>(false);
    CLI::Option* opt = app_->add_flag("--" + dashed(key), *slot, help);
    flags_.push_back({key, opt, [slot] { return json(*slot); }});
  }

  json resolve() const {
    json v = defaults_;
    if (!config_path_.empty()) {
      if (!fs::exists(config_path_)) throw ConfigError("config file " + config_path_ + " does not exist");
      json file;
      try {
        file = json::parse(read_text_file(config_path_));
      } catch (const json::exception& e) {
        throw ConfigError(config_path_ + ": " + e.what());
      }
      if (!file.is_object()) throw ConfigError(config_path_ + ": expected a JSON object");
      for (const auto& [k, val] : file.items()) {
        if (!defaults_.contains(k)) throw ConfigError(config_path_ + ": unknown option \"" + k + "\"");
        v[k] = val;
      }
    }
    for (const auto& f : flags_)
      if (f.opt->count() > 0) v[f.key] = f.value();
    for (const auto& k : required_)
      if (v[k].is_string() && v[k].get<std::string>().empty())
        throw UsageError("missing required option --" + dashed(k));
    return v;
  }

 private:
  struct Flag {
    std::string key;
    CLI::Option* opt;
    std::function<json()> value;
  };
  CLI::App* app_;
  std::string config_path_;
  json defaults_ = json::object();
  std::vector<Flag> flags_;
  std::vector<std::string> required_;
};

template <typename T>
T get(const json& v, const std::string& key) {
  try {
    return v.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("option " + key + ": " + e.what());
  }
}

fs::path existing(const json& v, const std::string& key) {
  fs::path p = get<std::string>(v, key);
  if (!fs::exists(p)) throw ConfigError("--" + dashed(key) + ": file " + p.string() + " does not exist");
  return p;
}

fs::path output(const json& v, const std::string& key) {
  fs::path p = get<std::string>(v, key);
  if (p.empty()) throw ConfigError("--" + dashed(key) + " is required");
  return p;
}

class Manifest {
 public:
  Manifest(std::string command, const json& options) : command_(std::move(command)), options_(options) {}

  void input(const fs::path& p) { inputs_[p.string()] = sha256_file(p); }
  void output(const fs::path& p) { outputs_[p.string()] = sha256_file(p); }
  void note(const std::string& key, json value) { extra_[key] = std::move(value); }

  void write(const fs::path& path) const {
    const std::string cfg = options_.dump();
    json j = {{"command", command_},
              {"options", options_},
              {"config_sha256", sha256_hex(cfg)},
              {"seed", options_.value("seed", json())},
              {"seconds", timer_seconds()},
              {"inputs", inputs_},
              {"outputs", outputs_}};
    if (!extra_.empty()) j["details"] = extra_;
    write_text_file(path, j.dump(2) + "\n");
    spdlog::info("{}: finished in {:.2f}s, manifest {}", command_, timer_seconds(), path.string());
  }

 private:
  double timer_seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  std::string command_;
  json options_;
  json inputs_ = json::object();
  json outputs_ = json::object();
  json extra_ = json::object();
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

fs::path manifest_for(const fs::path& artifact) {
  if (fs::is_directory(artifact)) return artifact / "manifest.json";
  auto p = artifact;
  p += ".manifest.json";
  return p;
}

std::size_t workers_of(const json& v) { return std::max<std::size_t>(1, get<std::size_t>(v, "workers")); }

TrainConfig train_config(const json& v, std::size_t epochs) {
  TrainConfig tc;
  tc.learning_rate = get<double>(v, "lr");
  tc.batch_size = get<std::size_t>(v, "batch");
  tc.epochs = epochs;
  tc.seed = get<std::uint64_t>(v, "seed");
  tc.validate();
  return tc;
}

// ---------------------------------------------------------------------------

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::unique_ptr<Settings> settings;
  std::function<void(const json&)> run;
};

Command make_command(CLI::App& root, const std::string& name, const std::string& help) {
  Command c;
  c.name = name;
  c.app = root.add_subcommand(name, help);
  c.settings = std::make_unique<Settings>(c.app);
  return c;
}

void add_workers(Settings& s) { s.option<std::size_t>("workers", 1, "worker threads"); }

Command synth_gen(CLI::App& root) {
  auto c = make_command(root, "synth-gen", "generate the synthetic planted-lexicon benchmark");
  c.settings->option<std::string>("spec", "", "synthetic spec JSON (defaults when omitted)");
  c.settings->option<std::string>("out", "", "output directory", true);
  c.settings->option<std::int64_t>("seed", -1, "override the spec seed");
  c.run = [](const json& v) {
    SynthSpec spec;
    const auto spec_path = get<std::string>(v, "spec");
    if (!spec_path.empty()) {
      if (!fs::exists(spec_path)) throw ConfigError("--spec: file " + spec_path + " does not exist");
      try {
        spec = synth_spec_from_json(json::parse(read_text_file(spec_path)));
      } catch (const json::exception& e) {
        throw ConfigError(spec_path + ": " + e.what());
      }
    }
    if (get<std::int64_t>(v, "seed") >= 0) spec.seed = static_cast<std::uint64_t>(get<std::int64_t>(v, "seed"));
    spec.validate();
    const auto out = output(v, "out");
    Manifest m("synth-gen", v);
    if (!spec_path.empty()) m.input(spec_path);
    auto data = generate_synth(spec);
    fs::create_directories(out);
    data.vocab.save(out / "vocab.txt");
    save_corpus(data.general, out / "general.jsonl");
    save_corpus(data.domain, out / "domain.jsonl");
    save_corpus(data.task, out / "task.jsonl");
    write_truth(out / "task_truth.jsonl", data.task_truth);
    write_truth(out / "domain_truth.jsonl", data.domain_truth);
    json lex = json::object();
    for (const auto& [id, cls] : data.lexicon) lex[data.vocab.token(id)] = cls;
    write_text_file(out / "lexicon.json", lex.dump(2) + "\n");
    write_text_file(out / "spec.json", synth_spec_to_json(spec).dump(2) + "\n");
    for (const char* f : {"vocab.txt", "general.jsonl", "domain.jsonl", "task.jsonl", "task_truth.jsonl",
                          "domain_truth.jsonl", "lexicon.json", "spec.json"})
      m.output(out / f);
    m.note("sequences", {{"general", data.general.size()}, {"domain", data.domain.size()}, {"task", data.task.size()}});
    m.write(out / "manifest.json");
  };
  return c;
}

void add_model_options(Settings& s) {
  const ModelConfig d;
  s.option<std::size_t>("dim", d.dim, "embedding dimension");
  s.option<std::size_t>("layers", d.layers, "encoder layers");
  s.option<std::size_t>("heads", d.heads, "attention heads");
  s.option<std::size_t>("hidden", d.hidden, "feed-forward dimension");
  s.option<std::size_t>("max_positions", d.max_positions, "positions including [CLS] and [SEP]");
  s.option<std::size_t>("num_classes", d.num_classes, "classification head size");
  s.option<double>("dropout", d.dropout, "dropout rate");
  s.option<double>("init_std", d.init_std, "initialization standard deviation");
}

ModelConfig model_config(const json& v, std::size_t vocab_size) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.dim = get<std::size_t>(v, "dim");
  m.layers = get<std::size_t>(v, "layers");
  m.heads = get<std::size_t>(v, "heads");
  m.hidden = get<std::size_t>(v, "hidden");
  m.max_positions = get<std::size_t>(v, "max_positions");
  m.num_classes = get<std::size_t>(v, "num_classes");
  m.dropout = get<double>(v, "dropout");
  m.init_std = get<double>(v, "init_std");
  m.seed = get<std::uint64_t>(v, "seed");
  m.validate();
  return m;
}

Checkpoint load_for_vocab(const fs::path& path, const Vocab& vocab) {
  auto ck = load_checkpoint(path);
  require_vocab_compatible(ck.params.config, vocab.size(), path.string());
  return ck;
}

Command pretrain(CLI::App& root) {
  auto c = make_command(root, "pretrain", "general masked-LM pre-training (GenePT) from scratch or a checkpoint");
  auto& s = *c.settings;
  s.option<std::string>("vocab", "", "vocabulary file", true);
  s.option<std::string>("general", "", "General-tier corpus (JSONL)", true);
  s.option<std::string>("out_dir", "", "checkpoint directory", true);
  s.option<std::size_t>("steps", 20000, "step budget");
  s.option<std::vector<double>>("fractions", {0.25, 0.5, 0.75, 1.0}, "checkpoint fractions of the budget");
  s.option<std::size_t>("batch", 16, "batch size");
  s.option<double>("lr", 1e-3, "learning rate");
  s.option<std::uint64_t>("seed", 1, "initialization / sampling seed");
  s.option<std::uint64_t>("masking_seed", 2, "masking seed");
  s.option<double>("rate", 0.15, "random masking rate");
  s.flag("pure_mask", "replace every masked token with [MASK]");
  s.option<std::string>("resume", "", "resume from a checkpoint written by this command");
  s.option<std::size_t>("max_length", kPretrainMaxLength, "content tokens kept per sequence");
  add_model_options(s);
  add_workers(s);
  c.run = [](const json& v) {
    const auto vocab_path = existing(v, "vocab");
    const auto general_path = existing(v, "general");
    const auto out = output(v, "out_dir");
    const auto resume = get<std::string>(v, "resume");
    if (!resume.empty() && !fs::exists(resume)) throw ConfigError("--resume: file " + resume + " does not exist");
    RandomPolicy rp{get<double>(v, "rate")};
    rp.validate();
    const auto fractions = get<std::vector<double>>(v, "fractions");
    const auto steps = get<std::size_t>(v, "steps");
    if (steps == 0) throw ConfigError("--steps must be positive");
    for (double f : fractions)
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("--fractions must lie in (0, 1]");
    Manifest m("pretrain", v);
    m.input(vocab_path);
    m.input(general_path);
    const auto vocab = Vocab::load(vocab_path);
    const auto mc = model_config(v, vocab.size());
    const auto general = load_corpus(general_path, Tier::kGeneral, vocab,
                                      std::min(mc.max_content_length(), get<std::size_t>(v, "max_length")));

    Parameters params;
    std::optional<OptimizerState> state;
    if (!resume.empty()) {
      m.input(resume);
      auto ck = load_checkpoint(resume, mc);
      if (!ck.optimizer) throw ConfigError("--resume: checkpoint has no optimizer state");
      params = std::move(ck.params);
      state = std::move(ck.optimizer);
    } else {
      params = init_parameters(mc);
    }
    const auto rule = get<bool>(v, "pure_mask") ? CorruptionRule::pure_mask() : CorruptionRule{};
    const auto masked = mask_corpus_random(general, rp, rule, vocab.size(),
                                           derive_seed({get<std::uint64_t>(v, "masking_seed"), 0x6E7E}),
                                           workers_of(v));
    PretrainOptions po;
    po.stage = "genept";
    po.policy = "random";
    po.steps = steps;
    po.batch_size = get<std::size_t>(v, "batch");
    po.learning_rate = get<double>(v, "lr");
    po.seed = get<std::uint64_t>(v, "seed");
    for (double f : fractions)
      po.checkpoint_steps.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(f * steps))));
    po.output_dir = out;
    std::vector<CheckpointRef> written;
    fs::create_directories(out);
    auto report = pretrain_mlm(params, std::move(state), masked, po, &written);
    write_text_file(out / "report.json", report.to_json().dump(2) + "\n");
    for (const auto& ck : written) m.output(ck.path);
    m.output(out / "report.json");
    m.note("final_loss", report.final_loss);
    m.write(out / "manifest.json");
  };
  return c;
}

Command finetune_clf(CLI::App& root) {
  auto c = make_command(root, "finetune-clf", "fine-tune the importance-scoring classifier on the task train split");
  auto& s = *c.settings;
  s.option<std::string>("vocab", "", "vocabulary file", true);
  s.option<std::string>("task", "", "Task-tier corpus (JSONL)", true);
  s.option<std::string>("init", "", "GenePT checkpoint", true);
  s.option<std::string>("out", "", "classifier checkpoint to write", true);
  s.option<std::size_t>("epochs", 10, "epochs (best dev epoch kept)");
  s.option<std::size_t>("batch", 16, "batch size");
  s.option<double>("lr", 1e-3, "learning rate");
  s.option<std::uint64_t>("seed", 42, "head initialization / shuffling seed");
  s.option<std::size_t>("max_length", kFinetuneMaxLength, "content tokens kept per sequence");
  s.option<std::size_t>("subsample_copies", 0, "random sub-sequences added per train sequence");
  add_workers(s);
  c.run = [](const json& v) {
    const auto vocab_path = existing(v, "vocab");
    const auto task_path = existing(v, "task");
    const auto init_path = existing(v, "init");
    const auto out = output(v, "out");
    const auto tc = train_config(v, get<std::size_t>(v, "epochs"));
    Manifest m("finetune-clf", v);
    for (const auto& p : {vocab_path, task_path, init_path}) m.input(p);
    const auto vocab = Vocab::load(vocab_path);
    auto ck = load_for_vocab(init_path, vocab);
    const auto task = load_corpus(task_path, Tier::kTask, vocab,
                                  std::min(ck.params.config.max_content_length(), get<std::size_t>(v, "max_length")),
                                  static_cast<int>(ck.params.config.num_classes));
    ExperimentConfig ec;
    ec.finetune_lr = tc.learning_rate;
    ec.finetune_batch = tc.batch_size;
    ec.finetune_epochs = tc.epochs;
    ec.classifier_seed = tc.seed;
    ec.scoring_subsample_copies = get<std::size_t>(v, "subsample_copies");
    ec.workers = workers_of(v);
    auto fit = finetune_scoring_classifier(ec, ck.params, task);
    save_checkpoint({fit.params, {"finetune-clf", fit.best_epoch, tc.seed, ""}, std::nullopt}, out);
    spdlog::info("finetune-clf: best dev accuracy {:.4f} at epoch {}", fit.best_dev_accuracy, fit.best_epoch);
    m.output(out);
    m.note("best_dev_accuracy", fit.best_dev_accuracy);
    m.note("best_epoch", fit.best_epoch);
    m.write(manifest_for(out));
  };
  return c;
}

Command mask_downstream(CLI::App& root) {
  auto c = make_command(root, "mask-downstream", "annotate important tokens on the labeled task data");
  auto& s = *c.settings;
  s.option<std::string>("vocab", "", "vocabulary file", true);
  s.option<std::string>("task", "", "Task-tier corpus (JSONL)", true);
  s.option<std::string>("classifier", "", "fine-tuned classifier checkpoint", true);
  s.option<std::string>("out", "", "annotation file to write (JSONL)", true);
  s.option<double>("delta", Threshold::kDefault, "importance threshold; tokens scoring strictly below are important");
  s.option<std::string>("split", "train", "split to annotate: train, dev, test or all");
  s.flag("skip_misclassified", "omit sequences the classifier gets wrong");
  s.flag("require_buffer_argmax", "also require the label to be the buffer's argmax");
  add_workers(s);
  c.run = [](const json& v) {
    const auto vocab_path = existing(v, "vocab");
    const auto task_path = existing(v, "task");
    const auto clf_path = existing(v, "classifier");
    const auto out = output(v, "out");
    ImportanceOptions io;
    io.delta = Threshold{get<double>(v, "delta")};
    io.skip_misclassified = get<bool>(v, "skip_misclassified");
    io.require_buffer_argmax = get<bool>(v, "require_buffer_argmax");
    const auto split_name = get<std::string>(v, "split");
    std::optional<Split> split;
    if (split_name != "all") split = parse_split(split_name);
    Manifest m("mask-downstream", v);
    for (const auto& p : {vocab_path, task_path, clf_path}) m.input(p);
    const auto vocab = Vocab::load(vocab_path);
    const auto ck = load_for_vocab(clf_path, vocab);
    const auto task = load_corpus(task_path, Tier::kTask, vocab, ck.params.config.max_content_length(),
                                  static_cast<int>(ck.params.config.num_classes));
    ModelClassifier clf(ck.params);
    AnnotationSummary summary;
    const auto records = annotate_corpus(clf, task, io, split, &summary, workers_of(v));
    write_annotations(out, records);
    json per_class = json::object();
    for (const auto& [cls, cc] : summary.per_class)
      per_class[std::to_string(cls)] = {{"sequences", cc.sequences}, {"tokens", cc.tokens}, {"important", cc.important}};
    spdlog::info("mask-downstream: {} sequences, {:.3f} of tokens important, {} misclassified", summary.sequences,
                 summary.important_fraction(), summary.misclassified);
    m.output(out);
    m.note("summary", {{"sequences", summary.sequences},
                       {"tokens", summary.tokens},
                       {"important", summary.important},
                       {"important_fraction", summary.important_fraction()},
                       {"misclassified", summary.misclassified},
                       {"skipped", summary.skipped},
                       {"all_important", summary.all_important},
                       {"no_important", summary.no_important},
                       {"per_class", per_class}});
    m.write(manifest_for(out));
  };
  return c;
}

Command train_selector_cmd(CLI::App& root) {
  auto c = make_command(root, "train-selector", "train the token-level selector on importance annotations");
  auto& s = *c.settings;
  s.option<std::string>("vocab", "", "vocabulary file", true);
  s.option<std::string>("annotations", "", "annotation file from mask-downstream", true);
  s.option<std::string>("init", "", "GenePT checkpoint to start from", true);
  s.option<std::string>("out", "", "selector checkpoint to write", true);
  s.option<std::size_t>("epochs", 3, "epochs");
  s.option<std::size_t>("batch", 16, "batch size");
  s.option<double>("lr", 1e-3, "learning rate");
  s.option<double>("weight", kSelectorLabelWeight, "loss weight of label 1");
  s.option<double>("heldout", 0.1, "fraction held out for per-epoch F1");
  s.option<double>("threshold", kSelectorThreshold, "decision threshold for held-out F1");
  s.option<std::uint64_t>("seed", 42, "shuffling / dropout seed");
  c.run = [](const json& v) {
    const auto vocab_path = existing(v, "vocab");
    const auto ann_path = existing(v, "annotations");
    const auto init_path = existing(v, "init");
    const auto out = output(v, "out");
    auto tc = train_config(v, get<std::size_t>(v, "epochs"));
    tc.label_weights = {1.0, get<double>(v, "weight")};
    tc.validate();
    validate_selection_threshold(get<double>(v, "threshold"));
    Manifest m("train-selector", v);
    for (const auto& p : {vocab_path, ann_path, init_path}) m.input(p);
    const auto vocab = Vocab::load(vocab_path);
    const auto ck = load_for_vocab(init_path, vocab);
    const auto annotations = read_annotations(ann_path, vocab);
    const auto set = build_selector_training_set(annotations);
    auto fit = train_selector(ck.params, set, tc, get<double>(v, "heldout"), get<double>(v, "threshold"));
    save_checkpoint({fit.params, {"selector", tc.epochs, tc.seed, ""}, std::nullopt}, out);
    json log = json::array();
    for (const auto& e : fit.log)
      log.push_back({{"epoch", e.epoch},
                     {"loss", e.train_loss},
                     {"precision", e.heldout.precision},
                     {"recall", e.heldout.recall},
                     {"f1", e.heldout.f1}});
    m.output(out);
    m.note("positive_rate", set.positive_rate());
    m.note("warnings", set.warnings);
    m.note("log", log);
    m.write(manifest_for(out));
  };
  return c;
}

Command mask_indomain(CLI::App& root) {
  auto c = make_command(root, "mask-indomain", "select tokens in unlabeled in-domain text and build a masked corpus");
  auto& s = *c.settings;
  s.option<std::string>("vocab", "", "vocabulary file", true);
  s.option<std::string>("domain", "", "Domain-tier corpus (JSONL)", true);
  s.option<std::string>("selector", "", "selector checkpoint (selective policy)");
  s.option<std::string>("out", "", "masked-example file to write (JSONL)", true);
  s.option<std::string>("selections", "", "also write the selection file here");
  s.option<std::string>("policy", "selective", "selective or random");
  s.option<double>("threshold", kSelectorThreshold, "selector decision threshold");
  s.option<double>("rate", 0.15, "random masking rate");
  s.option<double>("cap", 0.5, "maximum masked fraction per sequence (selective)");
  s.option<double>("fallback", 0.15, "random rate for sequences with nothing selected");
  s.flag("pure_mask", "replace every masked token with [MASK]");
  s.option<std::uint64_t>("seed", 2, "masking seed");
  s.option<std::string>("truth", "", "planted-position file to score the selection against");
  s.option<std::size_t>("max_length", kPretrainMaxLength, "content tokens kept per sequence");
  add_workers(s);
  c.run = [](const json& v) {
    const auto vocab_path = existing(v, "vocab");
    const auto domain_path = existing(v, "domain");
    const auto out = output(v, "out");
    const auto policy = parse_policy(get<std::string>(v, "policy"));
    if (policy == PolicyTag::kFallback) throw ConfigError("--policy must be selective or random");
    const auto rule = get<bool>(v, "pure_mask") ? CorruptionRule::pure_mask() : CorruptionRule{};
    RandomPolicy rp{get<double>(v, "rate")};
    SelectivePolicy sp{get<double>(v, "cap"), get<double>(v, "fallback")};
    rp.validate();
    sp.validate();
    validate_selection_threshold(get<double>(v, "threshold"));
    fs::path selector_path;
    if (policy == PolicyTag::kSelective) selector_path = existing(v, "selector");
    const auto truth = get<std::string>(v, "truth");
    if (!truth.empty() && !fs::exists(truth)) throw ConfigError("--truth: file " + truth + " does not exist");

    Manifest m("mask-indomain", v);
    m.input(vocab_path);
    m.input(domain_path);
    const auto vocab = Vocab::load(vocab_path);
    const auto seed = get<std::uint64_t>(v, "seed");
    std::vector<MaskedExample> examples;
    std::size_t max_len = get<std::size_t>(v, "max_length");
    if (policy == PolicyTag::kRandom) {
      const auto domain = load_corpus(domain_path, Tier::kDomain, vocab, max_len);
      examples = mask_corpus_random(domain, rp, rule, vocab.size(), seed, workers_of(v));
    } else {
      m.input(selector_path);
      const auto ck = load_for_vocab(selector_path, vocab);
      max_len = std::min(max_len, ck.params.config.max_content_length());
      const auto domain = load_corpus(domain_path, Tier::kDomain, vocab, max_len);
      SelectionSummary summary;
      const auto masks = mask_indomain_corpus(ck.params, domain, get<double>(v, "threshold"), &summary, workers_of(v));
      examples = mask_corpus_selective(masks, sp, rule, vocab.size(), seed, workers_of(v));
      const auto sel_path = get<std::string>(v, "selections");
      if (!sel_path.empty()) {
        write_selections(sel_path, masks);
        m.output(sel_path);
      }
      m.note("selected_rate", summary.selected_rate());
      m.note("zero_selection", summary.zero_selection);
      m.note("rate_histogram", summary.histogram);
      spdlog::info("mask-indomain: selected rate {:.3f}, {} sequences with nothing selected", summary.selected_rate(),
                   summary.zero_selection);
      if (!truth.empty()) {
        m.input(truth);
        const auto q = selection_quality(masks, read_truth(truth));
        m.note("quality", {{"precision", q.precision}, {"recall", q.recall}, {"f1", q.f1}});
        spdlog::info("mask-indomain: precision {:.3f} recall {:.3f} against truth", q.precision, q.recall);
      }
    }
    write_masked(out, examples);
    const auto stats = masking_stats(examples);
    m.output(out);
    m.note("stats", {{"examples", stats.examples},
                     {"realized_rate", stats.realized_rate()},
                     {"random", stats.random_examples},
                     {"selective", stats.selective_examples},
                     {"fallback", stats.fallback_examples},
                     {"fallback_frequency", stats.fallback_frequency()},
                     {"mask_outcomes", stats.mask_outcomes},
                     {"random_outcomes", stats.random_outcomes},
                     {"keep_outcomes", stats.keep_outcomes}});
    m.write(manifest_for(out));
  };
  return c;
}

Command taskpt(CLI::App& root) {
  auto c = make_command(root, "taskpt", "task-guided pre-training on a masked in-domain corpus");
  auto& s = *c.settings;
  s.option<std::string>("vocab", "", "vocabulary file", true);
  s.option<std::string>("init", "", "GenePT checkpoint", true);
  s.option<std::string>("masked", "", "masked-example file from mask-indomain", true);
  s.option<std::string>("out", "", "checkpoint to write", true);
  s.option<std::size_t>("steps", 5000, "step budget");
  s.option<std::size_t>("batch", 16, "batch size");
  s.option<double>("lr", 1e-3, "learning rate");
  s.option<std::uint64_t>("seed", 1, "sampling / dropout seed");
  c.run = [](const json& v) {
    const auto vocab_path = existing(v, "vocab");
    const auto init_path = existing(v, "init");
    const auto masked_path = existing(v, "masked");
    const auto out = output(v, "out");
    if (get<std::size_t>(v, "steps") == 0) throw ConfigError("--steps must be positive");
    Manifest m("taskpt", v);
    for (const auto& p : {vocab_path, init_path, masked_path}) m.input(p);
    const auto vocab = Vocab::load(vocab_path);
    auto ck = load_for_vocab(init_path, vocab);
    const auto corpus = read_masked(masked_path);
    std::string policy = "random";
    for (const auto& e : corpus)
      if (e.policy != PolicyTag::kRandom) policy = "selective";
    PretrainOptions po;
    po.stage = "taskpt";
    po.policy = policy;
    po.steps = get<std::size_t>(v, "steps");
    po.batch_size = get<std::size_t>(v, "batch");
    po.learning_rate = get<double>(v, "lr");
    po.seed = get<std::uint64_t>(v, "seed");
    auto report = pretrain_mlm(ck.params, std::nullopt, corpus, po);
    save_checkpoint({ck.params, {"taskpt", report.steps, po.seed, policy}, std::nullopt}, out);
    report.checkpoint = out;
    m.output(out);
    m.note("report", report.to_json());
    m.write(manifest_for(out));
  };
  return c;
}

Command finetune(CLI::App& root) {
  auto c = make_command(root, "finetune", "multi-seed fine-tuning with best-dev selection and test evaluation");
  auto& s = *c.settings;
  s.option<std::string>("vocab", "", "vocabulary file", true);
  s.option<std::string>("task", "", "Task-tier corpus (JSONL)", true);
  s.option<std::string>("init", "", "pre-trained checkpoint", true);
  s.option<std::string>("out_dir", "", "directory for metrics.json / metrics.csv", true);
  s.option<std::vector<std::uint64_t>>("seeds", kDefaultSeeds, "fine-tuning seeds");
  s.option<std::size_t>("epochs", 10, "epochs per seed");
  s.option<std::size_t>("batch", 16, "batch size");
  s.option<double>("lr", 1e-3, "learning rate");
  s.option<std::size_t>("max_length", kFinetuneMaxLength, "content tokens kept per sequence");
  add_workers(s);
  c.run = [](const json& v) {
    const auto vocab_path = existing(v, "vocab");
    const auto task_path = existing(v, "task");
    const auto init_path = existing(v, "init");
    const auto out = output(v, "out_dir");
    ExperimentConfig ec;
    ec.seeds = get<std::vector<std::uint64_t>>(v, "seeds");
    if (ec.seeds.empty()) throw ConfigError("--seeds must not be empty");
    ec.finetune_epochs = get<std::size_t>(v, "epochs");
    ec.finetune_batch = get<std::size_t>(v, "batch");
    ec.finetune_lr = get<double>(v, "lr");
    ec.workers = workers_of(v);
    if (ec.finetune_epochs == 0 || ec.finetune_batch == 0 || !(ec.finetune_lr > 0.0))
      throw ConfigError("epochs, batch and lr must be positive");
    Manifest m("finetune", v);
    for (const auto& p : {vocab_path, task_path, init_path}) m.input(p);
    const auto vocab = Vocab::load(vocab_path);
    const auto ck = load_for_vocab(init_path, vocab);
    const auto task = load_corpus(task_path, Tier::kTask, vocab,
                                  std::min(ck.params.config.max_content_length(), get<std::size_t>(v, "max_length")),
                                  static_cast<int>(ck.params.config.num_classes));
    const auto run = run_finetune(ec, ck.params, task);
    fs::create_directories(out);
    write_text_file(out / "metrics.json", run.metrics.to_json().dump(2) + "\n");
    std::string csv = "seed,dev_acc,test_acc,best_epoch,wallclock_s\n";
    for (std::size_t i = 0; i < run.metrics.seeds.size(); ++i)
      csv += fmt::format("{},{:.6f},{:.6f},{},{:.3f}\n", run.metrics.seeds[i], run.metrics.dev_accuracy[i],
                         run.metrics.test_accuracy[i], run.metrics.best_epoch[i], run.seconds[i]);
    write_text_file(out / "metrics.csv", csv);
    spdlog::info("finetune: mean test accuracy {:.4f} (sd {:.4f}) over {} seeds", run.metrics.mean,
                 run.metrics.stddev, run.metrics.seeds.size());
    m.output(out / "metrics.json");
    m.output(out / "metrics.csv");
    m.write(out / "manifest.json");
  };
  return c;
}

Command experiment(CLI::App& root) {
  Command c;
  c.name = "experiment";
  c.app = root.add_subcommand("experiment", "run GenePT and the general / random / selective arms end to end");
  auto path = std::make_shared<std::string>();
  auto out_dir = std::make_shared<std::string>();
  auto workers = std::make_shared<std::size_t>(0);
  auto significance = std::make_shared<bool>(false);
  c.app->add_option("--config", *path, "experiment config (JSON)")->required();
  auto* out_opt = c.app->add_option("--out-dir", *out_dir, "override output_dir");
  auto* w_opt = c.app->add_option("--workers", *workers, "override workers");
  auto* sig_opt = c.app->add_flag("--significance", *significance, "add paired t-tests to the summary");
  c.run = [=](const json&) {
    if (!fs::exists(*path)) throw ConfigError("--config: file " + *path + " does not exist");
    auto cfg = ExperimentConfig::load(*path);
    if (out_opt->count()) cfg.output_dir = *out_dir;
    if (w_opt->count()) cfg.workers = std::max<std::size_t>(1, *workers);
    if (sig_opt->count()) cfg.significance = *significance;
    cfg.validate();
    json resolved = cfg.to_json();
    Manifest m("experiment", resolved);
    m.input(*path);
    const auto result = run_full_experiment(cfg);
    write_report(result, cfg.output_dir, cfg.significance);
    for (const char* f : {"results.csv", "results.json", "accuracy.svg", "summary.md"}) m.output(cfg.output_dir / f);
    m.write(cfg.output_dir / "manifest.json");
  };
  return c;
}

Command report(CLI::App& root) {
  auto c = make_command(root, "report", "render CSV, plot and tables from results.json");
  auto& s = *c.settings;
  s.option<std::string>("results", "", "results.json from an experiment", true);
  s.option<std::string>("out_dir", "", "output directory", true);
  s.flag("significance", "add paired t-tests to the summary");
  c.run = [](const json& v) {
    const auto results = existing(v, "results");
    const auto out = output(v, "out_dir");
    Manifest m("report", v);
    m.input(results);
    const auto r = read_results(results);
    write_report(r, out, get<bool>(v, "significance"));
    for (const char* f : {"results.csv", "results.json", "accuracy.svg", "summary.md"}) m.output(out / f);
    m.write(out / "manifest.json");
  };
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("selmask");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] [%^%l%$] %v");

  CLI::App app{"selmask: task-guided pre-training with selective masking"};
  app.require_subcommand(1);
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");
  app.add_flag("-q,--quiet", quiet, "warnings and errors only");

  std::vector<Command> commands;
  commands.push_back(finetune_clf(app));
  commands.push_back(mask_downstream(app));
  commands.push_back(train_selector_cmd(app));
  commands.push_back(mask_indomain(app));
  commands.push_back(pretrain(app));
  commands.push_back(taskpt(app));
  commands.push_back(finetune(app));
  commands.push_back(experiment(app));
  commands.push_back(synth_gen(app));
  commands.push_back(report(app));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

  for (auto& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      const json options = c.settings ? c.settings->resolve() : json::object();
      c.run(options);
      return 0;
    } catch (const UsageError& e) {
      spdlog::error("{}: {}", c.name, e.what());
      return kExitUsage;
    } catch (const ConfigError& e) {
      spdlog::error("{}: configuration error: {}", c.name, e.what());
      return kExitConfig;
    } catch (const MalformedSequenceError& e) {
      spdlog::error("{}: malformed input: {}", c.name, e.what());
      return kExitConfig;
    } catch (const StageError& e) {
      spdlog::error("{}: stage {} failed: {}", c.name, e.stage(), e.what());
      return kExitStage;
    } catch (const std::exception& e) {
      spdlog::error("{}: stage {} failed: {}", c.name, c.name, e.what());
      return kExitStage;
    }
  }
  return kExitUsage;
}
