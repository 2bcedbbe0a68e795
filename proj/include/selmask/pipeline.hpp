#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "selmask/checkpoint.hpp"
#include "selmask/corpus.hpp"
#include "selmask/importance.hpp"
#include "selmask/masking.hpp"
#include "selmask/model.hpp"
#include "selmask/selector.hpp"

namespace selmask {

inline const std::vector<std::uint64_t> kDefaultSeeds = {13, 43, 83, 181, 271, 347, 433, 659, 727, 859};
inline constexpr const char* kOutputDirEnv = "SELMASK_OUTPUT_DIR";

nlohmann::json synth_spec_to_json(const SynthSpec& spec);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
SynthSpec synth_spec_from_json(const nlohmann::json& j);

struct CorpusPaths {
  std::filesystem::path vocab;
  std::filesystem::path general;
  std::filesystem::path domain;
  std::filesystem::path task;
};

struct ExperimentConfig {
  /// When set, corpora are generated instead of loaded from `corpora`.
  std::optional<SynthSpec> synth;
  CorpusPaths corpora;
  int num_classes = 2;
  /// vocab_size and num_classes are filled in from the data.
  ModelConfig model;

  std::size_t genept_steps = 20000;
  std::vector<double> checkpoint_fractions = {0.25, 0.5, 0.75, 1.0};
  std::size_t taskpt_steps = 5000;
  std::size_t pretrain_batch = 16;
  double pretrain_lr = 1e-3;

  std::size_t finetune_epochs = 10;
  std::size_t finetune_batch = 16;
  double finetune_lr = 1e-3;

  double delta = Threshold::kDefault;
  bool skip_misclassified = false;
  bool require_buffer_argmax = false;
  /// Random sub-sequences added per train sequence when fitting the scoring
  /// classifier (0 disables).
  std::size_t scoring_subsample_copies = 0;

  std::size_t selector_epochs = 3;
  std::size_t selector_batch = 16;
  double selector_lr = 1e-3;
  double selector_label_weight = kSelectorLabelWeight;
  double selector_threshold = kSelectorThreshold;
  double selector_heldout = 0.1;

  RandomPolicy random;
  SelectivePolicy selective;
  CorruptionRule corruption;
  bool pure_mask = false;

  std::size_t finetune_max_length = kFinetuneMaxLength;
  std::size_t pretrain_max_length = kPretrainMaxLength;

  std::vector<std::string> arms = {"general", "random", "selective"};
  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  /// Seed of the classifier used for importance scoring.
  std::uint64_t classifier_seed = 42;
  std::uint64_t pretrain_seed = 1;
  std::uint64_t masking_seed = 2;

  std::filesystem::path output_dir = "runs/experiment";
  std::size_t workers = 1;
  bool significance = false;

  void validate() const;
  CorruptionRule effective_corruption() const { return pure_mask ? CorruptionRule::pure_mask() : corruption; }
  /// Distinct GenePT steps at which checkpoints are written, ascending.
  std::vector<std::size_t> checkpoint_steps() const;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  /// Reads a JSON file; relative corpus paths resolve against its directory.
  /// SELMASK_OUTPUT_DIR overrides output_dir.
  static ExperimentConfig load(const std::filesystem::path& path);
};

struct ExperimentData {
  Vocab vocab;
  CorpusTier general;
  CorpusTier domain;
  CorpusTier task;
  /// Planted positions for domain records (synthetic data only).
  std::vector<std::vector<std::size_t>> domain_truth;
};

ExperimentData load_experiment_data(const ExperimentConfig& config);

struct StageReport {
  std::string stage;
  std::string policy;
  std::size_t steps = 0;
  double seconds = 0.0;
  double final_loss = 0.0;
  std::filesystem::path checkpoint;
  /// (step, mean loss over the preceding window).
  std::vector<std::pair<std::size_t, double>> loss_curve;

  nlohmann::json to_json() const;
  static StageReport from_json(const nlohmann::json& j);
};

struct CheckpointRef {
  std::size_t step = 0;
  std::filesystem::path path;
  std::string sha256;
};

struct PretrainOptions {
  std::string stage = "genept";
  std::string policy = "random";
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  /// Steps at which a resumable checkpoint is written.
  std::vector<std::size_t> checkpoint_steps;
  std::filesystem::path output_dir;
  std::size_t loss_windows = 20;
};

/// Masked-LM training over a static masked corpus. Each step samples a batch
/// with replacement from a seed derived from (seed, step), so resuming from a
/// checkpoint reproduces an uninterrupted run bit-exactly. `state`, when
/// given, resumes its optimizer; otherwise a fresh one is created.
StageReport pretrain_mlm(Parameters& params, std::optional<OptimizerState> state,
                         std::span<const MaskedExample> corpus, const PretrainOptions& options,
                         std::vector<CheckpointRef>* checkpoints = nullptr);

struct GeneptResult {
  StageReport report;
  std::vector<CheckpointRef> checkpoints;
};

/// Random-masked MLM from scratch on the General tier (or from `resume`).
GeneptResult run_genept(const ExperimentConfig& config, const ExperimentData& data,
                        const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Continued MLM on a pre-generated masked corpus with a fresh optimizer.
StageReport run_taskpt(const ExperimentConfig& config, const Parameters& start, std::span<const MaskedExample> corpus,
                       PolicyTag policy, const std::filesystem::path& output);

struct Metrics {
  std::vector<std::uint64_t> seeds;
  std::vector<double> test_accuracy;
  std::vector<double> dev_accuracy;
  std::vector<std::size_t> best_epoch;
  double mean = 0.0;
  /// Sample standard deviation (0 for a single seed).
  double stddev = 0.0;

  bool operator==(const Metrics&) const = default;
  nlohmann::json to_json() const;
  static Metrics from_json(const nlohmann::json& j);
};

struct FinetuneRun {
  Metrics metrics;
  std::vector<double> seconds;  // per seed
};

/// One fine-tuning run per seed (fresh classifier head each), best-dev epoch
/// evaluated on test.
FinetuneRun run_finetune(const ExperimentConfig& config, const Parameters& start, const CorpusTier& task);

/// `copies` random sub-sequences of every example, appended after the
/// originals with the source label. Each copy keeps every token with a
/// probability drawn uniformly per copy, and at least one token.
std::vector<SequenceExample> subsample_augment(std::span<const SequenceExample> examples, std::size_t copies,
                                               std::uint64_t seed);

/// Classifier fine-tuned from `start` used to score importance.
ClassifierFit finetune_scoring_classifier(const ExperimentConfig& config, const Parameters& start,
                                          const CorpusTier& task);

struct SelectionQuality {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Token-level agreement of selections with planted truth positions.
SelectionQuality selection_quality(std::span<const SelectionMask> masks,
                                   std::span<const std::vector<std::size_t>> truth);

struct SelectiveCorpus {
  std::vector<MaskedExample> examples;
  AnnotationSummary annotation;
  SelectionSummary selection;
  std::optional<SelectionQuality> quality;
  std::vector<SelectorEpoch> selector_log;
  double classifier_dev_accuracy = 0.0;
  double seconds = 0.0;
};

/// The four selection steps: fine-tune a scoring classifier, annotate the
/// task train split, train the selector, select and mask the Domain tier.
/// Intermediate artifacts are written under `dir`.
SelectiveCorpus build_selective_corpus(const ExperimentConfig& config, const Parameters& genept,
                                       const ExperimentData& data, const std::filesystem::path& dir);

struct ArmResult {
  std::string arm;
  std::size_t genept_steps = 0;
  std::size_t taskpt_steps = 0;
  std::string genept_sha256;
  Metrics metrics;
  std::vector<double> finetune_seconds;
  double selection_seconds = 0.0;
  double taskpt_seconds = 0.0;

  nlohmann::json to_json() const;
  static ArmResult from_json(const nlohmann::json& j);
};

struct ExperimentResult {
  nlohmann::json config;
  std::vector<StageReport> stages;
  std::vector<ArmResult> arms;
  /// Per checkpoint step, selector diagnostics (selection rate, quality).
  nlohmann::json diagnostics = nlohmann::json::object();
  /// Set when a stage failed; arms holds the completed runs.
  std::optional<std::string> failed_stage;

  const ArmResult* find(std::string_view arm, std::size_t genept_steps) const;
  nlohmann::json to_json() const;
  static ExperimentResult from_json(const nlohmann::json& j);
};

/// GenePT once, then every configured arm from every checkpoint. On failure
/// throws StageError after writing the partial results to output_dir.
ExperimentResult run_full_experiment(const ExperimentConfig& config);
ExperimentResult run_full_experiment(const ExperimentConfig& config, const ExperimentData& data);

}  // namespace selmask
