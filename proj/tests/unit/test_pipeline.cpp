#include <doctest.h>

#include <cmath>
#include <numeric>

#include "selmask/checkpoint.hpp"
#include "selmask/error.hpp"
#include "selmask/formats.hpp"
#include "selmask/pipeline.hpp"
#include "selmask/report.hpp"
#include "selmask/rng.hpp"
#include "test_util.hpp"

using namespace selmask;
using selmask::testing::temp_dir;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.dim = 16;
  m.layers = 1;
  m.heads = 2;
  m.hidden = 32;
  m.max_positions = 24;
  return m;
}

ExperimentConfig small_experiment(const std::filesystem::path& out) {
  ExperimentConfig c;
  SynthSpec s;
  s.vocab_size = 120;
  s.lexicon_words_per_class = 10;
  s.cue_words_per_class = 5;
  s.task_train = 60;
  s.task_dev = 20;
  s.task_test = 40;
  s.domain_size = 80;
  s.general_size = 80;
  c.synth = s;
  c.model = small_model();
  c.genept_steps = 20;
  c.checkpoint_fractions = {0.5, 1.0};
  c.taskpt_steps = 6;
  c.pretrain_batch = 4;
  c.finetune_epochs = 4;
  c.selector_epochs = 1;
  c.scoring_subsample_copies = 4;
  c.seeds = {3, 4};
  c.output_dir = out;
  return c;
}

}  // namespace

TEST_CASE("experiment config json round trip and strictness") {
  auto c = small_experiment("/tmp/x");
  c.scoring_subsample_copies = 3;
  auto back = ExperimentConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());

  auto j = c.to_json();
  j["unknown_knob"] = 1;
  CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
  auto k = c.to_json();
  k["synth"]["typo"] = 1;
  CHECK_THROWS_AS(ExperimentConfig::from_json(k), ConfigError);
}

TEST_CASE("experiment config load resolves paths and honours the env override") {
  auto dir = temp_dir("cfg");
  selmask::testing::write_lines(dir / "cfg.json",
                                {R"({"corpora":{"vocab":"v.txt","general":"g.jsonl","domain":"/abs/d.jsonl","task":"t.jsonl"},)"
                                 R"("output_dir":"out"})"});
  ::unsetenv(kOutputDirEnv);
  auto c = ExperimentConfig::load(dir / "cfg.json");
  CHECK(c.corpora.vocab == dir / "v.txt");
  CHECK(c.corpora.domain == "/abs/d.jsonl");
  ::setenv(kOutputDirEnv, "/tmp/elsewhere", 1);
  CHECK(ExperimentConfig::load(dir / "cfg.json").output_dir == "/tmp/elsewhere");
  ::unsetenv(kOutputDirEnv);
}

TEST_CASE("checkpoint cadence") {
  ExperimentConfig c;
  c.genept_steps = 300;
  c.checkpoint_fractions = {1.0 / 3.0, 2.0 / 3.0, 1.0};
  CHECK(c.checkpoint_steps() == std::vector<std::size_t>{100, 200, 300});
  c.checkpoint_fractions = {0.25, 0.5, 0.75, 1.0};
  c.genept_steps = 20000;
  CHECK(c.checkpoint_steps() == std::vector<std::size_t>{5000, 10000, 15000, 20000});
}

TEST_CASE("pre-training resume is bit-exact and loss falls") {
  auto dir = temp_dir("resume");
  ExperimentConfig c = small_experiment(dir);
  c.genept_steps = 60;
  c.checkpoint_fractions = {0.5, 1.0};
  auto data = load_experiment_data(c);
  auto full = run_genept(c, data);
  REQUIRE(full.checkpoints.size() == 2);
  const auto final_hash = full.checkpoints.back().sha256;
  CHECK(full.report.loss_curve.back().second < full.report.loss_curve.front().second);

  auto mid = dir / "mid.ckpt";
  std::filesystem::copy_file(full.checkpoints.front().path, mid);
  std::filesystem::remove(full.checkpoints.back().path);
  auto resumed = run_genept(c, data, mid);
  CHECK(sha256_file(dir / "genept" / "step_60.ckpt") == final_hash);
}

TEST_CASE("TaskPT learns a deterministic successor") {
  // Token 6 always follows token 5.
  ModelConfig mc = small_model();
  mc.vocab_size = 12;
  mc.seed = 1;
  auto params = init_parameters(mc);
  Rng rng(2);
  std::vector<MaskedExample> corpus;
  for (int i = 0; i < 200; ++i) {
    std::vector<TokenId> ids;
    for (int k = 0; k < 8; ++k) ids.push_back(static_cast<TokenId>(7 + rng.below(5)));
    const std::size_t at = rng.below(7);
    ids[at] = 5;
    ids[at + 1] = 6;
    MaskedExample ex;
    ex.input_ids = ids;
    ex.input_ids[at + 1] = kMaskId;
    ex.positions = {at + 1};
    ex.targets = {6};
    ex.outcomes = {Corruption::kMask};
    ex.policy = PolicyTag::kSelective;
    corpus.push_back(ex);
  }
  ExperimentConfig c;
  c.taskpt_steps = 150;
  c.pretrain_lr = 3e-3;
  auto dir = temp_dir("taskpt");
  auto report = run_taskpt(c, params, corpus, PolicyTag::kSelective, dir / "t.ckpt");
  CHECK(report.policy == "selective");
  CHECK(report.stage == "taskpt");
  auto trained = load_checkpoint(dir / "t.ckpt");
  CHECK(trained.provenance.policy == "selective");
  std::vector<TokenId> probe = {8, 9, 5, kMaskId, 10, 7};
  auto dist = mlm_predict(trained.params, probe, std::vector<std::size_t>{3})[0];
  CHECK(std::max_element(dist.begin(), dist.end()) - dist.begin() == 6);
}

TEST_CASE("subsample augmentation") {
  std::vector<SequenceExample> ex = {{{5, 6, 7, 8}, 1}, {{9}, 0}};
  auto out = subsample_augment(ex, 3, 11);
  REQUIRE(out.size() == 8);
  CHECK(out[0].ids == ex[0].ids);
  CHECK(out[1].ids == ex[1].ids);
  for (std::size_t i = 2; i < out.size(); ++i) {
    const auto& src = i < 5 ? ex[0] : ex[1];
    CHECK(out[i].label == src.label);
    CHECK_FALSE(out[i].ids.empty());
    // Order-preserving subsequence of the source.
    std::size_t k = 0;
    for (TokenId id : src.ids)
      if (k < out[i].ids.size() && out[i].ids[k] == id) ++k;
    CHECK(k == out[i].ids.size());
  }
  CHECK(subsample_augment(ex, 3, 11)[4].ids == out[4].ids);
  CHECK(subsample_augment(ex, 0, 11).size() == 2);
}

TEST_CASE("selection quality counts") {
  SelectionMask a;
  a.selected = {1, 0, 1, 0};
  SelectionMask b;
  b.selected = {0, 1};
  std::vector<SelectionMask> masks = {a, b};
  std::vector<std::vector<std::size_t>> truth = {{0, 3}, {1}};
  auto q = selection_quality(masks, truth);
  CHECK(q.precision == doctest::Approx(2.0 / 3.0));
  CHECK(q.recall == doctest::Approx(2.0 / 3.0));
  truth.pop_back();
  CHECK_THROWS_AS(selection_quality(masks, truth), ConfigError);
}

TEST_CASE("paired t-test matches a reference computation") {
  std::vector<double> a = {0.81, 0.79, 0.84, 0.80, 0.83};
  std::vector<double> b = {0.78, 0.80, 0.80, 0.77, 0.79};
  auto t = paired_t_test(a, b);
  CHECK(t.df == 4);
  CHECK(t.t == doctest::Approx(2.803652103289399).epsilon(1e-9));
  REQUIRE(t.p_value.has_value());
  CHECK(*t.p_value == doctest::Approx(0.048630233857306214).epsilon(1e-9));
  std::vector<double> c = {0.1, 0.2};
  std::vector<double> d = {0.0, 0.1};
  CHECK_FALSE(paired_t_test(c, d).p_value.has_value());
}

TEST_CASE("small end-to-end experiment") {
  auto dir = temp_dir("exp");
  auto c = small_experiment(dir / "out");
  auto result = run_full_experiment(c);
  CHECK_FALSE(result.failed_stage.has_value());
  REQUIRE(result.arms.size() == 2 * 3);

  // Arms share the GenePT checkpoint per step.
  for (std::size_t step : c.checkpoint_steps()) {
    const auto* g = result.find("general", step);
    const auto* r = result.find("random", step);
    const auto* s = result.find("selective", step);
    REQUIRE((g && r && s));
    CHECK(g->genept_sha256 == r->genept_sha256);
    CHECK(g->genept_sha256 == s->genept_sha256);
    CHECK(g->taskpt_steps == 0);
    CHECK(s->taskpt_steps == c.taskpt_steps);
  }
  for (const auto& arm : result.arms) {
    CHECK(arm.metrics.test_accuracy.size() == c.seeds.size());
    const double mean = std::accumulate(arm.metrics.test_accuracy.begin(), arm.metrics.test_accuracy.end(), 0.0) /
                        static_cast<double>(c.seeds.size());
    CHECK(arm.metrics.mean == mean);
    CHECK(arm.taskpt_seconds >= 0.0);
  }

  write_report(result, dir / "r1");
  write_report(read_results(dir / "r1" / "results.json"), dir / "r2");
  for (const char* f : {"results.csv", "accuracy.svg", "summary.md", "results.json"})
    CHECK(read_text_file(dir / "r1" / f) == read_text_file(dir / "r2" / f));

  auto csv = read_text_file(dir / "r1" / "results.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(1 + 6 * c.seeds.size()));

  // Same config again: identical metrics.
  auto again = run_full_experiment(c);
  for (std::size_t i = 0; i < result.arms.size(); ++i) CHECK(again.arms[i].metrics == result.arms[i].metrics);

  auto diag = result.diagnostics;
  CHECK(diag.contains(std::to_string(c.genept_steps)));
}

TEST_CASE("single seed metrics") {
  auto dir = temp_dir("single");
  auto c = small_experiment(dir);
  c.seeds = {5};
  auto data = load_experiment_data(c);
  ModelConfig mc = c.model;
  mc.vocab_size = data.vocab.size();
  auto run = run_finetune(c, init_parameters(mc), data.task);
  CHECK(run.metrics.test_accuracy.size() == 1);
  CHECK(run.metrics.mean == run.metrics.test_accuracy[0]);
  CHECK(run.metrics.stddev == 0.0);
}

TEST_CASE("failing stage is named and partial results are written") {
  auto dir = temp_dir("fail");
  auto c = small_experiment(dir);
  c.arms = {"general", "random", "selective"};
  auto data = load_experiment_data(c);
  data.domain.records.clear();
  try {
    run_full_experiment(c, data);
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK_FALSE(e.stage().empty());
  }
  CHECK(std::filesystem::exists(dir / "results.partial.json"));
}
