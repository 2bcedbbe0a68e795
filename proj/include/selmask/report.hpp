#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include "selmask/pipeline.hpp"

namespace selmask {

struct PairedTest {
  double mean_difference = 0.0;
  double t = 0.0;
  std::size_t df = 0;
  /// Two-sided; nullopt when the differences have zero variance.
  std::optional<double> p_value;
};

/// Paired t-test over matched per-seed values (a[i] vs b[i]).
PairedTest paired_t_test(std::span<const double> a, std::span<const double> b);

/// Columns: arm, genept_steps, taskpt_steps, seed, dev_acc, test_acc,
/// wallclock_s. One row per arm x checkpoint x seed.
std::string results_csv(const ExperimentResult& result);

/// Mean test accuracy against cumulative pre-training steps. TaskPT arms
/// are drawn as segments starting at their GenePT checkpoint step.
std::string accuracy_svg(const ExperimentResult& result);

/// Markdown tables: steps x arms, per-arm accuracy, selection/TaskPT cost,
/// and optionally selective-vs-random paired tests.
std::string summary_markdown(const ExperimentResult& result, bool significance);

/// Writes results.csv, results.json, accuracy.svg and summary.md. Output is
/// a pure function of `result`.
void write_report(const ExperimentResult& result, const std::filesystem::path& dir, bool significance = false);

/// Re-reads results.json written by write_report.
ExperimentResult read_results(const std::filesystem::path& path);

}  // namespace selmask
