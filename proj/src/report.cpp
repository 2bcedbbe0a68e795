#include "selmask/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include <boost/math/distributions/students_t.hpp>
#include <fmt/format.h>

#include "selmask/error.hpp"
#include "selmask/formats.hpp"

namespace selmask {

namespace {

std::vector<std::size_t> checkpoint_steps(const ExperimentResult& r) {
  std::set<std::size_t> s;
  for (const auto& a : r.arms) s.insert(a.genept_steps);
  return {s.begin(), s.end()};
}

std::vector<std::string> arm_names(const ExperimentResult& r) {
  std::vector<std::string> out;
  for (const auto& a : r.arms)
    if (std::find(out.begin(), out.end(), a.arm) == out.end()) out.push_back(a.arm);
  return out;
}

const char* arm_color(std::string_view arm) {
  if (arm == "selective") return "#d62728";
  if (arm == "random") return "#1f77b4";
  return "#2ca02c";
}

}  // namespace

PairedTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("paired_t_test: samples differ in size");
  if (a.size() < 2) throw ConfigError("paired_t_test: need at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  double mean = 0.0;
  for (double x : d) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  PairedTest t;
  t.mean_difference = mean;
  t.df = n - 1;
  if (sd == 0.0) return t;
  t.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  boost::math::students_t dist(static_cast<double>(t.df));
  t.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t.t)));
  return t;
}

std::string results_csv(const ExperimentResult& result) {
  std::string out = "arm,genept_steps,taskpt_steps,seed,dev_acc,test_acc,wallclock_s\n";
  for (const auto& a : result.arms) {
    const auto& m = a.metrics;
    for (std::size_t i = 0; i < m.seeds.size(); ++i) {
      const double secs = i < a.finetune_seconds.size() ? a.finetune_seconds[i] : 0.0;
      out += fmt::format("{},{},{},{},{:.6f},{:.6f},{:.3f}\n", a.arm, a.genept_steps, a.taskpt_steps, m.seeds[i],
                         m.dev_accuracy[i], m.test_accuracy[i], secs);
    }
  }
  return out;
}

std::string accuracy_svg(const ExperimentResult& result) {
  constexpr double W = 640, H = 400, L = 60, R = 130, T = 30, B = 50;
  const auto steps = checkpoint_steps(result);
  std::size_t xmax = 1;
  double ymin = 1.0, ymax = 0.0;
  for (const auto& a : result.arms) {
    xmax = std::max(xmax, a.genept_steps + a.taskpt_steps);
    ymin = std::min(ymin, a.metrics.mean);
    ymax = std::max(ymax, a.metrics.mean);
  }
  if (result.arms.empty()) ymin = 0.0, ymax = 1.0;
  ymin = std::max(0.0, std::floor(ymin * 20.0 - 1.0) / 20.0);
  ymax = std::min(1.0, std::ceil(ymax * 20.0 + 1.0) / 20.0);
  if (ymax <= ymin) ymax = ymin + 0.05;
  auto px = [&](double x) { return L + (W - L - R) * x / static_cast<double>(xmax); };
  auto py = [&](double y) { return H - B - (H - T - B) * (y - ymin) / (ymax - ymin); };

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
      W, H);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L, H - B, W - R);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, T, H - B);
  for (int k = 0; k <= 4; ++k) {
    const double y = ymin + (ymax - ymin) * k / 4.0;
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.3f}</text>\n", L - 6, py(y) + 4, y);
  }
  for (std::size_t st : steps)
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", px(static_cast<double>(st)),
                     H - B + 16, st);
  s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">pre-training steps</text>\n",
                   (L + W - R) / 2, H - 12);
  s += fmt::format("<text x=\"14\" y=\"{:.1f}\" transform=\"rotate(-90 14 {:.1f})\" text-anchor=\"middle\">"
                   "mean test accuracy</text>\n",
                   (T + H - B) / 2, (T + H - B) / 2);

  // General arm: one polyline across checkpoints.
  std::string pts;
  for (std::size_t st : steps)
    if (const auto* g = result.find("general", st))
      pts += fmt::format("{:.1f},{:.1f} ", px(static_cast<double>(st)), py(g->metrics.mean));
  if (!pts.empty()) {
    pts.pop_back();
    s += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n", arm_color("general"),
                     pts);
  }
  // TaskPT arms: a segment from the checkpoint they extend.
  for (const auto& a : result.arms) {
    const double x1 = px(static_cast<double>(a.genept_steps + a.taskpt_steps));
    const double y1 = py(a.metrics.mean);
    if (a.arm != "general") {
      const auto* g = result.find("general", a.genept_steps);
      const double y0 = py(g ? g->metrics.mean : a.metrics.mean);
      s += fmt::format(
          "<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
          px(static_cast<double>(a.genept_steps)), y0, x1, y1, arm_color(a.arm));
    }
    s += fmt::format("<circle cx=\"{:.1f}\" cy=\"{:.1f}\" r=\"3\" fill=\"{}\"/>\n", x1, y1, arm_color(a.arm));
  }
  double ly = T + 10;
  for (const auto& name : arm_names(result)) {
    s += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"12\" height=\"3\" fill=\"{}\"/>\n", W - R + 12, ly - 4,
                     arm_color(name));
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\">{}</text>\n", W - R + 30, ly, name);
    ly += 16;
  }
  s += "</svg>\n";
  return s;
}

std::string summary_markdown(const ExperimentResult& result, bool significance) {
  const auto steps = checkpoint_steps(result);
  const auto arms = arm_names(result);
  std::string s = "# Results\n\n## Mean test accuracy by GenePT checkpoint\n\n| genept_steps |";
  for (const auto& a : arms) s += " " + a + " |";
  s += "\n|---|";
  for (std::size_t i = 0; i < arms.size(); ++i) s += "---|";
  s += "\n";
  for (std::size_t st : steps) {
    s += fmt::format("| {} |", st);
    for (const auto& a : arms) {
      const auto* r = result.find(a, st);
      s += r ? fmt::format(" {:.4f} ± {:.4f} |", r->metrics.mean, r->metrics.stddev) : " - |";
    }
    s += "\n";
  }

  s += "\n## Per-arm accuracy\n\n| arm | genept_steps | taskpt_steps | seeds | mean | std | min | max |\n"
       "|---|---|---|---|---|---|---|---|\n";
  for (const auto& a : result.arms) {
    const auto& t = a.metrics.test_accuracy;
    const double lo = t.empty() ? 0.0 : *std::min_element(t.begin(), t.end());
    const double hi = t.empty() ? 0.0 : *std::max_element(t.begin(), t.end());
    s += fmt::format("| {} | {} | {} | {} | {:.4f} | {:.4f} | {:.4f} | {:.4f} |\n", a.arm, a.genept_steps,
                     a.taskpt_steps, t.size(), a.metrics.mean, a.metrics.stddev, lo, hi);
  }

  s += "\n## Cost (seconds)\n\n| arm | genept_steps | selection | taskpt | sum |\n|---|---|---|---|---|\n";
  for (const auto& a : result.arms) {
    if (a.arm == "general") continue;
    s += fmt::format("| {} | {} | {:.1f} | {:.1f} | {:.1f} |\n", a.arm, a.genept_steps, a.selection_seconds,
                     a.taskpt_seconds, a.selection_seconds + a.taskpt_seconds);
  }
  for (const auto& st : result.stages)
    if (st.stage == "genept")
      s += fmt::format("\nGenePT: {} steps, {:.1f} s, final loss {:.4f}\n", st.steps, st.seconds, st.final_loss);

  if (significance) {
    s += "\n## Paired t-test, selective vs random (over seeds)\n\n| genept_steps | mean diff | t | df | p |\n"
         "|---|---|---|---|---|\n";
    for (std::size_t st : steps) {
      const auto* sel = result.find("selective", st);
      const auto* rnd = result.find("random", st);
      if (!sel || !rnd || sel->metrics.seeds != rnd->metrics.seeds || sel->metrics.seeds.size() < 2) continue;
      const auto t = paired_t_test(sel->metrics.test_accuracy, rnd->metrics.test_accuracy);
      s += fmt::format("| {} | {:.4f} | {:.3f} | {} | {} |\n", st, t.mean_difference, t.t, t.df,
                       t.p_value ? fmt::format("{:.4g}", *t.p_value) : std::string("n/a"));
    }
  }
  if (result.failed_stage) s += "\nIncomplete: failed in stage " + *result.failed_stage + "\n";
  return s;
}

void write_report(const ExperimentResult& result, const std::filesystem::path& dir, bool significance) {
  if (result.arms.empty()) throw ConfigError("report: no results to render");
  std::filesystem::create_directories(dir);
  write_text_file(dir / "results.csv", results_csv(result));
  write_text_file(dir / "results.json", result.to_json().dump(2) + "\n");
  write_text_file(dir / "accuracy.svg", accuracy_svg(result));
  write_text_file(dir / "summary.md", summary_markdown(result, significance));
}

ExperimentResult read_results(const std::filesystem::path& path) {
  try {
    return ExperimentResult::from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace selmask
