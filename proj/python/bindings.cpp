#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "selmask/checkpoint.hpp"
#include "selmask/corpus.hpp"
#include "selmask/error.hpp"
#include "selmask/grad_check.hpp"
#include "selmask/importance.hpp"
#include "selmask/masking.hpp"
#include "selmask/model.hpp"
#include "selmask/pipeline.hpp"
#include "selmask/selector.hpp"

namespace py = pybind11;
using namespace selmask;

namespace {

// Adapts a Python callable (list[int] -> list[float]) to the classifier interface.
class CallableClassifier : public SequenceClassifier {
 public:
  CallableClassifier(std::function<std::vector<double>(std::vector<TokenId>)> fn, std::size_t max_length)
      : fn_(std::move(fn)), max_length_(max_length) {}

  std::vector<double> class_probabilities(std::span<const TokenId> ids) const override {
    py::gil_scoped_acquire gil;
    return fn_(std::vector<TokenId>(ids.begin(), ids.end()));
  }
  std::size_t max_length() const override { return max_length_; }

 private:
  std::function<std::vector<double>(std::vector<TokenId>)> fn_;
  std::size_t max_length_;
};

py::dict record_dict(const ImportanceRecord& r) {
  py::dict d;
  d["tokens"] = r.seq.tokens;
  d["ids"] = r.seq.ids;
  d["label"] = r.label;
  d["scores"] = r.scores;
  d["important"] = std::vector<int>(r.important.begin(), r.important.end());
  d["full_confidence"] = r.full_confidence;
  d["final_buffer"] = r.final_buffer;
  d["misclassified"] = r.misclassified;
  return d;
}

py::dict masked_dict(const MaskedExample& e) {
  py::dict d;
  d["input_ids"] = e.input_ids;
  d["positions"] = e.positions;
  d["targets"] = e.targets;
  d["policy"] = std::string(to_string(e.policy));
  return d;
}

}  // namespace

PYBIND11_MODULE(_selmask, m) {
  m.doc() = "Selective-masking pre-training toolkit";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<MalformedSequenceError>(m, "MalformedSequenceError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<StageError>(m, "StageError", base.ptr());

  py::class_<Vocab>(m, "Vocab")
      .def_static("from_tokens", &Vocab::from_tokens, py::arg("tokens"))
      .def_static("load", &Vocab::load, py::arg("path"))
      .def("save", &Vocab::save, py::arg("path"))
      .def("__len__", &Vocab::size)
      .def("find", &Vocab::find, py::arg("token"))
      .def("token", &Vocab::token, py::arg("id"))
      .def_property_readonly("tokens", &Vocab::tokens)
      .def_static("is_continuation", &Vocab::is_continuation);

  m.def(
      "tokenize",
      [](const std::string& text, const Vocab& vocab, std::size_t max_length) {
        auto s = tokenize(text, vocab, max_length);
        return py::make_tuple(s.tokens, s.ids);
      },
      py::arg("text"), py::arg("vocab"), py::arg("max_length") = kNoLengthLimit,
      "Returns (tokens, ids).");
  m.def(
      "detokenize",
      [](const std::vector<std::string>& tokens) {
        TokenSequence s;
        s.tokens = tokens;
        s.ids.assign(tokens.size(), 0);
        return detokenize(s);
      },
      py::arg("tokens"));

  m.def(
      "find_important_tokens",
      [](std::function<std::vector<double>(std::vector<TokenId>)> classifier, const std::vector<TokenId>& ids,
         int label, double delta, bool skip_misclassified, bool require_buffer_argmax) {
        CallableClassifier clf(std::move(classifier), kNoLengthLimit);
        TokenSequence seq;
        seq.ids = ids;
        seq.tokens.assign(ids.size(), "");
        ImportanceOptions opt;
        opt.delta = Threshold{delta};
        opt.skip_misclassified = skip_misclassified;
        opt.require_buffer_argmax = require_buffer_argmax;
        return record_dict(find_important_tokens(clf, seq, label, opt));
      },
      py::arg("classifier"), py::arg("ids"), py::arg("label"), py::arg("delta") = Threshold::kDefault,
      py::arg("skip_misclassified") = false, py::arg("require_buffer_argmax") = false,
      "Buffer-based importance annotation with a Python classifier (ids -> class probabilities).");

  m.def("masked_count", &masked_count, py::arg("rate"), py::arg("n"));
  m.def(
      "apply_random_masking",
      [](const std::vector<TokenId>& ids, double rate, std::size_t vocab_size, std::uint64_t seed, bool pure_mask) {
        auto rule = pure_mask ? CorruptionRule::pure_mask() : CorruptionRule{};
        return masked_dict(apply_random_masking(ids, RandomPolicy{rate}, rule, vocab_size, seed));
      },
      py::arg("ids"), py::arg("rate") = 0.15, py::arg("vocab_size"), py::arg("seed"), py::arg("pure_mask") = false);
  m.def(
      "apply_selective_masking",
      [](const std::vector<TokenId>& ids, const std::vector<int>& selected, double cap, double fallback,
         std::size_t vocab_size, std::uint64_t seed, bool pure_mask) {
        SelectionMask mask;
        mask.seq.ids = ids;
        mask.selected.assign(selected.begin(), selected.end());
        mask.probabilities.assign(ids.size(), 0.0);
        auto rule = pure_mask ? CorruptionRule::pure_mask() : CorruptionRule{};
        return masked_dict(apply_selective_masking(ids, mask, SelectivePolicy{cap, fallback}, rule, vocab_size, seed));
      },
      py::arg("ids"), py::arg("selected"), py::arg("cap") = 0.5, py::arg("fallback") = 0.15, py::arg("vocab_size"),
      py::arg("seed"), py::arg("pure_mask") = false);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("dim", &ModelConfig::dim)
      .def_readwrite("layers", &ModelConfig::layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("hidden", &ModelConfig::hidden)
      .def_readwrite("max_positions", &ModelConfig::max_positions)
      .def_readwrite("num_classes", &ModelConfig::num_classes)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def_readwrite("init_std", &ModelConfig::init_std)
      .def_readwrite("seed", &ModelConfig::seed)
      .def("validate", &ModelConfig::validate);

  py::class_<Parameters>(m, "Parameters")
      .def_readonly("config", &Parameters::config)
      .def("parameter_count", &Parameters::parameter_count)
      .def("tensor_names", [](const Parameters& p) {
        std::vector<std::string> names;
        for (const auto& t : p.tensors()) names.push_back(t.name);
        return names;
      })
      .def("__eq__", &Parameters::operator==);

  m.def("init_parameters", &init_parameters, py::arg("config"));
  m.def("seq_classify", [](const Parameters& p, const std::vector<TokenId>& ids) { return seq_classify(p, ids); });
  m.def("token_classify", [](const Parameters& p, const std::vector<TokenId>& ids) { return token_classify(p, ids); });
  m.def("mlm_predict", [](const Parameters& p, const std::vector<TokenId>& ids, const std::vector<std::size_t>& pos) {
    return mlm_predict(p, ids, pos);
  });
  m.def(
      "grad_check_sequence",
      [](const Parameters& p, const std::vector<std::vector<TokenId>>& seqs, const std::vector<int>& labels,
         double tolerance) {
        std::vector<SequenceExample> ex;
        for (std::size_t i = 0; i < seqs.size(); ++i) ex.push_back({seqs[i], labels.at(i)});
        std::vector<Batch> batches{Batch{ex, "python"}};
        auto r = grad_check(p, batches, tolerance);
        return py::make_tuple(r.max_relative_error, r.worst_parameter, r.passed());
      },
      py::arg("params"), py::arg("sequences"), py::arg("labels"), py::arg("tolerance") = 1e-4,
      "Finite-difference check of the classification loss; returns (max_rel_error, worst_parameter, passed).");

  m.def(
      "save_checkpoint",
      [](const Parameters& p, const std::filesystem::path& path, const std::string& stage, std::uint64_t step) {
        save_checkpoint({p, {stage, step, p.config.seed, ""}, std::nullopt}, path);
      },
      py::arg("params"), py::arg("path"), py::arg("stage") = "python", py::arg("step") = 0);
  m.def(
      "load_checkpoint", [](const std::filesystem::path& path) { return load_checkpoint(path).params; },
      py::arg("path"));

  m.def(
      "generate_synth",
      [](const std::string& spec_json) {
        auto spec = synth_spec_from_json(nlohmann::json::parse(spec_json.empty() ? "{}" : spec_json));
        auto s = generate_synth(spec);
        py::dict d;
        d["vocab"] = s.vocab;
        auto tier = [](const CorpusTier& t) {
          py::list rows;
          for (const auto& r : t.records) {
            py::dict row;
            row["ids"] = r.seq.ids;
            row["tokens"] = r.seq.tokens;
            if (r.label) row["label"] = *r.label;
            if (r.split) row["split"] = std::string(to_string(*r.split));
            rows.append(row);
          }
          return rows;
        };
        d["task"] = tier(s.task);
        d["domain"] = tier(s.domain);
        d["general"] = tier(s.general);
        d["task_truth"] = s.task_truth;
        d["domain_truth"] = s.domain_truth;
        return d;
      },
      py::arg("spec_json") = "", "Synthetic planted-lexicon corpora from a JSON spec.");

  m.def(
      "run_experiment",
      [](const std::string& config_json) {
        auto cfg = ExperimentConfig::from_json(nlohmann::json::parse(config_json));
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_full_experiment(cfg);
        }
        return r.to_json().dump();
      },
      py::arg("config_json"), "Runs the full experiment; returns the results as a JSON string.");
}
