#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "selmask/corpus.hpp"

namespace selmask {

using Matrix = Eigen::MatrixXd;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 256;
  /// Includes the [CLS] and [SEP] framing positions.
  std::size_t max_positions = 256;
  std::size_t num_classes = 2;
  double dropout = 0.1;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;
  /// Longest content sequence the model accepts.
  std::size_t max_content_length() const { return max_positions - 2; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderLayerParams {
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln1_gamma, ln1_beta;
  Matrix w1, b1, w2, b2;
  Matrix ln2_gamma, ln2_beta;
};

/// All trainable tensors. Vectors are stored as 1 x n matrices. The three
/// heads share the embedding + encoder trunk; the masked-LM decoder is tied
/// to the token embedding.
struct Parameters {
  ModelConfig config;

  Matrix token_embedding;     // vocab x dim
  Matrix position_embedding;  // max_positions x dim
  Matrix emb_ln_gamma, emb_ln_beta;
  std::vector<EncoderLayerParams> layers;

  Matrix cls_w, cls_b;  // dim x classes
  Matrix tok_w, tok_b;  // dim x 2

  Matrix mlm_w, mlm_b;  // dim x dim transform
  Matrix mlm_ln_gamma, mlm_ln_beta;
  Matrix mlm_bias;  // 1 x vocab

  struct Named {
    std::string name;
    Matrix* tensor;
  };
  struct ConstNamed {
    std::string name;
    const Matrix* tensor;
  };
  std::vector<Named> tensors();
  std::vector<ConstNamed> tensors() const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  /// Same shapes, all zeros.
  Parameters zeros_like() const;

  bool operator==(const Parameters& other) const;
};

/// Deterministic under config.seed; N(0, init_std) weights, zero biases,
/// unit LayerNorm gains.
Parameters init_parameters(const ModelConfig& config);

/// Re-draws the sequence-classification head (used per fine-tuning seed).
void reset_classifier_head(Parameters& params, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Inference. Inputs are content ids; [CLS] and [SEP] are added internally.
// All three throw std::invalid_argument for over-length input.

std::vector<double> seq_classify(const Parameters& params, std::span<const TokenId> ids);
std::vector<double> token_classify(const Parameters& params, std::span<const TokenId> ids);
/// One distribution over the vocabulary per requested position.
std::vector<std::vector<double>> mlm_predict(const Parameters& params, std::span<const TokenId> ids,
                                             std::span<const std::size_t> positions);

// ---------------------------------------------------------------------------
// Training examples and losses.

enum class Head { kSequence, kToken, kMaskedLm };
std::string_view to_string(Head head);

struct SequenceExample {
  std::vector<TokenId> ids;
  int label = 0;
};

struct TokenExample {
  std::vector<TokenId> ids;
  std::vector<int> labels;  // parallel to ids, values in {0, 1}
};

struct MlmExample {
  std::vector<TokenId> input_ids;
  std::vector<std::size_t> positions;
  std::vector<TokenId> targets;
};

struct Batch {
  std::variant<std::vector<SequenceExample>, std::vector<TokenExample>, std::vector<MlmExample>> examples;
  /// Identifies the batch in diagnostics.
  std::string tag;

  Head head() const { return static_cast<Head>(examples.index()); }
  std::size_t size() const;
};

/// Weighted cross-entropy averaged over scored items (sequences, tokens or
/// masked positions): mean_i w[y_i] * -log p(y_i). Empty weights mean all
/// ones. When grads is non-null the gradient is accumulated into it. A
/// non-null dropout_seed enables training mode.
double loss_and_gradient(const Parameters& params, const Batch& batch, std::span<const double> label_weights,
                         Parameters* grads, const std::uint64_t* dropout_seed = nullptr);

}  // namespace selmask
