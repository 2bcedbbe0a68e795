#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "selmask/model.hpp"
#include "selmask/optimizer.hpp"

namespace selmask {

struct Provenance {
  std::string stage;
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  /// Masking policy of the corpus a TaskPT checkpoint was trained on.
  std::string policy;

  nlohmann::json to_json() const;
  static Provenance from_json(const nlohmann::json& j);
  bool operator==(const Provenance&) const = default;
};

struct Checkpoint {
  Parameters params;
  Provenance provenance;
  /// Present when the checkpoint is meant to be resumed.
  std::optional<OptimizerState> optimizer;
};

/// Binary container: magic, format version, a JSON header (config,
/// provenance, tensor names and shapes), then raw little-endian doubles.
/// Round trips bit-exactly.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Also verifies the stored model config equals `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

/// Throws ConfigError when the model cannot consume ids from a vocabulary of
/// the given size.
void require_vocab_compatible(const ModelConfig& config, std::size_t vocab_size, const std::string& context);

}  // namespace selmask
