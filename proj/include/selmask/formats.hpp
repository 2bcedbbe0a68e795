#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "selmask/corpus.hpp"
#include "selmask/importance.hpp"
#include "selmask/masking.hpp"
#include "selmask/selector.hpp"

namespace selmask {

// Line-delimited JSON artifact files. Readers report the offending line.

void write_annotations(const std::filesystem::path& path, std::span<const ImportanceRecord> records);
/// Token ids are re-derived from the vocabulary.
std::vector<ImportanceRecord> read_annotations(const std::filesystem::path& path, const Vocab& vocab);

void write_selections(const std::filesystem::path& path, std::span<const SelectionMask> masks);
std::vector<SelectionMask> read_selections(const std::filesystem::path& path, const Vocab& vocab);

void write_masked(const std::filesystem::path& path, std::span<const MaskedExample> examples);
/// Corruption outcomes are not stored; they are recovered by comparing
/// input ids with targets ([MASK] / unchanged / anything else = random).
std::vector<MaskedExample> read_masked(const std::filesystem::path& path);

void write_truth(const std::filesystem::path& path, std::span<const std::vector<std::size_t>> truth);
std::vector<std::vector<std::size_t>> read_truth(const std::filesystem::path& path);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Writes via a temporary file renamed into place.
void write_text_file(const std::filesystem::path& path, std::string_view contents);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace selmask
