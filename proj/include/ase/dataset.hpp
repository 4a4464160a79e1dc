#pragma once

// Caption corpora as JSONL: one record per line,
//   {"image": path, "captions": [string, ...], "prompt"?: string, "label"?: int}
// Image paths are relative to the JSONL file's directory.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ase/image.hpp"

namespace ase {

struct CaptionRecord {
  std::string image;  ///< path as written in the index; also the record id
  std::filesystem::path image_path;
  std::vector<std::string> captions;
  std::optional<std::string> prompt;
  std::optional<Eigen::Index> label;
  std::size_t line = 0;
};

struct SkippedRecord {
  std::size_t line = 0;
  std::string image;
  std::string reason;
};

struct Dataset {
  std::string name;
  std::vector<CaptionRecord> records;
  std::vector<SkippedRecord> skipped;

  std::size_t size() const { return records.size(); }
  bool labelled() const;
  std::map<std::string, std::vector<std::string>> references() const;
  std::vector<Image> load_images() const;
};

/// Validates every line; records whose image file is missing are listed in
/// `skipped`. Throws ValidationError on empty input or schema errors.
Dataset ingest_dataset(const std::filesystem::path& jsonl);

void write_dataset(const std::filesystem::path& jsonl, const Dataset& dataset);

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

/// Deterministic in (records, seed). With labels, every class with at least
/// two records lands in both parts. Train gets round(fraction * n) records,
/// clamped to [classes with >= 2 records, sum of (class size - 1)] so that the
/// class coverage holds; singleton classes go to test.
DatasetSplit split_dataset(const Dataset& dataset, double train_fraction, std::uint64_t seed);

}  // namespace ase
