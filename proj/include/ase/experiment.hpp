#pragma once

// Experiment orchestration: load a corpus, optionally train the style scorer
// and the caption model for one ablation mode, caption the held-out split,
// score it, and write every artifact next to a manifest.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ase/captioner.hpp"
#include "ase/dataset.hpp"
#include "ase/metrics.hpp"
#include "ase/scorer.hpp"
#include "json.hpp"

namespace ase {

struct ExperimentConfig {
  /// Directory holding train.jsonl and test.jsonl, or one JSONL file that is
  /// split by seed.
  std::filesystem::path dataset;
  std::filesystem::path output_dir = "runs/experiment";
  AblationMode mode = AblationMode::FinetuneIasc;
  std::string preset = "desk";
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  std::string prompt = std::string(kDefaultPrompt);
  bool pgm_heatmaps = false;
  std::size_t vocab_limit = 512;
  CaptionerConfig model;
  TrainConfig train;
  ScorerConfig scorer;
  ScorerTrainConfig scorer_train;

  /// "desk" (default sizes) or "paper" (448-pixel tiles, 24 blocks, lr 4e-5, batch 64).
  static ExperimentConfig from_preset(std::string_view preset);

  /// Merges a JSON object of overrides; unknown keys and type mismatches
  /// raise ValidationError.
  void apply_overrides(const nlohmann::json& overrides);

  nlohmann::json to_json() const;

  /// FNV-1a 64 of the canonical config JSON without output_dir, as hex.
  std::string hash() const;

  void validate() const;
};

struct ExperimentResult {
  AblationMode mode = AblationMode::FinetuneIasc;
  EvalReport report;
  std::vector<double> losses;
  double initial_loss = 0.0;
  double final_loss = 0.0;  ///< mean of the last ten steps
  double scorer_accuracy = -1.0;  ///< train accuracy; negative when no scorer ran
  std::vector<CandidateCaption> captions;
  std::filesystem::path output_dir;
};

/// Runs one mode into config.output_dir. On failure a FAILED marker holding
/// the stage and message is written and the error is rethrown with the stage
/// prepended (ValidationError and NumericError keep their type).
ExperimentResult run_experiment(const ExperimentConfig& config);

struct AblationResult {
  std::vector<ExperimentResult> rows;
  std::filesystem::path csv;
};

/// All three modes with a shared seed, each under output_dir/<mode>, plus
/// output_dir/ablation.csv with one row per mode.
AblationResult run_ablation(const ExperimentConfig& config);

std::string ablation_csv(const std::vector<ExperimentResult>& rows);

/// A trained caption model (and scorer when the run used saliency) read back
/// from a run directory.
struct LoadedRun {
  ExperimentConfig config;
  std::unique_ptr<CaptionModel<Real>> model;
  std::unique_ptr<AestheticScorer<Real>> scorer;

  std::string caption(const Image& image, std::string_view prompt) const;
};

LoadedRun load_run(const std::filesystem::path& run_dir);

/// Manifest with config hash, seed, code version and the listed files.
void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& config,
                    const std::vector<std::string>& files, const nlohmann::json& extra = nlohmann::json::object());

std::string fnv1a_hex(std::string_view bytes);

}  // namespace ase
