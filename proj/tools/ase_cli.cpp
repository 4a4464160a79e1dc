// Command-line harness. Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "ase/checkpoint.hpp"
#include "ase/errors.hpp"
#include "ase/experiment.hpp"
#include "ase/iasm.hpp"
#include "ase/synthetic.hpp"
#include "json.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct RunOptions {
  std::string config;
  std::string data;
  std::string out;
  std::string mode;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
  bool pgm_heatmaps = false;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ase::ValidationError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ase::ValidationError(path.string() + ": " + e.what());
  }
}

// Precedence: preset, then config file, then command-line flags.
ase::ExperimentConfig build_config(const RunOptions& o) {
  json file = o.config.empty() ? json::object() : read_json_file(o.config);
  std::string preset = o.preset;
  if (preset.empty()) preset = file.value("preset", std::string("desk"));
  ase::ExperimentConfig c = ase::ExperimentConfig::from_preset(preset);
  file.erase("preset");
  c.apply_overrides(file);
  if (!o.data.empty()) c.dataset = o.data;
  if (!o.out.empty()) c.output_dir = o.out;
  if (!o.mode.empty()) c.mode = ase::parse_mode(o.mode);
  if (o.seed) c.seed = *o.seed;
  if (o.steps) c.train.total_steps = *o.steps;
  if (o.pgm_heatmaps) c.pgm_heatmaps = true;
  return c;
}

void add_run_options(CLI::App* cmd, RunOptions& o, bool with_mode) {
  cmd->add_option("--config", o.config, "JSON config with overrides")->check(CLI::ExistingFile);
  cmd->add_option("--data", o.data, "Dataset directory (train.jsonl/test.jsonl) or JSONL index");
  cmd->add_option("--out", o.out, "Output directory");
  if (with_mode) cmd->add_option("--mode", o.mode, "no-finetune | finetune | finetune+IASC");
  cmd->add_option("--preset", o.preset, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_option("--steps", o.steps, "Caption-model training steps");
  cmd->add_flag("--pgm-heatmaps", o.pgm_heatmaps, "Write saliency heatmaps as PGM");
}

void print_report(const ase::EvalReport& report) {
  const auto cols = ase::EvalReport::columns();
  const auto vals = ase::EvalReport::values(report.mean);
  for (std::size_t i = 0; i < cols.size(); ++i) std::printf("%s%s=%.4f", i ? " " : "", cols[i].c_str(), vals[i]);
  std::printf("\n");
}

std::vector<ase::CandidateCaption> read_candidates(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ase::ValidationError("cannot open " + path.string());
  std::vector<ase::CandidateCaption> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("image").get<std::string>(), j.at("caption").get<std::string>()});
    } catch (const json::exception& e) {
      throw ase::ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (out.empty()) throw ase::ValidationError(path.string() + ": no records");
  return out;
}

// References only; image files need not exist.
std::map<std::string, std::vector<std::string>> read_references(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ase::ValidationError("cannot open " + path.string());
  std::map<std::string, std::vector<std::string>> refs;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      auto& caps = refs[j.at("image").get<std::string>()];
      for (const auto& c : j.at("captions")) caps.push_back(c.get<std::string>());
    } catch (const json::exception& e) {
      throw ase::ValidationError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  if (refs.empty()) throw ase::ValidationError(path.string() + ": no records");
  return refs;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Aesthetic-saliency image captioning harness"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ASE_VERSION);

  // gen-data
  ase::SyntheticSpec spec;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Render the synthetic style-class corpus");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Random seed");
  gen->add_option("--size", spec.corpus_size, "Number of images");
  gen->add_option("--image-size", spec.image_size, "Image side length in pixels");
  gen->add_option("--train-fraction", spec.train_fraction, "Fraction of records in train.jsonl");

  // train / ablate
  RunOptions train_opts, ablate_opts;
  auto* train = app.add_subcommand("train", "Train (per mode), caption the test split and score it");
  add_run_options(train, train_opts, true);
  auto* ablate = app.add_subcommand("ablate", "Run all three modes with one seed and write ablation.csv");
  add_run_options(ablate, ablate_opts, false);

  // caption
  std::string cap_run, cap_image, cap_prompt = std::string(ase::kDefaultPrompt);
  auto* caption = app.add_subcommand("caption", "Caption an image with a trained run");
  caption->add_option("--run", cap_run, "Run directory holding model.ckpt")->required();
  caption->add_option("--image", cap_image, "PPM/PGM image")->required()->check(CLI::ExistingFile);
  caption->add_option("--prompt", cap_prompt, "Instruction prompt");

  // eval
  std::string eval_cands, eval_refs, eval_out, eval_dump;
  auto* eval = app.add_subcommand("eval", "Score candidate captions against references");
  eval->add_option("--candidates", eval_cands, "JSONL of {image, caption}")->required();
  eval->add_option("--references", eval_refs, "JSONL of {image, captions}")->required();
  eval->add_option("--out", eval_out, "Directory for metrics.csv and metrics.json");
  eval->add_option("--oracle-dump", eval_dump, "Write intermediate n-gram counts and idf values as JSON");

  // saliency
  std::string sal_run, sal_image, sal_out;
  auto* saliency = app.add_subcommand("saliency", "Write the aesthetic saliency map of an image as PGM");
  saliency->add_option("--run", sal_run, "Run directory holding scorer.ckpt")->required();
  saliency->add_option("--image", sal_image, "PPM/PGM image")->required()->check(CLI::ExistingFile);
  saliency->add_option("--out", sal_out, "Output PGM path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*gen) {
      const auto corpus = ase::generate_synthetic_corpus(spec, gen_seed, gen_out);
      std::printf("wrote %zu train and %zu test records to %s\n", corpus.train_count, corpus.test_count,
                  gen_out.c_str());
    } else if (*train) {
      const auto config = build_config(train_opts);
      const auto result = ase::run_experiment(config);
      if (!result.losses.empty())
        std::printf("loss %.4f -> %.4f over %zu steps\n", result.initial_loss, result.final_loss, result.losses.size());
      print_report(result.report);
      std::printf("outputs in %s\n", result.output_dir.string().c_str());
    } else if (*ablate) {
      const auto config = build_config(ablate_opts);
      const auto result = ase::run_ablation(config);
      std::cout << ase::ablation_csv(result.rows);
      std::printf("wrote %s\n", result.csv.string().c_str());
    } else if (*caption) {
      const auto run = ase::load_run(cap_run);
      std::printf("%s\n", run.caption(ase::read_image(cap_image), cap_prompt).c_str());
    } else if (*eval) {
      const auto cands = read_candidates(eval_cands);
      const auto refs = read_references(eval_refs);
      const auto report = ase::evaluate_corpus(cands, refs, fs::path(eval_refs).stem().string());
      print_report(report);
      if (report.skipped_images) std::fprintf(stderr, "%zu candidates had no references\n", report.skipped_images);
      if (!eval_out.empty()) {
        write_file(fs::path(eval_out) / "metrics.csv", report.to_csv());
        write_file(fs::path(eval_out) / "metrics.json", report.to_json().dump(2) + "\n");
      }
      if (!eval_dump.empty()) write_file(eval_dump, ase::oracle_dump(cands, refs).dump(2) + "\n");
    } else if (*saliency) {
      const fs::path scorer_path = fs::path(sal_run) / "scorer.ckpt";
      const ase::Checkpoint ck = ase::read_checkpoint(scorer_path);
      const auto run_config = read_json_file(fs::path(sal_run) / "config.json");
      ase::ExperimentConfig config = ase::ExperimentConfig::from_preset(run_config.value("preset", "desk"));
      config.apply_overrides(run_config);
      ase::ScorerConfig sc = config.scorer;
      sc.channels = config.model.encoder.channels;
      ase::AestheticScorer<ase::Real> scorer(sc, 0);
      ase::restore_parameters<ase::Real>(scorer, ck);
      const auto map = ase::aesthetic_saliency(scorer, ase::read_image(sal_image));
      ase::write_saliency_pgm(sal_out, map);
      std::printf("class %ld, wrote %s\n", static_cast<long>(map.class_index), sal_out.c_str());
    }
  } catch (const ase::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kOk;
}
