#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include "ase/experiment.hpp"
#include "ase/synthetic.hpp"

namespace ase {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  fs::path dir = fs::temp_directory_path() /
                 ("ase_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

fs::path small_corpus(const fs::path& dir) {
  SyntheticSpec spec;
  spec.corpus_size = 24;
  generate_synthetic_corpus(spec, 11, dir / "corpus");
  return dir / "corpus";
}

ExperimentConfig quick_config(const fs::path& data, const fs::path& out, AblationMode mode) {
  ExperimentConfig c;
  c.dataset = data;
  c.output_dir = out;
  c.mode = mode;
  c.seed = 3;
  c.train.total_steps = 12;
  c.train.batch_size = 4;
  c.train.learning_rate = 3e-3;
  c.scorer_train.steps = 10;
  c.model.decoder.max_new_tokens = 12;
  return c;
}

TEST(ExperimentConfig, PresetsAndJsonRoundTrip) {
  const auto desk = ExperimentConfig::from_preset("desk");
  const auto full = ExperimentConfig::from_preset("paper");
  EXPECT_EQ(full.train.learning_rate, 4e-5);
  EXPECT_EQ(full.train.batch_size, 64);
  EXPECT_EQ(full.model.encoder.tile_base, 448);
  EXPECT_EQ(full.model.encoder.max_tiles, 40);
  EXPECT_NE(desk.hash(), full.hash());
  EXPECT_THROW(ExperimentConfig::from_preset("huge"), ValidationError);

  ExperimentConfig c = desk;
  c.seed = 99;
  c.mode = AblationMode::Finetune;
  c.train.total_steps = 17;
  ExperimentConfig back;
  back.apply_overrides(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());

  c.output_dir = "elsewhere";
  EXPECT_EQ(c.hash(), back.hash());
}

TEST(ExperimentConfig, RejectsUnknownKeysAndBadValues) {
  ExperimentConfig c;
  EXPECT_THROW(c.apply_overrides(json{{"sed", 1}}), ValidationError);
  EXPECT_THROW(c.apply_overrides(json{{"train", {{"lr", 1.0}}}}), ValidationError);
  EXPECT_THROW(c.apply_overrides(json{{"seed", "one"}}), ValidationError);
  EXPECT_THROW(c.apply_overrides(json{{"mode", "finetune+saliency"}}), ValidationError);
  c.dataset = "x";
  c.train_fraction = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  c.train_fraction = 0.8;
  c.train.batch_size = 0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Experiment, NoFinetuneWritesNoCheckpointOrTrainingLog) {
  const fs::path dir = scratch_dir();
  const auto r = run_experiment(quick_config(small_corpus(dir), dir / "run", AblationMode::NoFinetune));
  EXPECT_TRUE(r.losses.empty());
  EXPECT_FALSE(fs::exists(dir / "run" / "model.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "run" / "scorer.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "run" / "train_log.csv"));
  EXPECT_FALSE(fs::exists(dir / "run" / "FAILED"));
  for (const char* f : {"captions.jsonl", "metrics.csv", "metrics.json", "manifest.json", "config.json"})
    EXPECT_TRUE(fs::exists(dir / "run" / f)) << f;
  const json manifest = json::parse(slurp(dir / "run" / "manifest.json"));
  EXPECT_EQ(manifest.at("seed"), 3);
  EXPECT_EQ(manifest.at("code_version"), ASE_VERSION);
  EXPECT_EQ(manifest.at("config_hash").get<std::string>().size(), 16u);
  EXPECT_EQ(line_count(dir / "run" / "captions.jsonl"), r.report.per_image.size());
}

TEST(Experiment, SameSeedReproducesEveryArtifact) {
  const fs::path dir = scratch_dir();
  const fs::path data = small_corpus(dir);
  const auto a = run_experiment(quick_config(data, dir / "a", AblationMode::FinetuneIasc));
  const auto b = run_experiment(quick_config(data, dir / "b", AblationMode::FinetuneIasc));
  EXPECT_EQ(a.losses, b.losses);
  for (const char* f : {"captions.jsonl", "metrics.csv", "metrics.json", "train_log.csv", "model.ckpt", "scorer.ckpt",
                        "manifest.json"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  EXPECT_EQ(line_count(dir / "a" / "train_log.csv"), 1u + 12u);
  EXPECT_GE(a.scorer_accuracy, 0.0);
}

TEST(Experiment, TrainingReducesLossAndReloads) {
  const fs::path dir = scratch_dir();
  auto config = quick_config(small_corpus(dir), dir / "run", AblationMode::Finetune);
  config.train.total_steps = 40;
  const auto r = run_experiment(config);
  ASSERT_EQ(r.losses.size(), 40u);
  EXPECT_LT(r.final_loss, r.initial_loss);

  const LoadedRun run = load_run(dir / "run");
  EXPECT_EQ(run.config.hash(), [&] {
    ExperimentConfig c = config;
    c.model = CaptionerConfig::for_mode(c.model, c.mode);
    return c.hash();
  }());
  const Dataset test = ingest_dataset(config.dataset / "test.jsonl");
  const auto images = test.load_images();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(run.caption(images[i], config.prompt), r.captions[i].caption);
}

TEST(Experiment, AblationCsvHasThreeRows) {
  const fs::path dir = scratch_dir();
  const auto out = run_ablation(quick_config(small_corpus(dir), dir / "abl", AblationMode::Finetune));
  ASSERT_EQ(out.rows.size(), 3u);
  std::ifstream in(out.csv);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0].rfind("mode,B1,B2,B3,B4,", 0), 0u) << lines[0];
  EXPECT_EQ(lines[1].rfind("no-finetune,", 0), 0u);
  EXPECT_EQ(lines[2].rfind("finetune,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("finetune+IASC,", 0), 0u);
  const auto cells = [](const std::string& s) { return std::count(s.begin(), s.end(), ',') + 1; };
  for (const auto& l : lines) EXPECT_EQ(cells(l), 1 + static_cast<long>(EvalReport::columns().size()));
  for (const char* mode : {"no-finetune", "finetune", "finetune+IASC"})
    EXPECT_TRUE(fs::exists(dir / "abl" / mode / "metrics.csv")) << mode;
  EXPECT_TRUE(fs::exists(dir / "abl" / "manifest.json"));
}

TEST(Experiment, FailuresLeaveStageTaggedMarker) {
  const fs::path dir = scratch_dir();
  auto config = quick_config(dir / "missing.jsonl", dir / "run", AblationMode::Finetune);
  try {
    run_experiment(config);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 'load'"), std::string::npos) << e.what();
  }
  EXPECT_NE(slurp(dir / "run" / "FAILED").find("stage: load"), std::string::npos);
}

TEST(Experiment, TestImageInTrainingSplitIsRejected) {
  const fs::path dir = scratch_dir();
  const fs::path data = small_corpus(dir);
  fs::copy_file(data / "train.jsonl", data / "test.jsonl", fs::copy_options::overwrite_existing);
  try {
    run_experiment(quick_config(data, dir / "run", AblationMode::NoFinetune));
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("also appears in the training split"), std::string::npos) << e.what();
  }
}

TEST(Experiment, SingleIndexIsSplitBySeed) {
  const fs::path dir = scratch_dir();
  const fs::path data = small_corpus(dir);
  auto config = quick_config(data / "corpus.jsonl", dir / "run", AblationMode::NoFinetune);
  const auto r = run_experiment(config);
  const json manifest = json::parse(slurp(dir / "run" / "manifest.json"));
  EXPECT_EQ(manifest.at("train_records").get<int>() + manifest.at("test_records").get<int>(), 24);
  EXPECT_EQ(r.captions.size(), manifest.at("test_records").get<std::size_t>());
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ASE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch_dir();
  const std::string d = dir.string();
  EXPECT_EQ(run_cli("gen-data --out " + d + "/c --size 24 --seed 2"), 0);
  EXPECT_TRUE(fs::exists(dir / "c" / "train.jsonl"));
  EXPECT_EQ(run_cli("train --data " + d + "/c --out " + d + "/r --mode no-finetune"), 0);
  EXPECT_TRUE(fs::exists(dir / "r" / "metrics.csv"));
  EXPECT_EQ(run_cli("eval --candidates " + d + "/r/captions.jsonl --references " + d + "/c/test.jsonl --out " + d +
                    "/e --oracle-dump " + d + "/e/dump.json"),
            0);
  EXPECT_TRUE(fs::exists(dir / "e" / "dump.json"));
  EXPECT_EQ(slurp(dir / "e" / "metrics.csv").substr(0, 20), slurp(dir / "r" / "metrics.csv").substr(0, 20));

  // Validation failures.
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("train --data " + d + "/c --out " + d + "/r2 --mode bogus"), 1);
  EXPECT_EQ(run_cli("train --data " + d + "/nowhere --out " + d + "/r3"), 1);
  EXPECT_EQ(run_cli("train --data " + d + "/c --preset giant"), 1);
  EXPECT_EQ(run_cli("caption --run " + d + "/r --image " + d + "/c/images/img_0000.ppm"), 1);
  {
    std::ofstream(dir / "bad.json") << "{\"train\": {\"steps\": 3}}";
  }
  EXPECT_EQ(run_cli("train --data " + d + "/c --out " + d + "/r4 --config " + d + "/bad.json"), 1);

  // Runtime failure: output path is a regular file.
  { std::ofstream(dir / "blocker") << "x"; }
  EXPECT_EQ(run_cli("gen-data --out " + d + "/blocker/sub --size 24"), 2);
}

}  // namespace
}  // namespace ase
