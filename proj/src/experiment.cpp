#include "ase/experiment.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "ase/checkpoint.hpp"
#include "ase/errors.hpp"
#include "ase/iasm.hpp"
#include "ase/parallel.hpp"

namespace ase {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config (de)serialisation. Every section rejects unknown keys.

void check_keys(const json& j, std::initializer_list<const char*> keys, const std::string& section) {
  if (!j.is_object()) throw ValidationError("config: section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ValidationError("config: unknown key '" + k + "' in section '" + section + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json encoder_json(const EncoderConfig& c) {
  return {{"channels", c.channels},         {"tile_base", c.tile_base},
          {"patch_size", c.patch_size},     {"embed_dim", c.embed_dim},
          {"num_heads", c.num_heads},       {"num_blocks", c.num_blocks},
          {"mlp_ratio", c.mlp_ratio},       {"max_tiles", c.max_tiles},
          {"shuffle_factor", c.shuffle_factor}, {"pixel_shuffle", c.pixel_shuffle},
          {"iasc", c.iasc},                 {"zero_init_fusion", c.zero_init_fusion},
          {"thumbnail_own_saliency", c.thumbnail_own_saliency}};
}

void encoder_from(const json& j, EncoderConfig& c) {
  check_keys(j,
             {"channels", "tile_base", "patch_size", "embed_dim", "num_heads", "num_blocks", "mlp_ratio", "max_tiles",
              "shuffle_factor", "pixel_shuffle", "iasc", "zero_init_fusion", "thumbnail_own_saliency"},
             "model.encoder");
  read(j, "channels", c.channels);
  read(j, "tile_base", c.tile_base);
  read(j, "patch_size", c.patch_size);
  read(j, "embed_dim", c.embed_dim);
  read(j, "num_heads", c.num_heads);
  read(j, "num_blocks", c.num_blocks);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "max_tiles", c.max_tiles);
  read(j, "shuffle_factor", c.shuffle_factor);
  read(j, "pixel_shuffle", c.pixel_shuffle);
  read(j, "iasc", c.iasc);
  read(j, "zero_init_fusion", c.zero_init_fusion);
  read(j, "thumbnail_own_saliency", c.thumbnail_own_saliency);
}

json decoder_json(const DecoderConfig& c) {
  return {{"dim", c.dim},         {"heads", c.heads},     {"blocks", c.blocks},
          {"mlp_ratio", c.mlp_ratio}, {"max_len", c.max_len}, {"max_new_tokens", c.max_new_tokens}};
}

void decoder_from(const json& j, DecoderConfig& c) {
  check_keys(j, {"dim", "heads", "blocks", "mlp_ratio", "max_len", "max_new_tokens"}, "model.decoder");
  read(j, "dim", c.dim);
  read(j, "heads", c.heads);
  read(j, "blocks", c.blocks);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "max_len", c.max_len);
  read(j, "max_new_tokens", c.max_new_tokens);
}

json train_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"warmup_ratio", c.warmup_ratio},
          {"batch_size", c.batch_size},
          {"total_steps", c.total_steps},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"freeze_encoder", c.freeze_encoder},
          {"freeze_projector", c.freeze_projector},
          {"freeze_decoder", c.freeze_decoder}};
}

void train_from(const json& j, TrainConfig& c) {
  check_keys(j,
             {"learning_rate", "weight_decay", "warmup_ratio", "batch_size", "total_steps", "beta1", "beta2", "eps",
              "freeze_encoder", "freeze_projector", "freeze_decoder"},
             "train");
  read(j, "learning_rate", c.learning_rate);
  read(j, "weight_decay", c.weight_decay);
  read(j, "warmup_ratio", c.warmup_ratio);
  read(j, "batch_size", c.batch_size);
  read(j, "total_steps", c.total_steps);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "eps", c.eps);
  read(j, "freeze_encoder", c.freeze_encoder);
  read(j, "freeze_projector", c.freeze_projector);
  read(j, "freeze_decoder", c.freeze_decoder);
}

json scorer_json(const ScorerConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},   {"channels", c.channels},
          {"embed_dim", c.embed_dim},   {"num_blocks", c.num_blocks},   {"num_heads", c.num_heads},
          {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}, {"target_layer", c.target_layer}};
}

void scorer_from(const json& j, ScorerConfig& c) {
  check_keys(j,
             {"image_size", "patch_size", "channels", "embed_dim", "num_blocks", "num_heads", "mlp_ratio",
              "num_classes", "target_layer"},
             "scorer");
  read(j, "image_size", c.image_size);
  read(j, "patch_size", c.patch_size);
  read(j, "channels", c.channels);
  read(j, "embed_dim", c.embed_dim);
  read(j, "num_blocks", c.num_blocks);
  read(j, "num_heads", c.num_heads);
  read(j, "mlp_ratio", c.mlp_ratio);
  read(j, "num_classes", c.num_classes);
  read(j, "target_layer", c.target_layer);
}

json scorer_train_json(const ScorerTrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"warmup_ratio", c.warmup_ratio}};
}

void scorer_train_from(const json& j, ScorerTrainConfig& c) {
  check_keys(j, {"steps", "batch_size", "learning_rate", "weight_decay", "warmup_ratio"}, "scorer_train");
  read(j, "steps", c.steps);
  read(j, "batch_size", c.batch_size);
  read(j, "learning_rate", c.learning_rate);
  read(j, "weight_decay", c.weight_decay);
  read(j, "warmup_ratio", c.warmup_ratio);
}

// ---------------------------------------------------------------------------

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

struct Splits {
  Dataset train;
  Dataset test;
};

Splits load_splits(const ExperimentConfig& config) {
  namespace fs = std::filesystem;
  if (fs::is_directory(config.dataset)) {
    const auto train = config.dataset / "train.jsonl";
    const auto test = config.dataset / "test.jsonl";
    if (fs::exists(train) && fs::exists(test)) return {ingest_dataset(train), ingest_dataset(test)};
    if (fs::exists(config.dataset / "corpus.jsonl")) {
      auto split = split_dataset(ingest_dataset(config.dataset / "corpus.jsonl"), config.train_fraction, config.seed);
      return {std::move(split.train), std::move(split.test)};
    }
    throw ValidationError("dataset directory " + config.dataset.string() + " has no train.jsonl/test.jsonl or corpus.jsonl");
  }
  auto split = split_dataset(ingest_dataset(config.dataset), config.train_fraction, config.seed);
  return {std::move(split.train), std::move(split.test)};
}

std::string prompt_for(const CaptionRecord& r, const ExperimentConfig& config) { return r.prompt.value_or(config.prompt); }

// Stage-tagged rethrow preserving the error category.
[[noreturn]] void rethrow_with_stage(const std::string& stage, const std::filesystem::path& dir) {
  std::string message;
  int kind = 0;
  try {
    throw;
  } catch (const ValidationError& e) {
    message = e.what();
    kind = 1;
  } catch (const NumericError& e) {
    message = e.what();
    kind = 2;
  } catch (const std::exception& e) {
    message = e.what();
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream marker(dir / "FAILED", std::ios::trunc);
  marker << "stage: " << stage << "\nerror: " << message << "\n";
  const std::string tagged = "stage '" + stage + "': " + message;
  if (kind == 1) throw ValidationError(tagged);
  if (kind == 2) throw NumericError(tagged);
  throw std::runtime_error(tagged);
}

json captioner_meta(const ExperimentConfig& config, const Vocabulary& vocab) {
  json meta;
  meta["experiment"] = config.to_json();
  meta["experiment"].erase("output_dir");
  meta["vocab"] = vocab.tokens();
  meta["config_hash"] = config.hash();
  return meta;
}

}  // namespace

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig ExperimentConfig::from_preset(std::string_view preset) {
  ExperimentConfig c;
  c.preset = std::string(preset);
  if (preset == "desk") return c;
  if (preset == "paper") {
    c.model.encoder = EncoderConfig::full_scale();
    const Index views = c.model.encoder.max_tiles + 1;
    c.model.decoder.max_len = views * c.model.encoder.tokens_per_tile() + 128;
    c.train = TrainConfig::full_scale();
    return c;
  }
  throw ValidationError("unknown preset '" + std::string(preset) + "' (expected desk | paper)");
}

void ExperimentConfig::apply_overrides(const json& j) {
  try {
    check_keys(j,
               {"dataset", "output_dir", "mode", "preset", "seed", "train_fraction", "prompt", "pgm_heatmaps",
                "vocab_limit", "model", "train", "scorer", "scorer_train"},
               "root");
    if (j.contains("preset")) {
      const std::string p = j.at("preset").get<std::string>();
      if (p != preset) {
        ExperimentConfig base = from_preset(p);
        base.dataset = dataset;
        base.output_dir = output_dir;
        base.mode = mode;
        base.seed = seed;
        *this = base;
      }
    }
    if (j.contains("dataset")) dataset = j.at("dataset").get<std::string>();
    if (j.contains("output_dir")) output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("mode")) mode = parse_mode(j.at("mode").get<std::string>());
    read(j, "seed", seed);
    read(j, "train_fraction", train_fraction);
    read(j, "prompt", prompt);
    read(j, "pgm_heatmaps", pgm_heatmaps);
    read(j, "vocab_limit", vocab_limit);
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, {"encoder", "decoder"}, "model");
      if (m.contains("encoder")) encoder_from(m.at("encoder"), model.encoder);
      if (m.contains("decoder")) decoder_from(m.at("decoder"), model.decoder);
    }
    if (j.contains("train")) train_from(j.at("train"), train);
    if (j.contains("scorer")) scorer_from(j.at("scorer"), scorer);
    if (j.contains("scorer_train")) scorer_train_from(j.at("scorer_train"), scorer_train);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
}

json ExperimentConfig::to_json() const {
  json j;
  j["dataset"] = dataset.string();
  j["output_dir"] = output_dir.string();
  j["mode"] = std::string(to_string(mode));
  j["preset"] = preset;
  j["seed"] = seed;
  j["train_fraction"] = train_fraction;
  j["prompt"] = prompt;
  j["pgm_heatmaps"] = pgm_heatmaps;
  j["vocab_limit"] = vocab_limit;
  j["model"] = {{"encoder", encoder_json(model.encoder)}, {"decoder", decoder_json(model.decoder)}};
  j["train"] = train_json(train);
  j["scorer"] = scorer_json(scorer);
  j["scorer_train"] = scorer_train_json(scorer_train);
  return j;
}

std::string ExperimentConfig::hash() const {
  json j = to_json();
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

void ExperimentConfig::validate() const {
  if (dataset.empty()) throw ValidationError("config: dataset path is required");
  if (output_dir.empty()) throw ValidationError("config: output directory is required");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("config: train_fraction must lie in (0, 1)");
  train.validate();
  try {
    CaptionerConfig::for_mode(model, mode).encoder.validate();
    scorer.validate();
  } catch (const ContractError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (model.decoder.dim % model.decoder.heads != 0) throw ValidationError("config: decoder dim must divide by heads");
  if (scorer_train.steps <= 0 || scorer_train.batch_size <= 0)
    throw ValidationError("config: scorer_train steps and batch_size must be positive");
}

void write_manifest(const std::filesystem::path& dir, const ExperimentConfig& config,
                    const std::vector<std::string>& files, const json& extra) {
  json m;
  m["config_hash"] = config.hash();
  m["seed"] = config.seed;
  m["code_version"] = ASE_VERSION;
  m["mode"] = std::string(to_string(config.mode));
  m["preset"] = config.preset;
  m["files"] = files;
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

ExperimentResult run_experiment(const ExperimentConfig& input) {
  namespace fs = std::filesystem;
  ExperimentConfig config = input;
  config.model = CaptionerConfig::for_mode(config.model, config.mode);
  const fs::path dir = config.output_dir;
  std::string stage = "validate";
  try {
    config.validate();
    fs::create_directories(dir);
    fs::remove(dir / "FAILED");

    ExperimentResult result;
    result.mode = config.mode;
    result.output_dir = dir;
    std::vector<std::string> files = {"config.json", "captions.jsonl", "metrics.csv", "metrics.json"};
    write_text(dir / "config.json", config.to_json().dump(2) + "\n");

    stage = "load";
    Splits splits = load_splits(config);
    {
      std::set<std::string> train_ids;
      for (const auto& r : splits.train.records) train_ids.insert(r.image_path.lexically_normal().string());
      for (const auto& r : splits.test.records)
        if (train_ids.count(r.image_path.lexically_normal().string()))
          throw ValidationError("test image " + r.image + " also appears in the training split");
    }
    const std::vector<Image> train_images = splits.train.load_images();
    const std::vector<Image> test_images = splits.test.load_images();

    stage = "vocab";
    std::vector<std::string> texts;
    for (const auto& r : splits.train.records) {
      texts.insert(texts.end(), r.captions.begin(), r.captions.end());
      texts.push_back(prompt_for(r, config));
    }
    for (const auto& r : splits.test.records) texts.push_back(prompt_for(r, config));
    const Vocabulary vocab = Vocabulary::build(texts, config.vocab_limit);

    // Style scorer and saliency maps, only for the saliency-conditioned mode.
    std::unique_ptr<AestheticScorer<Real>> scorer;
    std::vector<ImageSaliency<Real>> train_saliency(train_images.size()), test_saliency(test_images.size());
    if (uses_iasc(config.mode)) {
      stage = "scorer";
      if (!splits.train.labelled()) throw ValidationError("saliency mode needs a \"label\" on every training record");
      std::vector<Index> labels;
      for (const auto& r : splits.train.records) labels.push_back(*r.label);
      ScorerConfig sc = config.scorer;
      sc.channels = config.model.encoder.channels;
      scorer = std::make_unique<AestheticScorer<Real>>(sc, config.seed + 1);
      ScorerTrainConfig st = config.scorer_train;
      st.seed = config.seed + 2;
      const auto sreport = train_scorer(*scorer, std::span<const Image>(train_images), labels, st);
      result.scorer_accuracy = sreport.train_accuracy;
      write_checkpoint(dir / "scorer.ckpt",
                       capture_parameters<Real>(*scorer, json{{"scorer", scorer_json(sc)}, {"config_hash", config.hash()}}));
      files.push_back("scorer.ckpt");

      stage = "saliency";
      parallel_for(train_images.size(), [&](std::size_t i) {
        train_saliency[i] = compute_saliency(*scorer, train_images[i], config.model.encoder);
      });
      parallel_for(test_images.size(), [&](std::size_t i) {
        test_saliency[i] = compute_saliency(*scorer, test_images[i], config.model.encoder);
      });
      if (config.pgm_heatmaps) {
        fs::create_directories(dir / "saliency");
        for (std::size_t i = 0; i < test_images.size(); ++i) {
          const std::string name = "saliency/" + fs::path(splits.test.records[i].image).stem().string() + ".pgm";
          write_saliency_pgm(dir / name, *test_saliency[i].full);
          files.push_back(name);
        }
      }
    }

    stage = "model";
    CaptionModel<Real> model(config.model, vocab, config.seed + 3);

    if (is_trained(config.mode)) {
      stage = "train";
      struct Encoded {
        std::vector<Index> prompt;
        std::vector<std::vector<Index>> captions;
      };
      std::vector<Encoded> encoded;
      for (const auto& r : splits.train.records) {
        Encoded e;
        e.prompt = vocab.encode(prompt_for(r, config));
        for (const auto& c : r.captions) e.captions.push_back(vocab.encode(c));
        encoded.push_back(std::move(e));
      }
      CaptionTrainer<Real> trainer(model, config.train);
      std::mt19937_64 rng(config.seed + 4);
      std::vector<std::size_t> order(encoded.size());
      std::iota(order.begin(), order.end(), 0);
      std::size_t cursor = order.size();
      std::ostringstream log;
      log << "step,lr,loss\n";
      const Schedule schedule = config.train.schedule();
      const Index visual_rows = model.config().encoder.tokens_per_tile();
      for (Index step = 0; step < config.train.total_steps; ++step) {
        std::vector<CaptionExample<Real>> batch;
        for (Index b = 0; b < config.train.batch_size; ++b) {
          if (cursor == order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
          }
          const std::size_t i = order[cursor++];
          const auto& caps = encoded[i].captions;
          std::vector<Index> caption = caps[static_cast<std::size_t>(rng() % caps.size())];
          const Index views = plan_tiles(train_images[i].width, train_images[i].height, model.config().encoder).views();
          const Index room = model.config().decoder.max_len - views * visual_rows -
                             static_cast<Index>(encoded[i].prompt.size()) - 2;
          if (room < 1) throw ValidationError("record " + splits.train.records[i].image + " leaves no room for a caption");
          if (static_cast<Index>(caption.size()) > room) caption.resize(static_cast<std::size_t>(room));
          batch.push_back({&train_images[i], uses_iasc(config.mode) ? &train_saliency[i] : nullptr, encoded[i].prompt,
                           std::move(caption)});
        }
        const double lr = lr_at(step, schedule);
        const double loss = trainer.train_step(batch);
        result.losses.push_back(loss);
        log << step << ',' << format_double(lr) << ',' << format_double(loss) << '\n';
      }
      result.initial_loss = result.losses.front();
      const std::size_t tail = std::min<std::size_t>(10, result.losses.size());
      result.final_loss =
          std::accumulate(result.losses.end() - static_cast<std::ptrdiff_t>(tail), result.losses.end(), 0.0) / double(tail);
      write_text(dir / "train_log.csv", log.str());
      write_checkpoint(dir / "model.ckpt", capture_parameters<Real>(model, captioner_meta(config, vocab)));
      files.push_back("train_log.csv");
      files.push_back("model.ckpt");
    }

    stage = "caption";
    result.captions.resize(test_images.size());
    parallel_for(test_images.size(), [&](std::size_t i) {
      const auto* sal = uses_iasc(config.mode) ? &test_saliency[i] : nullptr;
      result.captions[i] = {splits.test.records[i].image,
                            model.generate(test_images[i], sal, prompt_for(splits.test.records[i], config))};
    });
    {
      std::ostringstream out;
      for (const auto& c : result.captions) out << json{{"image", c.image}, {"caption", c.caption}}.dump() << '\n';
      write_text(dir / "captions.jsonl", out.str());
    }

    stage = "evaluate";
    result.report = evaluate_corpus(result.captions, splits.test.references(), splits.test.name,
                                    std::string(to_string(config.mode)));
    write_text(dir / "metrics.csv", result.report.to_csv());
    write_text(dir / "metrics.json", result.report.to_json().dump(2) + "\n");

    stage = "manifest";
    json extra;
    extra["train_records"] = splits.train.size();
    extra["test_records"] = splits.test.size();
    extra["skipped_records"] = splits.train.skipped.size() + splits.test.skipped.size();
    if (!result.losses.empty()) {
      extra["initial_loss"] = result.initial_loss;
      extra["final_loss"] = result.final_loss;
    }
    if (result.scorer_accuracy >= 0) extra["scorer_train_accuracy"] = result.scorer_accuracy;
    write_manifest(dir, config, files, extra);
    return result;
  } catch (...) {
    rethrow_with_stage(stage, dir);
  }
}

std::string ablation_csv(const std::vector<ExperimentResult>& rows) {
  std::ostringstream out;
  out << "mode";
  for (const auto& c : EvalReport::columns()) out << ',' << c;
  out << '\n';
  for (const auto& r : rows) {
    out << to_string(r.mode);
    for (double v : EvalReport::values(r.report.mean)) out << ',' << format_double(v);
    out << '\n';
  }
  return out.str();
}

AblationResult run_ablation(const ExperimentConfig& config) {
  namespace fs = std::filesystem;
  AblationResult out;
  fs::create_directories(config.output_dir);
  for (AblationMode mode : {AblationMode::NoFinetune, AblationMode::Finetune, AblationMode::FinetuneIasc}) {
    ExperimentConfig c = config;
    c.mode = mode;
    c.output_dir = config.output_dir / std::string(to_string(mode));
    out.rows.push_back(run_experiment(c));
  }
  out.csv = config.output_dir / "ablation.csv";
  write_text(out.csv, ablation_csv(out.rows));
  json extra;
  extra["modes"] = {"no-finetune", "finetune", "finetune+IASC"};
  write_manifest(config.output_dir, config, {"ablation.csv", "no-finetune", "finetune", "finetune+IASC"}, extra);
  return out;
}

std::string LoadedRun::caption(const Image& image, std::string_view prompt) const {
  if (config.model.encoder.iasc) {
    if (!scorer) throw ValidationError("run uses saliency but has no scorer checkpoint");
    const auto sal = compute_saliency(*scorer, image, config.model.encoder);
    return model->generate(image, &sal, prompt);
  }
  return model->generate(image, nullptr, prompt);
}

LoadedRun load_run(const std::filesystem::path& run_dir) {
  const auto model_path = run_dir / "model.ckpt";
  if (!std::filesystem::exists(model_path))
    throw ValidationError("no model.ckpt in " + run_dir.string() + " (untrained runs keep no checkpoint)");
  const Checkpoint ck = read_checkpoint(model_path);
  LoadedRun run;
  try {
    run.config.apply_overrides(ck.meta.at("experiment"));
    run.config.model = CaptionerConfig::for_mode(run.config.model, run.config.mode);
    const Vocabulary vocab = Vocabulary::from_tokens(ck.meta.at("vocab").get<std::vector<std::string>>());
    run.model = std::make_unique<CaptionModel<Real>>(run.config.model, vocab, run.config.seed + 3);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("checkpoint metadata: ") + e.what());
  }
  restore_parameters<Real>(*run.model, ck);
  if (run.config.model.encoder.iasc) {
    const auto scorer_path = run_dir / "scorer.ckpt";
    const Checkpoint sk = read_checkpoint(scorer_path);
    ScorerConfig sc = run.config.scorer;
    sc.channels = run.config.model.encoder.channels;
    run.scorer = std::make_unique<AestheticScorer<Real>>(sc, run.config.seed + 1);
    restore_parameters<Real>(*run.scorer, sk);
  }
  return run;
}

}  // namespace ase
