#include "ase/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>

#include "ase/errors.hpp"
#include "json.hpp"

namespace ase {

bool Dataset::labelled() const {
  return !records.empty() && std::all_of(records.begin(), records.end(), [](const auto& r) { return r.label.has_value(); });
}

std::map<std::string, std::vector<std::string>> Dataset::references() const {
  std::map<std::string, std::vector<std::string>> refs;
  for (const auto& r : records) refs[r.image] = r.captions;
  return refs;
}

std::vector<Image> Dataset::load_images() const {
  std::vector<Image> images;
  images.reserve(records.size());
  for (const auto& r : records) images.push_back(read_image(r.image_path));
  return images;
}

Dataset ingest_dataset(const std::filesystem::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw ValidationError("dataset: cannot open " + jsonl.string());
  Dataset ds;
  ds.name = jsonl.stem().string();
  const auto root = jsonl.parent_path();
  std::string text;
  std::size_t line = 0, seen = 0;
  auto schema = [&](const std::string& what) {
    return ValidationError(jsonl.string() + ":" + std::to_string(line) + ": schema error: " + what);
  };
  while (std::getline(in, text)) {
    ++line;
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    ++seen;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(jsonl.string() + ":" + std::to_string(line) + ": malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw schema("record must be an object");
    if (!j.contains("image") || !j["image"].is_string()) throw schema("missing string field \"image\"");
    if (!j.contains("captions") || !j["captions"].is_array()) throw schema("missing array field \"captions\"");
    CaptionRecord r;
    r.line = line;
    r.image = j["image"].get<std::string>();
    for (const auto& c : j["captions"]) {
      if (!c.is_string()) throw schema("captions must be strings");
      r.captions.push_back(c.get<std::string>());
    }
    if (r.captions.empty()) throw schema("at least one caption is required");
    if (j.contains("prompt")) {
      if (!j["prompt"].is_string()) throw schema("\"prompt\" must be a string");
      r.prompt = j["prompt"].get<std::string>();
    }
    if (j.contains("label")) {
      if (!j["label"].is_number_integer() || j["label"].get<long long>() < 0)
        throw schema("\"label\" must be a non-negative integer");
      r.label = j["label"].get<Eigen::Index>();
    }
    const std::filesystem::path p(r.image);
    r.image_path = p.is_absolute() ? p : root / p;
    if (!std::filesystem::is_regular_file(r.image_path)) {
      ds.skipped.push_back({line, r.image, "image file not found: " + r.image_path.string()});
      continue;
    }
    ds.records.push_back(std::move(r));
  }
  if (seen == 0) throw ValidationError(jsonl.string() + ": no records");
  if (ds.records.empty()) throw ValidationError(jsonl.string() + ": no records with a readable image");
  return ds;
}

void write_dataset(const std::filesystem::path& jsonl, const Dataset& dataset) {
  std::ofstream out(jsonl, std::ios::trunc);
  if (!out) throw std::runtime_error("dataset: cannot write " + jsonl.string());
  for (const auto& r : dataset.records) {
    nlohmann::json j;
    j["image"] = r.image;
    j["captions"] = r.captions;
    if (r.prompt) j["prompt"] = *r.prompt;
    if (r.label) j["label"] = *r.label;
    out << j.dump() << '\n';
  }
}

DatasetSplit split_dataset(const Dataset& dataset, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ValidationError("split: train fraction must lie in (0, 1)");
  const std::size_t n = dataset.records.size();
  if (n < 2) throw ValidationError("split: need at least two records");
  std::mt19937_64 rng(seed);

  // Group indices by label (one group when unlabelled), shuffle each group.
  std::map<Eigen::Index, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[dataset.records[i].label.value_or(-1)].push_back(i);
  for (auto& [label, ids] : groups) std::shuffle(ids.begin(), ids.end(), rng);

  const auto target = static_cast<std::size_t>(std::llround(train_fraction * double(n)));
  std::map<Eigen::Index, std::size_t> take;
  std::size_t total = 0;
  for (const auto& [label, ids] : groups) {
    std::size_t t = static_cast<std::size_t>(std::floor(train_fraction * double(ids.size())));
    if (ids.size() >= 2) t = std::clamp<std::size_t>(t, 1, ids.size() - 1);
    take[label] = t;
    total += t;
  }
  // Hand out the remainder one record at a time in label order.
  while (total < target) {
    bool moved = false;
    for (auto& [label, t] : take) {
      if (total == target) break;
      if (t + 1 < groups[label].size()) {
        ++t;
        ++total;
        moved = true;
      }
    }
    if (!moved) break;
  }
  while (total > target) {
    bool moved = false;
    for (auto it = take.rbegin(); it != take.rend() && total > target; ++it) {
      if (it->second > 1) {
        --it->second;
        --total;
        moved = true;
      }
    }
    if (!moved) break;
  }

  std::vector<char> is_train(n, 0);
  for (const auto& [label, ids] : groups)
    for (std::size_t k = 0; k < take[label]; ++k) is_train[ids[k]] = 1;
  DatasetSplit split;
  split.train.name = dataset.name + "-train";
  split.test.name = dataset.name + "-test";
  for (std::size_t i = 0; i < n; ++i) (is_train[i] ? split.train : split.test).records.push_back(dataset.records[i]);
  return split;
}

}  // namespace ase
