#pragma once

// Checkpoint layout: u64 little-endian header length, UTF-8 JSON header,
// then a little-endian float32 payload. The header lists each tensor's name,
// shape and offset (in floats) into the payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ase/errors.hpp"
#include "ase/tensor.hpp"
#include "json.hpp"

namespace ase {

inline constexpr const char* kCheckpointFormat = "ase-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

/// Throws ValidationError on a malformed file or unsupported version.
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters in visit order, narrowed to float32.
template <typename S, typename Module>
Checkpoint capture_parameters(Module& module, nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  module.visit([&](Parameter<S>& p) {
    StoredTensor t{p.name, p.shape, {}};
    t.values.reserve(static_cast<std::size_t>(p.value.size()));
    for (Index i = 0; i < p.value.size(); ++i) t.values.push_back(static_cast<float>(p.value.data()[i]));
    ck.tensors.push_back(std::move(t));
  });
  return ck;
}

/// Every module parameter must be present with an identical shape.
template <typename S, typename Module>
void restore_parameters(Module& module, const Checkpoint& ck) {
  module.visit([&](Parameter<S>& p) {
    const StoredTensor* t = ck.find(p.name);
    if (!t) throw ValidationError("checkpoint: missing tensor '" + p.name + "'");
    if (t->shape != p.shape) {
      throw ValidationError("checkpoint: tensor '" + p.name + "' has shape " + to_string(t->shape) + ", model expects " +
                            to_string(p.shape));
    }
    for (Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(t->values[static_cast<std::size_t>(i)]);
  });
}

}  // namespace ase
