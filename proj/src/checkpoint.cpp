#include "ase/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace ase {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes, 8);
}

std::uint64_t get_u64(const unsigned char* bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["meta"] = ck.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (static_cast<Index>(t.values.size()) != numel(t.shape))
      throw ContractError("checkpoint: tensor '" + t.name + "' size does not match its shape");
    header["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : ck.tensors) {
    for (float f : t.values) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      const char bytes[4] = {static_cast<char>(bits & 0xffu), static_cast<char>((bits >> 8) & 0xffu),
                             static_cast<char>((bits >> 16) & 0xffu), static_cast<char>((bits >> 24) & 0xffu)};
      out.write(bytes, 4);
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw ValidationError("checkpoint: truncated header in " + path.string());
  const std::uint64_t header_len = get_u64(bytes.data());
  if (header_len > bytes.size() - 8) throw ValidationError("checkpoint: header length exceeds file size");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed header: ") + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat) throw ValidationError("checkpoint: unknown format");
  if (header.value("version", 0) != kCheckpointVersion)
    throw ValidationError("checkpoint: unsupported version " + header.value("version", nlohmann::json()).dump());

  const std::size_t payload = 8 + header_len;
  const std::size_t floats = (bytes.size() - payload) / 4;
  if ((bytes.size() - payload) % 4 != 0) throw ValidationError("checkpoint: payload is not a whole number of floats");

  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  try {
    for (const auto& entry : header.at("tensors")) {
      StoredTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto count = static_cast<std::uint64_t>(numel(t.shape));
      if (offset + count > floats) throw ValidationError("checkpoint: tensor '" + t.name + "' runs past the payload");
      t.values.resize(count);
      for (std::uint64_t i = 0; i < count; ++i) {
        const unsigned char* b = bytes.data() + payload + 4 * (offset + i);
        const std::uint32_t bits = std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
                                   (std::uint32_t(b[3]) << 24);
        t.values[i] = std::bit_cast<float>(bits);
      }
      ck.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: malformed tensor table: ") + e.what());
  }
  return ck;
}

}  // namespace ase
