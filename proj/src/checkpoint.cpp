#include <elasticlm/checkpoint.hpp>
#include <elasticlm/io_util.hpp>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace elm {

namespace {
constexpr uint32_t kCheckpointVersion = 1;

void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const std::string& in, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(in[at + size_t(i)])) << (8 * i);
  return v;
}
}  // namespace

std::string Checkpoint::serialize() const {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["dtype"] = dtype.empty() ? "f32" : dtype;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, e] : entries_) {  // std::map iterates name-sorted
    nlohmann::json t;
    t["name"] = name;
    t["shape"] = e.shape;
    t["offset"] = offset;
    t["nbytes"] = e.bytes.size();
    header["tensors"].push_back(std::move(t));
    offset += e.bytes.size();
  }
  std::string hs = header.dump();
  std::string out;
  out.reserve(8 + hs.size() + size_t(offset));
  put_u64_le(out, hs.size());
  out += hs;
  for (const auto& [name, e] : entries_) out.append(e.bytes.data(), e.bytes.size());
  return out;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  atomic_write_file(path, serialize());
}

Checkpoint Checkpoint::parse(const std::string& bytes) {
  if (bytes.size() < 8) throw std::runtime_error("Checkpoint: truncated header length");
  uint64_t hlen = get_u64_le(bytes, 0);
  if (8 + hlen > bytes.size()) throw std::runtime_error("Checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(bytes.substr(8, hlen));
  if (header.at("version").get<uint32_t>() != kCheckpointVersion)
    throw std::runtime_error("Checkpoint: unsupported version");
  Checkpoint ckpt;
  ckpt.dtype = header.at("dtype").get<std::string>();
  ckpt.meta = header.value("meta", nlohmann::json::object());
  size_t payload = 8 + size_t(hlen);
  for (const auto& t : header.at("tensors")) {
    CheckpointEntry e;
    e.shape = t.at("shape").get<Shape>();
    uint64_t off = t.at("offset").get<uint64_t>();
    uint64_t n = t.at("nbytes").get<uint64_t>();
    if (payload + off + n > bytes.size())
      throw std::runtime_error("Checkpoint: truncated payload for " + t.at("name").get<std::string>());
    e.bytes.assign(bytes.data() + payload + off, bytes.data() + payload + off + n);
    ckpt.entries_.emplace(t.at("name").get<std::string>(), std::move(e));
  }
  return ckpt;
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  return parse(read_file(path));
}

}  // namespace elm
