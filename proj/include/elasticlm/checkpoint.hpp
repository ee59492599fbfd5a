#pragma once

// Checkpoint container: a little-endian length-prefixed JSON header listing
// tensor names, shapes, dtype and byte offsets, followed by one raw buffer.
// Tensor records are ordered by name; the header carries a version field and
// optional free-form metadata.

#include <elasticlm/tensor.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace elm {

struct CheckpointEntry {
  Shape shape;
  std::vector<char> bytes;  // raw little-endian payload
};

class Checkpoint {
 public:
  std::string dtype;  // "f32" or "f64"
  nlohmann::json meta = nlohmann::json::object();

  template <typename T>
  void add(const std::string& name, const TensorT<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    const char* want = std::is_same_v<T, float> ? "f32" : "f64";
    if (dtype.empty()) dtype = want;
    if (dtype != want)
      throw std::invalid_argument("Checkpoint: mixed dtypes (" + dtype + " vs " + want + ")");
    CheckpointEntry e;
    e.shape = t.shape();
    e.bytes.resize(t.data().size() * sizeof(T));
    std::memcpy(e.bytes.data(), t.data().data(), e.bytes.size());
    if (!entries_.emplace(name, std::move(e)).second)
      throw std::invalid_argument("Checkpoint: duplicate tensor name " + name);
  }

  template <typename T>
  TensorT<T> get(const std::string& name) const {
    const char* want = std::is_same_v<T, float> ? "f32" : "f64";
    if (dtype != want)
      throw std::runtime_error("Checkpoint: stored dtype " + dtype + ", requested " + want);
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::out_of_range("Checkpoint: missing tensor " + name);
    const auto& e = it->second;
    std::vector<T> data(e.bytes.size() / sizeof(T));
    std::memcpy(data.data(), e.bytes.data(), e.bytes.size());
    return TensorT<T>::from(e.shape, std::move(data));
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  size_t size() const { return entries_.size(); }
  const std::map<std::string, CheckpointEntry>& entries() const { return entries_; }

  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static Checkpoint parse(const std::string& bytes);
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, CheckpointEntry> entries_;  // name-sorted by map order
};

}  // namespace elm
