#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace elm {

// Writes via a temp file in the same directory followed by an atomic rename,
// so readers never observe a truncated artifact.
void atomic_write_file(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

// FNV-1a over a byte string; stable artifact fingerprint.
uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);
std::string hex64(uint64_t v);
std::string file_hash(const std::filesystem::path& path);

}  // namespace elm
