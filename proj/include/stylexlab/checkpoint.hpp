#pragma once
// Binary parameter blobs: magic, format version, kind tag, named float blocks,
// then a SHA-256 of everything before it.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stylexlab/nn.hpp"

namespace stylexlab::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

class VersionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Blob {
  std::string kind;
  std::map<std::string, std::vector<float>> blocks;
};

// Writes atomically (temp file + rename). Returns the file's SHA-256.
std::string write_blob(const std::filesystem::path& path, const std::string& kind,
                       const nn::ParamList<float>& params);
Blob read_blob(const std::filesystem::path& path, const std::string& expected_kind);

// Copies blob blocks into params by name; every param must be present with a
// matching size.
void load_params(const Blob& blob, const nn::ParamList<float>& params);

// Atomic text write used for sidecars and manifests.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace stylexlab::ckpt
