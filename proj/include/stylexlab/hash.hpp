#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "stylexlab/nn.hpp"

namespace stylexlab {

// Incremental SHA-256 with lowercase hex output.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, std::size_t n);
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::string hex_digest();
  void digest(std::uint8_t out[32]);

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Hash of parameter names, shapes and exact values.
template <typename T>
std::string params_hash(const nn::ParamList<T>& params);

}  // namespace stylexlab
