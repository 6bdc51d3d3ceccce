#pragma once

#include <span>
#include <string>
#include <string_view>

#include "cocktail/tensor.hpp"

namespace cocktail {

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  void update(std::string_view text);
  void update(const Matrix& m);
  std::string hex_digest();

 private:
  void* ctx_;
};

}  // namespace cocktail
