#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cocktail/model.hpp"

namespace cocktail {

/// Malformed or unexpected checkpoint container.
class CheckpointError : public ContractError {
 public:
  using ContractError::ContractError;
};

inline constexpr char kCheckpointMagic[4] = {'C', 'K', 'T', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Decoded container: metadata (including the tensor directory) and named payloads.
struct Container {
  nlohmann::json metadata;
  std::vector<std::pair<std::string, Matrix>> tensors;
};

/// Layout: "CKTL", u32 version, u64 metadata length, UTF-8 JSON metadata, then the
/// little-endian f64 payloads back to back. All integers little-endian. The tensor
/// directory (name, shape, byte offset into the payload area) is written into
/// metadata["tensors"].
std::string encode_container(nlohmann::json metadata, const std::vector<std::pair<std::string, const Matrix*>>& tensors);
Container decode_container(const std::string& bytes);

std::string encode_adapter(const AdapterCheckpoint& adapter);
AdapterCheckpoint decode_adapter(const std::string& bytes);
std::string encode_base(const BaseWeights& base);
BaseWeights decode_base(const std::string& bytes);

void write_adapter(const std::filesystem::path& path, const AdapterCheckpoint& adapter);
AdapterCheckpoint read_adapter(const std::filesystem::path& path);
void write_base(const std::filesystem::path& path, const BaseWeights& base);
BaseWeights read_base(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace cocktail
