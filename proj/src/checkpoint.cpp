#include "cocktail/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace cocktail {

namespace {

template <typename T>
void put_le(std::string& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  if (offset + sizeof(T) > in.size()) throw CheckpointError("checkpoint truncated");
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, in.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

std::string adapter_tensor_name(const TargetId& id, char factor) { return id.str() + "." + factor; }

}  // namespace

std::string encode_container(nlohmann::json metadata,
                             const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
  nlohmann::json directory = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : tensors) {
    directory.push_back({{"name", name}, {"shape", {m->rows(), m->cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(m->size()) * sizeof(double);
  }
  metadata["tensors"] = std::move(directory);
  const std::string meta = metadata.dump();

  std::string out(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, meta.size());
  out += meta;
  out.reserve(out.size() + offset);
  for (const auto& [name, m] : tensors) {
    for (Eigen::Index i = 0; i < m->size(); ++i) put_le<double>(out, m->data()[i]);
  }
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("not a CKTL checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported CKTL version " + std::to_string(version));
  }
  const auto meta_len = get_le<std::uint64_t>(bytes, 8);
  if (16 + meta_len > bytes.size()) throw CheckpointError("checkpoint metadata truncated");
  Container c;
  try {
    c.metadata = nlohmann::json::parse(bytes.substr(16, meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 16 + meta_len;
  for (const auto& entry : c.metadata.at("tensors")) {
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = get_le<double>(bytes, payload + offset + static_cast<std::size_t>(i) * sizeof(double));
    }
    c.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(m));
  }
  return c;
}

std::string encode_adapter(const AdapterCheckpoint& adapter) {
  nlohmann::json meta{{"kind", "adapter"},
                      {"config", adapter.config},
                      {"config_fingerprint", adapter.fingerprint},
                      {"provenance", adapter.provenance},
                      {"seed", adapter.seed}};
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (const auto& [id, d] : adapter.deltas) {
    tensors.emplace_back(adapter_tensor_name(id, 'A'), &d.a);
    tensors.emplace_back(adapter_tensor_name(id, 'B'), &d.b);
  }
  return encode_container(std::move(meta), tensors);
}

AdapterCheckpoint decode_adapter(const std::string& bytes) {
  Container c = decode_container(bytes);
  if (c.metadata.value("kind", "") != "adapter") throw CheckpointError("checkpoint is not an adapter");
  AdapterCheckpoint a;
  a.config = c.metadata.at("config").get<ModelConfig>();
  a.fingerprint = c.metadata.at("config_fingerprint").get<std::string>();
  a.provenance = c.metadata.at("provenance").get<Provenance>();
  a.seed = c.metadata.at("seed").get<std::uint64_t>();
  std::map<std::string, Matrix> by_name;
  for (auto& [name, m] : c.tensors) by_name[name] = std::move(m);
  for (const TargetId& id : a.config.target_ids()) {
    auto ia = by_name.find(adapter_tensor_name(id, 'A'));
    auto ib = by_name.find(adapter_tensor_name(id, 'B'));
    if (ia == by_name.end() || ib == by_name.end()) throw CheckpointError("adapter lacks factors for " + id.str());
    a.deltas[id] = LoraDelta{std::move(ia->second), std::move(ib->second)};
  }
  a.check_compatible(a.config);
  return a;
}

std::string encode_base(const BaseWeights& base) {
  nlohmann::json meta{{"kind", "base"},
                      {"config", base.config},
                      {"config_fingerprint", base.config.fingerprint()},
                      {"vocab_fingerprint", base.vocab_fingerprint}};
  return encode_container(std::move(meta), base.named_tensors());
}

BaseWeights decode_base(const std::string& bytes) {
  Container c = decode_container(bytes);
  if (c.metadata.value("kind", "") != "base") throw CheckpointError("checkpoint is not a base model");
  BaseWeights w = BaseWeights::zeros(c.metadata.at("config").get<ModelConfig>());
  w.vocab_fingerprint = c.metadata.at("vocab_fingerprint").get<std::string>();
  std::map<std::string, Matrix> by_name;
  for (auto& [name, m] : c.tensors) by_name[name] = std::move(m);
  for (auto& [name, slot] : w.named_tensors()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("base checkpoint lacks tensor " + name);
    if (it->second.rows() != slot->rows() || it->second.cols() != slot->cols()) {
      throw CheckpointError("base tensor " + name + " has shape " + shape_string(it->second) + ", expected " +
                            shape_string(*slot));
    }
    *slot = std::move(it->second);
  }
  return w;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_adapter(const std::filesystem::path& path, const AdapterCheckpoint& adapter) {
  write_file(path, encode_adapter(adapter));
}
AdapterCheckpoint read_adapter(const std::filesystem::path& path) { return decode_adapter(read_file(path)); }
void write_base(const std::filesystem::path& path, const BaseWeights& base) { write_file(path, encode_base(base)); }
BaseWeights read_base(const std::filesystem::path& path) { return decode_base(read_file(path)); }

}  // namespace cocktail
