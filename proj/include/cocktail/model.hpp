#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cocktail/autodiff.hpp"
#include "cocktail/tensor.hpp"

namespace cocktail {

inline constexpr TokenId kPadToken = 0;
inline constexpr TokenId kBosToken = 1;
inline constexpr TokenId kEosToken = 2;
inline constexpr TokenId kSepToken = 3;
inline constexpr TokenId kUnkToken = 4;

class IncompatibleAdapterError : public ContractError {
 public:
  using ContractError::ContractError;
};

class LengthError : public ContractError {
 public:
  using ContractError::ContractError;
};

enum class Projection { q, k, v, o, ff_in, ff_out };

std::string to_string(Projection p);
Projection projection_from_string(const std::string& s);

/// Layer index plus projection name, e.g. "layer1.v".
struct TargetId {
  int layer = 0;
  Projection proj = Projection::q;

  std::string str() const;
  static TargetId parse(const std::string& s);
  auto operator<=>(const TargetId&) const = default;
};

struct ModelConfig {
  int vocab_size = 512;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 256;
  int lora_rank = 8;
  double lora_alpha = 16.0;
  std::vector<Projection> lora_targets{Projection::q, Projection::v};

  /// Adapter scaling s = alpha / r.
  double lora_scale() const { return lora_alpha / static_cast<double>(lora_rank); }
  /// Output and input widths (d, k) of a projection.
  std::pair<int, int> projection_shape(Projection p) const;
  std::vector<TargetId> target_ids() const;
  void validate() const;
  /// SHA-256 of the canonical JSON form.
  std::string fingerprint() const;

  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerWeights {
  std::map<Projection, Matrix> proj;  // out × in
  Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

/// Frozen pretrained parameters. The output head is tied to the token embedding.
struct BaseWeights {
  ModelConfig config;
  std::string vocab_fingerprint;
  Matrix tok_emb;  // vocab × d
  Matrix pos_emb;  // max_seq_len × d
  std::vector<LayerWeights> layers;
  Matrix lnf_gain, lnf_bias;

  static BaseWeights initialize(const ModelConfig& config, std::uint64_t seed);
  static BaseWeights zeros(const ModelConfig& config);

  /// Every parameter tensor in a fixed order with a stable name.
  std::vector<std::pair<std::string, Matrix*>> named_tensors();
  std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;
  std::size_t parameter_count() const;
};

struct LoraDelta {
  Matrix a;  // r × k
  Matrix b;  // d × r
};

enum class ProvenanceKind { general, specific, merged };

struct Provenance {
  ProvenanceKind kind = ProvenanceKind::general;
  int domain_id = -1;             // specific
  double lambda1 = 0.0;           // merged
  double lambda2 = 0.0;           // merged
  std::string merge_method;       // merged
  std::string general_parent;     // merged: content hash
  std::string specific_parent;    // merged: content hash
};

void to_json(nlohmann::json& j, const Provenance& p);
void from_json(const nlohmann::json& j, Provenance& p);

struct AdapterCheckpoint {
  ModelConfig config;
  std::string fingerprint;
  std::map<TargetId, LoraDelta> deltas;
  Provenance provenance;
  std::uint64_t seed = 0;

  /// Training initialization: A ~ N(0, 0.02²), B = 0.
  static AdapterCheckpoint initialize(const ModelConfig& config, std::uint64_t seed, Provenance provenance);
  /// Throws IncompatibleAdapterError unless fingerprints and target keys match `config`.
  void check_compatible(const ModelConfig& config) const;
  std::size_t parameter_count() const;
  /// SHA-256 over the factor payloads in target order.
  std::string payload_hash() const;
};

/// Base weights bound into a graph, either frozen (constant) or trainable.
struct BaseVars {
  Var tok_emb, pos_emb, lnf_gain, lnf_bias;
  struct Layer {
    std::map<Projection, Var> proj;
    Var ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  };
  std::vector<Layer> layers;
  const ModelConfig* config = nullptr;
};

struct AdapterVars {
  std::map<TargetId, std::pair<Var, Var>> factors;  // (A, B)
  double scale = 1.0;
};

BaseVars bind_base(Graph& g, const BaseWeights& base, bool trainable);
AdapterVars bind_adapter(Graph& g, const AdapterCheckpoint& adapter, bool trainable);

/// Logits (rows.size() × vocab) for the selected positions of `tokens`.
Var forward_graph(const BaseVars& base, const AdapterVars* adapter, std::span<const TokenId> tokens,
                  std::span<const std::size_t> rows);

/// Causal next-token logits for every position (len × vocab).
Matrix forward_logits(const BaseWeights& base, const AdapterCheckpoint* adapter, std::span<const TokenId> tokens);

/// Incremental forward with cached keys/values. Immutable; decode states are values.
class InferenceModel {
 public:
  struct State {
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    int length = 0;
  };

  InferenceModel(const BaseWeights& base, const AdapterCheckpoint* adapter);

  State start() const;
  /// Appends `tokens` to `state` and returns their next-token logits (n × vocab).
  Matrix extend(State& state, std::span<const TokenId> tokens) const;

  const ModelConfig& config() const { return base_->config; }

 private:
  Matrix project(const Matrix& x, int layer, Projection p) const;

  const BaseWeights* base_;
  const AdapterCheckpoint* adapter_;
};

struct DecodeResult {
  std::vector<TokenId> tokens;
  std::vector<RowVector> distributions;
  std::size_t steps() const { return tokens.size(); }
};

/// Greedy decoding of up to k tokens; stops after emitting EOS. Ties go to the lowest id.
DecodeResult greedy_decode(const BaseWeights& base, const AdapterCheckpoint* adapter,
                           std::span<const TokenId> prompt, int k);
DecodeResult greedy_decode(const InferenceModel& model, std::span<const TokenId> prompt, int k);

/// Mean teacher-forced log-probability of `continuation` given `prompt`.
double sequence_avg_logprob(const BaseWeights& base, const AdapterCheckpoint* adapter,
                            std::span<const TokenId> prompt, std::span<const TokenId> continuation);

/// Scores each continuation against a shared prompt prefix. With `normalize`, the
/// summed log-probability is divided by the continuation length.
std::vector<double> score_continuations(const InferenceModel& model, std::span<const TokenId> prompt,
                                        const std::vector<std::vector<TokenId>>& continuations,
                                        bool normalize = true);

/// Index of the largest entry; ties resolve to the lowest index.
template <typename Derived>
Eigen::Index argmax_lowest(const Eigen::MatrixBase<Derived>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) best = j;
  }
  return best;
}

}  // namespace cocktail
