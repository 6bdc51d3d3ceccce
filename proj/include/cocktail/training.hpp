#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cocktail/instruct.hpp"
#include "cocktail/model.hpp"

namespace cocktail {

class TrainingError : public ContractError {
 public:
  using ContractError::ContractError;
};

enum class OptimizerKind { momentum_sgd, adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
  double lr = 3e-3;
  int batch_size = 16;
  int epochs = 5;
  double momentum = 0.9;
  double clip_norm = 1.0;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;

  static TrainConfig adapter_defaults();
  static TrainConfig pretrain_defaults();
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Token ids with the loss restricted to positions >= `target_start` (the index of
/// the first predicted token).
struct TrainSequence {
  std::vector<TokenId> tokens;
  std::size_t target_start = 1;
};

/// BOS + prompt + response; only response tokens are targets.
TrainSequence make_train_sequence(const Tokenizer& tok, const InstructionExample& e);

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;  // mean per-token loss over the epoch's batches
  double seconds = 0.0;
};

void to_json(nlohmann::json& j, const EpochLog& e);

/// Mean per-token negative log-likelihood over the target positions.
double sequence_loss(const BaseWeights& base, const AdapterCheckpoint* adapter, const TrainSequence& seq);
double dataset_loss(const BaseWeights& base, const AdapterCheckpoint* adapter, const std::vector<TrainSequence>& data);

/// First-order optimizer over a fixed list of parameter matrices.
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, std::vector<Matrix*> params);
  /// Clips the global gradient norm to config.clip_norm, then applies one update.
  /// Returns the pre-clip norm.
  double step(std::vector<Matrix>& grads);

 private:
  TrainConfig config_;
  std::vector<Matrix*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long long t_ = 0;
};

struct AdapterTrainResult {
  AdapterCheckpoint adapter;
  std::vector<EpochLog> log;
  double initial_loss = 0.0;
  std::map<int, int> domain_counts;
};

/// Trains a fresh adapter (A ~ N(0, 0.02²), B = 0) on `data` with the base frozen.
/// Throws TrainingError if the dataset tokenizer does not match the base vocabulary.
AdapterTrainResult train_lora(const std::vector<InstructionExample>& data, const Tokenizer& tok,
                              const std::string& data_vocab_fingerprint, const BaseWeights& base,
                              const TrainConfig& config, const Provenance& provenance);

/// Sequences the base model reads during pretraining: composed titles, attribute
/// sentences and instruction skeletons whose answer is a uniformly random candidate.
/// No real item title appears.
std::vector<TrainSequence> pretrain_corpus(const World& world, const Tokenizer& tok, std::uint64_t seed,
                                           int n_documents);
/// Holdout item titles as BOS + title + EOS sequences.
std::vector<TrainSequence> heldout_title_corpus(const World& world, const Tokenizer& tok);
double perplexity(const BaseWeights& base, const std::vector<TrainSequence>& corpus);

struct PretrainResult {
  BaseWeights base;
  std::vector<EpochLog> log;
  double initial_perplexity = 0.0;
  double final_perplexity = 0.0;
};

inline constexpr int kDefaultPretrainDocuments = 8000;

PretrainResult pretrain_base(const World& world, const Tokenizer& tok, const ModelConfig& model,
                             const TrainConfig& config, int n_documents = kDefaultPretrainDocuments);

void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);

}  // namespace cocktail
