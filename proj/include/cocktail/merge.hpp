#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cocktail/model.hpp"

namespace cocktail {

/// Merge coefficients off the probability simplex.
class ConstraintError : public ContractError {
 public:
  using ContractError::ContractError;
};

enum class MergeMethod { fixed, weight_average, grid, gradient };

std::string to_string(MergeMethod m);
MergeMethod merge_method_from_string(const std::string& s);

struct MergeSpec {
  double lambda1 = 0.5;  // general
  double lambda2 = 0.5;  // specific
  MergeMethod method = MergeMethod::weight_average;
  int n_samples = 0;
  std::uint64_t seed = 0;
  int iterations = 0;

  static MergeSpec fixed(double lambda1);
  static MergeSpec weight_average();
  void validate() const;
};

void to_json(nlohmann::json& j, const MergeSpec& s);
void from_json(const nlohmann::json& j, MergeSpec& s);

struct AdaptConfig {
  int k_tokens = 3;
  int n_unlabeled = 50;
  MergeMethod method = MergeMethod::grid;  // grid or gradient
  double grid_step = 0.05;
  int gradient_steps = 30;
  double gradient_lr = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const AdaptConfig& c);
void from_json(const nlohmann::json& j, AdaptConfig& c);

struct TracePoint {
  double lambda1 = 0.0;
  double entropy = 0.0;
};

struct AdaptResult {
  MergeSpec spec;
  int k_tokens = 0;
  std::vector<TracePoint> objective_trace;  // evaluation order

  /// Mean prefix entropy recorded for `lambda1`, if it was evaluated.
  std::optional<double> entropy_at(double lambda1) const;
};

/// {lambda1, lambda2, method, k_tokens, n_unlabeled, seed, objective_trace}
nlohmann::json adapt_result_json(const AdaptResult& r);

/// Per target: A = λ1·A_g + λ2·A_s and B = λ1·B_g + λ2·B_s.
AdapterCheckpoint merge_adapters(const AdapterCheckpoint& general, const AdapterCheckpoint& specific,
                                 const MergeSpec& spec);

/// s·B·A for one target.
Matrix effective_delta(const AdapterCheckpoint& adapter, const TargetId& target);

/// −Σ p ln p in nats; 0·ln 0 = 0.
double shannon_entropy(std::span<const double> dist);
double shannon_entropy(const RowVector& dist);

/// Mean next-token entropy over the first `k` greedily decoded steps (fewer when EOS comes early).
double prefix_entropy(const InferenceModel& model, std::span<const TokenId> prompt, int k);
double prefix_entropy(const BaseWeights& base, const AdapterCheckpoint& general, const AdapterCheckpoint& specific,
                      const MergeSpec& spec, std::span<const TokenId> prompt, int k);
double mean_prefix_entropy(const BaseWeights& base, const AdapterCheckpoint* adapter,
                           const std::vector<std::vector<TokenId>>& prompts, int k);

/// Chooses (λ1, λ2) by minimizing mean prefix entropy over unlabeled prompts.
/// Grid mode breaks ties toward the larger λ2.
AdaptResult adapt_coefficients(const BaseWeights& base, const AdapterCheckpoint& general,
                               const AdapterCheckpoint& specific, const std::vector<std::vector<TokenId>>& prompts,
                               const AdaptConfig& config);

}  // namespace cocktail
