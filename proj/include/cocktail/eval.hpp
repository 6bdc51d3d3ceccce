#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cocktail/instruct.hpp"
#include "cocktail/merge.hpp"

namespace cocktail {

inline constexpr int kReportSchemaVersion = 1;

enum class Variant { general_only, specific_only, weight_average, cocktail_grid, cocktail_gradient, base_zero_shot };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
std::vector<Variant> all_variants();

/// Candidate item ids by descending length-normalized log-likelihood of "title <eos>";
/// ties keep presentation order.
std::vector<int> rank_slate(const InferenceModel& model, const Tokenizer& tok, const World& world,
                            const InstructionExample& example, bool normalize = true);
std::vector<int> rank_slate(const BaseWeights& base, const AdapterCheckpoint* adapter, const Tokenizer& tok,
                            const World& world, const InstructionExample& example, bool normalize = true);

/// Single relevant item: 1/log2(rank+1) when the 1-indexed rank is within k.
double ndcg_at_k(const std::vector<int>& ranked, int positive, int k);

struct MetricsReport {
  Setting setting = Setting::warm;
  Variant variant = Variant::base_zero_shot;
  double ndcg1 = 0.0;
  double ndcg3 = 0.0;
  int n_users = 0;
  std::uint64_t seed = 0;
  std::optional<MergeSpec> spec;  // absent for base_zero_shot
  double seconds = 0.0;           // wall clock; kept out of the report files
};

void to_json(nlohmann::json& j, const MetricsReport& r);
void from_json(const nlohmann::json& j, MetricsReport& r);

struct SlateMetrics {
  double ndcg1 = 0.0;
  double ndcg3 = 0.0;
  int n = 0;
};

SlateMetrics evaluate_slates(const BaseWeights& base, const AdapterCheckpoint* adapter, const Tokenizer& tok,
                             const World& world, const std::vector<InstructionExample>& examples,
                             bool normalize = true);

/// Test examples whose domain is the target domain.
std::vector<InstructionExample> target_test(const SplitSpec& split, const World& world);

/// `n` unlabeled prompts drawn without replacement from the target-domain test prompts,
/// re-drawing slates when the test set is smaller than `n`. Labels are never read.
std::vector<std::vector<TokenId>> unlabeled_prompts(const SplitSpec& split, const World& world,
                                                    const std::vector<InteractionSequence>& sequences,
                                                    const Tokenizer& tok, int n, std::uint64_t seed);

struct AdaptRecord {
  Setting setting = Setting::warm;
  std::uint64_t seed = 0;
  AdaptResult result;
};

struct Evaluation {
  std::vector<MetricsReport> reports;
  std::vector<AdaptRecord> adaptations;
};

struct EvalInputs {
  const World* world = nullptr;
  const Tokenizer* tok = nullptr;
  const std::vector<InteractionSequence>* sequences = nullptr;
  std::vector<const SplitSpec*> splits;  // one per setting
  const BaseWeights* base = nullptr;
  const AdapterCheckpoint* general = nullptr;
  const AdapterCheckpoint* specific = nullptr;
};

/// Every setting × variant × seed on the target-domain test slates. Cocktail variants
/// adapt on that setting's own unlabeled prompts (adapt_cfg.seed is replaced by each seed).
Evaluation evaluate_variants(const EvalInputs& in, const AdaptConfig& adapt_cfg, const std::vector<std::uint64_t>& seeds,
                             const std::vector<Variant>& variants = all_variants());

std::string reports_csv(const std::vector<MetricsReport>& reports);
nlohmann::json evaluation_json(const Evaluation& e);
void write_reports(const std::filesystem::path& csv, const std::filesystem::path& json, const Evaluation& e);

}  // namespace cocktail
