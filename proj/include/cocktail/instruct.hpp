#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "cocktail/model.hpp"
#include "cocktail/world.hpp"

namespace cocktail {

class SlateError : public ContractError {
 public:
  using ContractError::ContractError;
};

inline constexpr int kTemplateVersion = 1;
inline constexpr int kDefaultNegatives = 29;

/// Closed word-level vocabulary built from a world. Specials occupy ids 0..4.
class Tokenizer {
 public:
  static Tokenizer from_world(const World& world);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;
  TokenId id(const std::string& word) const;
  const std::string& word(TokenId id) const { return words_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  std::string fingerprint() const;

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId, std::less<>> index_;
};

struct CandidateSlate {
  int positive = -1;
  std::vector<int> negatives;
  std::vector<int> order;  // all candidates in presentation order
};

enum class SplitTag { train, validation, test };
enum class Setting { warm, new_item };

std::string to_string(SplitTag s);
std::string to_string(Setting s);
Setting setting_from_string(const std::string& s);

struct ExampleMeta {
  std::string id;
  int user_id = 0;
  int domain_id = 0;
  SplitTag split = SplitTag::train;
  Setting setting = Setting::warm;
  int position = 0;  // 1-indexed position of the positive in the user's sequence (0 for synthesized)
  CandidateSlate slate;
  std::vector<int> history;
};

struct InstructionExample {
  std::string x;
  std::string y;
  ExampleMeta meta;
};

void to_json(nlohmann::json& j, const CandidateSlate& s);
void from_json(const nlohmann::json& j, CandidateSlate& s);
void to_json(nlohmann::json& j, const InstructionExample& e);
void from_json(const nlohmann::json& j, InstructionExample& e);

struct SplitSpec {
  Setting setting = Setting::warm;
  std::uint64_t seed = 0;
  std::vector<InstructionExample> train;
  std::vector<InstructionExample> validation;
  std::vector<InstructionExample> test;
  int skipped_short = 0;
};

/// Samples `n_neg` distinct negatives from `domain` items the user never interacted
/// with (holdout items excluded) and shuffles the slate per (user, positive, seed).
CandidateSlate build_slate(const World& world, const InteractionSequence& seq, int positive, int n_neg,
                           std::uint64_t seed);

/// Fixed single-line template; titles joined with "; ".
std::string render_prompt(const std::vector<std::string>& history_titles,
                          const std::vector<std::string>& candidate_titles);
InstructionExample render_instruction(const std::vector<int>& history, const CandidateSlate& slate, const World& world);

/// Per user: positions 2..L-2 train, L-1 validation, L test. The new_item setting
/// keeps train/validation and replaces each target-domain test positive with a
/// holdout item drawn by the user's taste.
SplitSpec leave_one_out_split(const std::vector<InteractionSequence>& sequences, Setting setting, const World& world,
                              std::uint64_t seed, int n_neg = kDefaultNegatives);

/// Uniform ⌈percent·N/100⌉ subset; nested across percents for a fixed seed.
std::vector<InstructionExample> few_shot_subsample(const std::vector<InstructionExample>& train, double percent,
                                                   std::uint64_t seed);

/// Additional unlabeled prompts from the test distribution: replica r re-draws the
/// slate of every test example with a different seed. Replica 0 is the test set itself.
std::vector<InstructionExample> slate_replicas(const std::vector<InstructionExample>& test, const World& world,
                                               const std::vector<InteractionSequence>& sequences, int replicas,
                                               std::uint64_t seed);

/// Word-boundary occurrences of `title` in `text` (a following ';' or '.' counts as a boundary).
int count_title_occurrences(std::string_view text, std::string_view title);

/// Prompt ids with a leading BOS.
std::vector<TokenId> encode_prompt(const Tokenizer& tok, const InstructionExample& e);
/// Title words followed by EOS.
std::vector<TokenId> encode_response(const Tokenizer& tok, const std::string& title);

void write_examples_jsonl(const std::filesystem::path& path, const std::vector<InstructionExample>& examples,
                          const std::string& vocab_fingerprint);
std::vector<InstructionExample> read_examples_jsonl(const std::filesystem::path& path,
                                                    std::string* vocab_fingerprint = nullptr);

}  // namespace cocktail
