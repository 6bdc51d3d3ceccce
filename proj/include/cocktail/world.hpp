#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "cocktail/random.hpp"
#include "cocktail/tensor.hpp"

namespace cocktail {

class GenerationError : public ContractError {
 public:
  using ContractError::ContractError;
};

struct WorldConfig {
  int n_domains = 4;  // the last domain is the target; the rest form the general pool
  int items_per_domain = 120;
  int users_per_domain = 200;
  int shared_attr_vocab = 24;
  int private_attr_vocab_per_domain = 16;
  int attrs_per_item = 3;
  int seq_len_min = 6;
  int seq_len_max = 14;
  double beta = 2.0;
  double new_item_fraction = 0.15;
  std::uint64_t seed = 7;

  void validate() const;
  int holdout_count() const;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

struct Item {
  int item_id = 0;
  int domain_id = 0;
  std::vector<int> attrs;  // indices into World::attribute_words; shared word first
  std::string title;
};

struct UserProfile {
  int user_id = 0;
  int home_domain = 0;
  Vector shared_taste;
  std::vector<Vector> private_taste;  // one per domain
};

struct InteractionSequence {
  int user_id = 0;
  int domain_id = 0;
  std::vector<int> items;  // chronological
};

struct World {
  WorldConfig config;
  std::vector<std::string> attribute_words;  // shared pool, then each domain's private pool
  std::vector<std::string> domain_nouns;
  std::vector<Item> items;
  std::vector<UserProfile> users;
  std::vector<int> holdout_ids;  // sorted; target-domain items withheld from training

  int target_domain() const { return config.n_domains - 1; }
  bool is_holdout(int item_id) const;
  bool is_shared_attr(int attr) const { return attr < config.shared_attr_vocab; }
  std::vector<int> items_in_domain(int domain) const;
  const Item& item(int id) const { return items.at(static_cast<std::size_t>(id)); }
  const UserProfile& user(int id) const { return users.at(static_cast<std::size_t>(id)); }
};

void to_json(nlohmann::json& j, const World& w);
void from_json(const nlohmann::json& j, World& w);

World gen_world(const WorldConfig& config);

/// ⟨taste, item-attribute indicator⟩ using the shared taste and the item domain's private taste.
double taste_score(const World& world, const UserProfile& user, const Item& item);

/// Draws `length` distinct items from `eligible` with probability ∝ exp(beta·score).
std::vector<int> sample_preference_sequence(const World& world, const UserProfile& user,
                                            const std::vector<int>& eligible, int length, double beta, Rng& rng);

/// Non-holdout items of `domain`.
std::vector<int> eligible_items(const World& world, int domain);

/// One sequence per user, in their home domain, excluding holdout items.
std::vector<InteractionSequence> gen_sequences(const World& world);

void to_json(nlohmann::json& j, const InteractionSequence& s);
void from_json(const nlohmann::json& j, InteractionSequence& s);

void write_sequences_jsonl(const std::filesystem::path& path, const std::vector<InteractionSequence>& seqs);
std::vector<InteractionSequence> read_sequences_jsonl(const std::filesystem::path& path);

}  // namespace cocktail
