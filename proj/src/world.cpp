#include "cocktail/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace cocktail {

namespace {

// Attribute vocabulary. Distinct from the instruction template words.
const std::vector<std::string>& word_pool() {
  static const std::vector<std::string> words{
      "crimson", "azure",   "amber",   "ivory",   "olive",   "scarlet", "teal",    "violet",  "golden",
      "silver",  "copper",  "onyx",    "coral",   "indigo",  "maroon",  "jade",    "wooden",  "woolen",
      "velvet",  "linen",   "leather", "ceramic", "glass",   "steel",   "bamboo",  "marble",  "canvas",
      "silk",    "rustic",  "modern",  "vintage", "retro",   "classic", "minimal", "bold",    "gentle",
      "sturdy",  "compact", "deluxe",  "petite",  "grand",   "slim",    "cozy",    "breezy",  "sunny",
      "misty",   "frosty",  "stormy",  "quiet",   "lively",  "spicy",   "sweet",   "smoky",   "zesty",
      "floral",  "herbal",  "citrus",  "mint",    "nordic",  "alpine",  "coastal", "desert",  "urban",
      "rural",   "tropic",  "lunar",   "solar",   "cosmic",  "atomic",  "digital", "analog",  "acoustic",
      "electric", "magnetic", "hybrid", "folding", "portable", "travel", "pocket",  "family",  "junior",
      "senior",  "royal",   "noble",   "humble",  "brave",   "clever",  "swift",   "steady",  "nimble",
      "fuzzy",   "glossy",  "matte",   "shiny",   "dusty",   "polished", "woven",  "knitted", "carved",
      "painted", "striped", "dotted",  "plaid",   "checked", "twisted", "layered", "quilted", "padded",
      "puzzle",  "story",   "garden",  "harbor",  "meadow",  "canyon",  "forest",  "island",  "river",
      "summit",  "valley",  "prairie", "tundra",  "lagoon",  "orchard", "village", "castle",  "bridge",
      "lantern", "compass", "anchor",  "feather", "pebble",  "ember",   "crystal", "thunder", "shadow"};
  return words;
}

const std::vector<std::string>& noun_pool() {
  static const std::vector<std::string> nouns{"gadget", "novel", "garment", "toyware", "kitchenware",
                                              "gearset", "cosmetic", "album"};
  return nouns;
}

}  // namespace

void WorldConfig::validate() const {
  if (n_domains < 2 || items_per_domain < 1 || users_per_domain < 1 || shared_attr_vocab < 1 ||
      private_attr_vocab_per_domain < 1 || attrs_per_item < 1) {
    throw ContractError("world config: counts must be >= 1 (and at least two domains)");
  }
  if (!(new_item_fraction > 0.0 && new_item_fraction < 0.5)) {
    throw ContractError("world config: new_item_fraction must lie in (0, 0.5)");
  }
  if (seq_len_min < 3 || seq_len_max < seq_len_min) throw ContractError("world config: need 3 <= seq_len_min <= seq_len_max");
  if (attrs_per_item - 1 > private_attr_vocab_per_domain) {
    throw GenerationError("world config: attrs_per_item exceeds the private vocabulary; enlarge the attr vocab");
  }
  if (beta < 0.0) throw ContractError("world config: beta must be non-negative");
}

int WorldConfig::holdout_count() const {
  return static_cast<int>(std::llround(new_item_fraction * static_cast<double>(items_per_domain)));
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"n_domains", c.n_domains},
       {"items_per_domain", c.items_per_domain},
       {"users_per_domain", c.users_per_domain},
       {"shared_attr_vocab", c.shared_attr_vocab},
       {"private_attr_vocab_per_domain", c.private_attr_vocab_per_domain},
       {"attrs_per_item", c.attrs_per_item},
       {"seq_len_min", c.seq_len_min},
       {"seq_len_max", c.seq_len_max},
       {"beta", c.beta},
       {"new_item_fraction", c.new_item_fraction},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  const WorldConfig d;
  c.n_domains = j.value("n_domains", d.n_domains);
  c.items_per_domain = j.value("items_per_domain", d.items_per_domain);
  c.users_per_domain = j.value("users_per_domain", d.users_per_domain);
  c.shared_attr_vocab = j.value("shared_attr_vocab", d.shared_attr_vocab);
  c.private_attr_vocab_per_domain = j.value("private_attr_vocab_per_domain", d.private_attr_vocab_per_domain);
  c.attrs_per_item = j.value("attrs_per_item", d.attrs_per_item);
  c.seq_len_min = j.value("seq_len_min", d.seq_len_min);
  c.seq_len_max = j.value("seq_len_max", d.seq_len_max);
  c.beta = j.value("beta", d.beta);
  c.new_item_fraction = j.value("new_item_fraction", d.new_item_fraction);
  c.seed = j.value("seed", d.seed);
}

bool World::is_holdout(int item_id) const {
  return std::binary_search(holdout_ids.begin(), holdout_ids.end(), item_id);
}

std::vector<int> World::items_in_domain(int domain) const {
  std::vector<int> out;
  for (const Item& it : items) {
    if (it.domain_id == domain) out.push_back(it.item_id);
  }
  return out;
}

World gen_world(const WorldConfig& config) {
  config.validate();
  World w;
  w.config = config;

  const int n_attr = config.shared_attr_vocab + config.n_domains * config.private_attr_vocab_per_domain;
  const auto& pool = word_pool();
  for (int i = 0; i < n_attr; ++i) {
    w.attribute_words.push_back(i < static_cast<int>(pool.size()) ? pool[static_cast<std::size_t>(i)]
                                                                   : "attr" + std::to_string(i));
  }
  for (int d = 0; d < config.n_domains; ++d) {
    w.domain_nouns.push_back(d < static_cast<int>(noun_pool().size()) ? noun_pool()[static_cast<std::size_t>(d)]
                                                                       : "category" + std::to_string(d));
  }

  // One shared word plus (attrs_per_item - 1) private words per item.
  const int n_private = config.attrs_per_item - 1;
  double combos = config.shared_attr_vocab;
  for (int i = 0; i < n_private; ++i) {
    combos *= static_cast<double>(config.private_attr_vocab_per_domain - i) / static_cast<double>(i + 1);
  }
  if (combos < config.items_per_domain) {
    throw GenerationError("world: only " + std::to_string(static_cast<long long>(combos)) +
                          " distinct titles per domain for " + std::to_string(config.items_per_domain) +
                          " items; increase shared_attr_vocab or private_attr_vocab_per_domain");
  }

  Rng item_rng(derive_seed(config.seed, {1}));
  for (int d = 0; d < config.n_domains; ++d) {
    const int private_base = config.shared_attr_vocab + d * config.private_attr_vocab_per_domain;
    std::set<std::vector<int>> used;
    while (static_cast<int>(used.size()) < config.items_per_domain) {
      std::vector<int> attrs{static_cast<int>(uniform_index(static_cast<std::size_t>(config.shared_attr_vocab), item_rng))};
      std::vector<int> priv(static_cast<std::size_t>(config.private_attr_vocab_per_domain));
      for (std::size_t i = 0; i < priv.size(); ++i) priv[i] = private_base + static_cast<int>(i);
      std::shuffle(priv.begin(), priv.end(), item_rng);
      priv.resize(static_cast<std::size_t>(n_private));
      std::sort(priv.begin(), priv.end());
      attrs.insert(attrs.end(), priv.begin(), priv.end());
      if (!used.insert(attrs).second) continue;
      Item it;
      it.item_id = static_cast<int>(w.items.size());
      it.domain_id = d;
      it.attrs = attrs;
      for (int a : attrs) it.title += w.attribute_words[static_cast<std::size_t>(a)] + " ";
      it.title += w.domain_nouns[static_cast<std::size_t>(d)];
      w.items.push_back(std::move(it));
    }
  }

  std::vector<int> target_items = w.items_in_domain(w.target_domain());
  Rng holdout_rng(derive_seed(config.seed, {2}));
  std::shuffle(target_items.begin(), target_items.end(), holdout_rng);
  w.holdout_ids.assign(target_items.begin(), target_items.begin() + config.holdout_count());
  std::sort(w.holdout_ids.begin(), w.holdout_ids.end());

  for (int d = 0; d < config.n_domains; ++d) {
    for (int i = 0; i < config.users_per_domain; ++i) {
      UserProfile u;
      u.user_id = static_cast<int>(w.users.size());
      u.home_domain = d;
      Rng rng(derive_seed(config.seed, {3, static_cast<std::uint64_t>(u.user_id)}));
      u.shared_taste = randn(config.shared_attr_vocab, 1, 1.0, rng);
      for (int dd = 0; dd < config.n_domains; ++dd) {
        u.private_taste.push_back(randn(config.private_attr_vocab_per_domain, 1, 1.0, rng));
      }
      w.users.push_back(std::move(u));
    }
  }
  return w;
}

double taste_score(const World& world, const UserProfile& user, const Item& item) {
  const int shared = world.config.shared_attr_vocab;
  const int private_base = shared + item.domain_id * world.config.private_attr_vocab_per_domain;
  double s = 0.0;
  for (int a : item.attrs) {
    s += a < shared ? user.shared_taste(a)
                    : user.private_taste[static_cast<std::size_t>(item.domain_id)](a - private_base);
  }
  return s;
}

std::vector<int> eligible_items(const World& world, int domain) {
  std::vector<int> out;
  for (int id : world.items_in_domain(domain)) {
    if (!world.is_holdout(id)) out.push_back(id);
  }
  return out;
}

std::vector<int> sample_preference_sequence(const World& world, const UserProfile& user,
                                            const std::vector<int>& eligible, int length, double beta, Rng& rng) {
  if (length > static_cast<int>(eligible.size())) {
    throw GenerationError("sequence length " + std::to_string(length) + " exceeds " +
                          std::to_string(eligible.size()) + " eligible items");
  }
  std::vector<double> weights(eligible.size());
  for (std::size_t i = 0; i < eligible.size(); ++i) {
    weights[i] = beta * taste_score(world, user, world.item(eligible[i]));
  }
  const double m = *std::max_element(weights.begin(), weights.end());
  for (double& wt : weights) wt = std::exp(wt - m);

  std::vector<int> out;
  for (int t = 0; t < length; ++t) {
    std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
    const std::size_t pick = dist(rng);
    out.push_back(eligible[pick]);
    weights[pick] = 0.0;
  }
  return out;
}

std::vector<InteractionSequence> gen_sequences(const World& world) {
  std::vector<InteractionSequence> out;
  out.reserve(world.users.size());
  std::vector<std::vector<int>> eligible;
  for (int d = 0; d < world.config.n_domains; ++d) eligible.push_back(eligible_items(world, d));
  for (const UserProfile& u : world.users) {
    Rng rng(derive_seed(world.config.seed, {4, static_cast<std::uint64_t>(u.user_id)}));
    const int len = world.config.seq_len_min +
                    static_cast<int>(uniform_index(
                        static_cast<std::size_t>(world.config.seq_len_max - world.config.seq_len_min + 1), rng));
    InteractionSequence s;
    s.user_id = u.user_id;
    s.domain_id = u.home_domain;
    s.items = sample_preference_sequence(world, u, eligible[static_cast<std::size_t>(u.home_domain)], len,
                                         world.config.beta, rng);
    out.push_back(std::move(s));
  }
  return out;
}

void to_json(nlohmann::json& j, const World& w) {
  nlohmann::json items = nlohmann::json::array();
  for (const Item& it : w.items) {
    items.push_back({{"item_id", it.item_id}, {"domain_id", it.domain_id}, {"attrs", it.attrs}, {"title", it.title}});
  }
  nlohmann::json users = nlohmann::json::array();
  for (const UserProfile& u : w.users) {
    std::vector<std::vector<double>> priv;
    for (const Vector& v : u.private_taste) priv.emplace_back(v.data(), v.data() + v.size());
    users.push_back({{"user_id", u.user_id},
                     {"home_domain", u.home_domain},
                     {"shared_taste", std::vector<double>(u.shared_taste.data(), u.shared_taste.data() + u.shared_taste.size())},
                     {"private_taste", priv}});
  }
  j = {{"config", w.config},
       {"attribute_words", w.attribute_words},
       {"domain_nouns", w.domain_nouns},
       {"items", items},
       {"users", users},
       {"holdout_ids", w.holdout_ids}};
}

void from_json(const nlohmann::json& j, World& w) {
  w = World{};
  w.config = j.at("config").get<WorldConfig>();
  w.attribute_words = j.at("attribute_words").get<std::vector<std::string>>();
  w.domain_nouns = j.at("domain_nouns").get<std::vector<std::string>>();
  for (const auto& ji : j.at("items")) {
    Item it;
    it.item_id = ji.at("item_id").get<int>();
    it.domain_id = ji.at("domain_id").get<int>();
    it.attrs = ji.at("attrs").get<std::vector<int>>();
    it.title = ji.at("title").get<std::string>();
    w.items.push_back(std::move(it));
  }
  for (const auto& ju : j.at("users")) {
    UserProfile u;
    u.user_id = ju.at("user_id").get<int>();
    u.home_domain = ju.at("home_domain").get<int>();
    const auto shared = ju.at("shared_taste").get<std::vector<double>>();
    u.shared_taste = Eigen::Map<const Vector>(shared.data(), static_cast<Eigen::Index>(shared.size()));
    for (const auto& p : ju.at("private_taste").get<std::vector<std::vector<double>>>()) {
      u.private_taste.push_back(Eigen::Map<const Vector>(p.data(), static_cast<Eigen::Index>(p.size())));
    }
    w.users.push_back(std::move(u));
  }
  w.holdout_ids = j.at("holdout_ids").get<std::vector<int>>();
}

void to_json(nlohmann::json& j, const InteractionSequence& s) {
  j = {{"user_id", s.user_id}, {"domain_id", s.domain_id}, {"items", s.items}};
}

void from_json(const nlohmann::json& j, InteractionSequence& s) {
  s.user_id = j.at("user_id").get<int>();
  s.domain_id = j.at("domain_id").get<int>();
  s.items = j.at("items").get<std::vector<int>>();
}

void write_sequences_jsonl(const std::filesystem::path& path, const std::vector<InteractionSequence>& seqs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ContractError("cannot write " + path.string());
  for (const auto& s : seqs) out << nlohmann::json(s).dump() << '\n';
}

std::vector<InteractionSequence> read_sequences_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  std::vector<InteractionSequence> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<InteractionSequence>());
  }
  return out;
}

}  // namespace cocktail
