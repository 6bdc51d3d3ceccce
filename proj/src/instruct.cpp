#include "cocktail/instruct.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "cocktail/hash.hpp"

namespace cocktail {

namespace {

constexpr std::string_view kSystemLine = "You are a helpful recommendation assistant.";
constexpr std::string_view kHistoryLead = "The user has interacted with:";
constexpr std::string_view kCandidatesLead = "Candidates:";
constexpr std::string_view kQuestion = "Which item will the user like next? Answer with the item title.";
constexpr std::string_view kTitleJoin = "; ";

const std::vector<std::string>& special_words() {
  static const std::vector<std::string> specials{"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
  return specials;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

std::string join_titles(const std::vector<std::string>& titles) {
  std::string out;
  for (std::size_t i = 0; i < titles.size(); ++i) {
    if (i > 0) out += kTitleJoin;
    out += titles[i];
  }
  return out;
}

std::vector<std::string> titles_of(const std::vector<int>& ids, const World& world) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(world.item(id).title);
  return out;
}

const InteractionSequence& sequence_for(const std::vector<InteractionSequence>& seqs, int user_id) {
  for (const auto& s : seqs) {
    if (s.user_id == user_id) return s;
  }
  throw ContractError("no sequence for user " + std::to_string(user_id));
}

}  // namespace

Tokenizer Tokenizer::from_world(const World& world) {
  Tokenizer t;
  auto add = [&t](const std::string& w) {
    if (t.index_.find(w) != t.index_.end()) return;
    t.index_.emplace(w, static_cast<TokenId>(t.words_.size()));
    t.words_.push_back(w);
  };
  for (const auto& s : special_words()) add(s);
  for (std::string_view line : {kSystemLine, kHistoryLead, kCandidatesLead, kQuestion}) {
    for (const auto& w : split_words(line)) add(w);
  }
  for (const auto& w : world.attribute_words) add(w);
  for (const auto& n : world.domain_nouns) {
    add(n);
    add(n + ";");
    add(n + ".");
  }
  return t;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& w : split_words(text)) {
    auto it = index_.find(w);
    out.push_back(it == index_.end() ? kUnkToken : it->second);
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ' ';
    const TokenId id = ids[i];
    out += (id >= 0 && id < size()) ? words_[static_cast<std::size_t>(id)] : words_[kUnkToken];
  }
  return out;
}

TokenId Tokenizer::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkToken : it->second;
}

std::string Tokenizer::fingerprint() const {
  Sha256 h;
  for (const auto& w : words_) {
    h.update(w);
    h.update(std::string_view("\n"));
  }
  return h.hex_digest();
}

std::string to_string(SplitTag s) {
  switch (s) {
    case SplitTag::train: return "train";
    case SplitTag::validation: return "validation";
    case SplitTag::test: return "test";
  }
  return "?";
}

std::string to_string(Setting s) { return s == Setting::warm ? "warm" : "new_item"; }

Setting setting_from_string(const std::string& s) {
  if (s == "warm") return Setting::warm;
  if (s == "new_item") return Setting::new_item;
  throw ContractError("unknown setting '" + s + "' (expected warm or new_item)");
}

namespace {
SplitTag split_from_string(const std::string& s) {
  if (s == "train") return SplitTag::train;
  if (s == "validation") return SplitTag::validation;
  if (s == "test") return SplitTag::test;
  throw ContractError("unknown split '" + s + "'");
}
}  // namespace

void to_json(nlohmann::json& j, const CandidateSlate& s) {
  j = {{"positive", s.positive}, {"negatives", s.negatives}, {"order", s.order}};
}

void from_json(const nlohmann::json& j, CandidateSlate& s) {
  s.positive = j.at("positive").get<int>();
  s.negatives = j.at("negatives").get<std::vector<int>>();
  s.order = j.at("order").get<std::vector<int>>();
}

void to_json(nlohmann::json& j, const InstructionExample& e) {
  j = {{"x", e.x},
       {"y", e.y},
       {"meta",
        {{"id", e.meta.id},
         {"user_id", e.meta.user_id},
         {"domain_id", e.meta.domain_id},
         {"split", to_string(e.meta.split)},
         {"setting", to_string(e.meta.setting)},
         {"position", e.meta.position},
         {"history", e.meta.history},
         {"slate", e.meta.slate},
         {"template_version", kTemplateVersion}}}};
}

void from_json(const nlohmann::json& j, InstructionExample& e) {
  e.x = j.at("x").get<std::string>();
  e.y = j.at("y").get<std::string>();
  const auto& m = j.at("meta");
  e.meta.id = m.at("id").get<std::string>();
  e.meta.user_id = m.at("user_id").get<int>();
  e.meta.domain_id = m.at("domain_id").get<int>();
  e.meta.split = split_from_string(m.at("split").get<std::string>());
  e.meta.setting = setting_from_string(m.at("setting").get<std::string>());
  e.meta.position = m.at("position").get<int>();
  e.meta.history = m.at("history").get<std::vector<int>>();
  e.meta.slate = m.at("slate").get<CandidateSlate>();
}

CandidateSlate build_slate(const World& world, const InteractionSequence& seq, int positive, int n_neg,
                           std::uint64_t seed) {
  const int domain = world.item(positive).domain_id;
  std::unordered_set<int> interacted(seq.items.begin(), seq.items.end());
  std::vector<int> pool;
  for (int id : world.items_in_domain(domain)) {
    if (id != positive && !interacted.count(id) && !world.is_holdout(id)) pool.push_back(id);
  }
  if (static_cast<int>(pool.size()) < n_neg) {
    throw SlateError("domain " + std::to_string(domain) + " has only " + std::to_string(pool.size()) +
                     " eligible negatives for user " + std::to_string(seq.user_id) + ", need " + std::to_string(n_neg));
  }
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(seq.user_id), static_cast<std::uint64_t>(positive)}));
  std::shuffle(pool.begin(), pool.end(), rng);
  CandidateSlate s;
  s.positive = positive;
  s.negatives.assign(pool.begin(), pool.begin() + n_neg);
  s.order = s.negatives;
  s.order.push_back(positive);
  std::shuffle(s.order.begin(), s.order.end(), rng);
  return s;
}

std::string render_prompt(const std::vector<std::string>& history_titles,
                          const std::vector<std::string>& candidate_titles) {
  std::string x(kSystemLine);
  x += ' ';
  x += kHistoryLead;
  x += ' ' + join_titles(history_titles) + ". ";
  x += kCandidatesLead;
  x += ' ' + join_titles(candidate_titles) + ". ";
  x += kQuestion;
  return x;
}

InstructionExample render_instruction(const std::vector<int>& history, const CandidateSlate& slate, const World& world) {
  InstructionExample e;
  e.x = render_prompt(titles_of(history, world), titles_of(slate.order, world));
  e.y = world.item(slate.positive).title + " <eos>";
  e.meta.slate = slate;
  e.meta.history = history;
  return e;
}

SplitSpec leave_one_out_split(const std::vector<InteractionSequence>& sequences, Setting setting, const World& world,
                              std::uint64_t seed, int n_neg) {
  SplitSpec spec;
  spec.setting = setting;
  spec.seed = seed;
  for (const InteractionSequence& seq : sequences) {
    const int len = static_cast<int>(seq.items.size());
    if (len < 3) {
      ++spec.skipped_short;
      continue;
    }
    auto make = [&](int position, SplitTag tag) {
      const int positive = seq.items[static_cast<std::size_t>(position - 1)];
      std::vector<int> history(seq.items.begin(), seq.items.begin() + (position - 1));
      InstructionExample e = render_instruction(history, build_slate(world, seq, positive, n_neg, seed), world);
      e.meta.id = "u" + std::to_string(seq.user_id) + "-p" + std::to_string(position);
      e.meta.user_id = seq.user_id;
      e.meta.domain_id = seq.domain_id;
      e.meta.split = tag;
      e.meta.setting = setting;
      e.meta.position = position;
      return e;
    };
    for (int p = 2; p <= len - 2; ++p) spec.train.push_back(make(p, SplitTag::train));
    spec.validation.push_back(make(len - 1, SplitTag::validation));
    if (setting == Setting::warm) {
      InstructionExample e = make(len, SplitTag::test);
      e.meta.id += "-warm";
      spec.test.push_back(std::move(e));
    } else if (seq.domain_id == world.target_domain()) {
      const UserProfile& user = world.user(seq.user_id);
      Rng rng(derive_seed(seed, {0x4e49, static_cast<std::uint64_t>(seq.user_id)}));
      const int positive = sample_preference_sequence(world, user, world.holdout_ids, 1, world.config.beta, rng).front();
      std::vector<int> history(seq.items.begin(), seq.items.end() - 1);
      InstructionExample e = render_instruction(history, build_slate(world, seq, positive, n_neg, seed), world);
      e.meta.id = "u" + std::to_string(seq.user_id) + "-p" + std::to_string(len) + "-new_item";
      e.meta.user_id = seq.user_id;
      e.meta.domain_id = seq.domain_id;
      e.meta.split = SplitTag::test;
      e.meta.setting = setting;
      e.meta.position = len;
      spec.test.push_back(std::move(e));
    }
  }
  return spec;
}

std::vector<InstructionExample> few_shot_subsample(const std::vector<InstructionExample>& train, double percent,
                                                   std::uint64_t seed) {
  if (!(percent > 0.0 && percent <= 100.0)) {
    throw ContractError("few_shot_subsample: percent must lie in (0, 100], got " + std::to_string(percent));
  }
  const auto n = train.size();
  const auto k = static_cast<std::size_t>(std::ceil(percent * static_cast<double>(n) / 100.0 - 1e-9));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {0xf5}));
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(k, n));
  std::sort(idx.begin(), idx.end());
  std::vector<InstructionExample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(train[i]);
  return out;
}

std::vector<InstructionExample> slate_replicas(const std::vector<InstructionExample>& test, const World& world,
                                               const std::vector<InteractionSequence>& sequences, int replicas,
                                               std::uint64_t seed) {
  std::vector<InstructionExample> out;
  for (int r = 0; r < replicas; ++r) {
    for (const InstructionExample& e : test) {
      if (r == 0) {
        out.push_back(e);
        continue;
      }
      const InteractionSequence& seq = sequence_for(sequences, e.meta.user_id);
      const CandidateSlate slate =
          build_slate(world, seq, e.meta.slate.positive, static_cast<int>(e.meta.slate.negatives.size()),
                      derive_seed(seed, {static_cast<std::uint64_t>(r)}));
      InstructionExample copy = render_instruction(e.meta.history, slate, world);
      copy.meta = e.meta;
      copy.meta.slate = slate;
      copy.meta.id += "-r" + std::to_string(r);
      out.push_back(std::move(copy));
    }
  }
  return out;
}

int count_title_occurrences(std::string_view text, std::string_view title) {
  int count = 0;
  for (std::size_t pos = text.find(title); pos != std::string_view::npos; pos = text.find(title, pos + 1)) {
    const bool left = pos == 0 || text[pos - 1] == ' ';
    const std::size_t end = pos + title.size();
    const bool right = end == text.size() || text[end] == ' ' || text[end] == ';' || text[end] == '.';
    if (left && right) ++count;
  }
  return count;
}

std::vector<TokenId> encode_prompt(const Tokenizer& tok, const InstructionExample& e) {
  std::vector<TokenId> ids{kBosToken};
  const auto body = tok.encode(e.x);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

std::vector<TokenId> encode_response(const Tokenizer& tok, const std::string& title) {
  auto ids = tok.encode(title);
  ids.push_back(kEosToken);
  return ids;
}

void write_examples_jsonl(const std::filesystem::path& path, const std::vector<InstructionExample>& examples,
                          const std::string& vocab_fingerprint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ContractError("cannot write " + path.string());
  for (const auto& e : examples) {
    nlohmann::json j = e;
    j["meta"]["vocab_fingerprint"] = vocab_fingerprint;
    out << j.dump() << '\n';
  }
}

std::vector<InstructionExample> read_examples_jsonl(const std::filesystem::path& path, std::string* vocab_fingerprint) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open " + path.string());
  std::vector<InstructionExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (vocab_fingerprint != nullptr) *vocab_fingerprint = j.at("meta").value("vocab_fingerprint", "");
    out.push_back(j.get<InstructionExample>());
  }
  return out;
}

}  // namespace cocktail
