#include "cocktail/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cocktail/random.hpp"

namespace cocktail {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::general_only: return "general_only";
    case Variant::specific_only: return "specific_only";
    case Variant::weight_average: return "weight_average";
    case Variant::cocktail_grid: return "cocktail_grid";
    case Variant::cocktail_gradient: return "cocktail_gradient";
    case Variant::base_zero_shot: return "base_zero_shot";
  }
  return "base_zero_shot";
}

std::vector<Variant> all_variants() {
  return {Variant::general_only,  Variant::specific_only,     Variant::weight_average,
          Variant::cocktail_grid, Variant::cocktail_gradient, Variant::base_zero_shot};
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants()) {
    if (to_string(v) == s) return v;
  }
  throw ContractError("unknown variant '" + s + "'");
}

std::vector<int> rank_slate(const InferenceModel& model, const Tokenizer& tok, const World& world,
                            const InstructionExample& example, bool normalize) {
  const auto& order = example.meta.slate.order;
  if (order.empty()) throw ContractError("rank_slate: empty slate in " + example.meta.id);
  std::vector<std::vector<TokenId>> conts;
  conts.reserve(order.size());
  for (int id : order) conts.push_back(encode_response(tok, world.item(id).title));
  const std::vector<double> scores = score_continuations(model, encode_prompt(tok, example), conts, normalize);

  std::vector<std::size_t> idx(order.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<int> ranked;
  ranked.reserve(idx.size());
  for (std::size_t i : idx) ranked.push_back(order[i]);
  return ranked;
}

std::vector<int> rank_slate(const BaseWeights& base, const AdapterCheckpoint* adapter, const Tokenizer& tok,
                            const World& world, const InstructionExample& example, bool normalize) {
  return rank_slate(InferenceModel(base, adapter), tok, world, example, normalize);
}

double ndcg_at_k(const std::vector<int>& ranked, int positive, int k) {
  if (k < 1) throw ContractError("ndcg_at_k: k must be >= 1");
  const auto it = std::find(ranked.begin(), ranked.end(), positive);
  if (it == ranked.end()) throw ContractError("ndcg_at_k: positive " + std::to_string(positive) + " not in list");
  const auto rank = static_cast<int>(it - ranked.begin()) + 1;
  return rank <= k ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
}

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = {{"setting", to_string(r.setting)},
       {"variant", to_string(r.variant)},
       {"ndcg1", r.ndcg1},
       {"ndcg3", r.ndcg3},
       {"n_users", r.n_users},
       {"seed", r.seed}};
  j["merge_spec"] = r.spec ? nlohmann::json(*r.spec) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.setting = setting_from_string(j.at("setting").get<std::string>());
  r.variant = variant_from_string(j.at("variant").get<std::string>());
  r.ndcg1 = j.at("ndcg1").get<double>();
  r.ndcg3 = j.at("ndcg3").get<double>();
  r.n_users = j.at("n_users").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("merge_spec") && !j.at("merge_spec").is_null()) r.spec = j.at("merge_spec").get<MergeSpec>();
}

SlateMetrics evaluate_slates(const BaseWeights& base, const AdapterCheckpoint* adapter, const Tokenizer& tok,
                             const World& world, const std::vector<InstructionExample>& examples, bool normalize) {
  const InferenceModel model(base, adapter);
  SlateMetrics m;
  for (const auto& e : examples) {
    const auto ranked = rank_slate(model, tok, world, e, normalize);
    m.ndcg1 += ndcg_at_k(ranked, e.meta.slate.positive, 1);
    m.ndcg3 += ndcg_at_k(ranked, e.meta.slate.positive, 3);
    ++m.n;
  }
  if (m.n > 0) {
    m.ndcg1 /= m.n;
    m.ndcg3 /= m.n;
  }
  return m;
}

std::vector<InstructionExample> target_test(const SplitSpec& split, const World& world) {
  std::vector<InstructionExample> out;
  for (const auto& e : split.test) {
    if (e.meta.domain_id == world.target_domain()) out.push_back(e);
  }
  return out;
}

std::vector<std::vector<TokenId>> unlabeled_prompts(const SplitSpec& split, const World& world,
                                                    const std::vector<InteractionSequence>& sequences,
                                                    const Tokenizer& tok, int n, std::uint64_t seed) {
  const auto test = target_test(split, world);
  if (test.empty()) throw ContractError("unlabeled_prompts: no target-domain test examples");
  const int replicas = static_cast<int>((static_cast<std::size_t>(n) + test.size() - 1) / test.size());
  const auto pool = slate_replicas(test, world, sequences, replicas, derive_seed(seed, {0xada}));
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, {0xada, 1}));
  std::vector<std::vector<TokenId>> out;
  for (int i = 0; i < n; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + uniform_index(idx.size() - static_cast<std::size_t>(i), rng);
    std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    out.push_back(encode_prompt(tok, pool[idx[static_cast<std::size_t>(i)]]));
  }
  return out;
}

Evaluation evaluate_variants(const EvalInputs& in, const AdaptConfig& adapt_cfg, const std::vector<std::uint64_t>& seeds,
                             const std::vector<Variant>& variants) {
  if (!in.world || !in.tok || !in.sequences || !in.base || !in.general || !in.specific) {
    throw ContractError("evaluate_variants: missing input");
  }
  if (in.general->fingerprint != in.specific->fingerprint) {
    throw IncompatibleAdapterError("evaluate_variants: general and specific adapters differ in config");
  }
  Evaluation out;
  for (std::uint64_t seed : seeds) {
    for (const SplitSpec* split : in.splits) {
      const auto test = target_test(*split, *in.world);
      std::optional<std::vector<std::vector<TokenId>>> prompts;
      for (Variant v : variants) {
        const auto t0 = std::chrono::steady_clock::now();
        MetricsReport r;
        r.setting = split->setting;
        r.variant = v;
        r.seed = seed;
        std::optional<AdapterCheckpoint> merged;
        if (v == Variant::cocktail_grid || v == Variant::cocktail_gradient) {
          if (!prompts) prompts = unlabeled_prompts(*split, *in.world, *in.sequences, *in.tok, adapt_cfg.n_unlabeled, seed);
          AdaptConfig cfg = adapt_cfg;
          cfg.seed = seed;
          cfg.method = v == Variant::cocktail_grid ? MergeMethod::grid : MergeMethod::gradient;
          AdaptResult a = adapt_coefficients(*in.base, *in.general, *in.specific, *prompts, cfg);
          r.spec = a.spec;
          out.adaptations.push_back({split->setting, seed, std::move(a)});
        } else if (v == Variant::general_only) {
          r.spec = MergeSpec::fixed(1.0);
        } else if (v == Variant::specific_only) {
          r.spec = MergeSpec::fixed(0.0);
        } else if (v == Variant::weight_average) {
          r.spec = MergeSpec::weight_average();
        }
        if (r.spec) merged = merge_adapters(*in.general, *in.specific, *r.spec);
        const SlateMetrics m = evaluate_slates(*in.base, merged ? &*merged : nullptr, *in.tok, *in.world, test);
        r.ndcg1 = m.ndcg1;
        r.ndcg3 = m.ndcg3;
        r.n_users = m.n;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.reports.push_back(std::move(r));
      }
    }
  }
  return out;
}

std::string reports_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out.precision(17);
  out << "schema_version,setting,variant,seed,n_users,ndcg1,ndcg3,lambda1,lambda2,method\n";
  for (const auto& r : reports) {
    out << kReportSchemaVersion << ',' << to_string(r.setting) << ',' << to_string(r.variant) << ',' << r.seed << ','
        << r.n_users << ',' << r.ndcg1 << ',' << r.ndcg3 << ',';
    if (r.spec) {
      out << r.spec->lambda1 << ',' << r.spec->lambda2 << ',' << to_string(r.spec->method);
    } else {
      out << ",,none";
    }
    out << '\n';
  }
  return out.str();
}

nlohmann::json evaluation_json(const Evaluation& e) {
  nlohmann::json adapts = nlohmann::json::array();
  for (const auto& a : e.adaptations) {
    nlohmann::json j = adapt_result_json(a.result);
    j["setting"] = to_string(a.setting);
    adapts.push_back(std::move(j));
  }
  return {{"schema_version", kReportSchemaVersion}, {"reports", e.reports}, {"adaptations", std::move(adapts)}};
}

void write_reports(const std::filesystem::path& csv, const std::filesystem::path& json, const Evaluation& e) {
  for (const auto& p : {csv, json}) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  }
  std::ofstream c(csv, std::ios::binary | std::ios::trunc);
  std::ofstream j(json, std::ios::binary | std::ios::trunc);
  if (!c || !j) throw ContractError("cannot write reports to " + csv.string());
  c << reports_csv(e.reports);
  j << evaluation_json(e).dump(2) << '\n';
}

}  // namespace cocktail
