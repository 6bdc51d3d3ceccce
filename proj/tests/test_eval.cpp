#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "cocktail/checkpoint.hpp"
#include "cocktail/eval.hpp"
#include "cocktail/random.hpp"
#include "cocktail/training.hpp"
#include "doctest.h"

using namespace cocktail;

namespace {

struct Fixture {
  World world = gen_world(WorldConfig{});
  std::vector<InteractionSequence> seqs = gen_sequences(world);
  Tokenizer tok = Tokenizer::from_world(world);
  SplitSpec warm = leave_one_out_split(seqs, Setting::warm, world, 8);
  SplitSpec cold = leave_one_out_split(seqs, Setting::new_item, world, 8);
  BaseWeights base;

  Fixture() {
    ModelConfig c;
    c.d_model = 32;
    c.n_heads = 2;
    c.d_ff = 48;
    base = BaseWeights::initialize(c, 2);
    base.vocab_fingerprint = tok.fingerprint();
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

AdapterCheckpoint random_adapter(const ModelConfig& c, std::uint64_t seed) {
  AdapterCheckpoint a = AdapterCheckpoint::initialize(c, seed, Provenance{});
  Rng rng(seed);
  for (auto& [id, d] : a.deltas) d.b = randn(d.b.rows(), d.b.cols(), 0.05, rng);
  return a;
}

// DCG/IDCG over an explicit relevance vector.
double exhaustive_ndcg(const std::vector<int>& ranked, int positive, int k) {
  double dcg = 0.0;
  double idcg = 0.0;
  std::vector<double> rel;
  for (int id : ranked) rel.push_back(id == positive ? 1.0 : 0.0);
  std::vector<double> ideal = rel;
  std::sort(ideal.rbegin(), ideal.rend());
  for (int i = 0; i < std::min<int>(k, static_cast<int>(rel.size())); ++i) {
    dcg += (std::pow(2.0, rel[static_cast<std::size_t>(i)]) - 1.0) / std::log2(i + 2.0);
    idcg += (std::pow(2.0, ideal[static_cast<std::size_t>(i)]) - 1.0) / std::log2(i + 2.0);
  }
  return dcg / idcg;
}

}  // namespace

TEST_CASE("ndcg formula") {
  const std::vector<int> ranked{7, 3, 9, 1};
  CHECK(ndcg_at_k(ranked, 7, 1) == 1.0);
  CHECK(ndcg_at_k(ranked, 7, 3) == 1.0);
  CHECK(std::abs(ndcg_at_k(ranked, 3, 3) - 0.6309297535714575) < 1e-12);
  CHECK(ndcg_at_k(ranked, 3, 1) == 0.0);
  CHECK(ndcg_at_k(ranked, 1, 3) == 0.0);
  CHECK_THROWS_AS(ndcg_at_k(ranked, 42, 3), ContractError);
  CHECK_THROWS_AS(ndcg_at_k(ranked, 7, 0), ContractError);
}

TEST_CASE("ndcg matches exhaustive DCG over every permutation") {
  for (int n = 1; n <= 5; ++n) {
    std::vector<int> items(static_cast<std::size_t>(n));
    std::iota(items.begin(), items.end(), 100);
    do {
      for (int k = 1; k <= n; ++k) {
        for (int positive : items) REQUIRE(ndcg_at_k(items, positive, k) == exhaustive_ndcg(items, positive, k));
      }
    } while (std::next_permutation(items.begin(), items.end()));
  }
}

TEST_CASE("rank_slate") {
  const auto& f = fx();
  const auto& e = f.warm.test[0];
  const InferenceModel model(f.base, nullptr);
  const auto ranked = rank_slate(model, f.tok, f.world, e);
  REQUIRE(ranked.size() == 30);
  auto sorted = ranked;
  std::sort(sorted.begin(), sorted.end());
  auto order = e.meta.slate.order;
  std::sort(order.begin(), order.end());
  CHECK(sorted == order);
  CHECK(rank_slate(model, f.tok, f.world, e) == ranked);

  // candidates are scored independently of one another
  const auto prompt = encode_prompt(f.tok, e);
  std::vector<std::vector<TokenId>> conts;
  for (int id : e.meta.slate.order) conts.push_back(encode_response(f.tok, f.world.item(id).title));
  const auto fwd = score_continuations(model, prompt, conts);
  std::reverse(conts.begin(), conts.end());
  auto bwd = score_continuations(model, prompt, conts);
  std::reverse(bwd.begin(), bwd.end());
  CHECK(fwd == bwd);

  // an all-zero model scores every title the same: presentation order survives
  const BaseWeights flat = BaseWeights::zeros(f.base.config);
  CHECK(rank_slate(flat, nullptr, f.tok, f.world, e) == e.meta.slate.order);

  // unnormalized scoring is available and still returns a permutation
  CHECK(rank_slate(model, f.tok, f.world, e, false).size() == 30);
}

TEST_CASE("overfit pair ranks first") {
  const auto& f = fx();
  // two-candidate slate; train an adapter on that single example until it memorizes it
  InstructionExample e = f.warm.train[3];
  e.meta.slate.order = {e.meta.slate.negatives[0], e.meta.slate.positive};
  e.meta.slate.negatives.resize(1);
  TrainConfig c = TrainConfig::adapter_defaults();
  c.lr = 1e-2;
  c.epochs = 40;
  c.batch_size = 1;
  const auto r = train_lora({e}, f.tok, f.tok.fingerprint(), f.base, c, Provenance{});
  const auto ranked = rank_slate(f.base, &r.adapter, f.tok, f.world, e);
  CHECK(ranked.front() == e.meta.slate.positive);
}

TEST_CASE("unlabeled prompts") {
  const auto& f = fx();
  const auto target = target_test(f.warm, f.world);
  CHECK(target.size() == 200);
  const auto fifty = unlabeled_prompts(f.warm, f.world, f.seqs, f.tok, 50, 1);
  CHECK(fifty.size() == 50);
  CHECK(unlabeled_prompts(f.warm, f.world, f.seqs, f.tok, 50, 1) == fifty);
  CHECK(unlabeled_prompts(f.warm, f.world, f.seqs, f.tok, 50, 2) != fifty);
  const auto many = unlabeled_prompts(f.warm, f.world, f.seqs, f.tok, 500, 1);
  CHECK(many.size() == 500);
  std::set<std::vector<TokenId>> distinct(many.begin(), many.end());
  CHECK(distinct.size() == 500);
  // prompts never carry the answer
  for (const auto& p : many) CHECK(p.back() != kEosToken);
}

TEST_CASE("evaluate_variants") {
  const auto& f = fx();
  const AdapterCheckpoint g = random_adapter(f.base.config, 1);
  const AdapterCheckpoint s = random_adapter(f.base.config, 2);
  const std::string hg = encode_adapter(g), hs = encode_adapter(s), hb = encode_base(f.base);

  SplitSpec warm = f.warm, cold = f.cold;
  // keep the run short: a slice of the target-domain test users
  auto shrink = [&](SplitSpec& sp) {
    auto t = target_test(sp, f.world);
    t.resize(20);
    sp.test = t;
  };
  shrink(warm);
  shrink(cold);

  EvalInputs in{&f.world, &f.tok, &f.seqs, {&warm, &cold}, &f.base, &g, &s};
  AdaptConfig a;
  a.n_unlabeled = 6;
  a.grid_step = 0.25;
  a.gradient_steps = 2;
  const Evaluation e = evaluate_variants(in, a, {4});
  REQUIRE(e.reports.size() == 12);
  CHECK(e.adaptations.size() == 4);
  for (const auto& r : e.reports) {
    CHECK(r.n_users == 20);
    CHECK(r.ndcg1 <= r.ndcg3);
    CHECK(r.ndcg3 <= 1.0);
    CHECK(r.seed == 4);
    if (r.variant == Variant::general_only) {
      CHECK(r.spec->lambda1 == 1.0);
      CHECK(r.spec->lambda2 == 0.0);
    }
    if (r.variant == Variant::base_zero_shot) CHECK_FALSE(r.spec.has_value());
    if (r.variant == Variant::cocktail_grid) CHECK(r.spec->method == MergeMethod::grid);
  }
  // purity
  CHECK(encode_adapter(g) == hg);
  CHECK(encode_adapter(s) == hs);
  CHECK(encode_base(f.base) == hb);

  // deterministic reports
  const Evaluation again = evaluate_variants(in, a, {4});
  CHECK(reports_csv(again.reports) == reports_csv(e.reports));
  CHECK(evaluation_json(again).dump() == evaluation_json(e).dump());

  const std::string csv = reports_csv(e.reports);
  CHECK(csv.rfind("schema_version,setting,variant,seed,n_users,ndcg1,ndcg3,lambda1,lambda2,method\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
  const auto back = evaluation_json(e).at("reports").get<std::vector<MetricsReport>>();
  CHECK(back.size() == 12);
  CHECK(back[0].ndcg1 == e.reports[0].ndcg1);
}
