#include <cmath>

#include "cocktail/checkpoint.hpp"
#include "cocktail/merge.hpp"
#include "cocktail/random.hpp"
#include "doctest.h"

using namespace cocktail;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 30;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 24;
  c.lora_rank = 4;
  return c;
}

AdapterCheckpoint random_adapter(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  AdapterCheckpoint a = AdapterCheckpoint::initialize(c, seed, Provenance{});
  Rng rng(seed + 7);
  for (auto& [id, d] : a.deltas) {
    d.a = randn(d.a.rows(), d.a.cols(), scale, rng);
    d.b = randn(d.b.rows(), d.b.cols(), scale, rng);
  }
  return a;
}

std::vector<std::vector<TokenId>> random_prompts(int n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<TokenId>> out(static_cast<std::size_t>(n));
  for (auto& p : out) {
    p.push_back(kBosToken);
    const std::size_t len = 3 + uniform_index(8, rng);
    for (std::size_t i = 0; i < len; ++i) p.push_back(static_cast<TokenId>(5 + uniform_index(static_cast<std::size_t>(vocab - 5), rng)));
  }
  return out;
}

}  // namespace

TEST_CASE("merge spec constraints") {
  CHECK_NOTHROW(MergeSpec::fixed(0.3).validate());
  MergeSpec bad = MergeSpec::fixed(0.3);
  bad.lambda2 = 0.71;
  CHECK_THROWS_AS(bad.validate(), ConstraintError);
  bad = MergeSpec::fixed(1.2);
  CHECK_THROWS_AS(bad.validate(), ConstraintError);
  MergeSpec wa = MergeSpec::weight_average();
  CHECK(wa.lambda1 == 0.5);
  wa.lambda1 = 0.4;
  wa.lambda2 = 0.6;
  CHECK_THROWS_AS(wa.validate(), ConstraintError);

  const MergeSpec back = nlohmann::json(MergeSpec::fixed(0.25)).get<MergeSpec>();
  CHECK(back.lambda2 == 0.75);
  CHECK(back.method == MergeMethod::fixed);

  AdaptConfig a;
  CHECK(a.k_tokens == 3);
  CHECK(a.n_unlabeled == 50);
  CHECK(a.grid_step == 0.05);
  a.grid_step = 0.6;
  CHECK_THROWS_AS(a.validate(), ContractError);
}

TEST_CASE("two by two hand example") {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 2;
  c.n_heads = 1;
  c.d_ff = 2;
  c.max_seq_len = 4;
  c.lora_rank = 1;
  c.lora_alpha = 2.0;
  c.lora_targets = {Projection::q};
  c.n_layers = 1;
  AdapterCheckpoint g = AdapterCheckpoint::initialize(c, 0, Provenance{});
  AdapterCheckpoint s = g;
  const TargetId id{0, Projection::q};
  g.deltas[id] = LoraDelta{(Matrix(1, 2) << 1, 0).finished(), (Matrix(2, 1) << 1, 0).finished()};
  s.deltas[id] = LoraDelta{(Matrix(1, 2) << 0, 1).finished(), (Matrix(2, 1) << 0, 1).finished()};

  const AdapterCheckpoint m = merge_adapters(g, s, MergeSpec::weight_average());
  CHECK(m.deltas.at(id).a == (Matrix(1, 2) << 0.5, 0.5).finished());
  CHECK(m.deltas.at(id).b == (Matrix(2, 1) << 0.5, 0.5).finished());
  const Matrix dw = effective_delta(m, id);
  CHECK(dw == Matrix::Constant(2, 2, 2.0 * 0.25));
  // factor merging is not delta averaging
  CHECK(dw != 0.5 * effective_delta(g, id) + 0.5 * effective_delta(s, id));
  CHECK(m.parameter_count() == g.parameter_count());
  CHECK(m.provenance.kind == ProvenanceKind::merged);
  CHECK(m.provenance.general_parent == g.payload_hash());
  CHECK(m.provenance.specific_parent == s.payload_hash());
  CHECK_THROWS_AS(effective_delta(m, TargetId{0, Projection::k}), ContractError);
}

TEST_CASE("endpoints and symmetry") {
  const ModelConfig c = small_config();
  const AdapterCheckpoint g = random_adapter(c, 1);
  const AdapterCheckpoint s = random_adapter(c, 2);
  const AdapterCheckpoint mg = merge_adapters(g, s, MergeSpec::fixed(1.0));
  const AdapterCheckpoint ms = merge_adapters(g, s, MergeSpec::fixed(0.0));
  CHECK(mg.payload_hash() == g.payload_hash());
  CHECK(ms.payload_hash() == s.payload_hash());

  const BaseWeights base = BaseWeights::initialize(c, 3);
  const std::vector<TokenId> toks{1, 6, 9, 12, 7};
  CHECK(forward_logits(base, &mg, toks) == forward_logits(base, &g, toks));
  CHECK(forward_logits(base, &ms, toks) == forward_logits(base, &s, toks));

  const AdapterCheckpoint ab = merge_adapters(g, s, MergeSpec::fixed(0.3));
  const AdapterCheckpoint ba = merge_adapters(s, g, MergeSpec::fixed(0.7));
  for (const auto& [id, d] : ab.deltas) {
    CHECK((d.a - ba.deltas.at(id).a).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((d.b - ba.deltas.at(id).b).cwiseAbs().maxCoeff() < 1e-15);
  }
  CHECK(effective_delta(mg, TargetId{1, Projection::v}) == effective_delta(g, TargetId{1, Projection::v}));

  // cross term: ΔW_m = λ1²ΔW_g + λ2²ΔW_s + λ1λ2 s (B_g A_s + B_s A_g)
  const TargetId id{0, Projection::q};
  const auto& gd = g.deltas.at(id);
  const auto& sd = s.deltas.at(id);
  const double l1 = 0.3, l2 = 0.7, sc = c.lora_scale();
  const Matrix expected = l1 * l1 * effective_delta(g, id) + l2 * l2 * effective_delta(s, id) +
                          l1 * l2 * sc * (gd.b * sd.a + sd.b * gd.a);
  CHECK((effective_delta(ab, id) - expected).cwiseAbs().maxCoeff() < 1e-12);

  ModelConfig other = c;
  other.lora_targets = {Projection::q, Projection::k};
  CHECK_THROWS_AS(merge_adapters(g, random_adapter(other, 4), MergeSpec::fixed(0.5)), IncompatibleAdapterError);
  MergeSpec off = MergeSpec::fixed(0.5);
  off.lambda2 = 0.6;
  CHECK_THROWS_AS(merge_adapters(g, s, off), ConstraintError);
}

TEST_CASE("effective delta rank") {
  ModelConfig c = small_config();
  c.lora_rank = 1;
  const AdapterCheckpoint a = random_adapter(c, 9);
  const Matrix dw = effective_delta(a, TargetId{0, Projection::v});
  // every column lies in the span of the first nonzero column
  const Eigen::Index j0 = [&] {
    Eigen::Index j = 0;
    while (dw.col(j).norm() == 0.0) ++j;
    return j;
  }();
  const Vector u = dw.col(j0).normalized();
  for (Eigen::Index j = 0; j < dw.cols(); ++j) {
    const Vector r = dw.col(j) - u * u.dot(dw.col(j));
    CHECK(r.norm() < 1e-10);
  }
  AdapterCheckpoint zero = a;
  for (auto& [id, d] : zero.deltas) d.b.setZero();
  CHECK(effective_delta(zero, TargetId{0, Projection::q}).isZero(0.0));
}

TEST_CASE("shannon entropy") {
  const std::vector<double> uniform(512, 1.0 / 512.0);
  CHECK(std::abs(shannon_entropy(uniform) - std::log(512.0)) < 1e-9);
  CHECK(shannon_entropy(std::vector<double>{0.0, 1.0, 0.0}) == 0.0);
  CHECK(std::abs(shannon_entropy(std::vector<double>{0.5, 0.25, 0.25}) - 1.0397208) < 1e-6);
  try {
    shannon_entropy(std::vector<double>{0.5, 0.2});
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("0.7") != std::string::npos);
  }
}

TEST_CASE("prefix entropy") {
  const ModelConfig c = small_config();
  const BaseWeights base = BaseWeights::initialize(c, 5);
  const AdapterCheckpoint g = random_adapter(c, 1);
  const AdapterCheckpoint s = random_adapter(c, 2);
  const auto prompts = random_prompts(20, c.vocab_size, 3);

  for (const auto& p : prompts) {
    const double h = prefix_entropy(base, g, s, MergeSpec::fixed(0.4), p, 3);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(static_cast<double>(c.vocab_size)));
  }
  // k = 1 is the entropy of the last-position softmax
  const AdapterCheckpoint wa = merge_adapters(g, s, MergeSpec::weight_average());
  const Matrix logits = forward_logits(base, &wa, prompts[0]);
  const double direct = shannon_entropy(RowVector(softmax_row(logits.bottomRows(1).row(0))));
  CHECK(prefix_entropy(base, g, s, MergeSpec::weight_average(), prompts[0], 1) == doctest::Approx(direct).epsilon(1e-12));

  // identical parents make the objective flat in λ
  const double h0 = prefix_entropy(base, g, g, MergeSpec::fixed(0.0), prompts[1], 3);
  const double h1 = prefix_entropy(base, g, g, MergeSpec::fixed(0.35), prompts[1], 3);
  CHECK(h0 == doctest::Approx(h1).epsilon(1e-12));

  // a head that puts all mass on one token has zero entropy
  BaseWeights sharp = base;
  sharp.tok_emb.setZero();
  sharp.tok_emb(kEosToken, 0) = 1e4;
  sharp.lnf_bias.setZero();
  sharp.lnf_bias(0, 0) = 1.0;
  sharp.lnf_gain.setZero();
  CHECK(prefix_entropy(InferenceModel(sharp, nullptr), prompts[2], 3) == doctest::Approx(0.0));
}

TEST_CASE("grid adaptation") {
  const ModelConfig c = small_config();
  const BaseWeights base = BaseWeights::initialize(c, 5);
  const AdapterCheckpoint g = random_adapter(c, 1);
  const AdapterCheckpoint s = random_adapter(c, 2, 0.6);
  const auto prompts = random_prompts(12, c.vocab_size, 4);
  AdaptConfig cfg;
  cfg.grid_step = 0.1;
  const AdaptResult r = adapt_coefficients(base, g, s, prompts, cfg);
  CHECK(r.objective_trace.size() == 11);
  CHECK(r.spec.method == MergeMethod::grid);
  CHECK(r.spec.n_samples == 12);
  CHECK_NOTHROW(r.spec.validate());
  const double best = *r.entropy_at(r.spec.lambda1);
  for (const auto& p : r.objective_trace) CHECK(best <= p.entropy);
  for (double l1 : {0.0, 0.5, 1.0}) CHECK(best <= *r.entropy_at(l1));

  // flat objective: ties go to the specific adapter
  const AdaptResult flat = adapt_coefficients(base, g, g, prompts, cfg);
  CHECK(flat.spec.lambda2 == 1.0);

  CHECK_THROWS_AS(adapt_coefficients(base, g, s, {}, cfg), ContractError);

  const auto j = adapt_result_json(r);
  for (const char* key : {"lambda1", "lambda2", "method", "k_tokens", "n_unlabeled", "seed", "objective_trace"}) {
    CHECK(j.contains(key));
  }
  CHECK(j.at("objective_trace").size() == 11);
}

TEST_CASE("gradient adaptation never ends above its start") {
  const ModelConfig c = small_config();
  const BaseWeights base = BaseWeights::initialize(c, 6);
  const AdapterCheckpoint g = random_adapter(c, 1);
  const AdapterCheckpoint s = random_adapter(c, 2, 0.6);
  const auto prompts = random_prompts(6, c.vocab_size, 5);
  AdaptConfig cfg;
  cfg.method = MergeMethod::gradient;
  cfg.gradient_steps = 8;
  cfg.gradient_lr = 2.0;
  const AdaptResult r = adapt_coefficients(base, g, s, prompts, cfg);
  REQUIRE(r.objective_trace.size() == 9);
  CHECK(r.objective_trace.front().lambda1 == 0.5);
  const double start = r.objective_trace.front().entropy;
  CHECK(*r.entropy_at(r.spec.lambda1) <= start);
  CHECK(r.spec.method == MergeMethod::gradient);
  CHECK_NOTHROW(r.spec.validate());

  // θ0 = 0 is the weight average; the graph objective agrees with decoding
  const AdapterCheckpoint wa = merge_adapters(g, s, MergeSpec::weight_average());
  CHECK(start == doctest::Approx(mean_prefix_entropy(base, &wa, prompts, 3)).epsilon(1e-10));
}
