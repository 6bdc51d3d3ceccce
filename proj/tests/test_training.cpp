#include <cmath>
#include <set>

#include "cocktail/checkpoint.hpp"
#include "cocktail/training.hpp"
#include "doctest.h"

using namespace cocktail;

namespace {

struct Fixture {
  World world = gen_world(WorldConfig{});
  Tokenizer tok = Tokenizer::from_world(world);
  std::vector<InstructionExample> train;
  BaseWeights base;

  Fixture() {
    const auto split = leave_one_out_split(gen_sequences(world), Setting::warm, world, 3);
    train.assign(split.train.begin(), split.train.begin() + 48);
    base = BaseWeights::initialize(ModelConfig{}, 21);
    base.vocab_fingerprint = tok.fingerprint();
  }
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

TrainConfig quick(std::uint64_t seed) {
  TrainConfig c = TrainConfig::adapter_defaults();
  c.epochs = 3;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("config defaults and validation") {
  const TrainConfig a = TrainConfig::adapter_defaults();
  CHECK(a.lr == 3e-3);
  CHECK(a.batch_size == 16);
  CHECK(a.epochs == 5);
  CHECK(a.clip_norm == 1.0);
  CHECK(TrainConfig::pretrain_defaults().epochs == 3);

  TrainConfig bad = a;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = a;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);

  const TrainConfig back = nlohmann::json(a).get<TrainConfig>();
  CHECK(nlohmann::json(back) == nlohmann::json(a));
  CHECK_THROWS_AS(optimizer_from_string("rmsprop"), ContractError);
}

TEST_CASE("response-only loss") {
  const auto& f = fx();
  const auto& e = f.train[0];
  const TrainSequence s = make_train_sequence(f.tok, e);
  const auto prompt = encode_prompt(f.tok, e);
  REQUIRE(s.target_start == prompt.size());
  CHECK(s.tokens.back() == kEosToken);
  CHECK(s.tokens.size() == prompt.size() + 5);

  // oracle: average of -log p(target) over response positions of the full forward
  const Matrix logp = log_softmax_rows(forward_logits(f.base, nullptr, s.tokens));
  double nll = 0.0;
  for (std::size_t t = s.target_start; t < s.tokens.size(); ++t) nll -= logp(static_cast<Eigen::Index>(t - 1), s.tokens[t]);
  nll /= static_cast<double>(s.tokens.size() - s.target_start);
  CHECK(sequence_loss(f.base, nullptr, s) == doctest::Approx(nll).epsilon(1e-12));

  // moving the mask start changes which positions count
  TrainSequence wider = s;
  wider.target_start = s.target_start - 3;
  CHECK(sequence_loss(f.base, nullptr, wider) != sequence_loss(f.base, nullptr, s));
  TrainSequence none = s;
  none.target_start = s.tokens.size();
  CHECK_THROWS_AS(sequence_loss(f.base, nullptr, none), ContractError);
}

TEST_CASE("optimizer steps") {
  Matrix p = Matrix::Constant(1, 2, 1.0);
  std::vector<Matrix> g{(Matrix(1, 2) << 0.3, -0.4).finished()};

  TrainConfig sgd;
  sgd.optimizer = OptimizerKind::momentum_sgd;
  sgd.lr = 0.1;
  Optimizer o1(sgd, {&p});
  CHECK(o1.step(g) == doctest::Approx(0.5));
  CHECK(p(0, 0) == doctest::Approx(1.0 - 0.03));
  o1.step(g);  // m = 0.9·g + g
  CHECK(p(0, 0) == doctest::Approx(1.0 - 0.03 - 0.1 * 1.9 * 0.3));

  // global-norm clipping
  Matrix q = Matrix::Zero(1, 2);
  std::vector<Matrix> big{(Matrix(1, 2) << 30.0, -40.0).finished()};
  Optimizer o2(sgd, {&q});
  CHECK(o2.step(big) == doctest::Approx(50.0));
  CHECK(q(0, 0) == doctest::Approx(-0.1 * 0.6));
  CHECK(q(0, 1) == doctest::Approx(0.1 * 0.8));

  // bias-corrected Adam moves each coordinate by about lr on its first step
  TrainConfig adam;
  adam.optimizer = OptimizerKind::adam;
  adam.lr = 0.01;
  Matrix r = Matrix::Zero(1, 2);
  Optimizer o3(adam, {&r});
  o3.step(g);
  CHECK(r(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
  CHECK(r(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("train_lora keeps the base frozen and starts from the base loss") {
  const auto& f = fx();
  const std::string before = encode_base(f.base);
  const AdapterTrainResult r = train_lora(f.train, f.tok, f.tok.fingerprint(), f.base, quick(1), Provenance{});
  CHECK(encode_base(f.base) == before);

  std::vector<TrainSequence> seqs;
  for (const auto& e : f.train) seqs.push_back(make_train_sequence(f.tok, e));
  CHECK(r.initial_loss == dataset_loss(f.base, nullptr, seqs));

  CHECK(r.log.size() == 3);
  CHECK(r.adapter.deltas.size() == 4);
  CHECK(r.domain_counts.begin()->second == 48);
  CHECK(static_cast<double>(r.adapter.parameter_count()) < 0.05 * static_cast<double>(f.base.parameter_count()));
  for (const auto& [id, d] : r.adapter.deltas) CHECK(d.b.norm() > 0.0);
}

TEST_CASE("training loss decreases on three seeds") {
  const auto& f = fx();
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    const AdapterTrainResult r = train_lora(f.train, f.tok, f.tok.fingerprint(), f.base, quick(seed), Provenance{});
    CHECK(r.log.back().loss < r.log.front().loss);
  }
}

TEST_CASE("training is deterministic per seed") {
  const auto& f = fx();
  TrainConfig c = quick(5);
  c.epochs = 1;
  const auto a = train_lora(f.train, f.tok, f.tok.fingerprint(), f.base, c, Provenance{});
  const auto b = train_lora(f.train, f.tok, f.tok.fingerprint(), f.base, c, Provenance{});
  CHECK(encode_adapter(a.adapter) == encode_adapter(b.adapter));
  c.seed = 6;
  const auto other = train_lora(f.train, f.tok, f.tok.fingerprint(), f.base, c, Provenance{});
  CHECK(other.adapter.payload_hash() != a.adapter.payload_hash());
}

TEST_CASE("vocabulary mismatch is rejected") {
  const auto& f = fx();
  CHECK_THROWS_AS(train_lora(f.train, f.tok, "another-vocabulary", f.base, quick(1), Provenance{}), TrainingError);
}

TEST_CASE("pretraining corpus and a short pretraining run") {
  const auto& f = fx();
  const auto corpus = pretrain_corpus(f.world, f.tok, 4, 400);
  REQUIRE(corpus.size() == 400);
  std::set<std::string> real;
  for (const Item& it : f.world.items) real.insert(it.title);
  for (const auto& s : corpus) {
    CHECK(s.tokens.front() == kBosToken);
    CHECK(s.tokens.back() == kEosToken);
    REQUIRE(s.target_start < s.tokens.size());
    const std::string text = f.tok.decode(s.tokens);
    for (const auto& title : real) REQUIRE(count_title_occurrences(text, title) == 0);
  }
  CHECK(nlohmann::json(pretrain_corpus(f.world, f.tok, 4, 50)[7].tokens) == nlohmann::json(corpus[7].tokens));

  ModelConfig small;
  small.d_model = 32;
  small.n_heads = 2;
  small.d_ff = 64;
  TrainConfig c = TrainConfig::pretrain_defaults();
  c.epochs = 2;
  const PretrainResult r = pretrain_base(f.world, f.tok, small, c, 300);
  CHECK(r.final_perplexity < r.initial_perplexity);
  CHECK(r.log.back().loss < r.log.front().loss);
  CHECK(r.base.vocab_fingerprint == f.tok.fingerprint());
}
