#include "cocktail/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace cocktail {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "momentum_sgd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "momentum_sgd" || s == "sgd") return OptimizerKind::momentum_sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ContractError("unknown optimizer '" + s + "' (expected momentum_sgd or adam)");
}

TrainConfig TrainConfig::adapter_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::pretrain_defaults() {
  TrainConfig c;
  c.lr = 2e-3;
  c.epochs = 3;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || batch_size < 1 || epochs < 1) {
    throw ContractError("train config: lr, batch_size and epochs must be positive");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ContractError("train config: momentum must lie in [0, 1)");
  if (!(clip_norm > 0.0)) throw ContractError("train config: clip_norm must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},           {"batch_size", c.batch_size}, {"epochs", c.epochs},
       {"momentum", c.momentum}, {"clip_norm", c.clip_norm},  {"optimizer", to_string(c.optimizer)},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.momentum = j.value("momentum", d.momentum);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.optimizer = optimizer_from_string(j.value("optimizer", to_string(d.optimizer)));
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const EpochLog& e) {
  j = {{"epoch", e.epoch}, {"loss", e.loss}, {"seconds", e.seconds}};
}

TrainSequence make_train_sequence(const Tokenizer& tok, const InstructionExample& e) {
  TrainSequence s;
  s.tokens = encode_prompt(tok, e);
  s.target_start = s.tokens.size();
  const auto resp = tok.encode(e.y);
  s.tokens.insert(s.tokens.end(), resp.begin(), resp.end());
  return s;
}

namespace {

// Mean target NLL as a graph node. Logits are formed only for rows that predict targets.
Var loss_node(const BaseVars& base, const AdapterVars* adapter, const TrainSequence& seq) {
  const std::size_t n = seq.tokens.size();
  if (seq.target_start < 1 || seq.target_start >= n) {
    throw ContractError("train sequence has no targets (length " + std::to_string(n) + ")");
  }
  const std::span<const TokenId> inputs(seq.tokens.data(), n - 1);
  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  for (std::size_t t = seq.target_start; t < n; ++t) {
    rows.push_back(t - 1);
    targets.push_back(seq.tokens[t]);
  }
  Var logits = forward_graph(base, adapter, inputs, rows);
  return scale(sum(pick(log_softmax_rows(logits), targets)), -1.0 / static_cast<double>(targets.size()));
}

std::vector<Var> base_var_list(const BaseVars& v) {
  std::vector<Var> out{v.tok_emb, v.pos_emb};
  for (const auto& layer : v.layers) {
    for (const auto& [p, var] : layer.proj) out.push_back(var);
    out.push_back(layer.ln1_gain);
    out.push_back(layer.ln1_bias);
    out.push_back(layer.ln2_gain);
    out.push_back(layer.ln2_bias);
  }
  out.push_back(v.lnf_gain);
  out.push_back(v.lnf_bias);
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shared minibatch loop. `grad_of` runs one example's forward/backward, adds its
// gradients into the accumulators and returns the example loss.
template <typename ExampleFn>
std::vector<EpochLog> run_epochs(std::size_t n_examples, const TrainConfig& config, Optimizer& opt,
                                 std::vector<Matrix>& grads, ExampleFn&& grad_of) {
  std::vector<EpochLog> log;
  std::vector<std::size_t> order(n_examples);
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(config.seed, {0xe90c, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n_examples; start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(n_examples, start + static_cast<std::size_t>(config.batch_size));
      for (auto& g : grads) g.setZero();
      for (std::size_t i = start; i < end; ++i) {
        const double loss = grad_of(order[i]);
        if (!std::isfinite(loss)) {
          throw TrainingError("training diverged: loss " + std::to_string(loss) + " at epoch " +
                              std::to_string(epoch) + ", example " + std::to_string(order[i]) +
                              "; lower the learning rate");
        }
        total += loss;
      }
      for (auto& g : grads) g /= static_cast<double>(end - start);
      opt.step(grads);
    }
    log.push_back({epoch, total / static_cast<double>(n_examples), seconds_since(t0)});
  }
  return log;
}

}  // namespace

double sequence_loss(const BaseWeights& base, const AdapterCheckpoint* adapter, const TrainSequence& seq) {
  Graph g;
  BaseVars bv = bind_base(g, base, false);
  std::optional<AdapterVars> av;
  if (adapter != nullptr) av = bind_adapter(g, *adapter, false);
  return loss_node(bv, av ? &*av : nullptr, seq).value()(0, 0);
}

double dataset_loss(const BaseWeights& base, const AdapterCheckpoint* adapter, const std::vector<TrainSequence>& data) {
  if (data.empty()) throw ContractError("dataset_loss: empty dataset");
  double total = 0.0;
  for (const auto& s : data) total += sequence_loss(base, adapter, s);
  return total / static_cast<double>(data.size());
}

Optimizer::Optimizer(const TrainConfig& config, std::vector<Matrix*> params)
    : config_(config), params_(std::move(params)) {
  config_.validate();
  for (const Matrix* p : params_) {
    m_.push_back(Matrix::Zero(p->rows(), p->cols()));
    if (config_.optimizer == OptimizerKind::adam) v_.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
}

double Optimizer::step(std::vector<Matrix>& grads) {
  if (grads.size() != params_.size()) throw ContractError("optimizer: gradient count mismatch");
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  const double norm = std::sqrt(sq);
  const double clip = norm > config_.clip_norm ? config_.clip_norm / norm : 1.0;
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Matrix g = grads[i] * clip;
    if (config_.optimizer == OptimizerKind::momentum_sgd) {
      m_[i] = config_.momentum * m_[i] + g;
      *params_[i] -= config_.lr * m_[i];
    } else {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      m_[i] = b1 * m_[i] + (1.0 - b1) * g;
      v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      *params_[i] -= (config_.lr * (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + eps)).matrix();
    }
  }
  return norm;
}

AdapterTrainResult train_lora(const std::vector<InstructionExample>& data, const Tokenizer& tok,
                              const std::string& data_vocab_fingerprint, const BaseWeights& base,
                              const TrainConfig& config, const Provenance& provenance) {
  config.validate();
  if (data.empty()) throw ContractError("train_lora: empty dataset");
  if (data_vocab_fingerprint != base.vocab_fingerprint || tok.fingerprint() != base.vocab_fingerprint) {
    throw TrainingError("train_lora: dataset tokenizer fingerprint " + data_vocab_fingerprint.substr(0, 12) +
                        " does not match base vocabulary " + base.vocab_fingerprint.substr(0, 12));
  }
  AdapterTrainResult result;
  result.adapter = AdapterCheckpoint::initialize(base.config, config.seed, provenance);
  for (const auto& e : data) ++result.domain_counts[e.meta.domain_id];

  std::vector<TrainSequence> seqs;
  seqs.reserve(data.size());
  for (const auto& e : data) seqs.push_back(make_train_sequence(tok, e));
  result.initial_loss = dataset_loss(base, &result.adapter, seqs);

  std::vector<Matrix*> params;
  std::vector<Matrix> grads;
  for (auto& [id, d] : result.adapter.deltas) {
    params.push_back(&d.a);
    params.push_back(&d.b);
    grads.push_back(Matrix::Zero(d.a.rows(), d.a.cols()));
    grads.push_back(Matrix::Zero(d.b.rows(), d.b.cols()));
  }
  Optimizer opt(config, params);
  result.log = run_epochs(seqs.size(), config, opt, grads, [&](std::size_t idx) {
    Graph g;
    BaseVars bv = bind_base(g, base, false);
    AdapterVars av = bind_adapter(g, result.adapter, true);
    Var loss = loss_node(bv, &av, seqs[idx]);
    g.backward(loss);
    std::size_t i = 0;
    for (const auto& [id, ab] : av.factors) {
      grads[i++] += ab.first.grad();
      grads[i++] += ab.second.grad();
    }
    return loss.value()(0, 0);
  });
  return result;
}

namespace {

void random_attrs(const World& w, int domain, Rng& rng, std::vector<int>& attrs) {
  const auto& c = w.config;
  attrs.clear();
  attrs.push_back(static_cast<int>(uniform_index(static_cast<std::size_t>(c.shared_attr_vocab), rng)));
  std::vector<int> priv(static_cast<std::size_t>(c.private_attr_vocab_per_domain));
  std::iota(priv.begin(), priv.end(), c.shared_attr_vocab + domain * c.private_attr_vocab_per_domain);
  std::shuffle(priv.begin(), priv.end(), rng);
  priv.resize(static_cast<std::size_t>(c.attrs_per_item - 1));
  std::sort(priv.begin(), priv.end());
  attrs.insert(attrs.end(), priv.begin(), priv.end());
}

std::string compose_title(const World& w, int domain, const std::vector<int>& attrs) {
  std::string t;
  for (int a : attrs) t += w.attribute_words[static_cast<std::size_t>(a)] + " ";
  return t + w.domain_nouns[static_cast<std::size_t>(domain)];
}

TrainSequence whole_sequence(const Tokenizer& tok, const std::string& text) {
  TrainSequence s;
  s.tokens.push_back(kBosToken);
  const auto body = tok.encode(text);
  s.tokens.insert(s.tokens.end(), body.begin(), body.end());
  s.tokens.push_back(kEosToken);
  s.target_start = 1;
  return s;
}

}  // namespace

std::vector<TrainSequence> pretrain_corpus(const World& world, const Tokenizer& tok, std::uint64_t seed,
                                           int n_documents) {
  // Real item titles (seen and held out alike) are excluded so the base has no
  // exposure bias between items that later appear in instructions and new items.
  std::set<std::string> item_titles;
  for (const Item& it : world.items) item_titles.insert(it.title);
  Rng rng(derive_seed(seed, {0x9e7}));
  std::vector<TrainSequence> out;
  std::vector<int> attrs;
  while (static_cast<int>(out.size()) < n_documents) {
    const int domain = static_cast<int>(uniform_index(static_cast<std::size_t>(world.config.n_domains), rng));
    const std::size_t kind = out.size() % 8;
    if (kind == 0) {
      // composed title
      random_attrs(world, domain, rng, attrs);
      const std::string title = compose_title(world, domain, attrs);
      if (item_titles.count(title)) continue;
      out.push_back(whole_sequence(tok, title));
    } else if (kind == 1) {
      // attribute-domain co-occurrence sentence
      random_attrs(world, domain, rng, attrs);
      std::string text;
      for (std::size_t i = 1; i < attrs.size(); ++i) text += world.attribute_words[static_cast<std::size_t>(attrs[i])] + " ";
      text += world.domain_nouns[static_cast<std::size_t>(domain)] + ".";
      out.push_back(whole_sequence(tok, text));
    } else {
      // instruction skeleton over composed titles; the answer is uniform over the slate.
      // Varying slate sizes keep documents short on average.
      const int n_hist = 1 + static_cast<int>(uniform_index(static_cast<std::size_t>(world.config.seq_len_max - 2), rng));
      // Mostly small slates: copying from a short candidate list is what teaches the
      // base to read titles out of its context.
      const int n_cand = kind == 7 ? 2 + static_cast<int>(uniform_index(static_cast<std::size_t>(kDefaultNegatives), rng))
                                   : 2 + static_cast<int>(uniform_index(4, rng));
      std::set<std::string> drawn;
      std::vector<std::string> titles;
      while (static_cast<int>(titles.size()) < n_hist + n_cand) {
        random_attrs(world, domain, rng, attrs);
        std::string title = compose_title(world, domain, attrs);
        if (item_titles.count(title) || !drawn.insert(title).second) continue;
        titles.push_back(std::move(title));
      }
      const std::vector<std::string> history(titles.begin(), titles.begin() + n_hist);
      const std::vector<std::string> slate(titles.begin() + n_hist, titles.end());
      const std::string& answer = slate[uniform_index(slate.size(), rng)];
      TrainSequence s = whole_sequence(tok, render_prompt(history, slate));
      s.tokens.pop_back();
      s.target_start = s.tokens.size();
      const auto ans = encode_response(tok, answer);
      s.tokens.insert(s.tokens.end(), ans.begin(), ans.end());
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<TrainSequence> heldout_title_corpus(const World& world, const Tokenizer& tok) {
  std::vector<TrainSequence> out;
  for (int id : world.holdout_ids) out.push_back(whole_sequence(tok, world.item(id).title));
  return out;
}

double perplexity(const BaseWeights& base, const std::vector<TrainSequence>& corpus) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    const std::size_t n = s.tokens.size() - s.target_start;
    nll += sequence_loss(base, nullptr, s) * static_cast<double>(n);
    count += n;
  }
  if (count == 0) throw ContractError("perplexity: empty corpus");
  return std::exp(nll / static_cast<double>(count));
}

PretrainResult pretrain_base(const World& world, const Tokenizer& tok, const ModelConfig& model,
                             const TrainConfig& config, int n_documents) {
  config.validate();
  model.validate();
  if (tok.size() > model.vocab_size) {
    throw ContractError("pretrain: tokenizer has " + std::to_string(tok.size()) + " words but vocab_size is " +
                        std::to_string(model.vocab_size));
  }
  PretrainResult result;
  result.base = BaseWeights::initialize(model, derive_seed(config.seed, {0xba5e}));
  result.base.vocab_fingerprint = tok.fingerprint();

  const auto corpus = pretrain_corpus(world, tok, config.seed, n_documents);
  const auto heldout = heldout_title_corpus(world, tok);
  result.initial_perplexity = perplexity(result.base, heldout);

  std::vector<Matrix*> params;
  std::vector<Matrix> grads;
  for (auto& [name, m] : result.base.named_tensors()) {
    params.push_back(m);
    grads.push_back(Matrix::Zero(m->rows(), m->cols()));
  }
  Optimizer opt(config, params);
  result.log = run_epochs(corpus.size(), config, opt, grads, [&](std::size_t idx) {
    Graph g;
    BaseVars bv = bind_base(g, result.base, true);
    Var loss = loss_node(bv, nullptr, corpus[idx]);
    g.backward(loss);
    const auto vars = base_var_list(bv);
    for (std::size_t i = 0; i < vars.size(); ++i) grads[i] += vars[i].grad();
    return loss.value()(0, 0);
  });
  result.final_perplexity = perplexity(result.base, heldout);
  return result;
}

void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ContractError("cannot write " + path.string());
  for (const auto& e : log) out << nlohmann::json(e).dump() << '\n';
}

}  // namespace cocktail
