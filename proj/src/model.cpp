#include "cocktail/model.hpp"

#include <algorithm>
#include <cmath>

#include "cocktail/hash.hpp"
#include "cocktail/random.hpp"

namespace cocktail {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;

const std::vector<Projection>& all_projections() {
  static const std::vector<Projection> all{Projection::q, Projection::k, Projection::v,
                                           Projection::o, Projection::ff_in, Projection::ff_out};
  return all;
}

Matrix layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    out.row(r) = ((x.row(r).array() - mu) * inv) * gain.row(0).array() + bias.row(0).array();
  }
  return out;
}

Matrix gelu_values(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  }
  return out;
}

void check_tokens(const ModelConfig& config, std::span<const TokenId> tokens, int offset) {
  if (static_cast<int>(tokens.size()) + offset > config.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(tokens.size() + static_cast<std::size_t>(offset)) +
                      " exceeds max_seq_len " + std::to_string(config.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw ContractError("token id " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(config.vocab_size));
    }
  }
}

}  // namespace

std::string to_string(Projection p) {
  switch (p) {
    case Projection::q: return "q";
    case Projection::k: return "k";
    case Projection::v: return "v";
    case Projection::o: return "o";
    case Projection::ff_in: return "ff_in";
    case Projection::ff_out: return "ff_out";
  }
  return "?";
}

Projection projection_from_string(const std::string& s) {
  for (Projection p : all_projections()) {
    if (to_string(p) == s) return p;
  }
  throw ContractError("unknown projection '" + s + "'");
}

std::string TargetId::str() const { return "layer" + std::to_string(layer) + "." + to_string(proj); }

TargetId TargetId::parse(const std::string& s) {
  const auto dot = s.find('.');
  if (s.rfind("layer", 0) != 0 || dot == std::string::npos) throw ContractError("bad target id '" + s + "'");
  return TargetId{std::stoi(s.substr(5, dot - 5)), projection_from_string(s.substr(dot + 1))};
}

std::pair<int, int> ModelConfig::projection_shape(Projection p) const {
  switch (p) {
    case Projection::ff_in: return {d_ff, d_model};
    case Projection::ff_out: return {d_model, d_ff};
    default: return {d_model, d_model};
  }
}

std::vector<TargetId> ModelConfig::target_ids() const {
  std::vector<TargetId> out;
  for (int l = 0; l < n_layers; ++l) {
    for (Projection p : lora_targets) out.push_back({l, p});
  }
  std::sort(out.begin(), out.end());
  return out;
}

void ModelConfig::validate() const {
  if (vocab_size < 5 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1 || max_seq_len < 2) {
    throw ContractError("model config: sizes must be positive (vocab_size >= 5)");
  }
  if (d_model % n_heads != 0) throw ContractError("model config: d_model must be divisible by n_heads");
  if (lora_rank < 1 || lora_rank >= std::min(d_model, d_ff)) {
    throw ContractError("model config: lora_rank must satisfy 1 <= r < min(d_model, d_ff)");
  }
  if (!(lora_alpha > 0.0)) throw ContractError("model config: lora_alpha must be positive");
  if (lora_targets.empty()) throw ContractError("model config: lora_targets must not be empty");
}

std::string ModelConfig::fingerprint() const {
  nlohmann::json j = *this;
  return sha256_hex(j.dump());
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  std::vector<std::string> targets;
  for (Projection p : c.lora_targets) targets.push_back(to_string(p));
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                     {"lora_rank", c.lora_rank},   {"lora_alpha", c.lora_alpha}, {"lora_targets", targets}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.lora_rank = j.value("lora_rank", d.lora_rank);
  c.lora_alpha = j.value("lora_alpha", d.lora_alpha);
  c.lora_targets = d.lora_targets;
  if (j.contains("lora_targets")) {
    c.lora_targets.clear();
    for (const auto& s : j.at("lora_targets")) c.lora_targets.push_back(projection_from_string(s.get<std::string>()));
  }
}

BaseWeights BaseWeights::zeros(const ModelConfig& config) {
  config.validate();
  BaseWeights w;
  w.config = config;
  const int d = config.d_model;
  w.tok_emb = Matrix::Zero(config.vocab_size, d);
  w.pos_emb = Matrix::Zero(config.max_seq_len, d);
  w.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (LayerWeights& layer : w.layers) {
    for (Projection p : all_projections()) {
      const auto [rows, cols] = config.projection_shape(p);
      layer.proj[p] = Matrix::Zero(rows, cols);
    }
    layer.ln1_gain = Matrix::Ones(1, d);
    layer.ln1_bias = Matrix::Zero(1, d);
    layer.ln2_gain = Matrix::Ones(1, d);
    layer.ln2_bias = Matrix::Zero(1, d);
  }
  w.lnf_gain = Matrix::Ones(1, d);
  w.lnf_bias = Matrix::Zero(1, d);
  return w;
}

BaseWeights BaseWeights::initialize(const ModelConfig& config, std::uint64_t seed) {
  BaseWeights w = zeros(config);
  Rng rng(derive_seed(seed, {0xba5e}));
  w.tok_emb = randn(config.vocab_size, config.d_model, 0.1, rng);
  w.pos_emb = randn(config.max_seq_len, config.d_model, 0.1, rng);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config.n_layers);
  for (LayerWeights& layer : w.layers) {
    for (Projection p : all_projections()) {
      const auto [rows, cols] = config.projection_shape(p);
      double stddev = 1.0 / std::sqrt(static_cast<double>(cols));
      if (p == Projection::o || p == Projection::ff_out) stddev *= residual_scale;
      layer.proj[p] = randn(rows, cols, stddev, rng);
    }
  }
  return w;
}

std::vector<std::pair<std::string, Matrix*>> BaseWeights::named_tensors() {
  std::vector<std::pair<std::string, Matrix*>> out{{"tok_emb", &tok_emb}, {"pos_emb", &pos_emb}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    for (auto& [p, m] : layers[l].proj) out.emplace_back(prefix + to_string(p), &m);
    out.emplace_back(prefix + "ln1.gain", &layers[l].ln1_gain);
    out.emplace_back(prefix + "ln1.bias", &layers[l].ln1_bias);
    out.emplace_back(prefix + "ln2.gain", &layers[l].ln2_gain);
    out.emplace_back(prefix + "ln2.bias", &layers[l].ln2_bias);
  }
  out.emplace_back("lnf.gain", &lnf_gain);
  out.emplace_back("lnf.bias", &lnf_bias);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> BaseWeights::named_tensors() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<BaseWeights*>(this)->named_tensors()) out.emplace_back(name, m);
  return out;
}

std::size_t BaseWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : named_tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

void to_json(nlohmann::json& j, const Provenance& p) {
  switch (p.kind) {
    case ProvenanceKind::general: j = {{"kind", "general"}}; break;
    case ProvenanceKind::specific: j = {{"kind", "specific"}, {"domain_id", p.domain_id}}; break;
    case ProvenanceKind::merged:
      j = {{"kind", "merged"},
           {"lambda1", p.lambda1},
           {"lambda2", p.lambda2},
           {"method", p.merge_method},
           {"general_parent", p.general_parent},
           {"specific_parent", p.specific_parent}};
      break;
  }
}

void from_json(const nlohmann::json& j, Provenance& p) {
  const std::string kind = j.at("kind").get<std::string>();
  p = Provenance{};
  if (kind == "general") {
    p.kind = ProvenanceKind::general;
  } else if (kind == "specific") {
    p.kind = ProvenanceKind::specific;
    p.domain_id = j.at("domain_id").get<int>();
  } else if (kind == "merged") {
    p.kind = ProvenanceKind::merged;
    p.lambda1 = j.at("lambda1").get<double>();
    p.lambda2 = j.at("lambda2").get<double>();
    p.merge_method = j.at("method").get<std::string>();
    p.general_parent = j.at("general_parent").get<std::string>();
    p.specific_parent = j.at("specific_parent").get<std::string>();
  } else {
    throw ContractError("unknown provenance kind '" + kind + "'");
  }
}

AdapterCheckpoint AdapterCheckpoint::initialize(const ModelConfig& config, std::uint64_t seed,
                                                Provenance provenance) {
  config.validate();
  AdapterCheckpoint ck;
  ck.config = config;
  ck.fingerprint = config.fingerprint();
  ck.provenance = std::move(provenance);
  ck.seed = seed;
  Rng rng(derive_seed(seed, {0x10ba}));
  for (const TargetId& id : config.target_ids()) {
    const auto [d, k] = config.projection_shape(id.proj);
    ck.deltas[id] = LoraDelta{randn(config.lora_rank, k, 0.02, rng), Matrix::Zero(d, config.lora_rank)};
  }
  return ck;
}

void AdapterCheckpoint::check_compatible(const ModelConfig& other) const {
  if (fingerprint != other.fingerprint()) {
    throw IncompatibleAdapterError("adapter fingerprint " + fingerprint.substr(0, 12) +
                                   " does not match model config " + other.fingerprint().substr(0, 12));
  }
  const auto expected = other.target_ids();
  if (deltas.size() != expected.size()) throw IncompatibleAdapterError("adapter target set differs from config");
  for (const TargetId& id : expected) {
    auto it = deltas.find(id);
    if (it == deltas.end()) throw IncompatibleAdapterError("adapter lacks target " + id.str());
    const auto [d, k] = other.projection_shape(id.proj);
    if (it->second.a.rows() != other.lora_rank || it->second.a.cols() != k || it->second.b.rows() != d ||
        it->second.b.cols() != other.lora_rank) {
      throw IncompatibleAdapterError("adapter factor shapes for " + id.str() + " do not match config");
    }
  }
}

std::size_t AdapterCheckpoint::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [id, d] : deltas) n += static_cast<std::size_t>(d.a.size() + d.b.size());
  return n;
}

std::string AdapterCheckpoint::payload_hash() const {
  Sha256 h;
  for (const auto& [id, d] : deltas) {
    h.update(d.a);
    h.update(d.b);
  }
  return h.hex_digest();
}

BaseVars bind_base(Graph& g, const BaseWeights& base, bool trainable) {
  auto bind = [&](const Matrix& m) { return trainable ? g.parameter_ref(m) : g.constant_ref(m); };
  BaseVars v;
  v.config = &base.config;
  v.tok_emb = bind(base.tok_emb);
  v.pos_emb = bind(base.pos_emb);
  for (const LayerWeights& layer : base.layers) {
    BaseVars::Layer lv;
    for (const auto& [p, m] : layer.proj) lv.proj[p] = bind(m);
    lv.ln1_gain = bind(layer.ln1_gain);
    lv.ln1_bias = bind(layer.ln1_bias);
    lv.ln2_gain = bind(layer.ln2_gain);
    lv.ln2_bias = bind(layer.ln2_bias);
    v.layers.push_back(std::move(lv));
  }
  v.lnf_gain = bind(base.lnf_gain);
  v.lnf_bias = bind(base.lnf_bias);
  return v;
}

AdapterVars bind_adapter(Graph& g, const AdapterCheckpoint& adapter, bool trainable) {
  AdapterVars v;
  v.scale = adapter.config.lora_scale();
  for (const auto& [id, d] : adapter.deltas) {
    if (trainable) {
      v.factors[id] = {g.parameter_ref(d.a), g.parameter_ref(d.b)};
    } else {
      v.factors[id] = {g.constant_ref(d.a), g.constant_ref(d.b)};
    }
  }
  return v;
}

namespace {

// h = x W₀ᵀ + s (x Aᵀ) Bᵀ for adapted targets.
Var project(Var x, Var w, const AdapterVars* adapter, TargetId id) {
  Var h = matmul_nt(x, w);
  if (adapter == nullptr) return h;
  auto it = adapter->factors.find(id);
  if (it == adapter->factors.end()) return h;
  const auto& [a, b] = it->second;
  return add(h, scale(matmul_nt(matmul_nt(x, a), b), adapter->scale));
}

}  // namespace

Var forward_graph(const BaseVars& base, const AdapterVars* adapter, std::span<const TokenId> tokens,
                  std::span<const std::size_t> rows) {
  const ModelConfig& config = *base.config;
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  check_tokens(config, tokens, 0);
  Graph& g = *base.tok_emb.graph();

  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  Var x = add(embedding(base.tok_emb, tokens), select_rows(base.pos_emb, positions));
  (void)g;

  for (int l = 0; l < config.n_layers; ++l) {
    const BaseVars::Layer& layer = base.layers[static_cast<std::size_t>(l)];
    Var h = layer_norm(x, layer.ln1_gain, layer.ln1_bias, kLayerNormEps);
    Var q = project(h, layer.proj.at(Projection::q), adapter, {l, Projection::q});
    Var k = project(h, layer.proj.at(Projection::k), adapter, {l, Projection::k});
    Var v = project(h, layer.proj.at(Projection::v), adapter, {l, Projection::v});
    Var att = causal_attention(q, k, v, config.n_heads);
    x = add(x, project(att, layer.proj.at(Projection::o), adapter, {l, Projection::o}));
    Var h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias, kLayerNormEps);
    Var ff = gelu(project(h2, layer.proj.at(Projection::ff_in), adapter, {l, Projection::ff_in}));
    x = add(x, project(ff, layer.proj.at(Projection::ff_out), adapter, {l, Projection::ff_out}));
  }
  Var selected = select_rows(x, rows);
  Var normed = layer_norm(selected, base.lnf_gain, base.lnf_bias, kLayerNormEps);
  return matmul_nt(normed, base.tok_emb);
}

Matrix forward_logits(const BaseWeights& base, const AdapterCheckpoint* adapter, std::span<const TokenId> tokens) {
  if (adapter != nullptr) adapter->check_compatible(base.config);
  check_tokens(base.config, tokens, 0);
  Graph g;
  BaseVars bv = bind_base(g, base, false);
  std::optional<AdapterVars> av;
  if (adapter != nullptr) av = bind_adapter(g, *adapter, false);
  std::vector<std::size_t> rows(tokens.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return forward_graph(bv, av ? &*av : nullptr, tokens, rows).value();
}

InferenceModel::InferenceModel(const BaseWeights& base, const AdapterCheckpoint* adapter)
    : base_(&base), adapter_(adapter) {
  if (adapter_ != nullptr) adapter_->check_compatible(base.config);
}

InferenceModel::State InferenceModel::start() const {
  State s;
  s.keys.assign(static_cast<std::size_t>(base_->config.n_layers), Matrix(0, base_->config.d_model));
  s.values.assign(static_cast<std::size_t>(base_->config.n_layers), Matrix(0, base_->config.d_model));
  return s;
}

Matrix InferenceModel::project(const Matrix& x, int layer, Projection p) const {
  Matrix h = x * base_->layers[static_cast<std::size_t>(layer)].proj.at(p).transpose();
  if (adapter_ == nullptr) return h;
  auto it = adapter_->deltas.find(TargetId{layer, p});
  if (it == adapter_->deltas.end()) return h;
  const Matrix xa = x * it->second.a.transpose();
  const Matrix delta = xa * it->second.b.transpose();
  return h + delta * adapter_->config.lora_scale();
}

Matrix InferenceModel::extend(State& state, std::span<const TokenId> tokens) const {
  const ModelConfig& config = base_->config;
  if (tokens.empty()) throw ContractError("extend: no tokens");
  check_tokens(config, tokens, state.length);
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size());
  const Eigen::Index p0 = state.length;
  const Eigen::Index total = p0 + n;
  const int heads = config.n_heads;
  const Eigen::Index dh = config.d_model / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix x(n, config.d_model);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = base_->tok_emb.row(tokens[static_cast<std::size_t>(i)]) + base_->pos_emb.row(p0 + i);
  }

  for (int l = 0; l < config.n_layers; ++l) {
    const LayerWeights& lw = base_->layers[static_cast<std::size_t>(l)];
    const Matrix h = layer_norm_rows(x, lw.ln1_gain, lw.ln1_bias);
    const Matrix q = project(h, l, Projection::q);
    Matrix& keys = state.keys[static_cast<std::size_t>(l)];
    Matrix& vals = state.values[static_cast<std::size_t>(l)];
    keys.conservativeResize(total, Eigen::NoChange);
    vals.conservativeResize(total, Eigen::NoChange);
    keys.bottomRows(n) = project(h, l, Projection::k);
    vals.bottomRows(n) = project(h, l, Projection::v);

    Matrix att(n, config.d_model);
    for (int hd = 0; hd < heads; ++hd) {
      Matrix s = (q.middleCols(hd * dh, dh) * keys.middleCols(hd * dh, dh).transpose()) * scale_factor;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index visible = p0 + i + 1;
        const double m = s.row(i).head(visible).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j < visible; ++j) {
          s(i, j) = std::exp(s(i, j) - m);
          sum += s(i, j);
        }
        s.row(i).head(visible) /= sum;
        s.row(i).tail(total - visible).setZero();
      }
      att.middleCols(hd * dh, dh).noalias() = s * vals.middleCols(hd * dh, dh);
    }
    x += project(att, l, Projection::o);
    const Matrix h2 = layer_norm_rows(x, lw.ln2_gain, lw.ln2_bias);
    x += project(gelu_values(project(h2, l, Projection::ff_in)), l, Projection::ff_out);
  }
  state.length = static_cast<int>(total);
  const Matrix normed = layer_norm_rows(x, base_->lnf_gain, base_->lnf_bias);
  return normed * base_->tok_emb.transpose();
}

DecodeResult greedy_decode(const InferenceModel& model, std::span<const TokenId> prompt, int k) {
  if (k < 1) throw ContractError("greedy_decode: k must be >= 1");
  if (prompt.empty()) throw ContractError("greedy_decode: empty prompt");
  if (static_cast<int>(prompt.size()) + k > model.config().max_seq_len) {
    throw LengthError("greedy_decode: prompt length " + std::to_string(prompt.size()) + " + k " +
                      std::to_string(k) + " exceeds max_seq_len " + std::to_string(model.config().max_seq_len));
  }
  DecodeResult out;
  InferenceModel::State state = model.start();
  Matrix logits = model.extend(state, prompt);
  RowVector last = logits.row(logits.rows() - 1);
  for (int t = 0; t < k; ++t) {
    RowVector dist = softmax_row(last);
    const TokenId next = static_cast<TokenId>(argmax_lowest(dist));
    out.tokens.push_back(next);
    out.distributions.push_back(std::move(dist));
    if (next == kEosToken || t + 1 == k) break;
    const TokenId step[1] = {next};
    last = model.extend(state, step).row(0);
  }
  return out;
}

DecodeResult greedy_decode(const BaseWeights& base, const AdapterCheckpoint* adapter,
                           std::span<const TokenId> prompt, int k) {
  return greedy_decode(InferenceModel(base, adapter), prompt, k);
}

std::vector<double> score_continuations(const InferenceModel& model, std::span<const TokenId> prompt,
                                        const std::vector<std::vector<TokenId>>& continuations, bool normalize) {
  if (prompt.empty()) throw ContractError("score_continuations: empty prompt");
  InferenceModel::State prefix = model.start();
  const Matrix prompt_logits = model.extend(prefix, prompt);
  const RowVector first = log_softmax_rows(prompt_logits.bottomRows(1)).row(0);

  std::vector<double> scores;
  scores.reserve(continuations.size());
  for (const auto& cont : continuations) {
    if (cont.empty()) throw ContractError("score_continuations: empty continuation");
    check_tokens(model.config(), cont, static_cast<int>(prompt.size()));
    double total = first(cont[0]);
    if (cont.size() > 1) {
      InferenceModel::State state = prefix;
      const Matrix logp = log_softmax_rows(model.extend(state, std::span(cont).first(cont.size() - 1)));
      for (std::size_t t = 1; t < cont.size(); ++t) total += logp(static_cast<Eigen::Index>(t - 1), cont[t]);
    }
    scores.push_back(normalize ? total / static_cast<double>(cont.size()) : total);
  }
  return scores;
}

double sequence_avg_logprob(const BaseWeights& base, const AdapterCheckpoint* adapter,
                            std::span<const TokenId> prompt, std::span<const TokenId> continuation) {
  if (continuation.empty()) throw ContractError("sequence_avg_logprob: empty continuation");
  InferenceModel model(base, adapter);
  return score_continuations(model, prompt, {std::vector<TokenId>(continuation.begin(), continuation.end())},
                             true)
      .front();
}

}  // namespace cocktail
