#include "cocktail/merge.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cocktail {

std::string to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::fixed: return "fixed";
    case MergeMethod::weight_average: return "weight_average";
    case MergeMethod::grid: return "grid";
    case MergeMethod::gradient: return "gradient";
  }
  return "fixed";
}

MergeMethod merge_method_from_string(const std::string& s) {
  for (MergeMethod m : {MergeMethod::fixed, MergeMethod::weight_average, MergeMethod::grid, MergeMethod::gradient}) {
    if (to_string(m) == s) return m;
  }
  throw ContractError("unknown merge method '" + s + "'");
}

MergeSpec MergeSpec::fixed(double lambda1) {
  MergeSpec s;
  s.lambda1 = lambda1;
  s.lambda2 = 1.0 - lambda1;
  s.method = MergeMethod::fixed;
  return s;
}

MergeSpec MergeSpec::weight_average() {
  MergeSpec s;
  s.lambda1 = 0.5;
  s.lambda2 = 0.5;
  s.method = MergeMethod::weight_average;
  return s;
}

void MergeSpec::validate() const {
  const bool in_range = lambda1 >= 0.0 && lambda1 <= 1.0 && lambda2 >= 0.0 && lambda2 <= 1.0;
  if (!in_range || std::abs(lambda1 + lambda2 - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "merge coefficients (" << lambda1 << ", " << lambda2 << ") are not on the simplex";
    throw ConstraintError(msg.str());
  }
  if (method == MergeMethod::weight_average && (lambda1 != 0.5 || lambda2 != 0.5)) {
    throw ConstraintError("weight_average requires lambda1 = lambda2 = 0.5");
  }
}

void to_json(nlohmann::json& j, const MergeSpec& s) {
  j = {{"lambda1", s.lambda1},     {"lambda2", s.lambda2}, {"method", to_string(s.method)},
       {"n_samples", s.n_samples}, {"seed", s.seed},       {"iterations", s.iterations}};
}

void from_json(const nlohmann::json& j, MergeSpec& s) {
  s.lambda1 = j.at("lambda1").get<double>();
  s.lambda2 = j.at("lambda2").get<double>();
  s.method = merge_method_from_string(j.at("method").get<std::string>());
  s.n_samples = j.value("n_samples", 0);
  s.seed = j.value("seed", std::uint64_t{0});
  s.iterations = j.value("iterations", 0);
}

void AdaptConfig::validate() const {
  if (k_tokens < 1) throw ContractError("adapt: k_tokens must be >= 1");
  if (n_unlabeled < 1) throw ContractError("adapt: n_unlabeled must be >= 1");
  if (!(grid_step > 0.0 && grid_step <= 0.5)) throw ContractError("adapt: grid step must be in (0, 0.5]");
  if (method != MergeMethod::grid && method != MergeMethod::gradient) {
    throw ContractError("adapt: method must be grid or gradient");
  }
  if (gradient_steps < 0 || !(gradient_lr > 0.0)) throw ContractError("adapt: bad gradient settings");
}

void to_json(nlohmann::json& j, const AdaptConfig& c) {
  j = {{"k_tokens", c.k_tokens},   {"n_unlabeled", c.n_unlabeled},       {"method", to_string(c.method)},
       {"grid_step", c.grid_step}, {"gradient_steps", c.gradient_steps}, {"gradient_lr", c.gradient_lr},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, AdaptConfig& c) {
  const AdaptConfig d;
  c.k_tokens = j.value("k_tokens", d.k_tokens);
  c.n_unlabeled = j.value("n_unlabeled", d.n_unlabeled);
  c.method = merge_method_from_string(j.value("method", to_string(d.method)));
  c.grid_step = j.value("grid_step", d.grid_step);
  c.gradient_steps = j.value("gradient_steps", d.gradient_steps);
  c.gradient_lr = j.value("gradient_lr", d.gradient_lr);
  c.seed = j.value("seed", d.seed);
}

std::optional<double> AdaptResult::entropy_at(double lambda1) const {
  for (const auto& p : objective_trace) {
    if (std::abs(p.lambda1 - lambda1) < 1e-12) return p.entropy;
  }
  return std::nullopt;
}

nlohmann::json adapt_result_json(const AdaptResult& r) {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& p : r.objective_trace) trace.push_back({{"lambda1", p.lambda1}, {"entropy", p.entropy}});
  return {{"lambda1", r.spec.lambda1},         {"lambda2", r.spec.lambda2}, {"method", to_string(r.spec.method)},
          {"k_tokens", r.k_tokens},            {"n_unlabeled", r.spec.n_samples},
          {"seed", r.spec.seed},               {"iterations", r.spec.iterations},
          {"objective_trace", std::move(trace)}};
}

AdapterCheckpoint merge_adapters(const AdapterCheckpoint& general, const AdapterCheckpoint& specific,
                                 const MergeSpec& spec) {
  spec.validate();
  if (general.fingerprint != specific.fingerprint) {
    throw IncompatibleAdapterError("cannot merge adapters with different config fingerprints");
  }
  general.check_compatible(general.config);
  specific.check_compatible(general.config);

  AdapterCheckpoint out;
  out.config = general.config;
  out.fingerprint = general.fingerprint;
  out.seed = general.seed;
  for (const auto& [id, g] : general.deltas) {
    const LoraDelta& s = specific.deltas.at(id);
    out.deltas[id] = LoraDelta{spec.lambda1 * g.a + spec.lambda2 * s.a, spec.lambda1 * g.b + spec.lambda2 * s.b};
  }
  out.provenance.kind = ProvenanceKind::merged;
  out.provenance.domain_id = specific.provenance.domain_id;
  out.provenance.lambda1 = spec.lambda1;
  out.provenance.lambda2 = spec.lambda2;
  out.provenance.merge_method = to_string(spec.method);
  out.provenance.general_parent = general.payload_hash();
  out.provenance.specific_parent = specific.payload_hash();
  return out;
}

Matrix effective_delta(const AdapterCheckpoint& adapter, const TargetId& target) {
  auto it = adapter.deltas.find(target);
  if (it == adapter.deltas.end()) throw ContractError("adapter has no target " + target.str());
  return adapter.config.lora_scale() * (it->second.b * it->second.a);
}

double shannon_entropy(std::span<const double> dist) {
  double total = 0.0;
  double h = 0.0;
  for (double p : dist) {
    if (!(p >= 0.0)) throw ContractError("shannon_entropy: negative or non-finite probability");
    total += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(total - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg.precision(12);
    msg << "shannon_entropy: probabilities sum to " << total << ", not 1";
    throw ContractError(msg.str());
  }
  return h;
}

double shannon_entropy(const RowVector& dist) {
  return shannon_entropy(std::span<const double>(dist.data(), static_cast<std::size_t>(dist.size())));
}

double prefix_entropy(const InferenceModel& model, std::span<const TokenId> prompt, int k) {
  const DecodeResult d = greedy_decode(model, prompt, k);
  double h = 0.0;
  for (const auto& dist : d.distributions) h += shannon_entropy(dist);
  return h / static_cast<double>(d.steps());
}

double prefix_entropy(const BaseWeights& base, const AdapterCheckpoint& general, const AdapterCheckpoint& specific,
                      const MergeSpec& spec, std::span<const TokenId> prompt, int k) {
  const AdapterCheckpoint merged = merge_adapters(general, specific, spec);
  return prefix_entropy(InferenceModel(base, &merged), prompt, k);
}

double mean_prefix_entropy(const BaseWeights& base, const AdapterCheckpoint* adapter,
                           const std::vector<std::vector<TokenId>>& prompts, int k) {
  if (prompts.empty()) throw ContractError("mean_prefix_entropy: no prompts");
  const InferenceModel model(base, adapter);
  double total = 0.0;
  for (const auto& p : prompts) total += prefix_entropy(model, p, k);
  return total / static_cast<double>(prompts.size());
}

namespace {

std::vector<double> grid_points(double step) {
  std::vector<double> pts;
  const int n = static_cast<int>(std::floor(1.0 / step + 1e-9));
  for (int i = 0; i <= n; ++i) pts.push_back(std::min(1.0, i * step));
  // the three reference merges are always on the grid
  for (double fixed : {0.0, 0.5, 1.0}) {
    bool present = false;
    for (double p : pts) present = present || std::abs(p - fixed) < 1e-12;
    if (!present) pts.push_back(fixed);
  }
  std::sort(pts.begin(), pts.end());
  return pts;
}

struct Objective {
  double entropy = 0.0;
  double grad = 0.0;  // d entropy / d theta
};

// Mean prefix entropy at λ1 = sigmoid(theta) and its derivative. Decoded tokens are
// taken from a greedy pass and then held fixed; gradient flows through the logits.
Objective entropy_and_grad(const BaseWeights& base, const AdapterCheckpoint& general,
                           const AdapterCheckpoint& specific, const std::vector<std::vector<TokenId>>& prompts,
                           int k, double theta) {
  const double lambda1 = 1.0 / (1.0 + std::exp(-theta));
  const AdapterCheckpoint merged = merge_adapters(general, specific, MergeSpec::fixed(lambda1));
  const InferenceModel model(base, &merged);
  Objective out;
  for (const auto& prompt : prompts) {
    const DecodeResult d = greedy_decode(model, prompt, k);
    std::vector<TokenId> tokens(prompt.begin(), prompt.end());
    tokens.insert(tokens.end(), d.tokens.begin(), d.tokens.end() - 1);
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < d.steps(); ++t) rows.push_back(prompt.size() - 1 + t);

    Graph g;
    const BaseVars bv = bind_base(g, base, false);
    const Var th = g.parameter(Matrix::Constant(1, 1, theta));
    const Var l1 = sigmoid(th);
    const Var l2 = one_minus(l1);
    AdapterVars av;
    av.scale = base.config.lora_scale();
    for (const auto& [id, gd] : general.deltas) {
      const LoraDelta& sd = specific.deltas.at(id);
      const Var a = add(scale_by(l1, g.constant_ref(gd.a)), scale_by(l2, g.constant_ref(sd.a)));
      const Var b = add(scale_by(l1, g.constant_ref(gd.b)), scale_by(l2, g.constant_ref(sd.b)));
      av.factors[id] = {a, b};
    }
    const Var logp = log_softmax_rows(forward_graph(bv, &av, tokens, rows));
    const Var h = scale(sum(mul(exp(logp), logp)), -1.0 / static_cast<double>(rows.size()));
    g.backward(h);
    out.entropy += h.value()(0, 0);
    out.grad += th.grad()(0, 0);
  }
  out.entropy /= static_cast<double>(prompts.size());
  out.grad /= static_cast<double>(prompts.size());
  return out;
}

}  // namespace

AdaptResult adapt_coefficients(const BaseWeights& base, const AdapterCheckpoint& general,
                               const AdapterCheckpoint& specific, const std::vector<std::vector<TokenId>>& prompts,
                               const AdaptConfig& config) {
  config.validate();
  if (prompts.empty()) throw ContractError("adapt_coefficients: empty prompt list");
  AdaptResult result;
  result.k_tokens = config.k_tokens;

  if (config.method == MergeMethod::grid) {
    for (double l1 : grid_points(config.grid_step)) {
      const AdapterCheckpoint merged = merge_adapters(general, specific, MergeSpec::fixed(l1));
      result.objective_trace.push_back({l1, mean_prefix_entropy(base, &merged, prompts, config.k_tokens)});
    }
    // Ties (within 1e-12 of the minimum, since λ·X + (1-λ)·X is not always X to the
    // last bit) go to the smallest λ1, i.e. the largest λ2.
    double min_h = result.objective_trace.front().entropy;
    for (const auto& p : result.objective_trace) min_h = std::min(min_h, p.entropy);
    double best_l1 = 1.0;
    for (const auto& p : result.objective_trace) {
      if (p.entropy <= min_h + 1e-12) best_l1 = std::min(best_l1, p.lambda1);
    }
    result.spec = MergeSpec::fixed(best_l1);
    result.spec.iterations = static_cast<int>(result.objective_trace.size());
  } else {
    double theta = 0.0;
    double lr = config.gradient_lr;
    Objective cur = entropy_and_grad(base, general, specific, prompts, config.k_tokens, theta);
    result.objective_trace.push_back({1.0 / (1.0 + std::exp(-theta)), cur.entropy});
    for (int step = 0; step < config.gradient_steps; ++step) {
      const double next = theta - lr * cur.grad;
      const Objective cand = entropy_and_grad(base, general, specific, prompts, config.k_tokens, next);
      result.objective_trace.push_back({1.0 / (1.0 + std::exp(-next)), cand.entropy});
      if (cand.entropy <= cur.entropy) {
        theta = next;
        cur = cand;
      } else {
        lr *= 0.5;  // back off and retry from the current point
      }
    }
    result.spec = MergeSpec::fixed(1.0 / (1.0 + std::exp(-theta)));
    result.spec.iterations = config.gradient_steps;
  }
  result.spec.method = config.method;
  result.spec.n_samples = static_cast<int>(prompts.size());
  result.spec.seed = config.seed;
  return result;
}

}  // namespace cocktail
