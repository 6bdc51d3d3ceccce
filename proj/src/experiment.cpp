#include "cocktail/experiment.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <fstream>

#include "cocktail/checkpoint.hpp"
#include "cocktail/hash.hpp"
#include "cocktail/random.hpp"

namespace cocktail {

namespace fs = std::filesystem;

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  std::vector<std::string> variants;
  for (Variant v : c.variants) variants.push_back(to_string(v));
  j = {{"world", c.world},
       {"model", c.model},
       {"pretrain", c.pretrain},
       {"adapter", c.adapter},
       {"adapt", c.adapt},
       {"pretrain_documents", c.pretrain_documents},
       {"few_shot_percent", c.few_shot_percent},
       {"variants", variants}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (j.contains("world")) c.world = j.at("world").get<WorldConfig>();
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("pretrain")) c.pretrain = j.at("pretrain").get<TrainConfig>();
  if (j.contains("adapter")) c.adapter = j.at("adapter").get<TrainConfig>();
  if (j.contains("adapt")) c.adapt = j.at("adapt").get<AdaptConfig>();
  c.pretrain_documents = j.value("pretrain_documents", c.pretrain_documents);
  c.few_shot_percent = j.value("few_shot_percent", c.few_shot_percent);
  if (j.contains("variants")) {
    c.variants.clear();
    for (const auto& v : j.at("variants")) c.variants.push_back(variant_from_string(v.get<std::string>()));
  }
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return j.get<PipelineConfig>();
}

std::string file_sha256(const fs::path& path) { return sha256_hex(read_file(path)); }

ExperimentDir::ExperimentDir(fs::path root) : root_(std::move(root)) {
  fs::create_directories(root_);
  const fs::path lock = root_ / ".lock";
  lock_fd_ = ::open(lock.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (lock_fd_ < 0) throw ManifestError("cannot open lock file " + lock.string());
  if (::flock(lock_fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(lock_fd_);
    lock_fd_ = -1;
    throw ManifestError("experiment directory " + root_.string() + " is in use by another process");
  }
}

ExperimentDir::~ExperimentDir() {
  if (lock_fd_ >= 0) {
    ::flock(lock_fd_, LOCK_UN);
    ::close(lock_fd_);
  }
}

void ExperimentDir::record(const std::string& step, std::uint64_t seed, const nlohmann::json& config,
                           const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  auto hashes = [&](const std::vector<std::string>& names) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& n : names) j[n] = file_sha256(path(n));
    return j;
  };
  const nlohmann::json entry = {{"step", step},
                                {"tool_version", kToolVersion},
                                {"seed", seed},
                                {"config", config},
                                {"inputs", hashes(inputs)},
                                {"outputs", hashes(outputs)}};
  std::ofstream out(path("manifest.jsonl"), std::ios::app | std::ios::binary);
  if (!out) throw ManifestError("cannot append to manifest in " + root_.string());
  out << entry.dump() << '\n';
}

std::map<std::string, std::string> ExperimentDir::recorded_hashes() const {
  std::map<std::string, std::string> out;
  std::ifstream in(root_ / "manifest.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    for (const auto& [name, hash] : j.at("outputs").items()) out[name] = hash.get<std::string>();
  }
  return out;
}

void ExperimentDir::verify(const std::string& name) const {
  const auto recorded = recorded_hashes();
  const auto it = recorded.find(name);
  if (it == recorded.end()) return;
  if (!fs::exists(path(name))) throw ManifestError("manifest lists " + name + " but the file is missing");
  const std::string now = file_sha256(path(name));
  if (now != it->second) {
    throw ManifestError("hash of " + name + " is " + now.substr(0, 12) + ", manifest records " +
                        it->second.substr(0, 12));
  }
}

std::size_t ExperimentDir::verify_all() const {
  const auto recorded = recorded_hashes();
  for (const auto& [name, hash] : recorded) verify(name);
  return recorded.size();
}

namespace {

World load_world(const ExperimentDir& dir) {
  dir.verify("world.json");
  return nlohmann::json::parse(read_file(dir.path("world.json"))).get<World>();
}

std::vector<InteractionSequence> load_sequences(const ExperimentDir& dir) {
  dir.verify("sequences.jsonl");
  return read_sequences_jsonl(dir.path("sequences.jsonl"));
}

std::vector<InstructionExample> load_examples(const ExperimentDir& dir, const std::string& name, const Tokenizer& tok) {
  dir.verify(name);
  std::string fp;
  auto out = read_examples_jsonl(dir.path(name), &fp);
  if (!out.empty() && fp != tok.fingerprint()) {
    throw IncompatibleAdapterError(name + " was built with a different vocabulary");
  }
  return out;
}

BaseWeights load_base(const ExperimentDir& dir) {
  dir.verify("base.cktl");
  return read_base(dir.path("base.cktl"));
}

AdapterCheckpoint load_adapter(const ExperimentDir& dir, const std::string& name) {
  dir.verify(name);
  return read_adapter(dir.path(name));
}

SplitSpec test_split(const ExperimentDir& dir, Setting setting, const Tokenizer& tok) {
  SplitSpec s;
  s.setting = setting;
  s.test = load_examples(dir, setting == Setting::warm ? "warm_test.jsonl" : "new_item_test.jsonl", tok);
  return s;
}

}  // namespace

void step_gen_world(ExperimentDir& dir, const WorldConfig& config) {
  const World world = gen_world(config);
  write_file(dir.path("world.json"), nlohmann::json(world).dump() + "\n");
  write_sequences_jsonl(dir.path("sequences.jsonl"), gen_sequences(world));
  dir.record("gen-world", config.seed, config, {}, {"world.json", "sequences.jsonl"});
}

void step_gen_data(ExperimentDir& dir, std::uint64_t seed, double few_shot_percent) {
  const World world = load_world(dir);
  const auto seqs = load_sequences(dir);
  const Tokenizer tok = Tokenizer::from_world(world);
  const SplitSpec warm = leave_one_out_split(seqs, Setting::warm, world, seed);
  const SplitSpec cold = leave_one_out_split(seqs, Setting::new_item, world, seed);

  std::vector<InstructionExample> general, specific;
  for (const auto& e : warm.train) (e.meta.domain_id == world.target_domain() ? specific : general).push_back(e);
  specific = few_shot_subsample(specific, few_shot_percent, seed);

  const std::string fp = tok.fingerprint();
  write_examples_jsonl(dir.path("warm_train.jsonl"), warm.train, fp);
  write_examples_jsonl(dir.path("warm_validation.jsonl"), warm.validation, fp);
  write_examples_jsonl(dir.path("warm_test.jsonl"), warm.test, fp);
  write_examples_jsonl(dir.path("new_item_test.jsonl"), cold.test, fp);
  write_examples_jsonl(dir.path("general_train.jsonl"), general, fp);
  write_examples_jsonl(dir.path("specific_train.jsonl"), specific, fp);
  dir.record("gen-data", seed, {{"few_shot_percent", few_shot_percent}, {"skipped_short", warm.skipped_short}},
             {"world.json", "sequences.jsonl"},
             {"warm_train.jsonl", "warm_validation.jsonl", "warm_test.jsonl", "new_item_test.jsonl",
              "general_train.jsonl", "specific_train.jsonl"});
}

PretrainResult step_pretrain(ExperimentDir& dir, const PipelineConfig& config) {
  const World world = load_world(dir);
  const Tokenizer tok = Tokenizer::from_world(world);
  PretrainResult r = pretrain_base(world, tok, config.model, config.pretrain, config.pretrain_documents);
  write_base(dir.path("base.cktl"), r.base);
  write_train_log(dir.path("pretrain_log.jsonl"), r.log);
  dir.record("pretrain", config.pretrain.seed,
             {{"model", config.model},
              {"train", config.pretrain},
              {"documents", config.pretrain_documents},
              {"heldout_perplexity", {r.initial_perplexity, r.final_perplexity}}},
             {"world.json"}, {"base.cktl", "pretrain_log.jsonl"});
  return r;
}

std::string to_string(AdapterKind k) { return k == AdapterKind::general ? "general" : "specific"; }

AdapterTrainResult step_train_lora(ExperimentDir& dir, AdapterKind kind, const TrainConfig& config,
                                   std::uint64_t seed) {
  const World world = load_world(dir);
  const Tokenizer tok = Tokenizer::from_world(world);
  const std::string name = to_string(kind);
  const std::string data_name = name + "_train.jsonl";
  dir.verify(data_name);
  std::string fp;
  const auto data = read_examples_jsonl(dir.path(data_name), &fp);
  const BaseWeights base = load_base(dir);

  TrainConfig tc = config;
  tc.seed = derive_seed(seed, {kind == AdapterKind::general ? 0x9e7eULL : 0x5bec1fULL});
  Provenance prov;
  prov.kind = kind == AdapterKind::general ? ProvenanceKind::general : ProvenanceKind::specific;
  if (kind == AdapterKind::specific) prov.domain_id = world.target_domain();

  AdapterTrainResult r = train_lora(data, tok, fp, base, tc, prov);
  write_adapter(dir.path(name + ".cktl"), r.adapter);
  write_train_log(dir.path(name + "_log.jsonl"), r.log);
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [d, n] : r.domain_counts) counts[std::to_string(d)] = n;
  dir.record("train-lora", seed, {{"kind", name}, {"train", tc}, {"domain_counts", counts}},
             {data_name, "base.cktl"}, {name + ".cktl", name + "_log.jsonl"});
  return r;
}

AdaptResult step_adapt(ExperimentDir& dir, Setting setting, const AdaptConfig& config, std::uint64_t seed) {
  const World world = load_world(dir);
  const auto seqs = load_sequences(dir);
  const Tokenizer tok = Tokenizer::from_world(world);
  const BaseWeights base = load_base(dir);
  const AdapterCheckpoint general = load_adapter(dir, "general.cktl");
  const AdapterCheckpoint specific = load_adapter(dir, "specific.cktl");
  const SplitSpec split = test_split(dir, setting, tok);

  AdaptConfig cfg = config;
  cfg.seed = seed;
  const auto prompts = unlabeled_prompts(split, world, seqs, tok, cfg.n_unlabeled, seed);
  AdaptResult r = adapt_coefficients(base, general, specific, prompts, cfg);
  const std::string stem = "adapt_" + to_string(setting);
  write_file(dir.path(stem + ".json"), adapt_result_json(r).dump(2) + "\n");
  write_adapter(dir.path("cocktail_" + to_string(setting) + ".cktl"), merge_adapters(general, specific, r.spec));
  dir.record("adapt", seed, cfg, {"general.cktl", "specific.cktl", "base.cktl"},
             {stem + ".json", "cocktail_" + to_string(setting) + ".cktl"});
  return r;
}

Evaluation step_eval(ExperimentDir& dir, const PipelineConfig& config, std::uint64_t seed) {
  const World world = load_world(dir);
  const auto seqs = load_sequences(dir);
  const Tokenizer tok = Tokenizer::from_world(world);
  const BaseWeights base = load_base(dir);
  const AdapterCheckpoint general = load_adapter(dir, "general.cktl");
  const AdapterCheckpoint specific = load_adapter(dir, "specific.cktl");
  const SplitSpec warm = test_split(dir, Setting::warm, tok);
  const SplitSpec cold = test_split(dir, Setting::new_item, tok);

  EvalInputs in;
  in.world = &world;
  in.tok = &tok;
  in.sequences = &seqs;
  in.splits = {&warm, &cold};
  in.base = &base;
  in.general = &general;
  in.specific = &specific;
  Evaluation e = evaluate_variants(in, config.adapt, {seed}, config.variants);
  write_reports(dir.path("report.csv"), dir.path("report.json"), e);
  for (const auto& a : e.adaptations) {
    if (a.result.spec.method != MergeMethod::grid) continue;
    write_file(dir.path("adapt_" + to_string(a.setting) + ".json"), adapt_result_json(a.result).dump(2) + "\n");
  }
  dir.record("eval", seed, config.adapt,
             {"base.cktl", "general.cktl", "specific.cktl", "warm_test.jsonl", "new_item_test.jsonl"},
             {"report.csv", "report.json"});
  return e;
}

PipelineResult run_pipeline(const PipelineConfig& config, std::uint64_t seed, const fs::path& out,
                            const std::optional<fs::path>& base) {
  ExperimentDir dir(out);
  PipelineResult result;
  const auto start = std::chrono::steady_clock::now();
  auto timed = [&](const std::string& name, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    result.timings.push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
  };

  write_file(dir.path("config.json"), nlohmann::json(config).dump(2) + "\n");
  dir.record("config", seed, {}, {}, {"config.json"});
  timed("gen-world", [&] { step_gen_world(dir, config.world); });
  timed("gen-data", [&] { step_gen_data(dir, seed, config.few_shot_percent); });
  if (base) {
    timed("pretrain", [&] {
      const BaseWeights b = read_base(*base);
      const Tokenizer tok = Tokenizer::from_world(load_world(dir));
      if (b.vocab_fingerprint != tok.fingerprint()) {
        throw IncompatibleAdapterError("base " + base->string() + " was pretrained on a different vocabulary");
      }
      write_file(dir.path("base.cktl"), read_file(*base));
      dir.record("pretrain", config.pretrain.seed, {{"reused", base->string()}}, {}, {"base.cktl"});
    });
  } else {
    timed("pretrain", [&] { step_pretrain(dir, config); });
  }
  timed("train-lora general", [&] { step_train_lora(dir, AdapterKind::general, config.adapter, seed); });
  timed("train-lora specific", [&] { step_train_lora(dir, AdapterKind::specific, config.adapter, seed); });
  timed("adapt+eval", [&] { result.evaluation = step_eval(dir, config, seed); });
  result.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace cocktail
