#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cocktail/eval.hpp"
#include "cocktail/training.hpp"

namespace cocktail {

inline constexpr const char* kToolVersion = "cocktail 0.1.0";

/// A manifest entry does not match the file on disk, or the directory is busy.
class ManifestError : public ContractError {
 public:
  using ContractError::ContractError;
};

struct PipelineConfig {
  WorldConfig world;
  ModelConfig model;
  TrainConfig pretrain = TrainConfig::pretrain_defaults();
  TrainConfig adapter = TrainConfig::adapter_defaults();
  AdaptConfig adapt;
  int pretrain_documents = kDefaultPretrainDocuments;
  double few_shot_percent = 100.0;  // applied to the target-domain training set
  std::vector<Variant> variants = all_variants();
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
/// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, PipelineConfig& c);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

/// One experiment directory with a flat layout, an append-only manifest.jsonl and an
/// advisory lock held for the lifetime of the object.
class ExperimentDir {
 public:
  explicit ExperimentDir(std::filesystem::path root);
  ~ExperimentDir();
  ExperimentDir(const ExperimentDir&) = delete;
  ExperimentDir& operator=(const ExperimentDir&) = delete;

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& name) const { return root_ / name; }

  /// Appends {step, tool_version, seed, config, inputs, outputs} with content hashes.
  void record(const std::string& step, std::uint64_t seed, const nlohmann::json& config,
              const std::vector<std::string>& inputs, const std::vector<std::string>& outputs);
  /// Latest recorded hash per file name.
  std::map<std::string, std::string> recorded_hashes() const;
  /// Throws ManifestError if a recorded file's current hash differs from its latest record.
  void verify(const std::string& name) const;
  /// Verifies every recorded file; returns how many were checked.
  std::size_t verify_all() const;

 private:
  std::filesystem::path root_;
  int lock_fd_ = -1;
};

std::string file_sha256(const std::filesystem::path& path);

// Pipeline steps. Each reads its inputs from and writes its outputs to `dir`.
void step_gen_world(ExperimentDir& dir, const WorldConfig& config);
void step_gen_data(ExperimentDir& dir, std::uint64_t seed, double few_shot_percent);
PretrainResult step_pretrain(ExperimentDir& dir, const PipelineConfig& config);
enum class AdapterKind { general, specific };
std::string to_string(AdapterKind k);
AdapterTrainResult step_train_lora(ExperimentDir& dir, AdapterKind kind, const TrainConfig& config, std::uint64_t seed);
AdaptResult step_adapt(ExperimentDir& dir, Setting setting, const AdaptConfig& config, std::uint64_t seed);
Evaluation step_eval(ExperimentDir& dir, const PipelineConfig& config, std::uint64_t seed);

struct StepTiming {
  std::string step;
  double seconds = 0.0;
};

struct PipelineResult {
  Evaluation evaluation;
  std::vector<StepTiming> timings;
  double total_seconds = 0.0;
};

/// gen-world, gen-data, pretrain (skipped when `base` is given: it is copied in),
/// train-lora general and specific, then adapt + eval.
PipelineResult run_pipeline(const PipelineConfig& config, std::uint64_t seed, const std::filesystem::path& out,
                            const std::optional<std::filesystem::path>& base = std::nullopt);

}  // namespace cocktail
