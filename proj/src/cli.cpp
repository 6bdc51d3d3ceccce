#include "cocktail/cli.hpp"

#include <iomanip>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

#include "cocktail/checkpoint.hpp"
#include "cocktail/experiment.hpp"

namespace cocktail {

namespace {

struct Common {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string config;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c, bool with_seed = true) {
  if (with_seed) cmd->add_option("--seed", c.seed, "64-bit seed for every random choice in this step");
  cmd->add_option("--config", c.config, "pipeline config JSON; flags override it")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "experiment directory")->capture_default_str();
}

PipelineConfig config_of(const Common& c) {
  return c.config.empty() ? PipelineConfig{} : load_pipeline_config(c.config);
}

void print_table(const std::vector<MetricsReport>& reports) {
  std::cout << std::left << std::setw(10) << "setting" << std::setw(19) << "variant" << std::setw(8) << "seed"
            << std::setw(10) << "ndcg@1" << std::setw(10) << "ndcg@3" << "lambda2\n";
  for (const auto& r : reports) {
    std::cout << std::left << std::setw(10) << to_string(r.setting) << std::setw(19) << to_string(r.variant)
              << std::setw(8) << r.seed << std::fixed << std::setprecision(4) << std::setw(10) << r.ndcg1
              << std::setw(10) << r.ndcg3;
    if (r.spec) {
      std::cout << std::setprecision(2) << r.spec->lambda2;
    } else {
      std::cout << "-";
    }
    std::cout << '\n';
  }
  std::cout.unsetf(std::ios::floatfield);
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Train, merge and evaluate low-rank adapters on a synthetic recommendation world", "cocktail"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Common c;
  std::function<void()> action;

  auto* gen_world_cmd = app.add_subcommand("gen-world", "generate the world and interaction sequences");
  add_common(gen_world_cmd, c);
  gen_world_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = config_of(c);
      if (c.seed_set) cfg.world.seed = c.seed;
      ExperimentDir dir(c.out);
      step_gen_world(dir, cfg.world);
    };
  });

  double few_shot = 100.0;
  auto* gen_data_cmd = app.add_subcommand("gen-data", "render instruction datasets and splits");
  add_common(gen_data_cmd, c);
  gen_data_cmd->add_option("--few-shot", few_shot, "percent of the target-domain training set to keep")
      ->check(CLI::Range(0.0, 100.0));
  gen_data_cmd->callback([&] {
    action = [&] {
      ExperimentDir dir(c.out);
      step_gen_data(dir, c.seed, gen_data_cmd->count("--few-shot") ? few_shot : config_of(c).few_shot_percent);
    };
  });

  std::optional<int> documents;
  auto* pretrain_cmd = app.add_subcommand("pretrain", "pretrain the base model");
  add_common(pretrain_cmd, c);
  pretrain_cmd->add_option("--documents", documents, "number of pretraining documents");
  pretrain_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = config_of(c);
      if (c.seed_set) cfg.pretrain.seed = c.seed;
      if (documents) cfg.pretrain_documents = *documents;
      ExperimentDir dir(c.out);
      const PretrainResult r = step_pretrain(dir, cfg);
      std::cout << "held-out title perplexity " << r.initial_perplexity << " -> " << r.final_perplexity << '\n';
    };
  });

  std::string kind = "general";
  std::optional<int> epochs;
  std::optional<double> lr;
  auto* train_cmd = app.add_subcommand("train-lora", "train a general or specific adapter");
  add_common(train_cmd, c);
  train_cmd->add_option("--kind", kind, "general or specific")->check(CLI::IsMember({"general", "specific"}));
  train_cmd->add_option("--epochs", epochs, "training epochs");
  train_cmd->add_option("--lr", lr, "learning rate");
  train_cmd->callback([&] {
    action = [&] {
      TrainConfig tc = config_of(c).adapter;
      if (epochs) tc.epochs = *epochs;
      if (lr) tc.lr = *lr;
      ExperimentDir dir(c.out);
      const auto r = step_train_lora(dir, kind == "general" ? AdapterKind::general : AdapterKind::specific, tc, c.seed);
      for (const auto& e : r.log) std::cout << "epoch " << e.epoch << " loss " << e.loss << '\n';
    };
  });

  std::string general_path, specific_path;
  double lambda1 = 0.5;
  auto* merge_cmd = app.add_subcommand("merge", "merge two adapters with fixed coefficients");
  add_common(merge_cmd, c, false);
  merge_cmd->add_option("--general", general_path, "general adapter")->required()->check(CLI::ExistingFile);
  merge_cmd->add_option("--specific", specific_path, "specific adapter")->required()->check(CLI::ExistingFile);
  merge_cmd->add_option("--lambda1", lambda1, "weight on the general adapter; lambda2 = 1 - lambda1")->required();
  merge_cmd->callback([&] {
    action = [&] {
      const AdapterCheckpoint g = read_adapter(general_path);
      const AdapterCheckpoint s = read_adapter(specific_path);
      const AdapterCheckpoint m = merge_adapters(g, s, MergeSpec::fixed(lambda1));
      ExperimentDir dir(c.out);
      write_adapter(dir.path("merged.cktl"), m);
      dir.record("merge", 0, {{"lambda1", lambda1}, {"general", general_path}, {"specific", specific_path}}, {},
                 {"merged.cktl"});
      std::cout << "payload " << m.payload_hash() << '\n';
    };
  });

  std::string setting = "warm";
  std::string method = "grid";
  std::optional<int> n_unlabeled, k_tokens;
  auto* adapt_cmd = app.add_subcommand("adapt", "choose merge coefficients on unlabeled test prompts");
  add_common(adapt_cmd, c);
  adapt_cmd->add_option("--setting", setting, "warm or new_item")->check(CLI::IsMember({"warm", "new_item"}));
  adapt_cmd->add_option("--method", method, "grid or gradient")->check(CLI::IsMember({"grid", "gradient"}));
  adapt_cmd->add_option("--n-unlabeled", n_unlabeled, "number of unlabeled prompts");
  adapt_cmd->add_option("--k-tokens", k_tokens, "decoded tokens per prompt");
  adapt_cmd->callback([&] {
    action = [&] {
      AdaptConfig ac = config_of(c).adapt;
      ac.method = merge_method_from_string(method);
      if (n_unlabeled) ac.n_unlabeled = *n_unlabeled;
      if (k_tokens) ac.k_tokens = *k_tokens;
      ExperimentDir dir(c.out);
      const AdaptResult r = step_adapt(dir, setting_from_string(setting), ac, c.seed);
      std::cout << "lambda1 " << r.spec.lambda1 << " lambda2 " << r.spec.lambda2 << '\n';
    };
  });

  auto* eval_cmd = app.add_subcommand("eval", "evaluate every variant on both settings");
  add_common(eval_cmd, c);
  eval_cmd->callback([&] {
    action = [&] {
      ExperimentDir dir(c.out);
      print_table(step_eval(dir, config_of(c), c.seed).reports);
    };
  });

  auto* report_cmd = app.add_subcommand("report", "verify the manifest and print the metrics table");
  add_common(report_cmd, c, false);
  report_cmd->callback([&] {
    action = [&] {
      ExperimentDir dir(c.out);
      const std::size_t n = dir.verify_all();
      const auto j = nlohmann::json::parse(read_file(dir.path("report.json")));
      print_table(j.at("reports").get<std::vector<MetricsReport>>());
      std::cout << n << " artifacts match the manifest\n";
    };
  });

  std::string base_path;
  auto* pipeline_cmd = app.add_subcommand("pipeline", "gen-world, gen-data, pretrain, train-lora x2, adapt, eval");
  add_common(pipeline_cmd, c);
  pipeline_cmd->add_option("--base", base_path, "reuse a pretrained base instead of pretraining")
      ->check(CLI::ExistingFile);
  pipeline_cmd->add_option("--few-shot", few_shot, "percent of the target-domain training set to keep")
      ->check(CLI::Range(0.0, 100.0));
  pipeline_cmd->callback([&] {
    action = [&] {
      PipelineConfig cfg = config_of(c);
      if (pipeline_cmd->count("--few-shot")) cfg.few_shot_percent = few_shot;
      const auto r = run_pipeline(cfg, c.seed, c.out,
                                  base_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(base_path));
      for (const auto& t : r.timings) std::cout << std::left << std::setw(22) << t.step << t.seconds << " s\n";
      print_table(r.evaluation.reports);
      std::cout << "total " << r.total_seconds << " s\n";
    };
  });

  try {
    app.parse(argc, argv);
    for (auto* sub : app.get_subcommands()) {
      const CLI::Option* seed = sub->get_option_no_throw("--seed");
      c.seed_set = seed != nullptr && seed->count() > 0;
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    action();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

int dispatch(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("cocktail");
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace cocktail
