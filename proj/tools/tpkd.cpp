// tpkd: experiment driver.
//
//   tpkd [--config FILE] [--set key.path=value ...] <command> [options]
//
// Exit codes: 0 success, 1 other failure, 2 config error, 3 missing
// artifact, 4 numerical divergence.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "tpkd/experiment.hpp"

namespace {

using namespace tpkd;

std::vector<uint64_t> seeds_or_all(const ExperimentConfig& cfg, const std::vector<uint64_t>& picked) {
  return picked.empty() ? cfg.seeds : picked;
}

int run(int argc, char** argv) {
  CLI::App app{"Topology-guided multi-teacher distillation experiments"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "JSON config file (defaults apply when omitted)");
  app.add_option("--set", overrides, "Override a config key, e.g. --set distill.beta=700")->take_all();

  auto* show = app.add_subcommand("config", "Print the resolved config as JSON");
  auto* gen = app.add_subcommand("gen-data", "Generate (or import) train/val/test series datasets");
  auto* pi = app.add_subcommand("extract-pi", "Extract persistence images for every split");

  auto* train = app.add_subcommand("train", "Train one role for the configured seeds");
  std::string role_name;
  std::vector<uint64_t> train_seeds;
  train->add_option("-r,--role", role_name,
                    "teacher1 | teacher2 | scratch | student-kd | student-base | student-ann | student-tpkd | "
                    "student-tpkd-noorth")
      ->required();
  train->add_option("-s,--seed", train_seeds, "Seeds to train (default: all configured)");

  auto* eval = app.add_subcommand("eval", "Evaluate best checkpoints on the clean and corrupted test split");
  std::vector<std::string> eval_roles;
  std::vector<uint64_t> eval_seeds;
  std::vector<int> eval_levels;
  std::string eval_ckpt;
  eval->add_option("-r,--role", eval_roles, "Roles to evaluate (default: every trained role)");
  eval->add_option("-s,--seed", eval_seeds, "Seeds to evaluate (default: all configured)");
  eval->add_option("-l,--level", eval_levels, "Corruption levels 0-3 (default: all)")->check(CLI::Range(0, 3));
  eval->add_option("--checkpoint", eval_ckpt, "Evaluate this checkpoint only and print the report");

  auto* bench = app.add_subcommand("bench", "Per-sample inference latency of teachers and student");
  uint64_t bench_seed = 0;
  bool bench_seed_set = false;
  bench->add_option("-s,--seed", bench_seed, "Seed whose checkpoints are timed (default: first configured)")
      ->each([&](const std::string&) { bench_seed_set = true; });

  auto* analyze = app.add_subcommand("analyze", "Patch-Pearson histograms and layer CKA tables");
  std::vector<uint64_t> analyze_seeds;
  analyze->add_option("-s,--seed", analyze_seeds, "Seeds to analyze (default: first configured)");

  auto* all = app.add_subcommand("run", "Every phase in order: data, images, all roles and seeds, eval, bench, analyze");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  ExperimentConfig cfg = config_path.empty() ? make_config(nlohmann::json::object(), overrides)
                                             : load_config(config_path, overrides);
  if (*show) {
    std::cout << nlohmann::json(cfg).dump(2) << "\n";
    return 0;
  }
  Experiment ex(cfg);

  if (*gen) cmd_gen_data(ex);
  if (*pi) cmd_extract_pi(ex);
  if (*train) {
    const Role role = role_from_string(role_name);
    for (uint64_t s : seeds_or_all(cfg, train_seeds)) cmd_train(ex, role, s);
  }
  if (*eval) {
    if (!eval_ckpt.empty()) {
      const int level = eval_levels.empty() ? 0 : eval_levels.front();
      const uint64_t seed = eval_seeds.empty() ? cfg.seeds.front() : eval_seeds.front();
      std::cout << nlohmann::json(eval_checkpoint_file(ex, eval_ckpt, level, seed)).dump(2) << "\n";
    } else {
      EvalRequest req;
      for (const auto& r : eval_roles) req.roles.push_back(role_from_string(r));
      req.seeds = eval_seeds;
      if (!eval_levels.empty()) req.levels = eval_levels;
      cmd_eval(ex, req);
    }
  }
  if (*bench) {
    for (const auto& r : cmd_bench(ex, bench_seed_set ? bench_seed : cfg.seeds.front()))
      std::cout << r.model << "," << r.per_sample_ms << " ms\n";
  }
  if (*analyze) {
    for (uint64_t s : analyze_seeds.empty() ? std::vector<uint64_t>{cfg.seeds.front()} : analyze_seeds)
      cmd_analyze(ex, s);
  }
  if (*all) {
    cmd_gen_data(ex);
    cmd_extract_pi(ex);
    for (uint64_t s : cfg.seeds)
      for (Role r : all_roles()) cmd_train(ex, r, s);
    cmd_eval(ex, {});
    cmd_bench(ex, cfg.seeds.front());
    cmd_analyze(ex, cfg.seeds.front());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const tpkd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tpkd::MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 3;
  } catch (const tpkd::DivergenceError& e) {
    std::cerr << "diverged at epoch " << e.epoch() << ": " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
