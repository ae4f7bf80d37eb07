#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "rhpo/analysis.h"
#include "rhpo/runtime.h"

namespace {

rhpo::ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw rhpo::ContractError("cannot open config '" + path + "'");
  nlohmann::json j;
  in >> j;
  return rhpo::config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RHPO trainer and analysis tool"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs/run", kind, checkpoint, metrics_out = "plots";
  std::vector<std::string> metrics_files;
  bool deterministic = false;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::int64_t steps = -1;
  int ablate_seeds = 2, episodes = 4;

  auto* train = app.add_subcommand("train", "run one training configuration");
  train->add_option("--config", config_path, "experiment config JSON")->required();
  train->add_option("--out", out_dir, "output directory");
  train->add_flag("--deterministic", deterministic,
                  "single-thread interleave, bitwise reproducible");
  train->add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_set = true; });
  train->add_option("--steps", steps, "override n_steps");

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  ablate->add_option("--kind", kind,
                     "kl_sweep | actors | components | init | transfer")
      ->required();
  ablate->add_option("--config", config_path, "base experiment config JSON")->required();
  ablate->add_option("--out", out_dir, "output root");
  ablate->add_option("--seeds", ablate_seeds, "seeds per arm");
  ablate->add_flag("--deterministic", deterministic);

  auto* analyze = app.add_subcommand("analyze", "component/task similarity report");
  analyze->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
  analyze->add_option("--out", out_dir, "output directory");
  analyze->add_option("--episodes", episodes, "evaluation episodes per task");
  analyze->add_option("--seed", seed, "analysis rollout seed")
      ->each([&](const std::string&) { seed_set = true; });

  auto* plot = app.add_subcommand("plot", "learning-curve CSV and SVG from metrics");
  plot->add_option("--metrics", metrics_files, "metrics.jsonl files, one per seed")
      ->required();
  plot->add_option("--out", metrics_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      rhpo::ExperimentConfig cfg = load_config(config_path);
      if (seed_set) cfg.seed = seed;
      if (steps >= 0) cfg.n_steps = steps;
      rhpo::RunResult res = rhpo::run_training(cfg, out_dir, deterministic);
      std::printf("steps=%lld episodes=%lld target_copies=%lld diverged=%d\n",
                  static_cast<long long>(res.learner_steps),
                  static_cast<long long>(res.actor_episodes),
                  static_cast<long long>(res.target_copies), res.diverged ? 1 : 0);
      for (std::size_t t = 0; t < res.final_eval.size(); ++t)
        std::printf("eval task %zu: %.4f\n", t, res.final_eval[t]);
      if (res.diverged) std::printf("note: %s\n", res.note.c_str());
      return res.diverged ? 2 : 0;
    }
    if (*ablate) {
      rhpo::ExperimentConfig cfg = load_config(config_path);
      auto arms = rhpo::run_ablation(kind, cfg, out_dir, ablate_seeds, deterministic);
      for (const auto& arm : arms)
        std::printf("%-32s episodes=%lld diverged=%d\n", arm.name.c_str(),
                    static_cast<long long>(arm.result.actor_episodes),
                    arm.result.diverged ? 1 : 0);
      return 0;
    }
    if (*analyze) {
      rhpo::TrainState ts = rhpo::load_train_checkpoint(checkpoint);
      auto env = rhpo::build_env(ts.cfg);
      rhpo::Rng rng(seed_set ? seed : ts.cfg.seed + 17);
      auto rep = rhpo::analyze_similarity(ts, *env, episodes, rng);
      rhpo::write_similarity(rep, out_dir);
      std::printf("similarity report in %s (%d tasks x %d components)\n", out_dir.c_str(),
                  rep.task_component.rows(), rep.task_component.cols());
      return 0;
    }
    if (*plot) {
      // Task names come from the config sitting next to the first metrics
      // file when there is one; plain indices otherwise.
      std::vector<std::string> names;
      try {
        const auto cfg_path =
            std::filesystem::path(metrics_files.at(0)).parent_path() / "config.json";
        names = rhpo::build_env(load_config(cfg_path.string()))->task_names();
      } catch (const std::exception&) {
      }
      rhpo::write_curves(metrics_files, metrics_out, names);
      std::printf("curves in %s\n", metrics_out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
