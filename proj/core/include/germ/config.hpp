#pragma once

#include <string>

#include "germ/env.hpp"
#include "germ/model.hpp"
#include "germ/qlearning.hpp"

namespace germ {

// Full run configuration for the CLI commands. Loaded from a flat
// key = value file; individual keys can be overridden by CLI flags.
struct RunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  EnvConfig env;

  std::string dataset;
  std::string out = "out";
  std::string checkpoint;

  int64_t n_episodes = 1000;  // collect: total episode count
  double demo_fraction = 0.7569;
  double suboptimal_epsilon = 0.6;

  int64_t eval_episodes = 50;  // per sub-task (skill family)
  bool eval_random_baseline = false;
  int64_t trace_epochs = 0;  // compare: per-epoch go_to evaluation sweep

  uint64_t seed = 0;

  // Propagates shared fields (seed, grid extents) into the sub-configs.
  void finalize();
};

// Parses one key=value pair into the config; unknown keys raise E_CONFIG.
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value);

// Flat key = value file; '#' starts a comment, blank lines ignored.
RunConfig load_run_config(const std::string& path);

}  // namespace germ
