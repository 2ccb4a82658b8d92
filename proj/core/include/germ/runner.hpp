#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "germ/checkpoint.hpp"
#include "germ/config.hpp"
#include "germ/dataset.hpp"
#include "germ/env.hpp"
#include "germ/qlearning.hpp"

namespace germ {

// Per-episode policy; a fresh one is built per rollout from the episode seed.
using EpisodePolicy = std::function<Command(GridEnv&)>;
using PolicyFactory = std::function<EpisodePolicy(uint64_t episode_seed)>;

struct FamilyStats {
  int64_t episodes = 0;
  int64_t successes = 0;
  double success_pct = 0.0;
  double stderr_pct = 0.0;  // binomial standard error
};

struct EvalReport {
  std::string variant = "scripted";
  uint64_t seed = 0;
  int64_t episodes_per_family = 0;
  std::array<FamilyStats, kNumSkills> families{};
  std::array<double, kNumSkills> baseline_pct{};  // random-policy floor
  bool has_baseline = false;
  int64_t total_params = 0;
  int64_t active_params = 0;
  double wall_clock_sec = 0.0;  // printed, not serialized (kept deterministic)

  double mean_success_pct() const;
  // Deterministic line-delimited serialization (excludes wall clock).
  std::string to_jsonl() const;
};

// Rolls out `episodes_per_family` fresh episodes per skill family.
EvalReport evaluate_policy(const EnvConfig& env_cfg, int64_t episodes_per_family,
                           uint64_t seed, const PolicyFactory& factory);

// Greedy-decode policy over a trained model (gate noise off). The rollout
// keeps its own frame history, front-padded like training windows.
PolicyFactory model_policy_factory(PolicyDecoder& model, const ActionBounds& bounds);

// Uniform random commands within bounds.
PolicyFactory random_policy_factory(const EnvConfig& env_cfg);

// Scripted expert (harness sanity oracle).
PolicyFactory expert_policy_factory();

struct TrainOutput {
  std::string checkpoint_path;
  std::string metrics_path;
  int64_t steps = 0;
  int64_t clip_events = 0;
  double early_loss = 0.0;  // moving average around step 100
  double final_loss = 0.0;  // moving average over the last window
  double wall_clock_sec = 0.0;
};

CollectSummary run_collect(const RunConfig& cfg);
TrainOutput run_train(const RunConfig& cfg);
EvalReport run_eval(const RunConfig& cfg);

struct CompareRow {
  std::string variant;
  int64_t total_params = 0;
  int64_t active_params = 0;
  bool mixed_data = false;
  EvalReport report;
};

struct CompareOutput {
  std::vector<CompareRow> rows;
  std::string table;  // human-readable summary
};

// Trains and evaluates all three variants on the same dataset and eval
// seeds; emits a comparison table with parameter and per-family columns.
CompareOutput run_compare(const RunConfig& cfg);

void print_collect_summary(const CollectSummary& s);
void print_eval_report(const EvalReport& r);

}  // namespace germ
