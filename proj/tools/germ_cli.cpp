// Command-line harness: dataset collection, training, evaluation, and the
// three-variant comparison. Flags override config-file values.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "germ/runner.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::string> variant;
  std::optional<std::string> dataset;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  std::optional<uint64_t> seed;
  std::optional<int64_t> steps;
  std::optional<int64_t> episodes;
  std::optional<double> alpha;
  std::optional<double> gamma;
  std::optional<double> demo_fraction;
  std::optional<int64_t> trace_epochs;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "flat key=value config file");
  cmd->add_option("--variant", f.variant, "germ | germ_no_moe | germ_no_rl");
  cmd->add_option("--dataset", f.dataset, "dataset file path");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--checkpoint", f.checkpoint, "checkpoint file path");
  cmd->add_option("--seed", f.seed, "root random seed");
  cmd->add_option("--steps", f.steps, "training steps");
  cmd->add_option("--episodes", f.episodes,
                  "episodes: per sub-task for eval/compare, total for collect");
  cmd->add_option("--alpha", f.alpha, "conservative regularization weight");
  cmd->add_option("--gamma", f.gamma, "discount factor");
  cmd->add_option("--demo-fraction", f.demo_fraction, "demonstration mixture fraction");
  cmd->add_option("--trace-epochs", f.trace_epochs, "per-epoch eval sweep (compare)");
}

germ::RunConfig build_config(const CommonFlags& f, bool episodes_are_total) {
  germ::RunConfig cfg;
  if (!f.config_path.empty()) cfg = germ::load_run_config(f.config_path);
  if (f.variant) germ::apply_config_kv(cfg, "variant", *f.variant);
  if (f.dataset) cfg.dataset = *f.dataset;
  if (f.out) cfg.out = *f.out;
  if (f.checkpoint) cfg.checkpoint = *f.checkpoint;
  if (f.seed) cfg.seed = *f.seed;
  if (f.steps) cfg.trainer.steps = *f.steps;
  if (f.episodes) {
    if (episodes_are_total)
      cfg.n_episodes = *f.episodes;
    else
      cfg.eval_episodes = *f.episodes;
  }
  if (f.alpha) cfg.trainer.alpha = *f.alpha;
  if (f.gamma) cfg.trainer.gamma = *f.gamma;
  if (f.demo_fraction) cfg.demo_fraction = *f.demo_fraction;
  if (f.trace_epochs) cfg.trace_epochs = *f.trace_epochs;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"germ: sparse mixture-of-experts offline Q-learning on a toy multi-task gridworld"};
  app.require_subcommand(1);

  CommonFlags collect_f, train_f, eval_f, compare_f;
  CLI::App* collect = app.add_subcommand("collect", "generate the offline dataset");
  add_common(collect, collect_f);
  CLI::App* train = app.add_subcommand("train", "train one variant on a dataset");
  add_common(train, train_f);
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval_f);
  CLI::App* compare = app.add_subcommand("compare", "train and evaluate all three variants");
  add_common(compare, compare_f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (collect->parsed()) {
      germ::RunConfig cfg = build_config(collect_f, /*episodes_are_total=*/true);
      germ::CollectSummary s = germ::run_collect(cfg);
      germ::print_collect_summary(s);
    } else if (train->parsed()) {
      germ::RunConfig cfg = build_config(train_f, false);
      germ::TrainOutput t = germ::run_train(cfg);
      std::cout << "trained " << t.steps << " steps in " << t.wall_clock_sec << " s\n";
      std::cout << "loss avg: step-100 " << t.early_loss << " -> final " << t.final_loss
                << "\n";
      std::cout << "gradient clip events: " << t.clip_events << "\n";
      std::cout << "checkpoint: " << t.checkpoint_path << "\n";
      std::cout << "metrics: " << t.metrics_path << "\n";
    } else if (eval_cmd->parsed()) {
      germ::RunConfig cfg = build_config(eval_f, false);
      germ::EvalReport r = germ::run_eval(cfg);
      germ::print_eval_report(r);
    } else if (compare->parsed()) {
      germ::RunConfig cfg = build_config(compare_f, false);
      germ::CompareOutput c = germ::run_compare(cfg);
      std::cout << c.table;
    }
  } catch (const germ::Error& e) {
    std::cerr << "error[" << e.code() << "]: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[E_UNKNOWN]: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
