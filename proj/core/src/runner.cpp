#include "germ/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace germ {
namespace {

namespace fs = std::filesystem;

std::string fmt_f64(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_fixed(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double now_sec() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

void ensure_parent_dir(const std::string& path) {
  fs::path p(path);
  if (p.has_parent_path() && !p.parent_path().empty()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  require(fs::is_directory(path), "E_IO", "cannot create output directory: " + path);
}

}  // namespace

double EvalReport::mean_success_pct() const {
  double acc = 0.0;
  for (const FamilyStats& f : families) acc += f.success_pct;
  return acc / static_cast<double>(kNumSkills);
}

std::string EvalReport::to_jsonl() const {
  std::string out;
  for (int f = 0; f < kNumSkills; ++f) {
    out += "{\"family\":\"" + std::string(skill_name(f)) + "\"";
    out += ",\"episodes\":" + std::to_string(families[f].episodes);
    out += ",\"successes\":" + std::to_string(families[f].successes);
    out += ",\"success_pct\":" + fmt_f64(families[f].success_pct);
    out += ",\"stderr_pct\":" + fmt_f64(families[f].stderr_pct);
    if (has_baseline) out += ",\"baseline_pct\":" + fmt_f64(baseline_pct[f]);
    out += "}\n";
  }
  out += "{\"summary\":{\"variant\":\"" + variant + "\"";
  out += ",\"seed\":" + std::to_string(seed);
  out += ",\"episodes_per_family\":" + std::to_string(episodes_per_family);
  out += ",\"mean_success_pct\":" + fmt_f64(mean_success_pct());
  out += ",\"total_params\":" + std::to_string(total_params);
  out += ",\"active_params\":" + std::to_string(active_params);
  out += "}}\n";
  return out;
}

EvalReport evaluate_policy(const EnvConfig& env_cfg, int64_t episodes_per_family,
                           uint64_t seed, const PolicyFactory& factory) {
  require(episodes_per_family >= 1, "E_CONFIG", "need at least one episode per family");
  EvalReport report;
  report.seed = seed;
  report.episodes_per_family = episodes_per_family;
  double t0 = now_sec();
  GridEnv env(env_cfg);
  for (int family = 0; family < kNumSkills; ++family) {
    FamilyStats& fs_ = report.families[family];
    fs_.episodes = episodes_per_family;
    for (int64_t e = 0; e < episodes_per_family; ++e) {
      uint64_t episode_seed = mix_seed(seed, (static_cast<uint64_t>(family) << 40) ^
                                                 static_cast<uint64_t>(e));
      TaskSpec spec = sample_task(family, episode_seed, static_cast<uint64_t>(e));
      EpisodePolicy policy = factory(episode_seed);
      TrajectoryRecord rec = run_episode(env, spec, policy);
      if (rec.success) ++fs_.successes;
    }
    double p = static_cast<double>(fs_.successes) / static_cast<double>(fs_.episodes);
    fs_.success_pct = 100.0 * p;
    fs_.stderr_pct =
        100.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(fs_.episodes));
  }
  report.wall_clock_sec = now_sec() - t0;
  return report;
}

PolicyFactory model_policy_factory(PolicyDecoder& model, const ActionBounds& bounds) {
  int64_t frames = model.config().history_frames();
  int vocab = static_cast<int>(model.config().vocab_size);
  PolicyDecoder* m = &model;
  ActionBounds b = bounds;
  return [m, b, frames, vocab](uint64_t) -> EpisodePolicy {
    auto history = std::make_shared<std::deque<Observation>>();
    return [m, b, frames, vocab, history](GridEnv& env) -> Command {
      history->push_back(env.observe());
      while (static_cast<int64_t>(history->size()) > frames) history->pop_front();
      std::vector<Observation> window(frames);
      for (int64_t i = 0; i < frames; ++i) {
        int64_t idx = static_cast<int64_t>(history->size()) - frames + i;
        window[i] = (*history)[static_cast<size_t>(std::max<int64_t>(0, idx))];
      }
      PolicyDecoder::Decoded d =
          m->greedy_decode(window, env.task().instruction());
      (void)vocab;
      return detokenize(d.action, b, vocab);
    };
  };
}

PolicyFactory random_policy_factory(const EnvConfig&) {
  return [](uint64_t episode_seed) -> EpisodePolicy {
    auto rng = std::make_shared<Rng>(mix_seed(episode_seed, 0xF00D));
    return [rng](GridEnv& env) -> Command { return env.random_command(*rng); };
  };
}

PolicyFactory expert_policy_factory() {
  return [](uint64_t) -> EpisodePolicy {
    return [](GridEnv& env) -> Command { return env.expert_command(); };
  };
}

CollectSummary run_collect(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.finalize();
  CollectConfig cc;
  cc.n_episodes = cfg.n_episodes;
  cc.demo_fraction = cfg.demo_fraction;
  cc.suboptimal_epsilon = cfg.suboptimal_epsilon;
  cc.seed = cfg.seed;
  cc.env = cfg.env;
  cc.vocab_size = static_cast<int>(cfg.model.vocab_size);
  cc.out_path = cfg.dataset.empty() ? cfg.out + "/dataset.jsonl" : cfg.dataset;
  ensure_parent_dir(cc.out_path);
  return collect_dataset(cc);
}

TrainOutput run_train(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  require(!cfg.dataset.empty(), "E_CONFIG", "train: --dataset is required");
  Dataset ds = Dataset::load(cfg.dataset);

  // The dataset pins the environment geometry and quantization.
  cfg.env = ds.header.env;
  cfg.model.vocab_size = ds.header.vocab_size;
  cfg.finalize();

  if (cfg.trainer.variant == Variant::kGermNoMoe) cfg.model.use_moe = false;

  PolicyDecoder online(cfg.model, mix_seed(cfg.seed, 0x111), /*trainable=*/true);
  PolicyDecoder target(cfg.model, 0, /*trainable=*/false);
  DecoderQ online_q(online), target_q(target);

  QTrainer trainer(online_q, &target_q, ds, cfg.trainer);

  ensure_dir(cfg.out);
  std::string metrics_path = cfg.out + "/metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  require(metrics.good(), "E_IO", "cannot open metrics file: " + metrics_path);

  double t0 = now_sec();
  std::deque<double> window;
  double early = 0.0, final_avg = 0.0;
  const int64_t avg_window = 100;
  for (int64_t s = 0; s < cfg.trainer.steps; ++s) {
    StepMetrics m = trainer.train_step();
    window.push_back(m.loss);
    if (static_cast<int64_t>(window.size()) > avg_window) window.pop_front();
    double avg = std::accumulate(window.begin(), window.end(), 0.0) /
                 static_cast<double>(window.size());
    if (m.step == avg_window) early = avg;
    final_avg = avg;

    std::string line = "{\"step\":" + std::to_string(m.step);
    line += ",\"J\":" + fmt_f64(m.loss);
    line += ",\"td_term\":" + fmt_f64(m.td_term);
    line += ",\"cql_term\":" + fmt_f64(m.cql_term);
    line += ",\"mean_q_in\":" + fmt_f64(m.mean_q_in);
    line += ",\"mean_q_out\":" + fmt_f64(m.mean_q_out);
    line += ",\"grad_norm\":" + fmt_f64(m.grad_norm);
    line += ",\"expert_fractions\":[";
    for (size_t i = 0; i < m.expert_fractions.size(); ++i) {
      if (i) line += ',';
      line += fmt_f64(m.expert_fractions[i]);
    }
    line += "]}";
    metrics << line << '\n';
  }
  metrics.close();

  TrainOutput out;
  out.steps = trainer.steps_done();
  out.clip_events = trainer.clip_events();
  out.early_loss = early;
  out.final_loss = final_avg;
  out.metrics_path = metrics_path;
  out.checkpoint_path = cfg.out + "/checkpoint.germ";
  out.wall_clock_sec = now_sec() - t0;

  CheckpointMeta meta;
  meta.config = cfg.model;
  meta.bounds = cfg.env.bounds;
  meta.variant = variant_name(cfg.trainer.variant);
  meta.gamma = cfg.trainer.gamma;
  meta.alpha = cfg.trainer.alpha;
  meta.lr = cfg.trainer.lr;
  meta.seed = cfg.seed;
  meta.steps = static_cast<uint64_t>(trainer.steps_done());
  meta.env_horizon = cfg.env.horizon;
  meta.env_motion_threshold = cfg.env.motion_threshold;
  save_checkpoint(out.checkpoint_path, online, meta);
  return out;
}

EvalReport run_eval(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  require(!cfg.checkpoint.empty(), "E_CONFIG", "eval: --checkpoint is required");
  LoadedCheckpoint ck = load_checkpoint(cfg.checkpoint, /*trainable=*/false);

  EnvConfig env_cfg;
  env_cfg.width = static_cast<int>(ck.meta.config.grid_w);
  env_cfg.height = static_cast<int>(ck.meta.config.grid_h);
  env_cfg.horizon = static_cast<int>(ck.meta.env_horizon);
  env_cfg.motion_threshold = ck.meta.env_motion_threshold;
  env_cfg.bounds = ck.meta.bounds;
  require(ck.meta.config.action_dim == kCommandDims &&
              static_cast<int>(ck.meta.bounds.lo.size()) == kCommandDims,
          "E_CKPT_ENV_MISMATCH", "checkpoint action layout incompatible with environment");

  EvalReport report = evaluate_policy(env_cfg, cfg.eval_episodes, cfg.seed,
                                      model_policy_factory(*ck.model, ck.meta.bounds));
  report.variant = ck.meta.variant;
  ParamCounts pc = ck.model->param_counts();
  report.total_params = pc.total;
  report.active_params = pc.active;

  if (cfg.eval_random_baseline) {
    EvalReport base = evaluate_policy(env_cfg, cfg.eval_episodes, cfg.seed,
                                      random_policy_factory(env_cfg));
    for (int f = 0; f < kNumSkills; ++f) report.baseline_pct[f] = base.families[f].success_pct;
    report.has_baseline = true;
    report.wall_clock_sec += base.wall_clock_sec;
  }

  if (!cfg.out.empty()) {
    ensure_dir(cfg.out);
    std::string path = cfg.out + "/eval_report.jsonl";
    std::ofstream os(path, std::ios::trunc);
    require(os.good(), "E_IO", "cannot open eval report: " + path);
    os << report.to_jsonl();
  }
  return report;
}

CompareOutput run_compare(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  require(!cfg.dataset.empty(), "E_CONFIG", "compare: --dataset is required");
  ensure_dir(cfg.out);

  const Variant variants[3] = {Variant::kGerm, Variant::kGermNoMoe, Variant::kGermNoRl};
  CompareOutput out;
  for (Variant v : variants) {
    RunConfig sub = cfg;
    sub.trainer.variant = v;
    sub.out = cfg.out + "/" + variant_name(v);
    TrainOutput t = run_train(sub);

    RunConfig ev = sub;
    ev.checkpoint = t.checkpoint_path;
    EvalReport report = run_eval(ev);

    CompareRow row;
    row.variant = variant_name(v);
    row.total_params = report.total_params;
    row.active_params = report.active_params;
    row.mixed_data = v != Variant::kGermNoRl;
    row.report = report;
    out.rows.push_back(std::move(row));
  }

  std::ostringstream table;
  table << "variant        total_params  active_params  mixed_data";
  for (int f = 0; f < kNumSkills; ++f) table << "  " << skill_name(f);
  table << "  mean\n";
  for (const CompareRow& r : out.rows) {
    table << r.variant;
    for (size_t pad = r.variant.size(); pad < 15; ++pad) table << ' ';
    table << r.total_params << "  " << r.active_params << "  "
          << (r.mixed_data ? "Y" : "N");
    for (int f = 0; f < kNumSkills; ++f)
      table << "  " << fmt_fixed(r.report.families[f].success_pct, 1);
    table << "  " << fmt_fixed(r.report.mean_success_pct(), 1) << "\n";
  }
  out.table = table.str();

  std::string path = cfg.out + "/compare.jsonl";
  std::ofstream os(path, std::ios::trunc);
  require(os.good(), "E_IO", "cannot open compare report: " + path);
  for (const CompareRow& r : out.rows) {
    std::string line = "{\"variant\":\"" + r.variant + "\"";
    line += ",\"total_params\":" + std::to_string(r.total_params);
    line += ",\"active_params\":" + std::to_string(r.active_params);
    line += ",\"mixed_data\":";
    line += r.mixed_data ? "true" : "false";
    for (int f = 0; f < kNumSkills; ++f)
      line += ",\"" + std::string(skill_name(f)) +
              "\":" + fmt_f64(r.report.families[f].success_pct);
    line += ",\"mean\":" + fmt_f64(r.report.mean_success_pct());
    line += "}";
    os << line << '\n';
  }
  return out;
}

void print_collect_summary(const CollectSummary& s) {
  std::cout << "episodes " << s.episodes << " (demo " << s.demo_episodes << ", sub-optimal "
            << s.suboptimal_episodes << ")\n";
  std::cout << "realized mixture " << fmt_fixed(100.0 * s.realized_demo_fraction, 2)
            << "% demo / "
            << fmt_fixed(100.0 * (1.0 - s.realized_demo_fraction), 2)
            << "% sub-optimal\n";
  std::cout << "family        demo  subopt  success\n";
  for (int f = 0; f < kNumSkills; ++f) {
    std::string name = skill_name(f);
    std::cout << name;
    for (size_t pad = name.size(); pad < 14; ++pad) std::cout << ' ';
    std::cout << s.per_family_demo[f] << "  " << s.per_family_subopt[f] << "  "
              << s.per_family_success[f] << "\n";
  }
}

void print_eval_report(const EvalReport& r) {
  std::cout << "variant " << r.variant << "  seed " << r.seed << "  episodes/family "
            << r.episodes_per_family << "\n";
  std::cout << "total params " << r.total_params << "  active params " << r.active_params
            << "\n";
  std::cout << "family        success%  stderr";
  if (r.has_baseline) std::cout << "  random%";
  std::cout << "\n";
  for (int f = 0; f < kNumSkills; ++f) {
    std::string name = skill_name(f);
    std::cout << name;
    for (size_t pad = name.size(); pad < 14; ++pad) std::cout << ' ';
    std::cout << fmt_fixed(r.families[f].success_pct, 1) << "  "
              << fmt_fixed(r.families[f].stderr_pct, 1);
    if (r.has_baseline) std::cout << "  " << fmt_fixed(r.baseline_pct[f], 1);
    std::cout << "\n";
  }
  std::cout << "mean success " << fmt_fixed(r.mean_success_pct(), 2) << "%  ("
            << fmt_fixed(r.wall_clock_sec, 1) << " s)\n";
}

}  // namespace germ
