#include "germ/config.hpp"

#include <fstream>

namespace germ {
namespace {

int64_t to_i64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int64_t out = std::stoll(v, &pos);
    require(pos == v.size(), "E_CONFIG", "trailing junk in value for " + key);
    return out;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail("E_CONFIG", "bad integer for key '" + key + "': " + v);
  }
}

uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    uint64_t out = std::stoull(v, &pos);
    require(pos == v.size(), "E_CONFIG", "trailing junk in value for " + key);
    return out;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail("E_CONFIG", "bad unsigned integer for key '" + key + "': " + v);
  }
}

double to_f64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double out = std::stod(v, &pos);
    require(pos == v.size(), "E_CONFIG", "trailing junk in value for " + key);
    return out;
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    fail("E_CONFIG", "bad number for key '" + key + "': " + v);
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail("E_CONFIG", "bad boolean for key '" + key + "': " + v);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, b - a + 1);
}

}  // namespace

void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  // run-level
  if (key == "variant") cfg.trainer.variant = parse_variant(value);
  else if (key == "dataset") cfg.dataset = value;
  else if (key == "out") cfg.out = value;
  else if (key == "checkpoint") cfg.checkpoint = value;
  else if (key == "seed") cfg.seed = to_u64(key, value);
  else if (key == "n_episodes") cfg.n_episodes = to_i64(key, value);
  else if (key == "demo_fraction") cfg.demo_fraction = to_f64(key, value);
  else if (key == "suboptimal_epsilon") cfg.suboptimal_epsilon = to_f64(key, value);
  else if (key == "eval_episodes" || key == "episodes") cfg.eval_episodes = to_i64(key, value);
  else if (key == "eval_random_baseline") cfg.eval_random_baseline = to_bool(key, value);
  else if (key == "trace_epochs") cfg.trace_epochs = to_i64(key, value);
  // trainer
  else if (key == "gamma") cfg.trainer.gamma = to_f64(key, value);
  else if (key == "alpha") cfg.trainer.alpha = to_f64(key, value);
  else if (key == "lr") cfg.trainer.lr = to_f64(key, value);
  else if (key == "grad_clip") cfg.trainer.grad_clip = to_f64(key, value);
  else if (key == "batch_size") cfg.trainer.batch_size = to_i64(key, value);
  else if (key == "steps") cfg.trainer.steps = to_i64(key, value);
  else if (key == "target_period") cfg.trainer.target_period = to_i64(key, value);
  // model
  else if (key == "action_dim") cfg.model.action_dim = to_i64(key, value);
  else if (key == "num_layers") cfg.model.num_layers = to_i64(key, value);
  else if (key == "d_model") cfg.model.d_model = to_i64(key, value);
  else if (key == "num_heads") cfg.model.num_heads = to_i64(key, value);
  else if (key == "d_ff") cfg.model.d_ff = to_i64(key, value);
  else if (key == "num_experts") cfg.model.num_experts = to_i64(key, value);
  else if (key == "top_k") cfg.model.top_k = to_i64(key, value);
  else if (key == "vocab_size") cfg.model.vocab_size = to_i64(key, value);
  else if (key == "time_length") cfg.model.time_length = to_i64(key, value);
  else if (key == "context_len") cfg.model.context_len = to_i64(key, value);
  else if (key == "init_std") cfg.model.init_std = to_f64(key, value);
  // environment
  else if (key == "grid_w") cfg.env.width = static_cast<int>(to_i64(key, value));
  else if (key == "grid_h") cfg.env.height = static_cast<int>(to_i64(key, value));
  else if (key == "horizon") cfg.env.horizon = static_cast<int>(to_i64(key, value));
  else if (key == "motion_threshold") cfg.env.motion_threshold = to_f64(key, value);
  else fail("E_CONFIG", "unknown config key '" + key + "'");
}

void RunConfig::finalize() {
  trainer.seed = seed;
  model.grid_w = env.width;
  model.grid_h = env.height;
  model.validate();
  env.bounds.validate();
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "E_IO", "cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    require(eq != std::string::npos, "E_CONFIG",
            "missing '=' at " + path + ":" + std::to_string(lineno));
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    require(!key.empty(), "E_CONFIG", "empty key at " + path + ":" + std::to_string(lineno));
    apply_config_kv(cfg, key, value);
  }
  return cfg;
}

}  // namespace germ
