#include "germ/qlearning.hpp"

#include <algorithm>
#include <cmath>

namespace germ {

TransitionSample make_transition(const TrajectoryRecord& rec, size_t t,
                                 const ActionBounds& bounds, int vocab,
                                 int64_t history_frames, int64_t* clamp_counter) {
  require(t < rec.length(), "E_RANGE", "transition index out of episode");
  TransitionSample s;
  s.instruction = rec.task.instruction();
  auto window_ending_at = [&](size_t end) {
    std::vector<Observation> w(history_frames);
    for (int64_t i = 0; i < history_frames; ++i) {
      int64_t idx = static_cast<int64_t>(end) - (history_frames - 1 - i);
      w[i] = rec.obs[static_cast<size_t>(std::max<int64_t>(0, idx))];
    }
    return w;
  };
  s.window = window_ending_at(t);
  s.terminal = t + 1 == rec.length();
  if (!s.terminal) s.next_window = window_ending_at(t + 1);
  s.action_bins = discretize(rec.cmds[t], bounds, vocab, clamp_counter).bins;
  s.reward = s.terminal ? rec.reward : 0.0;
  return s;
}

TransitionSampler::TransitionSampler(const Dataset& dataset, int64_t history_frames,
                                     uint64_t seed)
    : ds_(dataset), frames_(history_frames), rng_(seed) {
  require(!ds_.records.empty(), "E_DATASET", "sampler: dataset has no episodes");
}

bool TransitionSampler::draw_group() {
  bool demo = rng_.uniform() < ds_.header.demo_fraction;
  if (demo && ds_.demo_indices.empty()) demo = false;
  if (!demo && ds_.subopt_indices.empty()) demo = true;
  last_was_demo_ = demo;
  return demo;
}

TransitionSample TransitionSampler::next() {
  bool demo = draw_group();
  const std::vector<size_t>& pool = demo ? ds_.demo_indices : ds_.subopt_indices;
  const TrajectoryRecord& rec = ds_.records[pool[rng_.uniform_int(pool.size())]];
  size_t t = static_cast<size_t>(rng_.uniform_int(rec.length()));
  return make_transition(rec, t, ds_.header.env.bounds, ds_.header.vocab_size, frames_,
                         &clamp_count_);
}

TransitionSample TransitionSampler::next_demo() {
  require(!ds_.demo_indices.empty(), "E_NO_DEMOS",
          "no demonstrations (reward 1.0 records) in dataset");
  last_was_demo_ = true;
  const TrajectoryRecord& rec =
      ds_.records[ds_.demo_indices[rng_.uniform_int(ds_.demo_indices.size())]];
  size_t t = static_cast<size_t>(rng_.uniform_int(rec.length()));
  return make_transition(rec, t, ds_.header.env.bounds, ds_.header.vocab_size, frames_,
                         &clamp_count_);
}

NodeId DecoderQ::rows_taken(Tape& tape, std::span<const TransitionSample> batch,
                            bool train_mode, Rng& rng, std::vector<GateDecision>* gates) {
  const ModelConfig& cfg = model_->config();
  ContextBatch ctx;
  std::vector<int64_t> prior;
  prior.reserve(batch.size() * (cfg.action_dim - 1));
  for (const TransitionSample& s : batch) {
    ctx.add(s.window, s.instruction, cfg);
    require(static_cast<int64_t>(s.action_bins.size()) == cfg.action_dim, "E_SHAPE",
            "transition has wrong action_bins extent");
    for (int64_t i = 0; i + 1 < cfg.action_dim; ++i) prior.push_back(s.action_bins[i]);
  }
  return model_->build_rows(tape, ctx, prior, cfg.action_dim, train_mode, rng, gates);
}

NodeId DecoderQ::rows_next_first(Tape& tape, std::span<const TransitionSample> batch,
                                 std::span<const int> subset) {
  const ModelConfig& cfg = model_->config();
  ContextBatch ctx;
  for (int idx : subset) {
    const TransitionSample& s = batch[idx];
    require(!s.next_window.empty(), "E_SHAPE", "subset sample has no next window");
    ctx.add(s.next_window, s.instruction, cfg);
  }
  Rng dummy(0);
  return model_->build_rows(tape, ctx, {}, 1, /*train_mode=*/false, dummy, nullptr);
}

std::vector<double> compute_q_targets(std::span<const double> rows_taken,
                                      std::span<const double> next_first,
                                      std::span<const int> next_subset,
                                      std::span<const double> rewards,
                                      std::span<const uint8_t> terminals, double gamma,
                                      int64_t batch, int64_t dims, int64_t vocab) {
  require(static_cast<int64_t>(rows_taken.size()) == batch * dims * vocab, "E_SHAPE",
          "compute_q_targets: rows_taken extent mismatch");
  require(static_cast<int64_t>(next_first.size()) ==
              static_cast<int64_t>(next_subset.size()) * vocab,
          "E_SHAPE", "compute_q_targets: next_first extent mismatch");
  require(gamma > 0.0 && gamma <= 1.0, "E_CONFIG", "gamma must be in (0,1]");

  auto row_max = [&](std::span<const double> all, int64_t row) {
    const double* r = all.data() + row * vocab;
    double m = r[0];
    for (int64_t v = 1; v < vocab; ++v) m = std::max(m, r[v]);
    require(std::isfinite(m), "E_NONFINITE", "non-finite target-network Q value");
    return m;
  };

  std::vector<int64_t> next_pos(batch, -1);
  for (size_t i = 0; i < next_subset.size(); ++i) next_pos[next_subset[i]] = i;

  std::vector<double> y(batch * dims, 0.0);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t i = 0; i < dims - 1; ++i)
      y[b * dims + i] = row_max(rows_taken, b * dims + i + 1);
    double last;
    if (terminals[b]) {
      last = rewards[b];
    } else {
      require(next_pos[b] >= 0, "E_SHAPE",
              "non-terminal sample missing from next_subset");
      last = rewards[b] + gamma * row_max(next_first, next_pos[b]);
    }
    y[b * dims + dims - 1] = last;
  }
  for (double& v : y) v = std::clamp(v, 0.0, 1.0);
  return y;
}

double conservative_penalty(std::span<const double> q_row, int taken_bin) {
  int64_t vocab = static_cast<int64_t>(q_row.size());
  require(taken_bin >= 0 && taken_bin < vocab, "E_RANGE",
          "conservative_penalty: taken bin out of range");
  if (vocab == 1) return 0.0;
  double acc = 0.0;
  for (int64_t v = 0; v < vocab; ++v)
    if (v != taken_bin) acc += q_row[v] * q_row[v];
  return 0.5 * acc / static_cast<double>(vocab - 1);
}

LossNodes build_td_loss(Tape& tape, NodeId rows, std::span<const int64_t> taken_flat,
                        std::span<const double> targets, double alpha) {
  int64_t vocab = tape.node(rows).shape.back();
  int64_t n_rows = tape.node(rows).numel() / vocab;
  require(static_cast<int64_t>(taken_flat.size()) == n_rows &&
              static_cast<int64_t>(targets.size()) == n_rows,
          "E_SHAPE", "build_td_loss: need one taken bin and target per row");

  NodeId q_taken =
      tape.gather_lastdim(rows, std::vector<int64_t>(taken_flat.begin(), taken_flat.end()));
  std::vector<double> neg_y(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) neg_y[i] = -targets[i];
  NodeId diff = tape.add(q_taken, tape.constant({n_rows}, std::move(neg_y)));
  LossNodes out;
  out.td = tape.scalar_mul(tape.mean(tape.square(diff)), 0.5);

  if (vocab > 1) {
    NodeId sum_sq = tape.sum(tape.square(rows), ReduceAxis::kLastDim);
    NodeId out_sq = tape.add(sum_sq, tape.scalar_mul(tape.square(q_taken), -1.0));
    out.cql = tape.scalar_mul(tape.mean(out_sq), 0.5 / static_cast<double>(vocab - 1));
  } else {
    out.cql = tape.constant_scalar(0.0);
  }
  out.total = tape.add(out.td, tape.scalar_mul(out.cql, alpha));
  return out;
}

Adam::Adam(std::vector<std::pair<std::string, Tensor*>> params, double lr, double beta1,
           double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& [name, t] : params_) {
    m_.emplace_back(t->data.size(), 0.0);
    v_.emplace_back(t->data.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = *params_[p].second;
    std::vector<double>& m = m_[p];
    std::vector<double>& v = v_[p];
    for (size_t i = 0; i < t.data.size(); ++i) {
      double g = t.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      t.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    t.zero_grad();
  }
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kGerm: return "germ";
    case Variant::kGermNoMoe: return "germ_no_moe";
    case Variant::kGermNoRl: return "germ_no_rl";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "germ") return Variant::kGerm;
  if (name == "germ_no_moe") return Variant::kGermNoMoe;
  if (name == "germ_no_rl") return Variant::kGermNoRl;
  fail("E_CONFIG", "unknown variant '" + name + "'");
}

void copy_params(QRowsModel& dst, QRowsModel& src) {
  auto d = dst.named_params();
  auto s = src.named_params();
  require(d.size() == s.size(), "E_CONFIG", "copy_params: structure mismatch");
  for (size_t i = 0; i < d.size(); ++i) {
    require(d[i].first == s[i].first && d[i].second->shape == s[i].second->shape,
            "E_CONFIG", "copy_params: mismatch at " + d[i].first);
    d[i].second->data = s[i].second->data;
  }
}

QTrainer::QTrainer(QRowsModel& online, QRowsModel* target, const Dataset& dataset,
                   TrainerConfig cfg)
    : online_(online),
      target_(target),
      ds_(dataset),
      cfg_(cfg),
      sampler_(dataset, online.history_frames(), mix_seed(cfg.seed, 0xBA7C4)),
      adam_(online.named_params(), cfg.lr),
      noise_rng_(mix_seed(cfg.seed, 0x900153)),
      frames_(online.history_frames()) {
  require(cfg_.batch_size >= 1, "E_CONFIG", "batch_size must be >= 1");
  require(cfg_.alpha >= 0.0, "E_CONFIG", "alpha must be >= 0");
  require(cfg_.gamma > 0.0 && cfg_.gamma <= 1.0, "E_CONFIG", "gamma must be in (0,1]");
  if (cfg_.variant == Variant::kGermNoRl) {
    require(!ds_.demo_indices.empty(), "E_NO_DEMOS",
            "no demonstrations in dataset; behavior cloning needs reward 1.0 records");
  } else {
    require(target_ != nullptr, "E_CONFIG", "RL training needs a target network");
    sync_target();
  }
}

void QTrainer::sync_target() {
  if (target_ != nullptr) copy_params(*target_, online_);
}

std::vector<double> QTrainer::targets_for(std::span<const TransitionSample> batch) {
  int64_t B = static_cast<int64_t>(batch.size());
  int64_t dims = online_.action_dims();
  int64_t vocab = online_.vocab();

  std::vector<int> next_subset;
  std::vector<double> rewards(B);
  std::vector<uint8_t> terminals(B);
  for (int64_t b = 0; b < B; ++b) {
    rewards[b] = batch[b].reward;
    terminals[b] = batch[b].terminal ? 1 : 0;
    if (!batch[b].terminal) next_subset.push_back(static_cast<int>(b));
  }

  Rng dummy(0);
  Tape tgt_tape;
  NodeId rows = target_->rows_taken(tgt_tape, batch, /*train_mode=*/false, dummy, nullptr);
  std::vector<double> next_vals;
  if (!next_subset.empty()) {
    Tape next_tape;
    NodeId nf = target_->rows_next_first(next_tape, batch, next_subset);
    next_vals = next_tape.value(nf);
  }
  return compute_q_targets(tgt_tape.value(rows), next_vals, next_subset, rewards,
                           terminals, cfg_.gamma, B, dims, vocab);
}

StepMetrics QTrainer::train_step() {
  int64_t B = cfg_.batch_size;
  std::vector<TransitionSample> batch;
  batch.reserve(B);
  bool bc = cfg_.variant == Variant::kGermNoRl;
  for (int64_t b = 0; b < B; ++b)
    batch.push_back(bc ? sampler_.next_demo() : sampler_.next());
  StepMetrics m = bc ? bc_step(batch) : rl_step(batch);
  ++step_;
  m.step = step_;
  if (!bc && cfg_.target_period > 0 && step_ % cfg_.target_period == 0) sync_target();
  return m;
}

namespace {

double clip_gradients(std::vector<std::pair<std::string, Tensor*>> params, double clip,
                      bool* clipped) {
  double sq = 0.0;
  for (auto& [name, t] : params)
    for (double g : t->grad) sq += g * g;
  double norm = std::sqrt(sq);
  *clipped = clip > 0.0 && norm > clip;
  if (*clipped) {
    double scale = clip / norm;
    for (auto& [name, t] : params)
      for (double& g : t->grad) g *= scale;
  }
  return norm;
}

void q_row_means(std::span<const double> rows, std::span<const int64_t> taken,
                 int64_t vocab, double* mean_in, double* mean_out) {
  int64_t n_rows = static_cast<int64_t>(taken.size());
  double in = 0.0, total = 0.0;
  for (int64_t r = 0; r < n_rows; ++r) {
    const double* row = rows.data() + r * vocab;
    in += row[taken[r]];
    for (int64_t v = 0; v < vocab; ++v) total += row[v];
  }
  *mean_in = in / static_cast<double>(n_rows);
  *mean_out = vocab > 1
                  ? (total - in) / static_cast<double>(n_rows * (vocab - 1))
                  : 0.0;
}

}  // namespace

StepMetrics QTrainer::rl_step(std::span<const TransitionSample> batch) {
  int64_t B = static_cast<int64_t>(batch.size());
  int64_t dims = online_.action_dims();
  int64_t vocab = online_.vocab();

  std::vector<double> targets = targets_for(batch);

  std::vector<int64_t> taken(B * dims);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < dims; ++i) taken[b * dims + i] = batch[b].action_bins[i];

  Tape tape;
  std::vector<GateDecision> gates;
  NodeId rows = online_.rows_taken(tape, batch, /*train_mode=*/true, noise_rng_, &gates);
  LossNodes loss = build_td_loss(tape, rows, taken, targets, cfg_.alpha);

  StepMetrics m;
  m.loss = tape.value(loss.total)[0];
  m.td_term = tape.value(loss.td)[0];
  m.cql_term = tape.value(loss.cql)[0];
  require(std::isfinite(m.loss), "E_NAN",
          "non-finite loss at step " + std::to_string(step_ + 1));
  q_row_means(tape.value(rows), taken, vocab, &m.mean_q_in, &m.mean_q_out);

  tape.backprop(loss.total);
  m.grad_norm = clip_gradients(online_.named_params(), cfg_.grad_clip, &m.clipped);
  if (m.clipped) ++clip_events_;
  adam_.step();

  if (!gates.empty()) {
    ExpertLoadStats stats =
        expert_load_stats(gates, static_cast<int64_t>(gates[0].noisy_logits.size()));
    m.expert_fractions = stats.fractions;
  }
  return m;
}

StepMetrics QTrainer::bc_step(std::span<const TransitionSample> batch) {
  int64_t B = static_cast<int64_t>(batch.size());
  int64_t dims = online_.action_dims();
  int64_t vocab = online_.vocab();

  std::vector<int64_t> taken(B * dims);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < dims; ++i) taken[b * dims + i] = batch[b].action_bins[i];

  Tape tape;
  std::vector<GateDecision> gates;
  NodeId rows = online_.rows_taken(tape, batch, /*train_mode=*/true, noise_rng_, &gates);
  NodeId ce = tape.mean(tape.cross_entropy_lastdim(rows, taken));

  StepMetrics m;
  m.loss = tape.value(ce)[0];
  m.td_term = m.loss;
  m.cql_term = 0.0;
  require(std::isfinite(m.loss), "E_NAN",
          "non-finite loss at step " + std::to_string(step_ + 1));
  q_row_means(tape.value(rows), taken, vocab, &m.mean_q_in, &m.mean_q_out);

  tape.backprop(ce);
  m.grad_norm = clip_gradients(online_.named_params(), cfg_.grad_clip, &m.clipped);
  if (m.clipped) ++clip_events_;
  adam_.step();

  if (!gates.empty()) {
    ExpertLoadStats stats =
        expert_load_stats(gates, static_cast<int64_t>(gates[0].noisy_logits.size()));
    m.expert_fractions = stats.fractions;
  }
  return m;
}

}  // namespace germ
