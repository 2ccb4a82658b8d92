#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "germ/dataset.hpp"
#include "germ/model.hpp"
#include "germ/rng.hpp"
#include "germ/tensor.hpp"

namespace germ {

// One unit of Q-learning: an observation window ending at step t, the window
// shifted one step (absent when terminal), the episode instruction, the
// logged action as bins, and the sparse terminal reward.
struct TransitionSample {
  std::vector<Observation> window;
  std::vector<Observation> next_window;  // empty iff terminal
  Instruction instruction;
  std::vector<int> action_bins;
  double reward = 0.0;
  bool terminal = false;
};

// Builds the transition at step t of an episode. Windows shorter than
// time_length-1 at the episode start are front-padded with the first frame.
TransitionSample make_transition(const TrajectoryRecord& rec, size_t t,
                                 const ActionBounds& bounds, int vocab,
                                 int64_t history_frames, int64_t* clamp_counter = nullptr);

// Mixture sampler over the offline dataset: draws the demonstration pool
// (reward 1.0 records) with the dataset's stored mixture probability, then
// an episode and timestep uniformly within the pool.
class TransitionSampler {
 public:
  TransitionSampler(const Dataset& dataset, int64_t history_frames, uint64_t seed);

  TransitionSample next();
  TransitionSample next_demo();  // demonstration pool only (behavior cloning)
  bool last_was_demo() const { return last_was_demo_; }
  // Group draw alone (mixture statistics without building the sample).
  bool draw_group();

 private:
  const Dataset& ds_;
  int64_t frames_;
  Rng rng_;
  bool last_was_demo_ = false;
  int64_t clamp_count_ = 0;
};

// Generic per-dimension autoregressive Q-function surface: teacher-forced
// rows for every action dimension, and first-dimension rows on successor
// windows. Implemented by the transformer decoder and by tabular lookups in
// tests.
class QRowsModel {
 public:
  virtual ~QRowsModel() = default;
  virtual int64_t vocab() const = 0;
  virtual int64_t action_dims() const = 0;
  virtual int64_t history_frames() const = 0;
  virtual std::vector<std::pair<std::string, Tensor*>> named_params() = 0;
  // [B * action_dims, vocab]; row (b, i) is Q(window_b, taken^{1:i}, .).
  virtual NodeId rows_taken(Tape& tape, std::span<const TransitionSample> batch,
                            bool train_mode, Rng& rng,
                            std::vector<GateDecision>* gates) = 0;
  // [subset.size(), vocab]; first-dimension rows on the samples' next windows.
  virtual NodeId rows_next_first(Tape& tape, std::span<const TransitionSample> batch,
                                 std::span<const int> subset) = 0;
};

// Adapter exposing the policy decoder as a Q-function surface.
class DecoderQ : public QRowsModel {
 public:
  explicit DecoderQ(PolicyDecoder& model) : model_(&model) {}
  int64_t vocab() const override { return model_->config().vocab_size; }
  int64_t action_dims() const override { return model_->config().action_dim; }
  int64_t history_frames() const override { return model_->config().history_frames(); }
  std::vector<std::pair<std::string, Tensor*>> named_params() override {
    return model_->named_params();
  }
  NodeId rows_taken(Tape& tape, std::span<const TransitionSample> batch, bool train_mode,
                    Rng& rng, std::vector<GateDecision>* gates) override;
  NodeId rows_next_first(Tape& tape, std::span<const TransitionSample> batch,
                         std::span<const int> subset) override;
  PolicyDecoder& model() { return *model_; }

 private:
  PolicyDecoder* model_;
};

// Bellman-style per-dimension targets, clipped to [0, 1]:
//   y_i     = max_b rows_taken[b, i+1, .]          for i < d_A
//   y_{d_A} = R                                    terminal
//   y_{d_A} = R + gamma * max_b next_first[b, .]   otherwise
// next_first holds one row per entry of next_subset (sample indices with a
// successor window, in ascending order). No gradients flow through targets.
std::vector<double> compute_q_targets(std::span<const double> rows_taken,
                                      std::span<const double> next_first,
                                      std::span<const int> next_subset,
                                      std::span<const double> rewards,
                                      std::span<const uint8_t> terminals, double gamma,
                                      int64_t batch, int64_t dims, int64_t vocab);

// 0.5 * mean over the vocab-1 non-taken bins of Q^2 (zero when vocab == 1).
double conservative_penalty(std::span<const double> q_row, int taken_bin);

struct LossNodes {
  NodeId total = kNoNode;  // td + alpha * cql
  NodeId td = kNoNode;
  NodeId cql = kNoNode;
};

// J = mean 0.5 (Q(taken) - y)^2 + alpha * mean conservative_penalty, built
// on the tape from teacher-forced rows.
LossNodes build_td_loss(Tape& tape, NodeId rows, std::span<const int64_t> taken_flat,
                        std::span<const double> targets, double alpha);

class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor*>> params, double lr,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  // Applies one update from the accumulated gradients and zeroes them.
  void step();
  void set_lr(double lr) { lr_ = lr; }
  int64_t steps_taken() const { return t_; }

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

enum class Variant { kGerm, kGermNoMoe, kGermNoRl };
const char* variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct TrainerConfig {
  double gamma = 0.98;
  double alpha = 1.0;
  double lr = 3e-4;
  double grad_clip = 1.0;
  int64_t batch_size = 8;
  int64_t steps = 2000;
  int64_t target_period = 200;
  uint64_t seed = 0;
  Variant variant = Variant::kGerm;
};

struct StepMetrics {
  int64_t step = 0;
  double loss = 0.0;      // J
  double td_term = 0.0;
  double cql_term = 0.0;
  double mean_q_in = 0.0;
  double mean_q_out = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  std::vector<double> expert_fractions;
};

// Single-writer training loop driver: samples a batch, builds targets from
// the frozen target network, applies one optimizer step, and hard-copies
// online -> target every target_period steps.
class QTrainer {
 public:
  QTrainer(QRowsModel& online, QRowsModel* target, const Dataset& dataset,
           TrainerConfig cfg);

  StepMetrics train_step();
  int64_t steps_done() const { return step_; }
  int64_t clip_events() const { return clip_events_; }
  const TrainerConfig& config() const { return cfg_; }

  // Target construction for one batch (exposed for tests).
  std::vector<double> targets_for(std::span<const TransitionSample> batch);

 private:
  void sync_target();
  StepMetrics rl_step(std::span<const TransitionSample> batch);
  StepMetrics bc_step(std::span<const TransitionSample> batch);

  QRowsModel& online_;
  QRowsModel* target_;
  const Dataset& ds_;
  TrainerConfig cfg_;
  TransitionSampler sampler_;
  Adam adam_;
  Rng noise_rng_;
  int64_t step_ = 0;
  int64_t clip_events_ = 0;
  int64_t frames_;
};

// Copies parameter data between models with identical structure.
void copy_params(QRowsModel& dst, QRowsModel& src);

}  // namespace germ
