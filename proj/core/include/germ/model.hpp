#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "germ/action.hpp"
#include "germ/moe.hpp"
#include "germ/obs.hpp"
#include "germ/rng.hpp"
#include "germ/tensor.hpp"

namespace germ {

struct ModelConfig {
  int64_t action_dim = 12;
  int64_t num_layers = 2;
  int64_t d_model = 64;
  int64_t num_heads = 4;
  int64_t d_ff = 128;
  int64_t num_experts = 8;
  int64_t top_k = 2;
  int64_t vocab_size = 256;
  int64_t time_length = 7;  // history_frames() + the current frame
  int64_t context_len = 32;
  bool use_moe = true;
  // observation vocabulary extents; must mirror the environment geometry
  int64_t grid_w = 7;
  int64_t grid_h = 7;
  double init_std = 0.02;

  int64_t history_frames() const { return time_length - 1; }
  int64_t instruction_tokens() const { return 4; }
  int64_t context_tokens() const { return instruction_tokens() + history_frames(); }
  // Dense FFN width for the no-MoE ablation, chosen so the dense FFN
  // parameter count equals the MoE layer's active (gate + k experts)
  // parameter count exactly.
  int64_t dense_ff_width() const { return num_experts + top_k * d_ff; }

  void validate() const;
};

struct ParamCounts {
  int64_t total = 0;
  int64_t active = 0;
};

// Featurized model inputs for a batch of observation windows.
struct ContextBatch {
  int64_t batch = 0;
  int64_t frames = 0;
  std::vector<int64_t> skill, object, gait, speed;           // [B]
  std::vector<int64_t> fx, fy, fheading, ftarget, ftx, fty;  // [B*frames]
  std::vector<int64_t> fpatch;                               // [B*frames*9]

  // Validates every id against the config's vocabularies; errors name the
  // offending field. The window must hold exactly time_length-1 frames.
  void add(std::span<const Observation> window, const Instruction& instr,
           const ModelConfig& cfg);
};

// Per-dimension Q rows over the bin vocabulary, row i conditioned on the
// bins used for rows 1..i-1 when produced autoregressively.
struct PolicyOutput {
  int64_t dims = 0;
  int64_t vocab = 0;
  std::vector<double> q;  // [dims * vocab]

  std::span<const double> row(int64_t i) const {
    return {q.data() + i * vocab, static_cast<size_t>(vocab)};
  }
};

// Argmax per row, ties resolved toward the lowest bin index.
DiscretizedAction greedy_action(const PolicyOutput& out);

// Decoder-only transformer with per-action-dimension autoregressive heads.
// Sequence layout per sample: 4 instruction tokens, time_length-1 frame
// tokens, then one token per action dimension (a start token followed by
// embeddings of previously chosen bins).
class PolicyDecoder {
 public:
  PolicyDecoder(ModelConfig cfg, uint64_t init_seed, bool trainable = true);

  const ModelConfig& config() const { return cfg_; }

  // Q rows for action dimensions 1..n_rows, teacher-forced on prior_bins
  // ((n_rows-1) bins per sample). Returns a [B*n_rows, vocab] node.
  NodeId build_rows(Tape& tape, const ContextBatch& ctx,
                    std::span<const int64_t> prior_bins, int64_t n_rows,
                    bool train_mode, Rng& rng,
                    std::vector<GateDecision>* gates = nullptr);

  // Context token embeddings only (tests and diagnostics): [B*C, d_model].
  NodeId encode_context(Tape& tape, const ContextBatch& ctx);

  // Full autoregressive greedy decode for one window (gate noise off).
  struct Decoded {
    PolicyOutput output;
    DiscretizedAction action;
  };
  Decoded greedy_decode(std::span<const Observation> window, const Instruction& instr);

  std::vector<std::pair<std::string, Tensor*>> named_params();
  ParamCounts param_counts() const;
  void copy_params_from(PolicyDecoder& src);
  void zero_all_params();

 private:
  struct Block {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor w_q, w_k, w_v, w_o;
    std::optional<MoeLayer> moe;
    Tensor dense_in, dense_out;  // no-MoE ablation
  };

  ModelConfig cfg_;
  bool trainable_ = true;
  Tensor pos_;
  Tensor emb_skill_, emb_object_, emb_gait_, emb_speed_;
  Tensor emb_fx_, emb_fy_, emb_heading_, emb_ftarget_, emb_tx_, emb_ty_;
  std::vector<Tensor> emb_patch_;  // one table per patch cell
  Tensor emb_action_start_, emb_action_bin_;
  std::vector<Block> blocks_;
  Tensor final_ln_g_, final_ln_b_;
  Tensor head_w_, head_b_;
};

// Counts for a freshly initialized model with this config.
ParamCounts param_counts(const ModelConfig& cfg);

// Active/total parameter counts of the expert weights alone in one MoE
// layer; active/total == top_k/num_experts exactly.
ParamCounts moe_ffn_param_counts(int64_t d_model, int64_t d_ff, int64_t num_experts,
                                 int64_t top_k);

}  // namespace germ
