#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "germ/rng.hpp"
#include "germ/tensor.hpp"

namespace germ {

// One feed-forward expert: y = gelu(x W_in) W_out, no biases.
struct ExpertFFN {
  Tensor w_in;   // [d_model, d_ff]
  Tensor w_out;  // [d_ff, d_model]
};

struct GateParams {
  Tensor w_g;      // [d_model, n]
  Tensor w_noise;  // [d_model, n]
  int64_t num_experts = 8;
  int64_t top_k = 2;
};

// Routing result for one token: which experts were kept, their normalized
// weights (selection order, strongest logit first), and the raw noisy
// logits. Experts outside `indices` have weight exactly zero.
struct GateDecision {
  std::vector<int> indices;
  std::vector<double> weights;
  std::vector<double> noisy_logits;

  double weight_for(int expert) const;
};

struct ExpertLoadStats {
  std::vector<double> fractions;  // routed fraction per expert; sums to k
  std::vector<double> mass;       // summed gate weight per expert; sums to #tokens
};

// Tally routing decisions across a batch of tokens.
ExpertLoadStats expert_load_stats(std::span<const GateDecision> decisions, int64_t num_experts);

// Tape node handles for one MoE layer's parameters.
struct MoeNodeRefs {
  NodeId w_g = kNoNode;
  NodeId w_noise = kNoNode;
  std::vector<std::pair<NodeId, NodeId>> experts;  // (w_in, w_out)
};

// Noisy gate logits H(x) for a [N, d_model] token block:
//   H_i = (x W_g)_i + nu_i * softplus((x W_noise)_i),  nu ~ N(0,1) in train
//   mode and 0 otherwise.
NodeId noisy_logits_node(Tape& tape, NodeId x, NodeId w_g, NodeId w_noise,
                         bool train_mode, Rng& rng);

// Top-k selection (host side, ties to the lower expert index), -inf
// surrogate masking of dropped logits, and softmax normalization. Returns
// the [N, n] weight node and one GateDecision per token.
NodeId gate_weights_node(Tape& tape, NodeId noisy_logits, int64_t top_k,
                         std::vector<GateDecision>* decisions);

// Sparse mixture y = sum_{i in kept} w_i * E_i(x) over a [N, d_model]
// block. Experts that receive no tokens are not evaluated.
NodeId moe_forward_node(Tape& tape, NodeId x, const MoeNodeRefs& refs, int64_t top_k,
                        bool train_mode, Rng& rng, std::vector<GateDecision>* decisions);

// Spec-level single-token entry points. Thin wrappers over the node
// builders on a scratch tape so there is exactly one routing code path.
std::vector<double> noisy_logits(std::span<const double> x, const GateParams& gate,
                                 bool train_mode, Rng& rng);
GateDecision gate_forward(std::span<const double> x, const GateParams& gate,
                          bool train_mode, Rng& rng);
std::vector<double> moe_forward(std::span<const double> x, std::span<const ExpertFFN> experts,
                                const GateDecision& decision);

// A full sparse MoE feed-forward layer (gate + n experts).
class MoeLayer {
 public:
  MoeLayer(int64_t d_model, int64_t d_ff, int64_t num_experts, int64_t top_k,
           double init_std, Rng& init_rng, bool trainable);

  NodeId forward(Tape& tape, NodeId x, bool train_mode, Rng& rng,
                 std::vector<GateDecision>* decisions = nullptr);

  void collect_params(const std::string& prefix,
                      std::vector<std::pair<std::string, Tensor*>>& out);

  int64_t expert_param_count() const;

  GateParams& gate() { return gate_; }
  const GateParams& gate() const { return gate_; }
  std::vector<ExpertFFN>& experts() { return experts_; }
  const std::vector<ExpertFFN>& experts() const { return experts_; }
  int64_t d_model() const { return d_model_; }
  int64_t d_ff() const { return d_ff_; }

 private:
  int64_t d_model_ = 0;
  int64_t d_ff_ = 0;
  GateParams gate_;
  std::vector<ExpertFFN> experts_;
};

}  // namespace germ
