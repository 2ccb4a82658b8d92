#include "germ/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace germ {

double GateDecision::weight_for(int expert) const {
  for (size_t i = 0; i < indices.size(); ++i)
    if (indices[i] == expert) return weights[i];
  return 0.0;
}

ExpertLoadStats expert_load_stats(std::span<const GateDecision> decisions,
                                  int64_t num_experts) {
  require(!decisions.empty(), "E_EMPTY", "expert_load_stats: empty batch");
  ExpertLoadStats stats;
  stats.fractions.assign(num_experts, 0.0);
  stats.mass.assign(num_experts, 0.0);
  for (const GateDecision& d : decisions) {
    for (size_t i = 0; i < d.indices.size(); ++i) {
      stats.fractions[d.indices[i]] += 1.0;
      stats.mass[d.indices[i]] += d.weights[i];
    }
  }
  double n = static_cast<double>(decisions.size());
  for (double& f : stats.fractions) f /= n;
  return stats;
}

NodeId noisy_logits_node(Tape& tape, NodeId x, NodeId w_g, NodeId w_noise,
                         bool train_mode, Rng& rng) {
  for (double v : tape.value(x))
    require(std::isfinite(v), "E_NONFINITE", "noisy_logits: non-finite token input");
  NodeId clean = tape.matmul(x, w_g);
  if (!train_mode) return clean;
  Shape s = tape.node(clean).shape;  // copy: later evals may grow the tape
  std::vector<double> nu(shape_numel(s));
  for (double& v : nu) v = rng.normal();
  NodeId scale = tape.softplus(tape.matmul(x, w_noise));
  NodeId noise = tape.constant(std::move(s), std::move(nu));
  return tape.add(clean, tape.mul(scale, noise));
}

namespace {

// k strongest logits, ties broken toward the lower expert index.
void topk_select(const double* h, int64_t n, int64_t k, std::vector<int>& out) {
  out.resize(n);
  std::iota(out.begin(), out.end(), 0);
  std::partial_sort(out.begin(), out.begin() + k, out.end(), [&](int a, int b) {
    if (h[a] != h[b]) return h[a] > h[b];
    return a < b;
  });
  out.resize(k);
}

}  // namespace

NodeId gate_weights_node(Tape& tape, NodeId noisy, int64_t top_k,
                         std::vector<GateDecision>* decisions) {
  // Copy logits up front: pushing the mask/softmax nodes may reallocate the
  // tape's node storage.
  const std::vector<double> h = tape.value(noisy);
  int64_t n = tape.node(noisy).shape.back();
  int64_t tokens = static_cast<int64_t>(h.size()) / n;
  require(top_k >= 1 && top_k <= n, "E_CONFIG", "gate: top_k must be in [1, n]");

  std::vector<uint8_t> mask(h.size(), 1);
  std::vector<std::vector<int>> kept(tokens);
  std::vector<int> scratch;
  for (int64_t t = 0; t < tokens; ++t) {
    topk_select(h.data() + t * n, n, top_k, scratch);
    kept[t] = scratch;
    for (int e : scratch) mask[t * n + e] = 0;
  }

  NodeId weights = tape.softmax_lastdim(tape.mask_fill(noisy, std::move(mask)));

  if (decisions != nullptr) {
    const std::vector<double>& w = tape.value(weights);
    decisions->resize(tokens);
    for (int64_t t = 0; t < tokens; ++t) {
      GateDecision& d = (*decisions)[t];
      d.indices = kept[t];
      d.weights.resize(kept[t].size());
      for (size_t i = 0; i < kept[t].size(); ++i)
        d.weights[i] = w[t * n + kept[t][i]];
      d.noisy_logits.assign(h.begin() + t * n, h.begin() + (t + 1) * n);
    }
  }
  return weights;
}

NodeId moe_forward_node(Tape& tape, NodeId x, const MoeNodeRefs& refs, int64_t top_k,
                        bool train_mode, Rng& rng, std::vector<GateDecision>* decisions) {
  const Shape x_shape = tape.node(x).shape;
  require(x_shape.size() == 2 && x_shape[0] >= 1, "E_SHAPE",
          "moe_forward: expected nonempty [N, d_model] tokens");
  int64_t tokens = x_shape[0];
  int64_t n = static_cast<int64_t>(refs.experts.size());
  require(n == tape.node(refs.w_g).shape.back(), "E_CONFIG",
          "moe_forward: expert count does not match gate width");

  std::vector<GateDecision> local;
  std::vector<GateDecision>& dec = decisions != nullptr ? *decisions : local;
  NodeId h = noisy_logits_node(tape, x, refs.w_g, refs.w_noise, train_mode, rng);
  NodeId weights = gate_weights_node(tape, h, top_k, &dec);

  // Route tokens to experts; only experts that received tokens run.
  std::vector<std::vector<int64_t>> routed(n);
  for (int64_t t = 0; t < tokens; ++t)
    for (int e : dec[t].indices) routed[e].push_back(t);

  int64_t k_used = static_cast<int64_t>(dec[0].indices.size());
  std::vector<NodeId> parts;
  std::vector<std::vector<int64_t>> slot(tokens, std::vector<int64_t>(k_used, -1));
  int64_t offset = 0;
  for (int64_t e = 0; e < n; ++e) {
    if (routed[e].empty()) continue;
    for (int64_t t : routed[e]) {
      const GateDecision& d = dec[t];
      for (size_t m = 0; m < d.indices.size(); ++m)
        if (d.indices[m] == e) slot[t][m] = offset;
      ++offset;
    }
    NodeId xe = tape.embedding_gather(x, routed[e]);
    NodeId hidden = tape.gelu(tape.matmul(xe, refs.experts[e].first));
    parts.push_back(tape.matmul(hidden, refs.experts[e].second));
  }
  NodeId full = tape.concat_rows(parts);

  NodeId y = kNoNode;
  for (int64_t m = 0; m < k_used; ++m) {
    std::vector<int64_t> sel(tokens), widx(tokens);
    for (int64_t t = 0; t < tokens; ++t) {
      sel[t] = slot[t][m];
      widx[t] = dec[t].indices[m];
    }
    NodeId term = tape.mul(tape.embedding_gather(full, std::move(sel)),
                           tape.gather_lastdim(weights, std::move(widx), /*keepdim=*/true));
    y = m == 0 ? term : tape.add(y, term);
  }
  return y;
}

std::vector<double> noisy_logits(std::span<const double> x, const GateParams& gate,
                                 bool train_mode, Rng& rng) {
  Tape tape;
  NodeId xn = tape.constant({1, static_cast<int64_t>(x.size())},
                            std::vector<double>(x.begin(), x.end()));
  NodeId wg = tape.constant(gate.w_g.shape, gate.w_g.data);
  NodeId wn = tape.constant(gate.w_noise.shape, gate.w_noise.data);
  return tape.value(noisy_logits_node(tape, xn, wg, wn, train_mode, rng));
}

GateDecision gate_forward(std::span<const double> x, const GateParams& gate,
                          bool train_mode, Rng& rng) {
  Tape tape;
  NodeId xn = tape.constant({1, static_cast<int64_t>(x.size())},
                            std::vector<double>(x.begin(), x.end()));
  NodeId wg = tape.constant(gate.w_g.shape, gate.w_g.data);
  NodeId wn = tape.constant(gate.w_noise.shape, gate.w_noise.data);
  NodeId h = noisy_logits_node(tape, xn, wg, wn, train_mode, rng);
  std::vector<GateDecision> dec;
  gate_weights_node(tape, h, gate.top_k, &dec);
  return dec[0];
}

std::vector<double> moe_forward(std::span<const double> x, std::span<const ExpertFFN> experts,
                                const GateDecision& decision) {
  Tape tape;
  int64_t d = static_cast<int64_t>(x.size());
  NodeId xn = tape.constant({1, d}, std::vector<double>(x.begin(), x.end()));
  std::vector<double> y(d, 0.0);
  for (size_t m = 0; m < decision.indices.size(); ++m) {
    int e = decision.indices[m];
    require(e >= 0 && e < static_cast<int>(experts.size()), "E_CONFIG",
            "moe_forward: decision references expert " + std::to_string(e) +
                " but layer has " + std::to_string(experts.size()));
    NodeId win = tape.constant(experts[e].w_in.shape, experts[e].w_in.data);
    NodeId wout = tape.constant(experts[e].w_out.shape, experts[e].w_out.data);
    NodeId out = tape.matmul(tape.gelu(tape.matmul(xn, win)), wout);
    const std::vector<double>& v = tape.value(out);
    for (int64_t i = 0; i < d; ++i) y[i] += decision.weights[m] * v[i];
  }
  return y;
}

MoeLayer::MoeLayer(int64_t d_model, int64_t d_ff, int64_t num_experts, int64_t top_k,
                   double init_std, Rng& init_rng, bool trainable)
    : d_model_(d_model), d_ff_(d_ff) {
  require(num_experts >= 1 && top_k >= 1 && top_k <= num_experts, "E_CONFIG",
          "moe: need 1 <= top_k <= num_experts, got k=" + std::to_string(top_k) +
              " n=" + std::to_string(num_experts));
  gate_.num_experts = num_experts;
  gate_.top_k = top_k;
  gate_.w_g = Tensor({d_model, num_experts}, trainable);
  gate_.w_noise = Tensor({d_model, num_experts}, trainable);  // zero init
  for (double& v : gate_.w_g.data) v = init_rng.normal(0.0, init_std);
  experts_.resize(num_experts);
  for (auto& e : experts_) {
    e.w_in = Tensor({d_model, d_ff}, trainable);
    e.w_out = Tensor({d_ff, d_model}, trainable);
    for (double& v : e.w_in.data) v = init_rng.normal(0.0, init_std);
    for (double& v : e.w_out.data) v = init_rng.normal(0.0, init_std);
  }
}

NodeId MoeLayer::forward(Tape& tape, NodeId x, bool train_mode, Rng& rng,
                         std::vector<GateDecision>* decisions) {
  MoeNodeRefs refs;
  refs.w_g = tape.param(gate_.w_g);
  refs.w_noise = tape.param(gate_.w_noise);
  refs.experts.reserve(experts_.size());
  for (auto& e : experts_)
    refs.experts.emplace_back(tape.param(e.w_in), tape.param(e.w_out));
  return moe_forward_node(tape, x, refs, gate_.top_k, train_mode, rng, decisions);
}

void MoeLayer::collect_params(const std::string& prefix,
                              std::vector<std::pair<std::string, Tensor*>>& out) {
  out.emplace_back(prefix + ".gate.w_g", &gate_.w_g);
  out.emplace_back(prefix + ".gate.w_noise", &gate_.w_noise);
  for (size_t e = 0; e < experts_.size(); ++e) {
    out.emplace_back(prefix + ".expert" + std::to_string(e) + ".w_in", &experts_[e].w_in);
    out.emplace_back(prefix + ".expert" + std::to_string(e) + ".w_out", &experts_[e].w_out);
  }
}

int64_t MoeLayer::expert_param_count() const {
  int64_t c = 0;
  for (const auto& e : experts_) c += e.w_in.numel() + e.w_out.numel();
  return c;
}

}  // namespace germ
