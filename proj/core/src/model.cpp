#include "germ/model.hpp"

#include <algorithm>
#include <cmath>

namespace germ {

ActionBounds ActionBounds::defaults(int dims) {
  ActionBounds b;
  b.lo.assign(dims, -1.0);
  b.hi.assign(dims, 1.0);
  if (dims == kCommandDims) {
    b.lo[6] = 0.0;  // frequency
    b.lo[7] = 0.0;  // body height
  }
  return b;
}

void ActionBounds::validate() const {
  require(lo.size() == hi.size() && !lo.empty(), "E_CONFIG", "bounds: empty or ragged");
  for (size_t i = 0; i < lo.size(); ++i)
    require(lo[i] < hi[i], "E_CONFIG",
            "bounds: lo >= hi at dimension " + std::to_string(i));
}

Command detokenize(const DiscretizedAction& a, const ActionBounds& bounds, int vocab) {
  bounds.validate();
  require(a.bins.size() == static_cast<size_t>(kCommandDims), "E_SHAPE",
          "detokenize: expected " + std::to_string(kCommandDims) + " bins");
  Command cmd{};
  for (int i = 0; i < kCommandDims; ++i) {
    int bin = a.bins[i];
    require(bin >= 0 && bin < vocab, "E_RANGE",
            "detokenize: bin " + std::to_string(bin) + " out of [0," +
                std::to_string(vocab) + ") at dimension " + std::to_string(i));
    double width = (bounds.hi[i] - bounds.lo[i]) / static_cast<double>(vocab);
    cmd[i] = bounds.lo[i] + (static_cast<double>(bin) + 0.5) * width;
  }
  return cmd;
}

DiscretizedAction discretize(const Command& cmd, const ActionBounds& bounds, int vocab,
                             int64_t* clamped_count) {
  bounds.validate();
  DiscretizedAction a;
  a.bins.resize(kCommandDims);
  for (int i = 0; i < kCommandDims; ++i) {
    double span = bounds.hi[i] - bounds.lo[i];
    double raw = std::floor((cmd[i] - bounds.lo[i]) / span * static_cast<double>(vocab));
    if ((cmd[i] < bounds.lo[i] || cmd[i] > bounds.hi[i]) && clamped_count != nullptr)
      ++*clamped_count;
    a.bins[i] = static_cast<int>(std::clamp<double>(raw, 0.0, vocab - 1));
  }
  return a;
}

void ModelConfig::validate() const {
  require(action_dim >= 1, "E_CONFIG", "action_dim must be >= 1");
  require(vocab_size >= 2, "E_CONFIG", "vocab_size must be >= 2");
  require(time_length >= 2, "E_CONFIG", "time_length must be >= 2");
  require(num_layers >= 1 && d_model >= 1 && d_ff >= 1, "E_CONFIG",
          "layer dimensions must be positive");
  require(num_heads >= 1 && d_model % num_heads == 0, "E_CONFIG",
          "d_model must be divisible by num_heads");
  require(top_k >= 1 && top_k <= num_experts, "E_CONFIG",
          "need 1 <= top_k <= num_experts");
  require(context_tokens() + action_dim <= context_len, "E_CONFIG",
          "context_len too small for the token layout");
  require(grid_w >= 1 && grid_h >= 1, "E_CONFIG", "grid extents must be positive");
}

namespace {

void check_id_range(int64_t v, int64_t n, const char* field) {
  require(v >= 0 && v < n, "E_RANGE",
          std::string("encode_context: field '") + field + "' id " + std::to_string(v) +
              " out of range [0," + std::to_string(n) + ")");
}

}  // namespace

void ContextBatch::add(std::span<const Observation> window, const Instruction& instr,
                       const ModelConfig& cfg) {
  int64_t need = cfg.history_frames();
  require(static_cast<int64_t>(window.size()) == need, "E_SHAPE",
          "encode_context: window has " + std::to_string(window.size()) +
              " frames, expected " + std::to_string(need));
  check_id_range(instr.skill, kNumSkills, "skill");
  check_id_range(instr.object, kNumObjects, "object");
  check_id_range(instr.gait, kNumGaits, "gait");
  check_id_range(instr.speed, kNumSpeeds, "speed");
  for (const Observation& o : window) {
    check_id_range(o.ax, cfg.grid_w, "agent_x");
    check_id_range(o.ay, cfg.grid_h, "agent_y");
    check_id_range(o.heading, kNumHeadings, "heading");
    check_id_range(o.target_id, kNumObjects, "target_id");
    check_id_range(o.tx, cfg.grid_w, "target_x");
    check_id_range(o.ty, cfg.grid_h, "target_y");
    for (int p : o.patch) check_id_range(p, kNumPatchClasses, "patch");
  }

  if (frames == 0) frames = need;
  ++batch;
  skill.push_back(instr.skill);
  object.push_back(instr.object);
  gait.push_back(instr.gait);
  speed.push_back(instr.speed);
  for (const Observation& o : window) {
    fx.push_back(o.ax);
    fy.push_back(o.ay);
    fheading.push_back(o.heading);
    ftarget.push_back(o.target_id);
    ftx.push_back(o.tx);
    fty.push_back(o.ty);
    for (int p : o.patch) fpatch.push_back(p);
  }
}

DiscretizedAction greedy_action(const PolicyOutput& out) {
  DiscretizedAction a;
  a.bins.resize(out.dims);
  for (int64_t i = 0; i < out.dims; ++i) {
    std::span<const double> row = out.row(i);
    int best = 0;
    for (int64_t v = 1; v < out.vocab; ++v)
      if (row[v] > row[best]) best = static_cast<int>(v);
    a.bins[i] = best;
  }
  return a;
}

PolicyDecoder::PolicyDecoder(ModelConfig cfg, uint64_t init_seed, bool trainable)
    : cfg_(cfg), trainable_(trainable) {
  cfg_.validate();
  Rng rng(init_seed);
  auto make = [&](Shape shape) {
    Tensor t(std::move(shape), trainable_);
    for (double& v : t.data) v = rng.normal(0.0, cfg_.init_std);
    return t;
  };
  int64_t d = cfg_.d_model;
  pos_ = make({cfg_.context_len, d});
  emb_skill_ = make({kNumSkills, d});
  emb_object_ = make({kNumObjects, d});
  emb_gait_ = make({kNumGaits, d});
  emb_speed_ = make({kNumSpeeds, d});
  emb_fx_ = make({cfg_.grid_w, d});
  emb_fy_ = make({cfg_.grid_h, d});
  emb_heading_ = make({kNumHeadings, d});
  emb_ftarget_ = make({kNumObjects, d});
  emb_tx_ = make({cfg_.grid_w, d});
  emb_ty_ = make({cfg_.grid_h, d});
  emb_patch_.reserve(kPatchCells);
  for (int p = 0; p < kPatchCells; ++p) emb_patch_.push_back(make({kNumPatchClasses, d}));
  emb_action_start_ = make({1, d});
  emb_action_bin_ = make({cfg_.vocab_size, d});

  blocks_.resize(cfg_.num_layers);
  for (auto& b : blocks_) {
    b.ln1_g = Tensor({d}, trainable_);
    b.ln1_g.fill(1.0);
    b.ln1_b = Tensor({d}, trainable_);
    b.w_q = make({d, d});
    b.w_k = make({d, d});
    b.w_v = make({d, d});
    b.w_o = make({d, d});
    b.ln2_g = Tensor({d}, trainable_);
    b.ln2_g.fill(1.0);
    b.ln2_b = Tensor({d}, trainable_);
    if (cfg_.use_moe) {
      b.moe.emplace(d, cfg_.d_ff, cfg_.num_experts, cfg_.top_k, cfg_.init_std, rng,
                    trainable_);
    } else {
      b.dense_in = make({d, cfg_.dense_ff_width()});
      b.dense_out = make({cfg_.dense_ff_width(), d});
    }
  }
  final_ln_g_ = Tensor({d}, trainable_);
  final_ln_g_.fill(1.0);
  final_ln_b_ = Tensor({d}, trainable_);
  head_w_ = make({d, cfg_.vocab_size});
  head_b_ = Tensor({cfg_.vocab_size}, trainable_);
}

NodeId PolicyDecoder::encode_context(Tape& tape, const ContextBatch& ctx) {
  int64_t B = ctx.batch;
  int64_t F = cfg_.history_frames();
  require(B >= 1, "E_SHAPE", "encode_context: empty batch");
  require(ctx.frames == F, "E_SHAPE", "encode_context: frame count mismatch");

  // Instruction tokens, one per field: [4*B, d] in field-major order.
  NodeId tok_skill = tape.embedding_gather(tape.param(emb_skill_), ctx.skill);
  NodeId tok_object = tape.embedding_gather(tape.param(emb_object_), ctx.object);
  NodeId tok_gait = tape.embedding_gather(tape.param(emb_gait_), ctx.gait);
  NodeId tok_speed = tape.embedding_gather(tape.param(emb_speed_), ctx.speed);

  // Frame tokens: sum of the field embeddings, [B*F, d].
  NodeId frame = tape.add(tape.embedding_gather(tape.param(emb_fx_), ctx.fx),
                          tape.embedding_gather(tape.param(emb_fy_), ctx.fy));
  frame = tape.add(frame, tape.embedding_gather(tape.param(emb_heading_), ctx.fheading));
  frame = tape.add(frame, tape.embedding_gather(tape.param(emb_ftarget_), ctx.ftarget));
  frame = tape.add(frame, tape.embedding_gather(tape.param(emb_tx_), ctx.ftx));
  frame = tape.add(frame, tape.embedding_gather(tape.param(emb_ty_), ctx.fty));
  for (int p = 0; p < kPatchCells; ++p) {
    std::vector<int64_t> ids(B * F);
    for (int64_t i = 0; i < B * F; ++i) ids[i] = ctx.fpatch[i * kPatchCells + p];
    frame = tape.add(frame, tape.embedding_gather(tape.param(emb_patch_[p]), std::move(ids)));
  }

  // Interleave segments into per-sample order [instr; frames].
  NodeId segs[5] = {tok_skill, tok_object, tok_gait, tok_speed, frame};
  NodeId full = tape.concat_rows(std::span<const NodeId>(segs, 5));
  int64_t C = cfg_.context_tokens();
  std::vector<int64_t> perm(B * C);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < 4; ++i) perm[b * C + i] = i * B + b;
    for (int64_t t = 0; t < F; ++t) perm[b * C + 4 + t] = 4 * B + b * F + t;
  }
  return tape.embedding_gather(full, std::move(perm));
}

NodeId PolicyDecoder::build_rows(Tape& tape, const ContextBatch& ctx,
                                 std::span<const int64_t> prior_bins, int64_t n_rows,
                                 bool train_mode, Rng& rng,
                                 std::vector<GateDecision>* gates) {
  int64_t B = ctx.batch;
  int64_t C = cfg_.context_tokens();
  int64_t d = cfg_.d_model;
  require(n_rows >= 1 && n_rows <= cfg_.action_dim, "E_SHAPE",
          "decoder: n_rows out of range");
  require(static_cast<int64_t>(prior_bins.size()) == B * (n_rows - 1), "E_SHAPE",
          "decoder: expected " + std::to_string(B * (n_rows - 1)) + " prior bins");
  int64_t L = C + n_rows;
  require(L <= cfg_.context_len, "E_RANGE",
          "decoder: sequence length " + std::to_string(L) + " exceeds context_len " +
              std::to_string(cfg_.context_len));
  for (int64_t bin : prior_bins)
    require(bin >= 0 && bin < cfg_.vocab_size, "E_RANGE",
            "decoder: prior bin " + std::to_string(bin) + " out of range");

  NodeId ctx_tok = encode_context(tape, ctx);  // [B*C, d]

  // Action-position tokens: start marker then embedded prior bins.
  NodeId start = tape.embedding_gather(tape.param(emb_action_start_),
                                       std::vector<int64_t>(B, 0));
  NodeId parts[3];
  int n_parts = 2;
  parts[0] = ctx_tok;
  parts[1] = start;
  if (n_rows > 1) {
    parts[2] = tape.embedding_gather(tape.param(emb_action_bin_),
                                     std::vector<int64_t>(prior_bins.begin(), prior_bins.end()));
    n_parts = 3;
  }
  NodeId full = tape.concat_rows(std::span<const NodeId>(parts, n_parts));

  // Into per-sample sequence order.
  std::vector<int64_t> perm(B * L);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t i = 0; i < C; ++i) perm[b * L + i] = b * C + i;
    perm[b * L + C] = B * C + b;
    for (int64_t j = 1; j < n_rows; ++j)
      perm[b * L + C + j] = B * C + B + b * (n_rows - 1) + (j - 1);
  }
  NodeId x = tape.embedding_gather(full, std::move(perm));  // [B*L, d]

  std::vector<int64_t> pos_ids(B * L);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < L; ++i) pos_ids[b * L + i] = i;
  x = tape.add(x, tape.embedding_gather(tape.param(pos_), std::move(pos_ids)));

  // Causal mask over the last two dims of [B,h,L,L].
  std::vector<uint8_t> causal(L * L, 0);
  for (int64_t i = 0; i < L; ++i)
    for (int64_t j = i + 1; j < L; ++j) causal[i * L + j] = 1;

  double scale = 1.0 / std::sqrt(static_cast<double>(d / cfg_.num_heads));
  for (auto& blk : blocks_) {
    NodeId h = tape.layernorm(x, tape.param(blk.ln1_g), tape.param(blk.ln1_b));
    NodeId h3 = tape.reshape(h, {B, L, d});
    NodeId q = tape.matmul(h3, tape.param(blk.w_q));
    NodeId k = tape.matmul(h3, tape.param(blk.w_k));
    NodeId v = tape.matmul(h3, tape.param(blk.w_v));
    NodeId scores = tape.scalar_mul(tape.matmul_qk(q, k, cfg_.num_heads), scale);
    NodeId attn = tape.softmax_lastdim(tape.mask_fill(scores, causal));
    NodeId mixed = tape.matmul_av(attn, v, cfg_.num_heads);
    NodeId proj = tape.matmul(tape.reshape(mixed, {B * L, d}), tape.param(blk.w_o));
    x = tape.add(x, proj);

    NodeId h2 = tape.layernorm(x, tape.param(blk.ln2_g), tape.param(blk.ln2_b));
    NodeId ffn;
    if (blk.moe.has_value()) {
      std::vector<GateDecision> dec;
      ffn = blk.moe->forward(tape, h2, train_mode, rng, &dec);
      if (gates != nullptr)
        gates->insert(gates->end(), dec.begin(), dec.end());
    } else {
      ffn = tape.matmul(tape.gelu(tape.matmul(h2, tape.param(blk.dense_in))),
                        tape.param(blk.dense_out));
    }
    x = tape.add(x, ffn);
  }

  x = tape.layernorm(x, tape.param(final_ln_g_), tape.param(final_ln_b_));

  // Q heads at the action positions only.
  std::vector<int64_t> action_rows(B * n_rows);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t j = 0; j < n_rows; ++j) action_rows[b * n_rows + j] = b * L + C + j;
  NodeId picked = tape.embedding_gather(x, std::move(action_rows));
  return tape.add(tape.matmul(picked, tape.param(head_w_)), tape.param(head_b_));
}

PolicyDecoder::Decoded PolicyDecoder::greedy_decode(std::span<const Observation> window,
                                                    const Instruction& instr) {
  ContextBatch ctx;
  ctx.add(window, instr, cfg_);
  Rng dummy(0);

  Decoded out;
  out.output.dims = cfg_.action_dim;
  out.output.vocab = cfg_.vocab_size;
  out.output.q.reserve(cfg_.action_dim * cfg_.vocab_size);
  std::vector<int64_t> bins;
  for (int64_t i = 1; i <= cfg_.action_dim; ++i) {
    Tape tape;
    NodeId rows = build_rows(tape, ctx, bins, i, /*train_mode=*/false, dummy);
    const std::vector<double>& v = tape.value(rows);
    const double* last = v.data() + (i - 1) * cfg_.vocab_size;
    int best = 0;
    for (int64_t b = 1; b < cfg_.vocab_size; ++b)
      if (last[b] > last[best]) best = static_cast<int>(b);
    out.output.q.insert(out.output.q.end(), last, last + cfg_.vocab_size);
    if (i < cfg_.action_dim) bins.push_back(best);
  }
  out.action = greedy_action(out.output);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> PolicyDecoder::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embed.pos", &pos_);
  out.emplace_back("embed.skill", &emb_skill_);
  out.emplace_back("embed.object", &emb_object_);
  out.emplace_back("embed.gait", &emb_gait_);
  out.emplace_back("embed.speed", &emb_speed_);
  out.emplace_back("embed.frame_x", &emb_fx_);
  out.emplace_back("embed.frame_y", &emb_fy_);
  out.emplace_back("embed.heading", &emb_heading_);
  out.emplace_back("embed.frame_target", &emb_ftarget_);
  out.emplace_back("embed.target_x", &emb_tx_);
  out.emplace_back("embed.target_y", &emb_ty_);
  for (int p = 0; p < kPatchCells; ++p)
    out.emplace_back("embed.patch" + std::to_string(p), &emb_patch_[p]);
  out.emplace_back("embed.action_start", &emb_action_start_);
  out.emplace_back("embed.action_bin", &emb_action_bin_);
  for (size_t i = 0; i < blocks_.size(); ++i) {
    std::string p = "layer" + std::to_string(i);
    Block& b = blocks_[i];
    out.emplace_back(p + ".ln1.gamma", &b.ln1_g);
    out.emplace_back(p + ".ln1.beta", &b.ln1_b);
    out.emplace_back(p + ".attn.w_q", &b.w_q);
    out.emplace_back(p + ".attn.w_k", &b.w_k);
    out.emplace_back(p + ".attn.w_v", &b.w_v);
    out.emplace_back(p + ".attn.w_o", &b.w_o);
    out.emplace_back(p + ".ln2.gamma", &b.ln2_g);
    out.emplace_back(p + ".ln2.beta", &b.ln2_b);
    if (b.moe.has_value()) {
      b.moe->collect_params(p + ".moe", out);
    } else {
      out.emplace_back(p + ".ffn.w_in", &b.dense_in);
      out.emplace_back(p + ".ffn.w_out", &b.dense_out);
    }
  }
  out.emplace_back("final_ln.gamma", &final_ln_g_);
  out.emplace_back("final_ln.beta", &final_ln_b_);
  out.emplace_back("head.w", &head_w_);
  out.emplace_back("head.b", &head_b_);
  return out;
}

ParamCounts PolicyDecoder::param_counts() const {
  ParamCounts c;
  int64_t expert_total = 0;
  for (const Block& b : blocks_)
    if (b.moe.has_value()) expert_total += b.moe->expert_param_count();
  auto* self = const_cast<PolicyDecoder*>(this);
  for (auto& [name, t] : self->named_params()) c.total += t->numel();
  c.active = c.total - expert_total;
  if (cfg_.use_moe && cfg_.num_experts > 0)
    c.active += expert_total / cfg_.num_experts * cfg_.top_k;
  return c;
}

void PolicyDecoder::copy_params_from(PolicyDecoder& src) {
  auto dst_params = named_params();
  auto src_params = src.named_params();
  require(dst_params.size() == src_params.size(), "E_CONFIG",
          "copy_params: model structures differ");
  for (size_t i = 0; i < dst_params.size(); ++i) {
    require(dst_params[i].first == src_params[i].first &&
                dst_params[i].second->shape == src_params[i].second->shape,
            "E_CONFIG", "copy_params: parameter mismatch at " + dst_params[i].first);
    dst_params[i].second->data = src_params[i].second->data;
  }
}

void PolicyDecoder::zero_all_params() {
  for (auto& [name, t] : named_params()) t->fill(0.0);
}

ParamCounts param_counts(const ModelConfig& cfg) {
  PolicyDecoder model(cfg, 0, /*trainable=*/false);
  return model.param_counts();
}

ParamCounts moe_ffn_param_counts(int64_t d_model, int64_t d_ff, int64_t num_experts,
                                 int64_t top_k) {
  ParamCounts c;
  c.total = num_experts * 2 * d_model * d_ff;
  c.active = top_k * 2 * d_model * d_ff;
  return c;
}

}  // namespace germ
