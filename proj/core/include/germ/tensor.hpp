#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "germ/error.hpp"

namespace germ {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// A dense double-precision value. Parameters keep a gradient accumulator of
// the same extent; activations live on a Tape instead.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data when requires_grad
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, bool needs_grad = false);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  void zero_grad();
  void fill(double v);
};

// Primitive vocabulary of the recorded computation. Shape rules are
// documented next to each forward implementation in tensor.cpp.
enum class OpKind {
  kLeaf,
  kMatmul,
  kAdd,
  kMul,
  kSoftmaxLastDim,
  kLayerNorm,
  kGelu,
  kRelu,
  kEmbeddingGather,
  kGatherLastDim,
  kMean,
  kSum,
  kSquare,
  kSoftplus,
  kScalarMul,
  kConcat,
  kMaskFill,
  kCrossEntropyLastDim,
  kReshape,  // shape bookkeeping only; data and gradients pass through
};

const char* op_name(OpKind k);

// Matmul layout selector:
//   kPlain: [..., M, K] x [K, N] -> [..., M, N]
//   kQK:    [B, L, D] x [B, M, D] with h heads -> [B, h, L, M]
//           (per-head dot products over D/h-wide slices)
//   kAV:    [B, h, L, M] x [B, M, D] -> [B, L, D]
enum class MatmulMode { kPlain, kQK, kAV };

enum class ReduceAxis { kAll, kLastDim };

// Numeric stand-in for the -inf used when masking logits ahead of a softmax:
// large enough that masked weights underflow to exactly zero after
// normalization, small enough to never produce NaN.
inline constexpr double kMaskFillValue = -1e9;

struct OpAttrs {
  MatmulMode matmul_mode = MatmulMode::kPlain;
  int64_t heads = 1;
  double scalar = 1.0;               // kScalarMul
  double fill_value = kMaskFillValue;  // kMaskFill
  double eps = 1e-5;                 // kLayerNorm
  ReduceAxis axis = ReduceAxis::kAll;
  bool keepdim = false;              // kGatherLastDim: emit [..., 1] instead of [...]
  std::vector<uint8_t> mask;         // kMaskFill: 1 = replace with fill_value
  std::vector<int64_t> indices;      // gathers / cross-entropy targets
};

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

// One recorded value. Leaves either bind a parameter (grads flow back into
// Tensor::grad) or hold a constant.
struct TapeNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated during backprop
  bool requires_grad = false;
  OpKind op = OpKind::kLeaf;
  OpAttrs attrs;
  std::vector<NodeId> inputs;
  Tensor* bound_param = nullptr;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

// Append-only record of a forward computation. Replaying the backward rules
// in reverse order yields exact reverse-mode gradients for every
// requires_grad leaf reachable from the seed; unreachable leaves stay zero.
class Tape {
 public:
  explicit Tape(bool check_finite = false) : check_finite_(check_finite) {}

  // Leaf bound to a parameter; data is copied, gradients are accumulated
  // back into p.grad by backprop().
  NodeId param(Tensor& p);

  NodeId constant(Shape shape, std::vector<double> data);
  NodeId constant_scalar(double v);

  // Evaluates one primitive, recording it when any input requires grad.
  NodeId eval(OpKind op, std::span<const NodeId> inputs, OpAttrs attrs = {});

  // Convenience wrappers.
  NodeId matmul(NodeId a, NodeId b) { return eval2(OpKind::kMatmul, a, b, {}); }
  NodeId matmul_qk(NodeId q, NodeId k, int64_t heads);
  NodeId matmul_av(NodeId w, NodeId v, int64_t heads);
  NodeId add(NodeId a, NodeId b) { return eval2(OpKind::kAdd, a, b, {}); }
  NodeId mul(NodeId a, NodeId b) { return eval2(OpKind::kMul, a, b, {}); }
  NodeId softmax_lastdim(NodeId a) { return eval1(OpKind::kSoftmaxLastDim, a, {}); }
  NodeId layernorm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5);
  NodeId gelu(NodeId a) { return eval1(OpKind::kGelu, a, {}); }
  NodeId relu(NodeId a) { return eval1(OpKind::kRelu, a, {}); }
  NodeId embedding_gather(NodeId table, std::vector<int64_t> ids);
  NodeId gather_lastdim(NodeId x, std::vector<int64_t> ids, bool keepdim = false);
  NodeId mean(NodeId a, ReduceAxis axis = ReduceAxis::kAll);
  NodeId sum(NodeId a, ReduceAxis axis = ReduceAxis::kAll);
  NodeId square(NodeId a) { return eval1(OpKind::kSquare, a, {}); }
  NodeId softplus(NodeId a) { return eval1(OpKind::kSoftplus, a, {}); }
  NodeId scalar_mul(NodeId a, double c);
  NodeId concat_rows(std::span<const NodeId> parts);
  NodeId mask_fill(NodeId a, std::vector<uint8_t> mask, double fill = kMaskFillValue);
  NodeId cross_entropy_lastdim(NodeId logits, std::vector<int64_t> targets);
  NodeId reshape(NodeId a, Shape shape);

  // Reverse-mode sweep from a scalar seed. Fills node grads, accumulates
  // into bound parameters, and leaves per-node gradients readable via
  // grad(). Unreachable requires_grad nodes get all-zero gradients.
  void backprop(NodeId seed);

  const TapeNode& node(NodeId id) const;
  const std::vector<double>& value(NodeId id) const { return node(id).data; }
  const std::vector<double>& grad(NodeId id) const;
  size_t size() const { return nodes_.size(); }

 private:
  NodeId eval1(OpKind op, NodeId a, OpAttrs attrs);
  NodeId eval2(OpKind op, NodeId a, NodeId b, OpAttrs attrs);
  NodeId push(TapeNode&& n);
  void check_id(NodeId id) const;

  std::vector<TapeNode> nodes_;
  bool check_finite_ = false;
};

// Max relative error between the analytic gradients already stored in each
// parameter's grad buffer and central finite differences of fn, taken over
// every scalar entry of every parameter:
//   |analytic - numeric| / max(1, |analytic|, |numeric|)
// fn must be deterministic; non-finite values at perturbed points raise.
double finite_diff_check(const std::function<double()>& fn,
                         std::span<Tensor* const> params, double epsilon);

}  // namespace germ
