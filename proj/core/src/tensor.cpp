#include "germ/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace germ {
namespace {

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double norm_cdf(double x) { return 0.5 * std::erfc(-x / kSqrt2); }
double norm_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

double softplus_stable(double x) {
  if (x > 35.0) return x;
  if (x < -35.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// How the second operand of add/mul lines up with the first.
enum class Broadcast { kSame, kSuffix, kLastDimOne };

Broadcast classify_broadcast(const Shape& a, const Shape& b, OpKind op) {
  if (a == b) return Broadcast::kSame;
  if (!b.empty() && b.size() == a.size() && b.back() == 1) {
    bool lead_match = std::equal(a.begin(), a.end() - 1, b.begin());
    if (lead_match) return Broadcast::kLastDimOne;
  }
  if (b.size() <= a.size() &&
      std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    return Broadcast::kSuffix;  // includes scalar b
  }
  fail("E_SHAPE", std::string(op_name(op)) + ": shapes " + shape_str(a) +
                      " and " + shape_str(b) + " do not conform");
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape s, bool needs_grad) : shape(std::move(s)), requires_grad(needs_grad) {
  data.assign(shape_numel(shape), 0.0);
  if (requires_grad) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kSoftmaxLastDim: return "softmax_lastdim";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kGelu: return "gelu";
    case OpKind::kRelu: return "relu";
    case OpKind::kEmbeddingGather: return "embedding_gather";
    case OpKind::kGatherLastDim: return "gather_lastdim";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kSquare: return "square";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kConcat: return "concat";
    case OpKind::kMaskFill: return "mask_fill";
    case OpKind::kCrossEntropyLastDim: return "cross_entropy_lastdim";
    case OpKind::kReshape: return "reshape";
  }
  return "?";
}

NodeId Tape::param(Tensor& p) {
  TapeNode n;
  n.shape = p.shape;
  n.data = p.data;
  n.requires_grad = p.requires_grad;
  n.bound_param = &p;
  return push(std::move(n));
}

NodeId Tape::constant(Shape shape, std::vector<double> data) {
  require(shape_numel(shape) == static_cast<int64_t>(data.size()), "E_SHAPE",
          "constant: shape " + shape_str(shape) + " does not match data length");
  TapeNode n;
  n.shape = std::move(shape);
  n.data = std::move(data);
  return push(std::move(n));
}

NodeId Tape::constant_scalar(double v) { return constant({}, {v}); }

NodeId Tape::matmul_qk(NodeId q, NodeId k, int64_t heads) {
  OpAttrs a;
  a.matmul_mode = MatmulMode::kQK;
  a.heads = heads;
  return eval2(OpKind::kMatmul, q, k, std::move(a));
}

NodeId Tape::matmul_av(NodeId w, NodeId v, int64_t heads) {
  OpAttrs a;
  a.matmul_mode = MatmulMode::kAV;
  a.heads = heads;
  return eval2(OpKind::kMatmul, w, v, std::move(a));
}

NodeId Tape::layernorm(NodeId x, NodeId gamma, NodeId beta, double eps) {
  OpAttrs a;
  a.eps = eps;
  NodeId in[3] = {x, gamma, beta};
  return eval(OpKind::kLayerNorm, std::span<const NodeId>(in, 3), std::move(a));
}

NodeId Tape::embedding_gather(NodeId table, std::vector<int64_t> ids) {
  OpAttrs a;
  a.indices = std::move(ids);
  return eval1(OpKind::kEmbeddingGather, table, std::move(a));
}

NodeId Tape::gather_lastdim(NodeId x, std::vector<int64_t> ids, bool keepdim) {
  OpAttrs a;
  a.indices = std::move(ids);
  a.keepdim = keepdim;
  return eval1(OpKind::kGatherLastDim, x, std::move(a));
}

NodeId Tape::mean(NodeId x, ReduceAxis axis) {
  OpAttrs a;
  a.axis = axis;
  return eval1(OpKind::kMean, x, std::move(a));
}

NodeId Tape::sum(NodeId x, ReduceAxis axis) {
  OpAttrs a;
  a.axis = axis;
  return eval1(OpKind::kSum, x, std::move(a));
}

NodeId Tape::scalar_mul(NodeId x, double c) {
  OpAttrs a;
  a.scalar = c;
  return eval1(OpKind::kScalarMul, x, std::move(a));
}

NodeId Tape::concat_rows(std::span<const NodeId> parts) {
  return eval(OpKind::kConcat, parts, {});
}

NodeId Tape::mask_fill(NodeId x, std::vector<uint8_t> mask, double fill) {
  OpAttrs a;
  a.mask = std::move(mask);
  a.fill_value = fill;
  return eval1(OpKind::kMaskFill, x, std::move(a));
}

NodeId Tape::cross_entropy_lastdim(NodeId logits, std::vector<int64_t> targets) {
  OpAttrs a;
  a.indices = std::move(targets);
  return eval1(OpKind::kCrossEntropyLastDim, logits, std::move(a));
}

NodeId Tape::reshape(NodeId x, Shape shape) {
  check_id(x);
  const TapeNode& src = nodes_[x];
  require(shape_numel(shape) == src.numel(), "E_SHAPE",
          "reshape: " + shape_str(src.shape) + " to " + shape_str(shape) +
              " changes element count");
  TapeNode n;
  n.op = OpKind::kReshape;
  n.shape = std::move(shape);
  n.data = src.data;
  n.requires_grad = src.requires_grad;
  n.inputs = {x};
  return push(std::move(n));
}

NodeId Tape::eval1(OpKind op, NodeId a, OpAttrs attrs) {
  NodeId in[1] = {a};
  return eval(op, std::span<const NodeId>(in, 1), std::move(attrs));
}

NodeId Tape::eval2(OpKind op, NodeId a, NodeId b, OpAttrs attrs) {
  NodeId in[2] = {a, b};
  return eval(op, std::span<const NodeId>(in, 2), std::move(attrs));
}

void Tape::check_id(NodeId id) const {
  require(id >= 0 && static_cast<size_t>(id) < nodes_.size(), "E_TAPE",
          "node id " + std::to_string(id) + " is not on this tape");
}

const TapeNode& Tape::node(NodeId id) const {
  check_id(id);
  return nodes_[static_cast<size_t>(id)];
}

const std::vector<double>& Tape::grad(NodeId id) const {
  const TapeNode& n = node(id);
  require(!n.grad.empty(), "E_TAPE", "node has no gradient; run backprop first");
  return n.grad;
}

NodeId Tape::push(TapeNode&& n) {
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::eval(OpKind op, std::span<const NodeId> inputs, OpAttrs attrs) {
  require(op != OpKind::kLeaf && op != OpKind::kReshape, "E_OP",
          std::string(op_name(op)) + " is not an evaluatable primitive");
  require(!inputs.empty(), "E_OP", std::string(op_name(op)) + ": no inputs");
  for (NodeId id : inputs) check_id(id);

  TapeNode out;
  out.op = op;
  out.inputs.assign(inputs.begin(), inputs.end());
  for (NodeId id : inputs)
    out.requires_grad = out.requires_grad || nodes_[id].requires_grad;

  auto& A = nodes_[inputs.empty() ? 0 : inputs[0]];

  auto arity = [&](int n) {
    require(static_cast<int>(inputs.size()) == n, "E_OP",
            std::string(op_name(op)) + ": expected " + std::to_string(n) + " inputs");
  };

  switch (op) {
    case OpKind::kMatmul: {
      arity(2);
      const auto& B = nodes_[inputs[1]];
      if (attrs.matmul_mode == MatmulMode::kPlain) {
        require(A.shape.size() >= 2 && B.shape.size() == 2, "E_SHAPE",
                "matmul: expected [...,M,K] x [K,N], got " + shape_str(A.shape) +
                    " x " + shape_str(B.shape));
        int64_t K = A.shape.back();
        require(K == B.shape[0], "E_SHAPE",
                "matmul: inner extents differ, " + shape_str(A.shape) + " x " +
                    shape_str(B.shape));
        int64_t N = B.shape[1];
        int64_t R = A.numel() / K;
        out.shape = A.shape;
        out.shape.back() = N;
        out.data.assign(R * N, 0.0);
        for (int64_t r = 0; r < R; ++r) {
          const double* arow = A.data.data() + r * K;
          double* orow = out.data.data() + r * N;
          for (int64_t k = 0; k < K; ++k) {
            double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = B.data.data() + k * N;
            for (int64_t n2 = 0; n2 < N; ++n2) orow[n2] += av * brow[n2];
          }
        }
      } else if (attrs.matmul_mode == MatmulMode::kQK) {
        require(A.shape.size() == 3 && B.shape.size() == 3 && A.shape[0] == B.shape[0] &&
                    A.shape[2] == B.shape[2],
                "E_SHAPE", "matmul(qk): expected [B,L,D] x [B,M,D]");
        int64_t Bn = A.shape[0], L = A.shape[1], M = B.shape[1], D = A.shape[2];
        int64_t h = attrs.heads, dh = D / h;
        require(h >= 1 && D % h == 0, "E_SHAPE", "matmul(qk): heads must divide feature dim");
        out.shape = {Bn, h, L, M};
        out.data.assign(Bn * h * L * M, 0.0);
        for (int64_t b = 0; b < Bn; ++b)
          for (int64_t hh = 0; hh < h; ++hh)
            for (int64_t i = 0; i < L; ++i) {
              const double* qv = A.data.data() + (b * L + i) * D + hh * dh;
              double* orow = out.data.data() + ((b * h + hh) * L + i) * M;
              for (int64_t j = 0; j < M; ++j) {
                const double* kv = B.data.data() + (b * M + j) * D + hh * dh;
                double acc = 0.0;
                for (int64_t d = 0; d < dh; ++d) acc += qv[d] * kv[d];
                orow[j] = acc;
              }
            }
      } else {  // kAV
        require(A.shape.size() == 4 && B.shape.size() == 3 && A.shape[0] == B.shape[0] &&
                    A.shape[3] == B.shape[1],
                "E_SHAPE", "matmul(av): expected [B,h,L,M] x [B,M,D]");
        int64_t Bn = A.shape[0], h = A.shape[1], L = A.shape[2], M = A.shape[3];
        int64_t D = B.shape[2], dh = D / h;
        require(attrs.heads == h && D % h == 0, "E_SHAPE",
                "matmul(av): heads must divide feature dim");
        out.shape = {Bn, L, D};
        out.data.assign(Bn * L * D, 0.0);
        for (int64_t b = 0; b < Bn; ++b)
          for (int64_t hh = 0; hh < h; ++hh)
            for (int64_t i = 0; i < L; ++i) {
              const double* wrow = A.data.data() + ((b * h + hh) * L + i) * M;
              double* orow = out.data.data() + (b * L + i) * D + hh * dh;
              for (int64_t j = 0; j < M; ++j) {
                double w = wrow[j];
                if (w == 0.0) continue;
                const double* vv = B.data.data() + (b * M + j) * D + hh * dh;
                for (int64_t d = 0; d < dh; ++d) orow[d] += w * vv[d];
              }
            }
      }
      break;
    }

    case OpKind::kAdd:
    case OpKind::kMul: {
      arity(2);
      const auto& B = nodes_[inputs[1]];
      Broadcast bc = classify_broadcast(A.shape, B.shape, op);
      out.shape = A.shape;
      out.data = A.data;
      int64_t n = A.numel();
      if (bc == Broadcast::kSame) {
        for (int64_t i = 0; i < n; ++i)
          out.data[i] = op == OpKind::kAdd ? out.data[i] + B.data[i] : out.data[i] * B.data[i];
      } else if (bc == Broadcast::kSuffix) {
        int64_t block = B.numel();
        for (int64_t i = 0; i < n; ++i) {
          double bv = B.data[block == 0 ? 0 : i % block];
          out.data[i] = op == OpKind::kAdd ? out.data[i] + bv : out.data[i] * bv;
        }
      } else {  // kLastDimOne
        int64_t D = A.shape.back();
        int64_t rows = n / D;
        for (int64_t r = 0; r < rows; ++r) {
          double bv = B.data[r];
          double* orow = out.data.data() + r * D;
          for (int64_t d = 0; d < D; ++d)
            orow[d] = op == OpKind::kAdd ? orow[d] + bv : orow[d] * bv;
        }
      }
      break;
    }

    case OpKind::kSoftmaxLastDim: {
      arity(1);
      require(!A.shape.empty(), "E_SHAPE", "softmax_lastdim: scalar input");
      int64_t D = A.shape.back();
      int64_t rows = A.numel() / D;
      out.shape = A.shape;
      out.data.assign(A.numel(), 0.0);
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = A.data.data() + r * D;
        double* yr = out.data.data() + r * D;
        double mx = xr[0];
        for (int64_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
        double s = 0.0;
        for (int64_t d = 0; d < D; ++d) {
          yr[d] = std::exp(xr[d] - mx);
          s += yr[d];
        }
        for (int64_t d = 0; d < D; ++d) yr[d] /= s;
      }
      break;
    }

    case OpKind::kLayerNorm: {
      arity(3);
      const auto& G = nodes_[inputs[1]];
      const auto& Bt = nodes_[inputs[2]];
      require(!A.shape.empty(), "E_SHAPE", "layernorm: scalar input");
      int64_t D = A.shape.back();
      require(G.shape == Shape{D} && Bt.shape == Shape{D}, "E_SHAPE",
              "layernorm: gamma/beta must be [" + std::to_string(D) + "]");
      int64_t rows = A.numel() / D;
      out.shape = A.shape;
      out.data.assign(A.numel(), 0.0);
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = A.data.data() + r * D;
        double* yr = out.data.data() + r * D;
        double m = 0.0;
        for (int64_t d = 0; d < D; ++d) m += xr[d];
        m /= static_cast<double>(D);
        double v = 0.0;
        for (int64_t d = 0; d < D; ++d) {
          double c = xr[d] - m;
          v += c * c;
        }
        v /= static_cast<double>(D);
        double inv = 1.0 / std::sqrt(v + attrs.eps);
        for (int64_t d = 0; d < D; ++d)
          yr[d] = (xr[d] - m) * inv * G.data[d] + Bt.data[d];
      }
      break;
    }

    case OpKind::kGelu: {
      arity(1);
      out.shape = A.shape;
      out.data.assign(A.numel(), 0.0);
      for (int64_t i = 0; i < A.numel(); ++i)
        out.data[i] = A.data[i] * norm_cdf(A.data[i]);
      break;
    }

    case OpKind::kRelu: {
      arity(1);
      out.shape = A.shape;
      out.data.assign(A.numel(), 0.0);
      for (int64_t i = 0; i < A.numel(); ++i)
        out.data[i] = A.data[i] > 0.0 ? A.data[i] : 0.0;
      break;
    }

    case OpKind::kEmbeddingGather: {
      arity(1);
      require(A.shape.size() >= 2, "E_SHAPE", "embedding_gather: table must be [V, ...]");
      int64_t V = A.shape[0];
      int64_t block = A.numel() / V;
      for (int64_t id : attrs.indices)
        require(id >= 0 && id < V, "E_RANGE",
                "embedding_gather: id " + std::to_string(id) + " out of range [0," +
                    std::to_string(V) + ")");
      out.shape = A.shape;
      out.shape[0] = static_cast<int64_t>(attrs.indices.size());
      out.data.assign(out.shape[0] * block, 0.0);
      for (size_t i = 0; i < attrs.indices.size(); ++i)
        std::copy_n(A.data.data() + attrs.indices[i] * block, block,
                    out.data.data() + static_cast<int64_t>(i) * block);
      break;
    }

    case OpKind::kGatherLastDim: {
      arity(1);
      require(!A.shape.empty(), "E_SHAPE", "gather_lastdim: scalar input");
      int64_t D = A.shape.back();
      int64_t rows = A.numel() / D;
      require(static_cast<int64_t>(attrs.indices.size()) == rows, "E_SHAPE",
              "gather_lastdim: need one index per row");
      for (int64_t id : attrs.indices)
        require(id >= 0 && id < D, "E_RANGE", "gather_lastdim: index out of range");
      out.shape = Shape(A.shape.begin(), A.shape.end() - 1);
      if (attrs.keepdim) out.shape.push_back(1);
      out.data.assign(rows, 0.0);
      for (int64_t r = 0; r < rows; ++r)
        out.data[r] = A.data[r * D + attrs.indices[r]];
      break;
    }

    case OpKind::kMean:
    case OpKind::kSum: {
      arity(1);
      bool is_mean = op == OpKind::kMean;
      if (attrs.axis == ReduceAxis::kAll) {
        out.shape = {};
        double s = 0.0;
        for (double v : A.data) s += v;
        if (is_mean) s /= static_cast<double>(std::max<int64_t>(1, A.numel()));
        out.data = {s};
      } else {
        require(!A.shape.empty(), "E_SHAPE", "reduce lastdim: scalar input");
        int64_t D = A.shape.back();
        int64_t rows = A.numel() / D;
        out.shape = Shape(A.shape.begin(), A.shape.end() - 1);
        out.data.assign(rows, 0.0);
        for (int64_t r = 0; r < rows; ++r) {
          double s = 0.0;
          const double* xr = A.data.data() + r * D;
          for (int64_t d = 0; d < D; ++d) s += xr[d];
          out.data[r] = is_mean ? s / static_cast<double>(D) : s;
        }
      }
      break;
    }

    case OpKind::kSquare: {
      arity(1);
      out.shape = A.shape;
      out.data.assign(A.numel(), 0.0);
      for (int64_t i = 0; i < A.numel(); ++i) out.data[i] = A.data[i] * A.data[i];
      break;
    }

    case OpKind::kSoftplus: {
      arity(1);
      out.shape = A.shape;
      out.data.assign(A.numel(), 0.0);
      for (int64_t i = 0; i < A.numel(); ++i) out.data[i] = softplus_stable(A.data[i]);
      break;
    }

    case OpKind::kScalarMul: {
      arity(1);
      out.shape = A.shape;
      out.data = A.data;
      for (double& v : out.data) v *= attrs.scalar;
      break;
    }

    case OpKind::kConcat: {
      require(!inputs.empty(), "E_OP", "concat: no inputs");
      const Shape& first = nodes_[inputs[0]].shape;
      require(!first.empty(), "E_SHAPE", "concat: scalar input");
      int64_t rows = 0;
      for (NodeId id : inputs) {
        const Shape& s = nodes_[id].shape;
        require(s.size() == first.size() &&
                    std::equal(s.begin() + 1, s.end(), first.begin() + 1),
                "E_SHAPE", "concat: trailing extents differ");
        rows += s[0];
      }
      out.shape = first;
      out.shape[0] = rows;
      out.data.reserve(shape_numel(out.shape));
      for (NodeId id : inputs)
        out.data.insert(out.data.end(), nodes_[id].data.begin(), nodes_[id].data.end());
      break;
    }

    case OpKind::kMaskFill: {
      arity(1);
      int64_t n = A.numel();
      int64_t m = static_cast<int64_t>(attrs.mask.size());
      require(m > 0 && (m == n || (m < n && n % m == 0)), "E_SHAPE",
              "mask_fill: mask length must equal input length or a trailing block");
      out.shape = A.shape;
      out.data = A.data;
      for (int64_t i = 0; i < n; ++i)
        if (attrs.mask[i % m]) out.data[i] = attrs.fill_value;
      break;
    }

    case OpKind::kCrossEntropyLastDim: {
      arity(1);
      require(!A.shape.empty(), "E_SHAPE", "cross_entropy_lastdim: scalar input");
      int64_t D = A.shape.back();
      int64_t rows = A.numel() / D;
      require(static_cast<int64_t>(attrs.indices.size()) == rows, "E_SHAPE",
              "cross_entropy_lastdim: need one target per row");
      for (int64_t id : attrs.indices)
        require(id >= 0 && id < D, "E_RANGE", "cross_entropy_lastdim: target out of range");
      out.shape = Shape(A.shape.begin(), A.shape.end() - 1);
      out.data.assign(rows, 0.0);
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = A.data.data() + r * D;
        double mx = xr[0];
        for (int64_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
        double s = 0.0;
        for (int64_t d = 0; d < D; ++d) s += std::exp(xr[d] - mx);
        out.data[r] = mx + std::log(s) - xr[attrs.indices[r]];
      }
      break;
    }

    case OpKind::kLeaf:
    case OpKind::kReshape:
      break;
  }

  if (check_finite_) {
    for (double v : out.data)
      require(std::isfinite(v), "E_NONFINITE",
              std::string(op_name(op)) + ": non-finite value in output");
  }

  out.attrs = std::move(attrs);
  return push(std::move(out));
}

void Tape::backprop(NodeId seed) {
  check_id(seed);
  require(nodes_[seed].numel() == 1, "E_TAPE", "backprop: seed must be a scalar");

  // Zero-initialized gradients for every grad-tracked node; leaves never
  // reached by the sweep therefore report exact zeros.
  for (auto& n : nodes_)
    if (n.requires_grad) n.grad.assign(n.data.size(), 0.0);

  if (nodes_[seed].requires_grad) nodes_[seed].grad[0] = 1.0;

  for (NodeId id = seed; id >= 0; --id) {
    TapeNode& n = nodes_[id];
    if (!n.requires_grad || n.op == OpKind::kLeaf) continue;
    const std::vector<double>& g = n.grad;

    auto in = [&](int i) -> TapeNode& { return nodes_[n.inputs[i]]; };
    auto wants = [&](int i) { return in(i).requires_grad; };

    switch (n.op) {
      case OpKind::kMatmul: {
        TapeNode& A = in(0);
        TapeNode& B = in(1);
        if (n.attrs.matmul_mode == MatmulMode::kPlain) {
          int64_t K = A.shape.back(), N = B.shape[1], R = A.numel() / K;
          if (wants(0)) {
            for (int64_t r = 0; r < R; ++r) {
              const double* grow = g.data() + r * N;
              double* darow = A.grad.data() + r * K;
              for (int64_t k = 0; k < K; ++k) {
                const double* brow = B.data.data() + k * N;
                double acc = 0.0;
                for (int64_t n2 = 0; n2 < N; ++n2) acc += grow[n2] * brow[n2];
                darow[k] += acc;
              }
            }
          }
          if (wants(1)) {
            for (int64_t r = 0; r < R; ++r) {
              const double* arow = A.data.data() + r * K;
              const double* grow = g.data() + r * N;
              for (int64_t k = 0; k < K; ++k) {
                double av = arow[k];
                if (av == 0.0) continue;
                double* dbrow = B.grad.data() + k * N;
                for (int64_t n2 = 0; n2 < N; ++n2) dbrow[n2] += av * grow[n2];
              }
            }
          }
        } else if (n.attrs.matmul_mode == MatmulMode::kQK) {
          int64_t Bn = A.shape[0], L = A.shape[1], D = A.shape[2], M = B.shape[1];
          int64_t h = n.attrs.heads, dh = D / h;
          for (int64_t b = 0; b < Bn; ++b)
            for (int64_t hh = 0; hh < h; ++hh)
              for (int64_t i = 0; i < L; ++i) {
                const double* grow = g.data() + ((b * h + hh) * L + i) * M;
                double* dq = A.grad.empty() ? nullptr
                                            : A.grad.data() + (b * L + i) * D + hh * dh;
                const double* qv = A.data.data() + (b * L + i) * D + hh * dh;
                for (int64_t j = 0; j < M; ++j) {
                  double gv = grow[j];
                  if (gv == 0.0) continue;
                  const double* kv = B.data.data() + (b * M + j) * D + hh * dh;
                  if (wants(0))
                    for (int64_t d = 0; d < dh; ++d) dq[d] += gv * kv[d];
                  if (wants(1)) {
                    double* dk = B.grad.data() + (b * M + j) * D + hh * dh;
                    for (int64_t d = 0; d < dh; ++d) dk[d] += gv * qv[d];
                  }
                }
              }
        } else {  // kAV
          int64_t Bn = A.shape[0], h = A.shape[1], L = A.shape[2], M = A.shape[3];
          int64_t D = B.shape[2], dh = D / h;
          for (int64_t b = 0; b < Bn; ++b)
            for (int64_t hh = 0; hh < h; ++hh)
              for (int64_t i = 0; i < L; ++i) {
                const double* grow = g.data() + (b * L + i) * D + hh * dh;
                const double* wrow = A.data.data() + ((b * h + hh) * L + i) * M;
                double* dwrow = A.grad.empty()
                                    ? nullptr
                                    : A.grad.data() + ((b * h + hh) * L + i) * M;
                for (int64_t j = 0; j < M; ++j) {
                  const double* vv = B.data.data() + (b * M + j) * D + hh * dh;
                  if (wants(0)) {
                    double acc = 0.0;
                    for (int64_t d = 0; d < dh; ++d) acc += grow[d] * vv[d];
                    dwrow[j] += acc;
                  }
                  if (wants(1)) {
                    double w = wrow[j];
                    if (w != 0.0) {
                      double* dv = B.grad.data() + (b * M + j) * D + hh * dh;
                      for (int64_t d = 0; d < dh; ++d) dv[d] += w * grow[d];
                    }
                  }
                }
              }
        }
        break;
      }

      case OpKind::kAdd:
      case OpKind::kMul: {
        TapeNode& A = in(0);
        TapeNode& B = in(1);
        bool is_add = n.op == OpKind::kAdd;
        Broadcast bc = classify_broadcast(A.shape, B.shape, n.op);
        int64_t total = A.numel();
        auto bval = [&](int64_t i) -> double {
          switch (bc) {
            case Broadcast::kSame: return B.data[i];
            case Broadcast::kSuffix: return B.data[i % B.numel()];
            default: return B.data[i / A.shape.back()];
          }
        };
        if (wants(0)) {
          for (int64_t i = 0; i < total; ++i)
            A.grad[i] += is_add ? g[i] : g[i] * bval(i);
        }
        if (wants(1)) {
          for (int64_t i = 0; i < total; ++i) {
            double contrib = is_add ? g[i] : g[i] * A.data[i];
            switch (bc) {
              case Broadcast::kSame: B.grad[i] += contrib; break;
              case Broadcast::kSuffix: B.grad[i % B.numel()] += contrib; break;
              default: B.grad[i / A.shape.back()] += contrib; break;
            }
          }
        }
        break;
      }

      case OpKind::kSoftmaxLastDim: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        int64_t D = A.shape.back();
        int64_t rows = A.numel() / D;
        for (int64_t r = 0; r < rows; ++r) {
          const double* yr = n.data.data() + r * D;
          const double* gr = g.data() + r * D;
          double* dx = A.grad.data() + r * D;
          double dot = 0.0;
          for (int64_t d = 0; d < D; ++d) dot += gr[d] * yr[d];
          for (int64_t d = 0; d < D; ++d) dx[d] += yr[d] * (gr[d] - dot);
        }
        break;
      }

      case OpKind::kLayerNorm: {
        TapeNode& A = in(0);
        TapeNode& G = in(1);
        TapeNode& Bt = in(2);
        int64_t D = A.shape.back();
        int64_t rows = A.numel() / D;
        double dn = static_cast<double>(D);
        for (int64_t r = 0; r < rows; ++r) {
          const double* xr = A.data.data() + r * D;
          const double* gr = g.data() + r * D;
          double m = 0.0;
          for (int64_t d = 0; d < D; ++d) m += xr[d];
          m /= dn;
          double v = 0.0;
          for (int64_t d = 0; d < D; ++d) {
            double c = xr[d] - m;
            v += c * c;
          }
          v /= dn;
          double inv = 1.0 / std::sqrt(v + n.attrs.eps);
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int64_t d = 0; d < D; ++d) {
            double xhat = (xr[d] - m) * inv;
            double dxhat = gr[d] * G.data[d];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
            if (Bt.requires_grad) Bt.grad[d] += gr[d];
            if (G.requires_grad) G.grad[d] += gr[d] * xhat;
          }
          mean_dxhat /= dn;
          mean_dxhat_xhat /= dn;
          if (wants(0)) {
            double* dx = A.grad.data() + r * D;
            for (int64_t d = 0; d < D; ++d) {
              double xhat = (xr[d] - m) * inv;
              double dxhat = gr[d] * G.data[d];
              dx[d] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
          }
        }
        break;
      }

      case OpKind::kGelu: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        for (int64_t i = 0; i < A.numel(); ++i) {
          double x = A.data[i];
          A.grad[i] += g[i] * (norm_cdf(x) + x * norm_pdf(x));
        }
        break;
      }

      case OpKind::kRelu: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        for (int64_t i = 0; i < A.numel(); ++i)
          if (A.data[i] > 0.0) A.grad[i] += g[i];
        break;
      }

      case OpKind::kEmbeddingGather: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        int64_t block = A.numel() / A.shape[0];
        for (size_t i = 0; i < n.attrs.indices.size(); ++i) {
          double* dst = A.grad.data() + n.attrs.indices[i] * block;
          const double* src = g.data() + static_cast<int64_t>(i) * block;
          for (int64_t d = 0; d < block; ++d) dst[d] += src[d];
        }
        break;
      }

      case OpKind::kGatherLastDim: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        int64_t D = A.shape.back();
        for (size_t r = 0; r < n.attrs.indices.size(); ++r)
          A.grad[static_cast<int64_t>(r) * D + n.attrs.indices[r]] += g[r];
        break;
      }

      case OpKind::kMean:
      case OpKind::kSum: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        bool is_mean = n.op == OpKind::kMean;
        if (n.attrs.axis == ReduceAxis::kAll) {
          double gv = g[0];
          if (is_mean) gv /= static_cast<double>(std::max<int64_t>(1, A.numel()));
          for (int64_t i = 0; i < A.numel(); ++i) A.grad[i] += gv;
        } else {
          int64_t D = A.shape.back();
          int64_t rows = A.numel() / D;
          for (int64_t r = 0; r < rows; ++r) {
            double gv = is_mean ? g[r] / static_cast<double>(D) : g[r];
            double* dx = A.grad.data() + r * D;
            for (int64_t d = 0; d < D; ++d) dx[d] += gv;
          }
        }
        break;
      }

      case OpKind::kSquare: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        for (int64_t i = 0; i < A.numel(); ++i) A.grad[i] += 2.0 * A.data[i] * g[i];
        break;
      }

      case OpKind::kSoftplus: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        for (int64_t i = 0; i < A.numel(); ++i) A.grad[i] += sigmoid(A.data[i]) * g[i];
        break;
      }

      case OpKind::kScalarMul: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        for (int64_t i = 0; i < A.numel(); ++i) A.grad[i] += n.attrs.scalar * g[i];
        break;
      }

      case OpKind::kConcat: {
        int64_t offset = 0;
        for (size_t i = 0; i < n.inputs.size(); ++i) {
          TapeNode& part = in(static_cast<int>(i));
          int64_t len = part.numel();
          if (part.requires_grad)
            for (int64_t j = 0; j < len; ++j) part.grad[j] += g[offset + j];
          offset += len;
        }
        break;
      }

      case OpKind::kMaskFill: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        int64_t m = static_cast<int64_t>(n.attrs.mask.size());
        for (int64_t i = 0; i < A.numel(); ++i)
          if (!n.attrs.mask[i % m]) A.grad[i] += g[i];
        break;
      }

      case OpKind::kReshape: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        for (int64_t i = 0; i < A.numel(); ++i) A.grad[i] += g[i];
        break;
      }

      case OpKind::kCrossEntropyLastDim: {
        TapeNode& A = in(0);
        if (!wants(0)) break;
        int64_t D = A.shape.back();
        int64_t rows = A.numel() / D;
        for (int64_t r = 0; r < rows; ++r) {
          const double* xr = A.data.data() + r * D;
          double* dx = A.grad.data() + r * D;
          double mx = xr[0];
          for (int64_t d = 1; d < D; ++d) mx = std::max(mx, xr[d]);
          double s = 0.0;
          for (int64_t d = 0; d < D; ++d) s += std::exp(xr[d] - mx);
          double gv = g[r];
          for (int64_t d = 0; d < D; ++d)
            dx[d] += gv * (std::exp(xr[d] - mx) / s);
          dx[n.attrs.indices[r]] -= gv;
        }
        break;
      }

      case OpKind::kLeaf:
        break;
    }
  }

  // Accumulate leaf gradients into their bound parameters.
  for (auto& n : nodes_) {
    if (n.bound_param != nullptr && n.requires_grad && !n.grad.empty()) {
      Tensor& p = *n.bound_param;
      for (size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  }
}

double finite_diff_check(const std::function<double()>& fn,
                         std::span<Tensor* const> params, double epsilon) {
  require(epsilon > 0.0, "E_RANGE", "finite_diff_check: epsilon must be positive");
  double worst = 0.0;
  for (Tensor* p : params) {
    for (size_t i = 0; i < p->data.size(); ++i) {
      double saved = p->data[i];
      p->data[i] = saved + epsilon;
      double up = fn();
      p->data[i] = saved - epsilon;
      double down = fn();
      p->data[i] = saved;
      require(std::isfinite(up) && std::isfinite(down), "E_NONFINITE",
              "finite_diff_check: fn non-finite at perturbed point");
      double numeric = (up - down) / (2.0 * epsilon);
      double analytic = p->grad[i];
      double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace germ
