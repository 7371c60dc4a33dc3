#pragma once

#include "uae/ops.hpp"

namespace uae {

// Closed primitive set exposed behind a single dispatcher. The free
// functions in ops.hpp are the implementation; this is the uniform entry
// point used by the primitive-level verification suite.
enum class PrimitiveKind {
  Matmul,
  Add,
  Sub,
  Mul,
  Relu,
  Exp,
  Neg,
  Concat,
  Reshape,
  Transpose,
  GatherRows,
  ReduceMax,
  ReduceSum,
  ReduceMean,
  Softmax,
  L1Normalize,
  BatchNorm,
  Dropout,
  Sqrt,
  Square,
};

inline const char* kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::Matmul: return "matmul";
    case PrimitiveKind::Add: return "add";
    case PrimitiveKind::Sub: return "sub";
    case PrimitiveKind::Mul: return "mul";
    case PrimitiveKind::Relu: return "relu";
    case PrimitiveKind::Exp: return "exp";
    case PrimitiveKind::Neg: return "neg";
    case PrimitiveKind::Concat: return "concat";
    case PrimitiveKind::Reshape: return "reshape";
    case PrimitiveKind::Transpose: return "transpose";
    case PrimitiveKind::GatherRows: return "gather_rows";
    case PrimitiveKind::ReduceMax: return "reduce_max";
    case PrimitiveKind::ReduceSum: return "reduce_sum";
    case PrimitiveKind::ReduceMean: return "reduce_mean";
    case PrimitiveKind::Softmax: return "softmax";
    case PrimitiveKind::L1Normalize: return "l1_normalize";
    case PrimitiveKind::BatchNorm: return "batch_norm";
    case PrimitiveKind::Dropout: return "dropout";
    case PrimitiveKind::Sqrt: return "sqrt";
    case PrimitiveKind::Square: return "square";
  }
  return "?";
}

template <class T>
struct Attrs {
  std::optional<int64_t> axis;
  Shape shape;                    // reshape target
  std::vector<int64_t> indices;   // gather_rows
  double rate = 0.0;              // dropout
  double momentum = 0.9;          // batch_norm
  double eps = 1e-5;
  bool train = false;
  bool invariant_accum = false;   // matmul
  Rng* rng = nullptr;             // dropout mask source
  BNState<T>* bn_state = nullptr;
  std::vector<int64_t>* argmax_out = nullptr;
};

template <class T>
Tensor<T> apply(PrimitiveKind kind, const std::vector<Tensor<T>>& inputs, const Attrs<T>& attrs = {}) {
  auto want = [&](size_t n) {
    if (inputs.size() != n)
      throw ValueError(std::string(kind_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(inputs.size()));
  };
  auto axis_or = [&]() -> int64_t {
    if (!attrs.axis) throw ValueError(std::string(kind_name(kind)) + ": missing axis attribute");
    return *attrs.axis;
  };
  switch (kind) {
    case PrimitiveKind::Matmul:
      want(2);
      return matmul(inputs[0], inputs[1], attrs.invariant_accum);
    case PrimitiveKind::Add:
      want(2);
      return add(inputs[0], inputs[1]);
    case PrimitiveKind::Sub:
      want(2);
      return sub(inputs[0], inputs[1]);
    case PrimitiveKind::Mul:
      want(2);
      return mul(inputs[0], inputs[1]);
    case PrimitiveKind::Relu:
      want(1);
      return relu(inputs[0]);
    case PrimitiveKind::Exp:
      want(1);
      return exp(inputs[0]);
    case PrimitiveKind::Neg:
      want(1);
      return neg(inputs[0]);
    case PrimitiveKind::Concat:
      return concat(inputs, axis_or());
    case PrimitiveKind::Reshape:
      want(1);
      return reshape(inputs[0], attrs.shape);
    case PrimitiveKind::Transpose:
      want(1);
      return transpose(inputs[0]);
    case PrimitiveKind::GatherRows:
      want(1);
      return gather_rows(inputs[0], attrs.indices);
    case PrimitiveKind::ReduceMax:
      want(1);
      return reduce_max(inputs[0], axis_or(), attrs.argmax_out);
    case PrimitiveKind::ReduceSum:
      want(1);
      return reduce_sum(inputs[0], attrs.axis);
    case PrimitiveKind::ReduceMean:
      want(1);
      return reduce_mean(inputs[0], attrs.axis);
    case PrimitiveKind::Softmax:
      want(1);
      return softmax(inputs[0], axis_or());
    case PrimitiveKind::L1Normalize:
      want(1);
      return l1_normalize(inputs[0], axis_or());
    case PrimitiveKind::BatchNorm:
      want(3);
      if (!attrs.bn_state) throw ValueError("batch_norm: missing state attribute");
      return batch_norm(inputs[0], inputs[1], inputs[2], *attrs.bn_state, attrs.train,
                        attrs.momentum, attrs.eps);
    case PrimitiveKind::Dropout:
      want(1);
      if (attrs.train && !attrs.rng) throw ValueError("dropout: missing rng attribute");
      if (!attrs.train) {
        static Rng unused;
        return dropout(inputs[0], attrs.rate, false, unused);
      }
      return dropout(inputs[0], attrs.rate, true, *attrs.rng);
    case PrimitiveKind::Sqrt:
      want(1);
      return sqrt(inputs[0]);
    case PrimitiveKind::Square:
      want(1);
      return square(inputs[0]);
  }
  throw ValueError("apply: unknown primitive kind");
}

}  // namespace uae
