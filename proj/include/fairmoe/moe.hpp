// SPDX-License-Identifier: Apache-2.0
//
// The two capacity-filtered MoE layers: a per-token embedding MoE (row-wise
// top-k gate composed with column capacity truncation) and a single-vector
// feature MoE (top-k gate only; capacity is meaningless for one token).
// Experts are two-layer MLPs without biases, E(x) = W2 * act(W1 * x),
// applied row-wise.
#pragma once

#include <vector>

#include "fairmoe/errors.hpp"
#include "fairmoe/routing.hpp"
#include "fairmoe/tensor.hpp"

namespace fairmoe {

enum class Activation { kGelu, kRelu };

inline Tensor apply_activation(const Tensor& x, Activation act) {
  return act == Activation::kGelu ? gelu(x) : relu(x);
}

struct Expert {
  Tensor w1;  // [hidden x in]
  Tensor w2;  // [out x hidden]
};

// Row-wise expert application on stacked inputs [(rows) x in].
inline Tensor expert_forward(const Expert& e, const Tensor& x, Activation act) {
  return matmul(apply_activation(matmul(x, transpose(e.w1)), act), transpose(e.w2));
}

struct EmbeddingMoe {
  std::vector<Expert> experts;
  Tensor gate;  // [M x in], no bias
  int k = 1;
  CapacitySpec capacity;
  Activation act = Activation::kGelu;
};

struct FeatureMoe {
  std::vector<Expert> experts;
  Tensor gate;  // [M x in]
  int k = 1;
  Activation act = Activation::kGelu;
};

struct MoeOutput {
  Tensor output;
  GateWeights gates;
};

// Weighted sum of expert outputs per row: out_a = sum_b gates[a,b] * E_b(x_a).
// Takes the gate matrix explicitly so ablations and tests can substitute
// arbitrary weights.
inline Tensor aggregate_with_gates(const std::vector<Expert>& experts, Activation act, const Tensor& gates,
                                   const Tensor& x) {
  if (static_cast<int>(experts.size()) != gates.cols())
    throw DimensionError("aggregate_with_gates: gate width must match expert count");
  Tensor out;
  for (std::size_t b = 0; b < experts.size(); ++b) {
    Tensor weight_col = flatten(slice_cols(gates, static_cast<int>(b), static_cast<int>(b) + 1));
    Tensor contrib = mul_colvec(expert_forward(experts[b], x, act), weight_col);
    out = out.defined() ? add(out, contrib) : contrib;
  }
  return out;
}

// Per-token mixture under the full routing composition. Returns both the
// dense and sparse gate matrices for the fairness loss.
inline MoeOutput embedding_moe_forward(const EmbeddingMoe& layer, const Tensor& input) {
  if (input.rows() != layer.capacity.token_count)
    throw ContractError("embedding_moe_forward: token count does not match capacity spec");
  if (input.cols() != layer.gate.cols()) throw DimensionError("embedding_moe_forward: input width mismatch");
  Tensor dense = softmax_rows(matmul(input, transpose(layer.gate)));
  GateWeights gw = route(dense, layer.k, layer.capacity);
  return {aggregate_with_gates(layer.experts, layer.act, gw.sparse, input), gw};
}

// Mixture over a single feature vector (row 0 of the encoder output).
// The sparse gates are top_r only; there is no capacity filter.
inline MoeOutput feature_moe_forward(const FeatureMoe& layer, const Tensor& input) {
  if (input.rows() < 1) throw ContractError("feature_moe_forward: empty input");
  Tensor feature_row = slice_rows(input, 0, 1);
  Tensor dense = softmax_rows(matmul(feature_row, transpose(layer.gate)));
  GateWeights gw;
  gw.dense = dense;
  gw.sparse = top_r(dense, layer.k);
  gw.k = layer.k;
  gw.alpha = 1;
  return {flatten(aggregate_with_gates(layer.experts, layer.act, gw.sparse, feature_row)), gw};
}

}  // namespace fairmoe
