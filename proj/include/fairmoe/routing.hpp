// SPDX-License-Identifier: Apache-2.0
//
// Sparsification algebra for capacity-filtered MoE gates: row-wise top-k,
// column-wise capacity truncation, and the capacity budget derived from the
// capacity factor. Kept entries pass through verbatim (no renormalization);
// the masks are constants during backward.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "fairmoe/errors.hpp"
#include "fairmoe/fingerprint.hpp"
#include "fairmoe/tensor.hpp"

namespace fairmoe {

struct CapacitySpec {
  double capacity_factor = 1.0;  // C
  int token_count = 1;           // N+1
  int row_budget = 1;            // k
  int expert_count = 1;          // M
};

// Per-layer gate weights: the dense post-softmax matrix and its sparsified
// counterpart. Both are retained; the fairness loss can stack either.
struct GateWeights {
  Tensor dense;   // [(N+1) x M]
  Tensor sparse;  // [(N+1) x M], zero outside the kept entries
  int k = 0;
  int alpha = 0;
};

// alpha = floor(C * (N+1) * k / M), clamped to at least 1.
inline int compute_alpha(const CapacitySpec& spec) {
  if (spec.capacity_factor <= 0.0 || spec.token_count <= 0 || spec.row_budget <= 0 || spec.expert_count <= 0)
    throw ContractError("compute_alpha: all capacity fields must be positive");
  const double raw = spec.capacity_factor * static_cast<double>(spec.token_count) *
                     static_cast<double>(spec.row_budget) / static_cast<double>(spec.expert_count);
  return std::max(1, static_cast<int>(std::floor(raw)));
}

namespace detail {

// Indices of the `k` largest entries of `vals` taken at `stride` starting at
// `base`; ties keep the lower index.
inline std::vector<int> top_indices(const std::vector<double>& vals, std::size_t base, std::size_t stride,
                                    int count, int keep) {
  std::vector<int> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double va = vals[base + static_cast<std::size_t>(a) * stride];
    const double vb = vals[base + static_cast<std::size_t>(b) * stride];
    if (va != vb) return va > vb;
    return a < b;
  });
  idx.resize(keep);
  return idx;
}

inline void note_selection(const std::vector<int>& kept, std::uint64_t salt) {
  auto& fp = SelectionFingerprint::current();
  fp.note(salt);
  for (int i : kept) fp.note(static_cast<std::uint64_t>(i) + 0x9e37u);
}

}  // namespace detail

// Keeps the k largest entries of each row verbatim and zeroes the rest.
inline Tensor top_r(const Tensor& w, int k) {
  const int r = w.rows(), m = w.cols();
  if (k < 1 || k > m) throw ContractError("top_r: k out of range");
  std::vector<double> mask(w.numel(), 0.0);
  const auto& v = w.values();
  for (int i = 0; i < r; ++i) {
    auto kept = detail::top_indices(v, static_cast<std::size_t>(i) * m, 1, m, k);
    detail::note_selection(kept, 0x7231u + static_cast<std::uint64_t>(i));
    for (int j : kept) mask[static_cast<std::size_t>(i) * m + j] = 1.0;
  }
  return mask_mul(w, std::move(mask));
}

// Keeps the alpha largest entries of each column verbatim and zeroes the
// rest. Applied after top_r in the routing composition.
inline Tensor top_c(const Tensor& w, int alpha) {
  const int r = w.rows(), m = w.cols();
  if (alpha < 1) throw ContractError("top_c: alpha must be >= 1");
  std::vector<double> mask(w.numel(), 0.0);
  const auto& v = w.values();
  const int keep = std::min(alpha, r);
  for (int j = 0; j < m; ++j) {
    auto kept = detail::top_indices(v, static_cast<std::size_t>(j), static_cast<std::size_t>(m), r, keep);
    detail::note_selection(kept, 0x70C0u + static_cast<std::uint64_t>(j));
    for (int i : kept) mask[static_cast<std::size_t>(i) * m + j] = 1.0;
  }
  return mask_mul(w, std::move(mask));
}

// sparse = top_c(top_r(dense, k), alpha). The dense matrix is retained for
// the fairness loss variance terms.
inline GateWeights route(const Tensor& dense, int k, const CapacitySpec& spec) {
  GateWeights gw;
  gw.dense = dense;
  gw.k = k;
  gw.alpha = compute_alpha(spec);
  gw.sparse = top_c(top_r(dense, k), gw.alpha);
  return gw;
}

}  // namespace fairmoe
