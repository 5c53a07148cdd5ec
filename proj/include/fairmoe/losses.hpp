// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: the symmetric contrastive loss, an entropic
// optimal-transport distance (log-domain Sinkhorn, differentiable through
// the iterations), the per-group gate-variance difference terms, and their
// combination.
#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <utility>
#include <vector>

#include "fairmoe/errors.hpp"
#include "fairmoe/tensor.hpp"

namespace fairmoe {

struct LossWeights {
  double lambda_fol = 1.0;
  double lambda_dist = 1e-4;
  double sinkhorn_epsilon = 1e-3;
  int sinkhorn_iters = 200;
};

// Symmetric InfoNCE over the scaled cosine-similarity matrix. `inv_temp` is
// the (possibly learnable) inverse temperature as a 1-element tensor.
inline Tensor contrastive_loss(const Tensor& img_feats, const Tensor& txt_feats, const Tensor& inv_temp) {
  if (img_feats.rows() != txt_feats.rows() || img_feats.cols() != txt_feats.cols())
    throw DimensionError("contrastive_loss: feature shapes disagree");
  if (img_feats.rows() < 2) throw ContractError("contrastive_loss: batch must have at least 2 pairs");
  Tensor ni = l2_normalize_rows(img_feats);
  Tensor nt = l2_normalize_rows(txt_feats);
  Tensor sims = mul_scalar(matmul(ni, transpose(nt)), inv_temp);
  Tensor ce_i2t = mean(sub(logsumexp_rows(sims), pick_diag(sims)));
  Tensor simst = transpose(sims);
  Tensor ce_t2i = mean(sub(logsumexp_rows(simst), pick_diag(simst)));
  return scale(add(ce_i2t, ce_t2i), 0.5);
}

inline Tensor contrastive_loss(const Tensor& img_feats, const Tensor& txt_feats, double temperature) {
  if (temperature <= 0.0) throw ContractError("contrastive_loss: temperature must be positive");
  return contrastive_loss(img_feats, txt_feats, Tensor::scalar(1.0 / temperature));
}

// Diagonal cosine similarities of a paired batch: [B].
inline Tensor cosine_similarities(const Tensor& img_feats, const Tensor& txt_feats) {
  Tensor ni = l2_normalize_rows(img_feats);
  Tensor nt = l2_normalize_rows(txt_feats);
  return rowwise_sum(mul(ni, nt));
}

namespace detail {

// Log-domain Sinkhorn (Gauss-Seidel sweeps) between uniform empirical
// distributions on scalar supports with squared-difference cost. Returns
// <P, C> for the plan after `iters` sweeps.
inline Tensor sinkhorn_core(const Tensor& u, const Tensor& v, double eps, int iters) {
  const int n = static_cast<int>(u.numel());
  const int m = static_cast<int>(v.numel());
  const double ln_a = std::log(1.0 / n);
  const double ln_b = std::log(1.0 / m);
  Tensor diff = outer_sub(flatten(u), flatten(v));
  Tensor cost = mul(diff, diff);                 // [n x m]
  Tensor neg_cost_eps = scale(cost, -1.0 / eps); // -C/eps
  Tensor neg_cost_eps_t = transpose(neg_cost_eps);
  Tensor f = Tensor::zeros({n});
  Tensor g = Tensor::zeros({m});
  for (int t = 0; t < iters; ++t) {
    f = scale(logsumexp_rows(add_rowvec(neg_cost_eps, add_const(scale(g, 1.0 / eps), ln_b))), -eps);
    g = scale(logsumexp_rows(add_rowvec(neg_cost_eps_t, add_const(scale(f, 1.0 / eps), ln_a))), -eps);
  }
  Tensor log_plan = add_colvec(add_rowvec(neg_cost_eps, add_const(scale(g, 1.0 / eps), ln_b)),
                               add_const(scale(f, 1.0 / eps), ln_a));
  return sum(mul(exp_t(log_plan), cost));
}

// Canonical operand order so that sinkhorn_distance(u, v) and
// sinkhorn_distance(v, u) execute the identical arithmetic.
inline bool canonical_order(const Tensor& u, const Tensor& v) {
  if (u.numel() != v.numel()) return u.numel() < v.numel();
  const auto &a = u.values(), &b = v.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i]) return a[i] < b[i];
  }
  return true;
}

}  // namespace detail

// Entropic OT cost between two 1-D samples treated as uniform empirical
// distributions, cost |x - y|^2. Exactly symmetric in its arguments.
inline Tensor sinkhorn_distance(const Tensor& u, const Tensor& v, double eps, int iters) {
  if (u.numel() < 1 || v.numel() < 1) throw ContractError("sinkhorn_distance: empty sample");
  if (eps <= 0.0) throw ContractError("sinkhorn_distance: epsilon must be positive");
  if (iters < 1) throw ContractError("sinkhorn_distance: iters must be positive");
  for (double x : u.values())
    if (!std::isfinite(x)) throw ContractError("sinkhorn_distance: non-finite input");
  for (double x : v.values())
    if (!std::isfinite(x)) throw ContractError("sinkhorn_distance: non-finite input");
  return detail::canonical_order(u, v) ? detail::sinkhorn_core(u, v, eps, iters)
                                       : detail::sinkhorn_core(v, u, eps, iters);
}

// Sum of Sinkhorn distances between the whole-batch similarity sample and
// each group's sub-sample. Groups with fewer than 2 members are skipped.
inline Tensor l_distance(const Tensor& similarities, const std::vector<int>& groups, double eps, int iters) {
  if (static_cast<int>(groups.size()) != static_cast<int>(similarities.numel()))
    throw DimensionError("l_distance: group labels must match similarity count");
  if (similarities.numel() < 2) throw ContractError("l_distance: need at least 2 similarities");
  int max_group = -1;
  for (int g : groups) max_group = std::max(max_group, g);
  Tensor total = Tensor::scalar(0.0);
  for (int p = 0; p <= max_group; ++p) {
    std::vector<int> idx;
    for (std::size_t i = 0; i < groups.size(); ++i)
      if (groups[i] == p) idx.push_back(static_cast<int>(i));
    if (idx.size() < 2) continue;
    Tensor group_sims = gather(flatten(similarities), idx);
    total = add(total, sinkhorn_distance(similarities, group_sims, eps, iters));
  }
  return total;
}

// Gate-weight rows stacked across a sample of the dataset (overall) and per
// protected group.
struct StackedGates {
  Tensor overall;                                   // [R x M]
  std::vector<std::pair<int, Tensor>> per_group;    // group id -> [R_p x M]
};

// Population variance of each column: [R x M] -> [M].
inline Tensor column_variances(const Tensor& stack) {
  Tensor mu = colwise_mean(stack);
  Tensor centered = add_rowvec(stack, neg(mu));
  return colwise_mean(mul(centered, centered));
}

struct VarianceTermResult {
  Tensor value;
  int skipped_groups = 0;
};

// sum_p sum_j (Var(overall[:,j]) - Var(group_p[:,j]))^2. Groups whose stack
// has fewer than 2 rows are skipped and counted.
inline VarianceTermResult variance_term(const StackedGates& stacks) {
  if (stacks.overall.rows() < 2) throw ContractError("variance_term: overall stack needs >= 2 rows");
  VarianceTermResult res;
  res.value = Tensor::scalar(0.0);
  Tensor overall_var = column_variances(stacks.overall);
  for (const auto& [group, stack] : stacks.per_group) {
    if (stack.rows() < 2) {
      ++res.skipped_groups;
      continue;
    }
    if (stack.cols() != stacks.overall.cols()) throw DimensionError("variance_term: expert count mismatch");
    Tensor d = sub(overall_var, column_variances(stack));
    res.value = add(res.value, sum(mul(d, d)));
  }
  return res;
}

struct FolInputs {
  std::optional<StackedGates> ei, et, fi, ft;
  Tensor similarities;       // diagonal cosine similarities, undefined to skip
  std::vector<int> groups;   // group labels aligned with similarities
};

struct FolBreakdown {
  Tensor f_ei, f_et, f_fi, f_ft;  // variance terms (zero scalars when absent)
  Tensor l_dist;                  // raw Sinkhorn term, before lambda_dist
  Tensor total;                   // f_ei + f_et + f_fi + f_ft + lambda_dist * l_dist
  int skipped_groups = 0;
};

// The combined fairness objective. Each component is exposed separately for
// the ablation switchboard and the per-step loss log.
inline FolBreakdown fol(const FolInputs& in, const LossWeights& w) {
  FolBreakdown out;
  auto term = [&](const std::optional<StackedGates>& s) {
    if (!s.has_value()) return Tensor::scalar(0.0);
    VarianceTermResult r = variance_term(*s);
    out.skipped_groups += r.skipped_groups;
    return r.value;
  };
  out.f_ei = term(in.ei);
  out.f_et = term(in.et);
  out.f_fi = term(in.fi);
  out.f_ft = term(in.ft);
  out.l_dist = in.similarities.defined()
                   ? l_distance(in.similarities, in.groups, w.sinkhorn_epsilon, w.sinkhorn_iters)
                   : Tensor::scalar(0.0);
  out.total = add(add(add(out.f_ei, out.f_et), add(out.f_fi, out.f_ft)), scale(out.l_dist, w.lambda_dist));
  return out;
}

inline Tensor total_loss(const Tensor& contrastive, const Tensor& fol_value, const LossWeights& w) {
  return add(contrastive, scale(fol_value, w.lambda_fol));
}

}  // namespace fairmoe
