// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "fairmoe/rng.hpp"
#include "fairmoe/routing.hpp"
#include "fairmoe/tensor.hpp"

using namespace fairmoe;

namespace {

// Independent oracle: entry (i,j) survives a row top-k iff fewer than k
// entries in its row beat it, where "beats" is (larger value) or (equal
// value and lower index). Pairwise counting, no sorting.
std::vector<double> oracle_top_r(const std::vector<double>& w, int r, int m, int k) {
  std::vector<double> out(w.size(), 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < m; ++j) {
      int beats = 0;
      for (int l = 0; l < m; ++l) {
        if (l == j) continue;
        const double vl = w[i * m + l], vj = w[i * m + j];
        if (vl > vj || (vl == vj && l < j)) ++beats;
      }
      if (beats < k) out[i * m + j] = w[i * m + j];
    }
  return out;
}

std::vector<double> oracle_top_c(const std::vector<double>& w, int r, int m, int alpha) {
  std::vector<double> out(w.size(), 0.0);
  for (int j = 0; j < m; ++j)
    for (int i = 0; i < r; ++i) {
      int beats = 0;
      for (int l = 0; l < r; ++l) {
        if (l == i) continue;
        const double vl = w[l * m + j], vi = w[i * m + j];
        if (vl > vi || (vl == vi && l < i)) ++beats;
      }
      if (beats < alpha) out[i * m + j] = w[i * m + j];
    }
  return out;
}

Tensor random_stochastic(int r, int m, Rng& rng) {
  std::vector<double> data(static_cast<std::size_t>(r) * m);
  for (auto& v : data) v = rng.uniform(-2.0, 2.0);
  return softmax_rows(Tensor::constant({r, m}, std::move(data)));
}

}  // namespace

TEST_CASE("top_r with k equal to width is the identity") {
  Rng rng(1);
  Tensor w = random_stochastic(5, 4, rng);
  Tensor s = top_r(w, 4);
  CHECK(s.values() == w.values());
}

TEST_CASE("top_r keeps the single maximum") {
  Tensor w = Tensor::constant({1, 3}, {0.5, 0.3, 0.2});
  Tensor s = top_r(w, 1);
  CHECK(s.values() == std::vector<double>{0.5, 0.0, 0.0});
}

TEST_CASE("top_r out-of-range k raises contract error") {
  Tensor w = Tensor::constant({1, 3}, {0.5, 0.3, 0.2});
  CHECK_THROWS_AS(top_r(w, 0), ContractError);
  CHECK_THROWS_AS(top_r(w, 4), ContractError);
}

TEST_CASE("top_r matches the brute-force row oracle") {
  Rng rng(2);
  Tensor w = random_stochastic(6, 4, rng);
  Tensor s = top_r(w, 2);
  CHECK(s.values() == oracle_top_r(w.values(), 6, 4, 2));
}

TEST_CASE("compute_alpha evaluates the capacity formula with floor and clamp") {
  CHECK(compute_alpha({1.0, 16, 2, 8}) == 4);
  CHECK(compute_alpha({1.0, 4, 1, 4}) == 1);
  CHECK(compute_alpha({1.5, 5, 1, 4}) == 1);  // floor(1.875)
  CHECK(compute_alpha({0.1, 4, 1, 4}) == 1);  // clamped up from floor(0.1)
  CHECK_THROWS_AS(compute_alpha({0.0, 4, 1, 4}), ContractError);
}

TEST_CASE("top_c with slack capacity is the identity") {
  Rng rng(3);
  Tensor w = random_stochastic(4, 3, rng);
  CHECK(top_c(w, 4).values() == w.values());
  CHECK(top_c(w, 17).values() == w.values());
}

TEST_CASE("top_c truncates a column to its alpha largest entries") {
  Tensor w = Tensor::constant({3, 1}, {0.9, 0.8, 0.1});
  Tensor s = top_c(w, 2);
  CHECK(s.values() == std::vector<double>{0.9, 0.8, 0.0});
}

TEST_CASE("top_r then top_c matches oracle composition and both budgets") {
  Rng rng(4);
  Tensor w = random_stochastic(8, 4, rng);
  Tensor composed = top_c(top_r(w, 2), 3);
  auto expect = oracle_top_c(oracle_top_r(w.values(), 8, 4, 2), 8, 4, 3);
  CHECK(composed.values() == expect);
  for (int i = 0; i < 8; ++i) {
    int nnz = 0;
    for (int j = 0; j < 4; ++j) nnz += composed.at(i, j) != 0.0;
    CHECK(nnz <= 2);
  }
  for (int j = 0; j < 4; ++j) {
    int nnz = 0;
    for (int i = 0; i < 8; ++i) nnz += composed.at(i, j) != 0.0;
    CHECK(nnz <= 3);
  }
}

TEST_CASE("route with a single expert keeps the all-ones column") {
  Rng rng(5);
  Tensor logits = Tensor::constant({4, 1}, {0.3, -1.0, 2.0, 0.0});
  Tensor dense = softmax_rows(logits);
  GateWeights gw = route(dense, 1, {1.0, 4, 1, 1});
  for (int i = 0; i < 4; ++i) CHECK(gw.dense.at(i, 0) == 1.0);
  CHECK(gw.sparse.values() == gw.dense.values());
}

TEST_CASE("route breaks uniform ties toward the lowest expert index") {
  Tensor dense = Tensor::constant({4, 4}, std::vector<double>(16, 0.25));
  GateWeights gw = route(dense, 1, {4.0, 4, 1, 4});  // alpha = 4: capacity never binds
  for (int i = 0; i < 4; ++i) {
    CHECK(gw.sparse.at(i, 0) == 0.25);
    for (int j = 1; j < 4; ++j) CHECK(gw.sparse.at(i, j) == 0.0);
  }
}

TEST_CASE("route nonzero pattern is a subset of top_r's pattern") {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const int r = 2 + static_cast<int>(rng.below(8));
    const int m = 2 + static_cast<int>(rng.below(6));
    const int k = 1 + static_cast<int>(rng.below(m));
    Tensor dense = random_stochastic(r, m, rng);
    Tensor tr = top_r(dense, k);
    GateWeights gw = route(dense, k, {rng.uniform(0.3, 2.0), r, k, m});
    for (std::size_t i = 0; i < gw.sparse.numel(); ++i) {
      if (gw.sparse.values()[i] != 0.0) CHECK(tr.values()[i] == gw.sparse.values()[i]);
      CHECK((gw.sparse.values()[i] == 0.0 || gw.sparse.values()[i] == dense.values()[i]));
    }
  }
}

TEST_CASE("route equals the oracle with budget invariants on random instances") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int r = 1 + static_cast<int>(rng.below(12));
    const int m = 1 + static_cast<int>(rng.below(8));
    const int k = 1 + static_cast<int>(rng.below(m));
    const double cf = rng.uniform(0.25, 2.5);
    Tensor dense = random_stochastic(r, m, rng);
    CapacitySpec spec{cf, r, k, m};
    const int alpha = compute_alpha(spec);
    GateWeights gw = route(dense, k, spec);
    auto expect = oracle_top_c(oracle_top_r(dense.values(), r, m, k), r, m, alpha);
    REQUIRE(gw.sparse.values() == expect);
    for (int i = 0; i < r; ++i) {
      int nnz = 0;
      for (int j = 0; j < m; ++j) nnz += gw.sparse.at(i, j) != 0.0;
      CHECK(nnz <= k);
    }
    for (int j = 0; j < m; ++j) {
      int nnz = 0;
      for (int i = 0; i < r; ++i) nnz += gw.sparse.at(i, j) != 0.0;
      CHECK(nnz <= alpha);
    }
  }
}

TEST_CASE("routing is equivariant under row permutation for distinct values") {
  Rng rng(8);
  const int r = 6, m = 4, k = 2;
  Tensor dense = random_stochastic(r, m, rng);
  CapacitySpec spec{1.0, r, k, m};
  GateWeights base = route(dense, k, spec);

  std::vector<int> perm{3, 0, 5, 1, 4, 2};
  std::vector<double> permuted(dense.numel());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < m; ++j) permuted[i * m + j] = dense.at(perm[i], j);
  GateWeights shuffled = route(Tensor::constant({r, m}, std::move(permuted)), k, spec);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < m; ++j) CHECK(shuffled.sparse.at(i, j) == base.sparse.at(perm[i], j));
}

TEST_CASE("sparsification is straight-through for gradients") {
  Tensor w = Tensor::param({2, 3}, {0.6, 0.3, 0.1, 0.2, 0.5, 0.3});
  Tape tape;
  TapeScope scope(tape);
  Tensor s = top_r(w, 1);
  backward(sum(s));
  CHECK(w.grad() == std::vector<double>{1, 0, 0, 0, 1, 0});
}
