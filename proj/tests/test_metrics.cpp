// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fairmoe/metrics.hpp"
#include "fairmoe/rng.hpp"

using namespace fairmoe;

namespace {

PredictionRecord rec(double score, int label, int group = 0, const std::string& attr = "race") {
  PredictionRecord r;
  r.score = score;
  r.label = label;
  r.groups[attr] = group;
  return r;
}

// O(n^2) pairwise comparison oracle: wins + half-ties over all (pos, neg).
double oracle_auc(const std::vector<PredictionRecord>& records) {
  double num = 0.0;
  long pairs = 0;
  for (const auto& p : records) {
    if (p.label != 1) continue;
    for (const auto& n : records) {
      if (n.label != 0) continue;
      ++pairs;
      if (p.score > n.score)
        num += 1.0;
      else if (p.score == n.score)
        num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("auc is 1 for perfectly separated scores") {
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 10; ++i) rs.push_back(rec(i < 5 ? -1.0 - i : 1.0 + i, i < 5 ? 0 : 1));
  CHECK(auc(rs) == 1.0);
}

TEST_CASE("auc hovers near a half under the null") {
  Rng rng(1);
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 1000; ++i) rs.push_back(rec(rng.uniform(-1, 1), static_cast<int>(rng.below(2))));
  CHECK(std::abs(auc(rs) - 0.5) < 0.05);
}

TEST_CASE("auc matches the pairwise oracle exactly, ties included") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PredictionRecord> rs;
    bool has_pos = false, has_neg = false;
    for (int i = 0; i < 200; ++i) {
      // Coarse grid of scores forces plenty of exact ties.
      const double s = std::floor(rng.uniform(-5, 5)) / 2.0;
      const int label = static_cast<int>(rng.below(2));
      has_pos |= label == 1;
      has_neg |= label == 0;
      rs.push_back(rec(s, label));
    }
    if (!has_pos || !has_neg) continue;
    CHECK(auc(rs) == oracle_auc(rs));
  }
}

TEST_CASE("auc requires both classes") {
  std::vector<PredictionRecord> rs{rec(0.5, 1), rec(0.2, 1)};
  CHECK_THROWS_AS(auc(rs), UndefinedMetricError);
}

TEST_CASE("auc is invariant under strictly increasing score transforms") {
  Rng rng(3);
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 100; ++i) rs.push_back(rec(rng.uniform(-2, 2), static_cast<int>(rng.below(2))));
  const double base = auc(rs);
  auto mapped = rs;
  for (auto& r : mapped) r.score = std::exp(2.0 * r.score + 3.0);
  CHECK(auc(mapped) == base);
}

TEST_CASE("binarize thresholds behave at the boundaries") {
  std::vector<PredictionRecord> rs{rec(-3.0, 0), rec(0.0, 1), rec(4.0, 1)};
  auto all_pos = binarize(rs, 0.0);
  for (const auto& r : all_pos) CHECK(r.yhat == 1);
  auto all_neg = binarize(rs, 1.0);
  for (const auto& r : all_neg) CHECK(r.yhat == 0);
  auto mid = binarize(rs, 0.5);
  CHECK(mid[0].yhat == 0);
  CHECK(mid[1].yhat == 1);  // sigmoid(0) = 0.5 ties count as positive
  CHECK(mid[2].yhat == 1);
}

TEST_CASE("dpd is zero for identical rates and exact for constructed gaps") {
  std::vector<PredictionRecord> same;
  for (int g = 0; g < 2; ++g)
    for (int i = 0; i < 10; ++i) same.push_back(rec(i < 6 ? 1.0 : -1.0, 1, g));
  CHECK(dpd(binarize(same), "race") == 0.0);

  // Group 0 rate 0.8, group 1 rate 0.3.
  std::vector<PredictionRecord> gap;
  for (int i = 0; i < 10; ++i) gap.push_back(rec(i < 8 ? 1.0 : -1.0, i % 2, 0));
  for (int i = 0; i < 10; ++i) gap.push_back(rec(i < 3 ? 1.0 : -1.0, i % 2, 1));
  CHECK(dpd(binarize(gap), "race") == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("dpd needs at least two groups") {
  std::vector<PredictionRecord> rs{rec(1, 1, 0), rec(-1, 0, 0)};
  CHECK_THROWS_AS(dpd(binarize(rs), "race"), UndefinedMetricError);
}

TEST_CASE("dpd as-printed mode conditions on positives") {
  // Group 0: positives predicted 1, negatives predicted 1 as well.
  // Group 1: positives predicted 0, negatives predicted 1.
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 4; ++i) rs.push_back(rec(1.0, i % 2, 0));
  for (int i = 0; i < 4; ++i) rs.push_back(rec(i % 2 == 1 ? -1.0 : 1.0, i % 2, 1));
  auto bin = binarize(rs);
  // Standard: group0 rate 1.0, group1 rate 0.5 -> 0.5.
  CHECK(dpd(bin, "race", DpdMode::kStandard) == Catch::Approx(0.5).margin(1e-12));
  // As printed: only y=1 rows -> group0 rate 1.0, group1 rate 0.0 -> 1.0.
  CHECK(dpd(bin, "race", DpdMode::kAsPrinted) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("eod is zero for group-identical confusion behavior") {
  std::vector<PredictionRecord> rs;
  for (int g = 0; g < 3; ++g)
    for (int i = 0; i < 8; ++i) rs.push_back(rec(i % 4 == 0 ? 1.0 : -1.0, i % 2, g));
  CHECK(eod(binarize(rs), "race") == 0.0);
}

TEST_CASE("eod reports the constructed TPR gap") {
  std::vector<PredictionRecord> rs;
  // Group 0: TPR 0.9 (9/10 TP), FPR 0.5. Group 1: TPR 0.6, FPR 0.5.
  for (int i = 0; i < 10; ++i) rs.push_back(rec(i < 9 ? 1.0 : -1.0, 1, 0));
  for (int i = 0; i < 10; ++i) rs.push_back(rec(i < 5 ? 1.0 : -1.0, 0, 0));
  for (int i = 0; i < 10; ++i) rs.push_back(rec(i < 6 ? 1.0 : -1.0, 1, 1));
  for (int i = 0; i < 10; ++i) rs.push_back(rec(i < 5 ? 1.0 : -1.0, 0, 1));
  CHECK(eod(binarize(rs), "race") == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("eod over three groups equals brute-force pair enumeration") {
  Rng rng(4);
  std::vector<PredictionRecord> rs;
  for (int g = 0; g < 3; ++g)
    for (int i = 0; i < 40; ++i) rs.push_back(rec(rng.uniform(-2, 2), static_cast<int>(rng.below(2)), g));
  auto bin = binarize(rs);

  auto rate = [&](int g, int label) {
    long n = 0, hit = 0;
    for (const auto& r : bin)
      if (r.groups.at("race") == g && r.label == label) {
        ++n;
        hit += r.yhat;
      }
    return static_cast<double>(hit) / n;
  };
  double expect = 0.0;
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b) {
      expect = std::max(expect, std::abs(rate(a, 1) - rate(b, 1)));
      expect = std::max(expect, std::abs(rate(a, 0) - rate(b, 0)));
    }
  CHECK(eod(bin, "race") == expect);
}

TEST_CASE("eod skips pairs with a missing class and errors when none remain") {
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 6; ++i) rs.push_back(rec(i % 2 == 0 ? 1.0 : -1.0, i % 2, 0));
  for (int i = 0; i < 4; ++i) rs.push_back(rec(1.0, 1, 1));  // group 1 has no negatives
  std::vector<std::string> warnings;
  CHECK_THROWS_AS(eod(binarize(rs), "race", &warnings), UndefinedMetricError);
  CHECK(!warnings.empty());
}

TEST_CASE("es_auc formula evaluates the worked example") {
  CHECK(es_auc_from(0.7, {0.6, 0.8}) == Catch::Approx(0.7 / 1.2).margin(1e-15));
  CHECK(es_auc_from(0.7, {0.6, 0.8}) == Catch::Approx(0.58333333333).margin(1e-9));
}

TEST_CASE("es_auc equals auc when groups have no gaps and shrinks as gaps widen") {
  // Two groups, identical score/label patterns: per-group AUC == overall.
  std::vector<PredictionRecord> rs;
  for (int g = 0; g < 2; ++g)
    for (int i = 0; i < 10; ++i) rs.push_back(rec(i + (i % 3 == 0 ? 10 : 0), i % 2, g));
  CHECK(es_auc(rs, "race") == auc(rs));
  CHECK(es_auc_from(0.7, {0.65, 0.75}) > es_auc_from(0.7, {0.55, 0.85}));
}

TEST_CASE("es_auc matches direct formula evaluation on random records") {
  Rng rng(5);
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 300; ++i) {
    const int g = static_cast<int>(rng.below(3));
    const int label = static_cast<int>(rng.below(2));
    rs.push_back(rec(rng.uniform(-1, 1) + 0.4 * label + 0.1 * g, label, g));
  }
  std::vector<double> per_group;
  for (int g = 0; g < 3; ++g) {
    std::vector<PredictionRecord> sub;
    for (const auto& r : rs)
      if (r.groups.at("race") == g) sub.push_back(r);
    per_group.push_back(oracle_auc(sub));
  }
  const double expect = es_auc_from(oracle_auc(rs), per_group);
  CHECK(es_auc(rs, "race") == Catch::Approx(expect).margin(1e-12));
  CHECK(es_auc(rs, "race") <= auc(rs));
}

TEST_CASE("metrics are invariant under record reordering and group relabeling") {
  Rng rng(6);
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 60; ++i)
    rs.push_back(rec(rng.uniform(-1, 1), static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2))));
  auto bin = binarize(rs);
  const double d0 = dpd(bin, "race"), e0 = eod(bin, "race");

  auto shuffled = bin;
  rng.shuffle(shuffled);
  CHECK(dpd(shuffled, "race") == d0);
  CHECK(eod(shuffled, "race") == e0);

  auto relabeled = bin;
  for (auto& r : relabeled) r.groups["race"] = 1 - r.groups["race"];
  CHECK(dpd(relabeled, "race") == d0);
  CHECK(eod(relabeled, "race") == e0);
}

TEST_CASE("compute_report surfaces undefined metrics as warnings") {
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 6; ++i) rs.push_back(rec(1.0 + i, 1, i % 2));  // single-class
  MetricsReport rep = compute_report(rs, "race");
  CHECK(!rep.auc.has_value());
  CHECK(!rep.warnings.empty());
  CHECK(rep.counts.at(0) == 3);
  CHECK(rep.counts.at(1) == 3);
}

TEST_CASE("bootstrap CI brackets the point estimate deterministically") {
  Rng rng(7);
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 200; ++i) {
    const int label = static_cast<int>(rng.below(2));
    rs.push_back(rec(rng.uniform(-1, 1) + 0.8 * label, label));
  }
  const double point = auc(rs);
  Rng boot1 = Rng::stream(99, "bootstrap");
  auto ci1 = bootstrap_ci(rs, [](std::span<const PredictionRecord> s) { return auc(s); }, 200, boot1);
  CHECK(ci1.lo <= point);
  CHECK(ci1.hi >= point);
  Rng boot2 = Rng::stream(99, "bootstrap");
  auto ci2 = bootstrap_ci(rs, [](std::span<const PredictionRecord> s) { return auc(s); }, 200, boot2);
  CHECK(ci1.lo == ci2.lo);
  CHECK(ci1.hi == ci2.hi);
}

TEST_CASE("permutation null band is positive and finite") {
  Rng rng(8);
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < 120; ++i)
    rs.push_back(rec(rng.uniform(-1, 1), static_cast<int>(rng.below(2)), static_cast<int>(rng.below(2))));
  Rng perm = Rng::stream(99, "perm");
  const double band = permutation_null_quantile(
      rs, "race", [](std::span<const PredictionRecord> s) { return dpd(binarize(s), "race"); }, 100, 0.95, perm);
  CHECK(band > 0.0);
  CHECK(band < 1.0);
}
