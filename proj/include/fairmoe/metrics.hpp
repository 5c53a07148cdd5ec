// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metric suite: AUC (Mann-Whitney with midrank tie handling),
// demographic parity difference, equalized odds difference, and
// equity-scaled AUC, computed from prediction records.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairmoe/errors.hpp"
#include "fairmoe/rng.hpp"

namespace fairmoe {

struct PredictionRecord {
  std::string id;
  double score = 0.0;
  int label = 0;                    // ground truth in {0,1}
  int yhat = -1;                    // binarized prediction; -1 until binarize()
  std::map<std::string, int> groups;  // attribute name -> group id
};

inline int group_of(const PredictionRecord& r, const std::string& attribute) {
  auto it = r.groups.find(attribute);
  if (it == r.groups.end()) throw ContractError("record " + r.id + " lacks attribute " + attribute);
  return it->second;
}

// Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie), computed by
// sort-and-midrank in O(n log n).
inline double auc(std::span<const PredictionRecord> records) {
  std::vector<std::pair<double, int>> scored;
  scored.reserve(records.size());
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& r : records) {
    scored.emplace_back(r.score, r.label);
    if (r.label == 1)
      ++n_pos;
    else
      ++n_neg;
  }
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("auc: needs both classes");
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < scored.size()) {
    std::size_t j = i;
    while (j < scored.size() && scored[j].first == scored[i].first) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t l = i; l < j; ++l)
      if (scored[l].second == 1) rank_sum_pos += midrank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// yhat = 1 iff sigmoid(score) >= threshold; boundary ties count as positive.
inline std::vector<PredictionRecord> binarize(std::span<const PredictionRecord> records, double threshold = 0.5) {
  std::vector<PredictionRecord> out(records.begin(), records.end());
  for (auto& r : out) r.yhat = sigmoid(r.score) >= threshold ? 1 : 0;
  return out;
}

enum class DpdMode {
  kStandard,   // P(yhat=1 | G=a) over all samples
  kAsPrinted,  // conditions additionally on y=1, following the printed formula
};

inline const char* dpd_mode_name(DpdMode m) { return m == DpdMode::kStandard ? "standard" : "as-printed"; }

namespace detail {
inline void require_binarized(std::span<const PredictionRecord> records, const char* op) {
  for (const auto& r : records)
    if (r.yhat != 0 && r.yhat != 1) throw ContractError(std::string(op) + ": records are not binarized");
}
}  // namespace detail

// Max-min gap in positive-prediction rate across groups.
inline double dpd(std::span<const PredictionRecord> records, const std::string& attribute,
                  DpdMode mode = DpdMode::kStandard, std::vector<std::string>* warnings = nullptr) {
  detail::require_binarized(records, "dpd");
  std::map<int, std::pair<long, long>> counts;  // group -> (eligible, predicted positive)
  for (const auto& r : records) {
    if (mode == DpdMode::kAsPrinted && r.label != 1) continue;
    auto& c = counts[group_of(r, attribute)];
    ++c.first;
    c.second += r.yhat;
  }
  std::vector<double> rates;
  for (const auto& [g, c] : counts) {
    if (c.first == 0) {
      if (warnings) warnings->push_back("dpd: group " + std::to_string(g) + " has no eligible samples");
      continue;
    }
    rates.push_back(static_cast<double>(c.second) / static_cast<double>(c.first));
  }
  if (rates.size() < 2) throw UndefinedMetricError("dpd: needs at least two populated groups");
  const auto [lo, hi] = std::minmax_element(rates.begin(), rates.end());
  return *hi - *lo;
}

// Max over group pairs of the larger of the TPR gap and the FPR gap. Pairs
// where either group lacks a class are skipped with a warning.
inline double eod(std::span<const PredictionRecord> records, const std::string& attribute,
                  std::vector<std::string>* warnings = nullptr) {
  detail::require_binarized(records, "eod");
  struct Rates {
    long pos = 0, tp = 0, neg = 0, fp = 0;
  };
  std::map<int, Rates> by_group;
  for (const auto& r : records) {
    auto& g = by_group[group_of(r, attribute)];
    if (r.label == 1) {
      ++g.pos;
      g.tp += r.yhat;
    } else {
      ++g.neg;
      g.fp += r.yhat;
    }
  }
  std::vector<std::pair<int, Rates>> groups(by_group.begin(), by_group.end());
  double best = -1.0;
  for (std::size_t a = 0; a < groups.size(); ++a)
    for (std::size_t b = a + 1; b < groups.size(); ++b) {
      const auto& ga = groups[a].second;
      const auto& gb = groups[b].second;
      if (ga.pos == 0 || ga.neg == 0 || gb.pos == 0 || gb.neg == 0) {
        if (warnings)
          warnings->push_back("eod: pair (" + std::to_string(groups[a].first) + "," +
                              std::to_string(groups[b].first) + ") skipped: a group lacks a class");
        continue;
      }
      const double tpr_gap = std::abs(static_cast<double>(ga.tp) / ga.pos - static_cast<double>(gb.tp) / gb.pos);
      const double fpr_gap = std::abs(static_cast<double>(ga.fp) / ga.neg - static_cast<double>(gb.fp) / gb.neg);
      best = std::max(best, std::max(tpr_gap, fpr_gap));
    }
  if (best < 0.0) throw UndefinedMetricError("eod: no comparable group pair");
  return best;
}

// ES-AUC = AUC / (1 + sum_a |AUC - AUC_a|).
inline double es_auc_from(double overall, const std::vector<double>& per_group) {
  double gap_sum = 0.0;
  for (double a : per_group) gap_sum += std::abs(overall - a);
  return overall / (1.0 + gap_sum);
}

inline double es_auc(std::span<const PredictionRecord> records, const std::string& attribute,
                     std::map<int, double>* per_group_out = nullptr,
                     std::vector<std::string>* warnings = nullptr) {
  const double overall = auc(records);
  std::map<int, std::vector<PredictionRecord>> by_group;
  for (const auto& r : records) by_group[group_of(r, attribute)].push_back(r);
  std::vector<double> group_aucs;
  for (const auto& [g, recs] : by_group) {
    try {
      const double a = auc(recs);
      group_aucs.push_back(a);
      if (per_group_out) (*per_group_out)[g] = a;
    } catch (const UndefinedMetricError&) {
      if (warnings) warnings->push_back("es_auc: group " + std::to_string(g) + " is single-class, excluded");
    }
  }
  return es_auc_from(overall, group_aucs);
}

struct MetricsReport {
  std::string attribute;
  std::optional<double> auc, es_auc, dpd, eod;
  std::map<int, double> per_group_auc;
  std::map<int, int> counts;
  double threshold = 0.5;
  std::string dpd_mode = "standard";
  std::vector<std::string> warnings;
};

// Computes all four metrics for one attribute; undefined metrics are left
// empty with the reason recorded in warnings.
inline MetricsReport compute_report(std::span<const PredictionRecord> records, const std::string& attribute,
                                    DpdMode mode = DpdMode::kStandard, double threshold = 0.5) {
  MetricsReport rep;
  rep.attribute = attribute;
  rep.threshold = threshold;
  rep.dpd_mode = dpd_mode_name(mode);
  for (const auto& r : records) ++rep.counts[group_of(r, attribute)];
  auto binarized = binarize(records, threshold);
  auto guard = [&rep](const char* name, auto&& fn) -> std::optional<double> {
    try {
      return fn();
    } catch (const UndefinedMetricError& e) {
      rep.warnings.push_back(std::string(name) + " undefined: " + e.what());
      return std::nullopt;
    }
  };
  rep.auc = guard("auc", [&] { return auc(records); });
  rep.es_auc = guard("es_auc", [&] { return es_auc(records, attribute, &rep.per_group_auc, &rep.warnings); });
  rep.dpd = guard("dpd", [&] { return dpd(binarized, attribute, mode, &rep.warnings); });
  rep.eod = guard("eod", [&] { return eod(binarized, attribute, &rep.warnings); });
  return rep;
}

struct BootstrapCi {
  double lo = 0.0, hi = 0.0;
  int failed_resamples = 0;
};

// Percentile bootstrap over record resamples. Resamples on which the metric
// is undefined are dropped and counted.
inline BootstrapCi bootstrap_ci(std::span<const PredictionRecord> records,
                                const std::function<double(std::span<const PredictionRecord>)>& metric,
                                int n_resamples, Rng& rng, double coverage = 0.95) {
  std::vector<double> vals;
  vals.reserve(n_resamples);
  BootstrapCi ci;
  std::vector<PredictionRecord> sample(records.size());
  for (int t = 0; t < n_resamples; ++t) {
    for (std::size_t i = 0; i < records.size(); ++i) sample[i] = records[rng.below(records.size())];
    try {
      vals.push_back(metric(sample));
    } catch (const UndefinedMetricError&) {
      ++ci.failed_resamples;
    }
  }
  if (vals.empty()) throw UndefinedMetricError("bootstrap: metric undefined on every resample");
  std::sort(vals.begin(), vals.end());
  const double tail = (1.0 - coverage) / 2.0;
  auto at_quantile = [&](double q) {
    const double pos = q * (vals.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, vals.size() - 1);
    const double frac = pos - lo;
    return vals[lo] * (1.0 - frac) + vals[hi] * frac;
  };
  ci.lo = at_quantile(tail);
  ci.hi = at_quantile(1.0 - tail);
  return ci;
}

// Line-delimited prediction manifest:
// {"id":..., "score":..., "label":..., "attributes":{...}}
inline std::vector<PredictionRecord> read_prediction_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open prediction manifest: " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("prediction manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    PredictionRecord r;
    try {
      r.id = rec.at("id").get<std::string>();
      r.score = rec.at("score").get<double>();
      r.label = rec.at("label").get<int>();
      for (const auto& [k, v] : rec.at("attributes").items()) r.groups[k] = v.get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("prediction manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (r.label != 0 && r.label != 1)
      throw SchemaError("prediction manifest line " + std::to_string(line_no) + ": label must be 0 or 1");
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_prediction_manifest(const std::filesystem::path& path,
                                      std::span<const PredictionRecord> records) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write prediction manifest: " + path.string());
  for (const auto& r : records) {
    nlohmann::json rec{{"id", r.id}, {"score", r.score}, {"label", r.label}, {"attributes", r.groups}};
    f << rec.dump() << "\n";
  }
}

inline nlohmann::json report_to_json(const MetricsReport& rep) {
  nlohmann::json j;
  j["attribute"] = rep.attribute;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v.has_value())
      j[key] = *v;
    else
      j[key] = nullptr;
  };
  put("auc", rep.auc);
  put("es_auc", rep.es_auc);
  put("dpd", rep.dpd);
  put("eod", rep.eod);
  j["per_group_auc"] = nlohmann::json::object();
  for (const auto& [g, a] : rep.per_group_auc) j["per_group_auc"][std::to_string(g)] = a;
  j["counts"] = nlohmann::json::object();
  for (const auto& [g, c] : rep.counts) j["counts"][std::to_string(g)] = c;
  j["threshold"] = rep.threshold;
  j["dpd_mode"] = rep.dpd_mode;
  j["warnings"] = rep.warnings;
  return j;
}

// Null-band quantile by permuting one attribute's group labels across
// records; measures how large the metric gets by chance alone.
inline double permutation_null_quantile(std::span<const PredictionRecord> records, const std::string& attribute,
                                        const std::function<double(std::span<const PredictionRecord>)>& metric,
                                        int n_perms, double quantile, Rng& rng) {
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(group_of(r, attribute));
  std::vector<PredictionRecord> shuffled(records.begin(), records.end());
  std::vector<double> vals;
  for (int t = 0; t < n_perms; ++t) {
    rng.shuffle(labels);
    for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].groups[attribute] = labels[i];
    try {
      vals.push_back(metric(shuffled));
    } catch (const UndefinedMetricError&) {
    }
  }
  if (vals.empty()) throw UndefinedMetricError("permutation null: metric undefined on every permutation");
  std::sort(vals.begin(), vals.end());
  const std::size_t idx = std::min(vals.size() - 1, static_cast<std::size_t>(quantile * vals.size()));
  return vals[idx];
}

}  // namespace fairmoe
