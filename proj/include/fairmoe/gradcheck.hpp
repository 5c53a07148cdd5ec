// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fairmoe/fingerprint.hpp"
#include "fairmoe/tensor.hpp"

namespace fairmoe {

struct FdBlockReport {
  std::string name;
  int checked = 0;
  int excluded = 0;  // perturbation crossed a top-k selection boundary
  int failed = 0;
  double max_rel_err = 0.0;
};

struct FdReport {
  std::vector<FdBlockReport> blocks;
  int total_checked = 0;
  int total_excluded = 0;
  int total_failed = 0;
  double max_rel_err = 0.0;

  double pass_fraction() const {
    if (total_checked == 0) return 1.0;
    return static_cast<double>(total_checked - total_failed) / total_checked;
  }
  bool all_passed() const { return total_failed == 0; }
};

// Central finite-difference oracle for reverse-mode gradients.
//
// `build_loss` reconstructs the scalar loss from the parameters' current
// values. It is called once under a tape for the analytic gradients and then
// value-only at perturbed points. Selection fingerprints taken during each
// evaluation detect parameters sitting on a top-k tie: when f(p+h) and
// f(p-h) route differently the central difference spans a kink, so the
// element is excluded and counted instead of failed.
//
// An element passes when |g_fd - g_ad| <= tol * max(|g_fd|, |g_ad|) or when
// both magnitudes are below `grad_floor`.
inline FdReport finite_diff_check(const std::function<Tensor()>& build_loss,
                                  const std::vector<std::pair<std::string, Tensor>>& params, double h,
                                  double tol, double grad_floor = 1e-6, int max_checks_per_block = 0) {
  auto eval = [&]() {
    SelectionFingerprint::current().reset();
    Tensor loss = build_loss();
    return std::pair<double, std::uint64_t>(loss.item(), SelectionFingerprint::current().value());
  };

  // Analytic gradients at the base point.
  std::vector<std::vector<double>> analytic;
  std::uint64_t base_fp = 0;
  {
    Tape tape;
    TapeScope scope(tape);
    SelectionFingerprint::current().reset();
    Tensor loss = build_loss();
    base_fp = SelectionFingerprint::current().value();
    backward(loss);
    for (const auto& [name, p] : params) analytic.push_back(p.grad());
  }

  FdReport report;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& name = params[k].first;
    Tensor p = params[k].second;
    auto& vals = p.mutable_values();
    FdBlockReport blk;
    blk.name = name;
    const std::size_t n = vals.size();
    std::size_t stride = 1;
    if (max_checks_per_block > 0 && n > static_cast<std::size_t>(max_checks_per_block))
      stride = (n + max_checks_per_block - 1) / max_checks_per_block;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = vals[i];
      vals[i] = orig + h;
      auto [vp, fpp] = eval();
      vals[i] = orig - h;
      auto [vm, fpm] = eval();
      vals[i] = orig;
      if (fpp != fpm || fpp != base_fp) {
        ++blk.excluded;
        continue;
      }
      const double g_fd = (vp - vm) / (2.0 * h);
      const double g_ad = analytic[k][i];
      const double mag = std::max(std::abs(g_fd), std::abs(g_ad));
      const double rel = std::abs(g_fd - g_ad) / std::max(mag, grad_floor);
      ++blk.checked;
      blk.max_rel_err = std::max(blk.max_rel_err, rel);
      if (mag > grad_floor && std::abs(g_fd - g_ad) > tol * mag) ++blk.failed;
    }
    report.total_checked += blk.checked;
    report.total_excluded += blk.excluded;
    report.total_failed += blk.failed;
    report.max_rel_err = std::max(report.max_rel_err, blk.max_rel_err);
    report.blocks.push_back(std::move(blk));
  }
  return report;
}

}  // namespace fairmoe
