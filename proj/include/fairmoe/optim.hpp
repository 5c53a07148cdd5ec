// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fairmoe/errors.hpp"
#include "fairmoe/tensor.hpp"

namespace fairmoe {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction. Deterministic: parameters are visited
// in registration order, moments are dense per-parameter tensors.
class Adam {
public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  // Applies one update using each parameter's current .grad().
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = params_[k].second;
      const std::vector<double> g = p.grad();
      if (g.size() != p.numel()) throw ContractError("adam: gradient shape mismatch for " + params_[k].first);
      auto& pm = m_[k];
      auto& pv = v_[k];
      auto& val = p.mutable_values();
      for (std::size_t i = 0; i < g.size(); ++i) {
        pm[i] = cfg_.beta1 * pm[i] + (1.0 - cfg_.beta1) * g[i];
        pv[i] = cfg_.beta2 * pv[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = pm[i] / bc1;
        const double vhat = pv[i] / bc2;
        val[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }

  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
  std::vector<double>& moment1(std::size_t k) { return m_[k]; }
  std::vector<double>& moment2(std::size_t k) { return v_[k]; }
  const std::vector<double>& moment1(std::size_t k) const { return m_[k]; }
  const std::vector<double>& moment2(std::size_t k) const { return v_[k]; }
  const AdamConfig& config() const { return cfg_; }

private:
  std::vector<std::pair<std::string, Tensor>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long t_ = 0;
};

}  // namespace fairmoe
