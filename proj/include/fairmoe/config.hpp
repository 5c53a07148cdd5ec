// SPDX-License-Identifier: Apache-2.0
//
// TrainConfig and its flat key-value config file format. One key per field,
// `key = value` lines, '#' comments. Schema violations are collected and
// reported exhaustively before aborting.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairmoe/encoder.hpp"
#include "fairmoe/errors.hpp"

namespace fairmoe {

struct TrainConfig {
  ModelConfig model;

  // Fairness loss
  double lambda_fol = 1.0;
  double lambda_dist = 1e-4;
  double sinkhorn_epsilon = 1e-3;
  int sinkhorn_iters = 200;
  int n_f = 0;  // FOL samples per group; 0 means "use batch_size"
  std::string fol_attribute = "race";
  bool fol_on_dense_gates = false;  // variance terms on dense W instead of sparse
  bool multi_attribute_fol = false;

  // Optimization loop
  int batch_size = 16;
  int steps = 300;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  int eval_every = 25;
  bool select_best = true;

  // Ablation switchboard
  bool use_fol = true;
  bool use_fom = true;
  bool use_em = true;
  bool use_fm = true;
  bool use_text_moe = true;
  bool use_image_moe = true;
  bool term_ei = true;
  bool term_et = true;
  bool term_fi = true;
  bool term_ft = true;

  int effective_n_f() const { return n_f > 0 ? n_f : batch_size; }

  // The architecture actually built once the ablation flags are applied.
  ModelConfig effective_model() const {
    ModelConfig m = model;
    m.image_em = use_fom && use_em && use_image_moe;
    m.image_fm = use_fom && use_fm && use_image_moe;
    m.text_em = use_fom && use_em && use_text_moe;
    m.text_fm = use_fom && use_fm && use_text_moe;
    return m;
  }

  // Variance terms only exist for modules that exist: a disabled module
  // forces its terms out of the mask.
  bool active_ei() const { return use_fol && term_ei && effective_model().image_em; }
  bool active_et() const { return use_fol && term_et && effective_model().text_em; }
  bool active_fi() const { return use_fol && term_fi && effective_model().image_fm; }
  bool active_ft() const { return use_fol && term_ft && effective_model().text_fm; }

  void validate() const {
    effective_model().validate();
    if (batch_size < 2) throw ContractError("config: batch_size must be >= 2");
    if (steps < 1) throw ContractError("config: steps must be >= 1");
    if (lr <= 0.0) throw ContractError("config: lr must be positive");
    if (lambda_fol < 0.0 || lambda_dist < 0.0) throw ContractError("config: loss weights must be >= 0");
    if (sinkhorn_epsilon <= 0.0 || sinkhorn_iters < 1) throw ContractError("config: bad sinkhorn settings");
    if (n_f < 0) throw ContractError("config: n_f must be >= 0");
    if (eval_every < 1) throw ContractError("config: eval_every must be >= 1");
    if (fol_attribute.empty()) throw ContractError("config: fol_attribute must be set");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"model", c.model},
                     {"lambda_fol", c.lambda_fol},
                     {"lambda_dist", c.lambda_dist},
                     {"sinkhorn_epsilon", c.sinkhorn_epsilon},
                     {"sinkhorn_iters", c.sinkhorn_iters},
                     {"n_f", c.n_f},
                     {"fol_attribute", c.fol_attribute},
                     {"fol_on_dense_gates", c.fol_on_dense_gates},
                     {"multi_attribute_fol", c.multi_attribute_fol},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"lr", c.lr},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"seed", c.seed},
                     {"eval_every", c.eval_every},
                     {"select_best", c.select_best},
                     {"use_fol", c.use_fol},
                     {"use_fom", c.use_fom},
                     {"use_em", c.use_em},
                     {"use_fm", c.use_fm},
                     {"use_text_moe", c.use_text_moe},
                     {"use_image_moe", c.use_image_moe},
                     {"term_ei", c.term_ei},
                     {"term_et", c.term_et},
                     {"term_fi", c.term_fi},
                     {"term_ft", c.term_ft}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("model").get_to(c.model);
  j.at("lambda_fol").get_to(c.lambda_fol);
  j.at("lambda_dist").get_to(c.lambda_dist);
  j.at("sinkhorn_epsilon").get_to(c.sinkhorn_epsilon);
  j.at("sinkhorn_iters").get_to(c.sinkhorn_iters);
  j.at("n_f").get_to(c.n_f);
  j.at("fol_attribute").get_to(c.fol_attribute);
  j.at("fol_on_dense_gates").get_to(c.fol_on_dense_gates);
  j.at("multi_attribute_fol").get_to(c.multi_attribute_fol);
  j.at("batch_size").get_to(c.batch_size);
  j.at("steps").get_to(c.steps);
  j.at("lr").get_to(c.lr);
  j.at("adam_beta1").get_to(c.adam_beta1);
  j.at("adam_beta2").get_to(c.adam_beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("seed").get_to(c.seed);
  j.at("eval_every").get_to(c.eval_every);
  j.at("select_best").get_to(c.select_best);
  j.at("use_fol").get_to(c.use_fol);
  j.at("use_fom").get_to(c.use_fom);
  j.at("use_em").get_to(c.use_em);
  j.at("use_fm").get_to(c.use_fm);
  j.at("use_text_moe").get_to(c.use_text_moe);
  j.at("use_image_moe").get_to(c.use_image_moe);
  j.at("term_ei").get_to(c.term_ei);
  j.at("term_et").get_to(c.term_et);
  j.at("term_fi").get_to(c.term_fi);
  j.at("term_ft").get_to(c.term_ft);
}

namespace detail {

template <typename T>
bool parse_number(const std::string& s, T& out) {
  std::istringstream is(s);
  is >> out;
  return static_cast<bool>(is) && is.eof();
}

inline bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1") {
    out = true;
    return true;
  }
  if (s == "false" || s == "0") {
    out = false;
    return true;
  }
  return false;
}

}  // namespace detail

// Parses `key = value` pairs into a TrainConfig. Returns the config or
// throws SchemaError whose message lists every violation found.
inline TrainConfig parse_train_config(const std::vector<std::pair<std::string, std::string>>& entries) {
  TrainConfig cfg;
  std::vector<std::string> errors;

  std::map<std::string, std::function<bool(const std::string&)>> setters;
  auto num = [&](const std::string& key, auto& field) {
    setters[key] = [&field](const std::string& v) { return detail::parse_number(v, field); };
  };
  auto boolean = [&](const std::string& key, bool& field) {
    setters[key] = [&field](const std::string& v) { return detail::parse_bool(v, field); };
  };
  num("image_size", cfg.model.image_size);
  num("patch_size", cfg.model.patch_size);
  num("dim", cfg.model.dim);
  num("heads", cfg.model.heads);
  num("blocks", cfg.model.blocks);
  num("d_feat", cfg.model.d_feat);
  num("vocab", cfg.model.vocab);
  num("text_len", cfg.model.text_len);
  num("m1", cfg.model.m1);
  num("m2", cfg.model.m2);
  num("k1", cfg.model.k1);
  num("k2", cfg.model.k2);
  num("capacity", cfg.model.capacity);
  num("hidden_mult", cfg.model.hidden_mult);
  num("temperature_init", cfg.model.temperature_init);
  setters["activation"] = [&cfg](const std::string& v) {
    if (v == "gelu")
      cfg.model.act = Activation::kGelu;
    else if (v == "relu")
      cfg.model.act = Activation::kRelu;
    else
      return false;
    return true;
  };
  num("lambda_fol", cfg.lambda_fol);
  num("lambda_dist", cfg.lambda_dist);
  num("sinkhorn_epsilon", cfg.sinkhorn_epsilon);
  num("sinkhorn_iters", cfg.sinkhorn_iters);
  num("n_f", cfg.n_f);
  setters["fol_attribute"] = [&cfg](const std::string& v) {
    cfg.fol_attribute = v;
    return !v.empty();
  };
  boolean("fol_on_dense_gates", cfg.fol_on_dense_gates);
  boolean("multi_attribute_fol", cfg.multi_attribute_fol);
  num("batch_size", cfg.batch_size);
  num("steps", cfg.steps);
  num("lr", cfg.lr);
  num("adam_beta1", cfg.adam_beta1);
  num("adam_beta2", cfg.adam_beta2);
  num("adam_eps", cfg.adam_eps);
  num("seed", cfg.seed);
  num("eval_every", cfg.eval_every);
  boolean("select_best", cfg.select_best);
  boolean("use_fol", cfg.use_fol);
  boolean("use_fom", cfg.use_fom);
  boolean("use_em", cfg.use_em);
  boolean("use_fm", cfg.use_fm);
  boolean("use_text_moe", cfg.use_text_moe);
  boolean("use_image_moe", cfg.use_image_moe);
  boolean("term_ei", cfg.term_ei);
  boolean("term_et", cfg.term_et);
  boolean("term_fi", cfg.term_fi);
  boolean("term_ft", cfg.term_ft);

  for (const auto& [key, value] : entries) {
    auto it = setters.find(key);
    if (it == setters.end()) {
      errors.push_back("unknown key: " + key);
      continue;
    }
    if (!it->second(value)) errors.push_back("invalid value for " + key + ": '" + value + "'");
  }
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    errors.push_back(e.what());
  }
  if (!errors.empty()) {
    std::string msg = "config errors:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw SchemaError(msg);
  }
  return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path.string());
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  int line_no = 0;
  std::vector<std::string> errors;
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      errors.push_back("line " + std::to_string(line_no) + ": expected key = value");
      continue;
    }
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  if (!errors.empty()) {
    std::string msg = "config errors:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw SchemaError(msg);
  }
  return parse_train_config(entries);
}

inline void write_train_config(const std::filesystem::path& path, const TrainConfig& c) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write config: " + path.string());
  const ModelConfig& m = c.model;
  f << "# model\n"
    << "image_size = " << m.image_size << "\npatch_size = " << m.patch_size << "\ndim = " << m.dim
    << "\nheads = " << m.heads << "\nblocks = " << m.blocks << "\nd_feat = " << m.d_feat << "\nvocab = " << m.vocab
    << "\ntext_len = " << m.text_len << "\nm1 = " << m.m1 << "\nm2 = " << m.m2 << "\nk1 = " << m.k1
    << "\nk2 = " << m.k2 << "\ncapacity = " << m.capacity << "\nhidden_mult = " << m.hidden_mult
    << "\nactivation = " << (m.act == Activation::kGelu ? "gelu" : "relu")
    << "\ntemperature_init = " << m.temperature_init << "\n# loss\n"
    << "lambda_fol = " << c.lambda_fol << "\nlambda_dist = " << c.lambda_dist
    << "\nsinkhorn_epsilon = " << c.sinkhorn_epsilon << "\nsinkhorn_iters = " << c.sinkhorn_iters
    << "\nn_f = " << c.n_f << "\nfol_attribute = " << c.fol_attribute << "\nfol_on_dense_gates = "
    << (c.fol_on_dense_gates ? "true" : "false") << "\nmulti_attribute_fol = "
    << (c.multi_attribute_fol ? "true" : "false") << "\n# loop\n"
    << "batch_size = " << c.batch_size << "\nsteps = " << c.steps << "\nlr = " << c.lr
    << "\nadam_beta1 = " << c.adam_beta1 << "\nadam_beta2 = " << c.adam_beta2 << "\nadam_eps = " << c.adam_eps
    << "\nseed = " << c.seed << "\neval_every = " << c.eval_every << "\nselect_best = "
    << (c.select_best ? "true" : "false") << "\n# ablation flags\n"
    << "use_fol = " << (c.use_fol ? "true" : "false") << "\nuse_fom = " << (c.use_fom ? "true" : "false")
    << "\nuse_em = " << (c.use_em ? "true" : "false") << "\nuse_fm = " << (c.use_fm ? "true" : "false")
    << "\nuse_text_moe = " << (c.use_text_moe ? "true" : "false")
    << "\nuse_image_moe = " << (c.use_image_moe ? "true" : "false")
    << "\nterm_ei = " << (c.term_ei ? "true" : "false") << "\nterm_et = " << (c.term_et ? "true" : "false")
    << "\nterm_fi = " << (c.term_fi ? "true" : "false") << "\nterm_ft = " << (c.term_ft ? "true" : "false")
    << "\n";
}

}  // namespace fairmoe
