// SPDX-License-Identifier: Apache-2.0
//
// Training and evaluation loops: wires the dual encoder, the contrastive
// and fairness losses, group-stratified auxiliary sampling, checkpointing
// with exact resume, and the ablation switchboard.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "fairmoe/checkpoint.hpp"
#include "fairmoe/config.hpp"
#include "fairmoe/data.hpp"
#include "fairmoe/encoder.hpp"
#include "fairmoe/losses.hpp"
#include "fairmoe/metrics.hpp"
#include "fairmoe/optim.hpp"
#include "fairmoe/tensor.hpp"

namespace fairmoe {

struct StepLog {
  long step = 0;
  double contrastive = 0.0;
  double f_ei = 0.0, f_et = 0.0, f_fi = 0.0, f_ft = 0.0;
  double l_distance = 0.0;
  double total = 0.0;

  bool operator==(const StepLog&) const = default;
};

inline void to_json(nlohmann::json& j, const StepLog& s) {
  j = nlohmann::json{{"step", s.step}, {"contrastive", s.contrastive}, {"f_ei", s.f_ei},
                     {"f_et", s.f_et}, {"f_fi", s.f_fi},               {"f_ft", s.f_ft},
                     {"l_distance", s.l_distance}, {"total", s.total}};
}

inline void from_json(const nlohmann::json& j, StepLog& s) {
  j.at("step").get_to(s.step);
  j.at("contrastive").get_to(s.contrastive);
  j.at("f_ei").get_to(s.f_ei);
  j.at("f_et").get_to(s.f_et);
  j.at("f_fi").get_to(s.f_fi);
  j.at("f_ft").get_to(s.f_ft);
  j.at("l_distance").get_to(s.l_distance);
  j.at("total").get_to(s.total);
}

// ---------------------------------------------------------------------------
// Scoring and evaluation
// ---------------------------------------------------------------------------

namespace detail {

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) throw ContractError("cosine: zero-norm feature");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace detail

struct EvalOutput {
  std::vector<PredictionRecord> records;
  std::map<std::string, MetricsReport> reports;
};

// Zero-shot style scoring: cosine against the positive prompt minus cosine
// against the negative prompt, then the full metric suite per attribute.
inline EvalOutput evaluate(const FairMoeModel& model, const Dataset& test, DpdMode mode = DpdMode::kStandard,
                           double threshold = 0.5) {
  if (test.items.empty()) throw ContractError("evaluate: empty test set");
  const std::vector<double> pos_feat = encode_text(model, test.meta.prompt_pos).feature.values();
  const std::vector<double> neg_feat = encode_text(model, test.meta.prompt_neg).feature.values();
  EvalOutput out;
  out.records.reserve(test.items.size());
  for (const auto& ex : test.items) {
    const std::vector<double> feat = encode_image(model, ex.image).feature.values();
    PredictionRecord rec;
    rec.id = ex.id;
    rec.score = detail::cosine(feat, pos_feat) - detail::cosine(feat, neg_feat);
    rec.label = ex.label;
    rec.groups = ex.attributes;
    out.records.push_back(std::move(rec));
  }
  for (const auto& attr : test.meta.attributes)
    out.reports.emplace(attr.name, compute_report(out.records, attr.name, mode, threshold));
  return out;
}

// AUC of prompt scores on a holdout; NaN when undefined (e.g. single-class).
inline double validation_auc(const FairMoeModel& model, const Dataset& val) {
  if (val.items.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::vector<double> pos_feat = encode_text(model, val.meta.prompt_pos).feature.values();
  const std::vector<double> neg_feat = encode_text(model, val.meta.prompt_neg).feature.values();
  std::vector<PredictionRecord> records;
  records.reserve(val.items.size());
  for (const auto& ex : val.items) {
    PredictionRecord rec;
    rec.score = detail::cosine(encode_image(model, ex.image).feature.values(), pos_feat) -
                detail::cosine(encode_image(model, ex.image).feature.values(), neg_feat);
    rec.label = ex.label;
    records.push_back(std::move(rec));
  }
  try {
    return auc(records);
  } catch (const UndefinedMetricError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

class Trainer {
public:
  Trainer(TrainConfig cfg, const Dataset& train_set, const Dataset& val_set)
      : cfg_(std::move(cfg)), train_(&train_set), val_(&val_set) {
    cfg_.validate();
    if (train_->items.empty()) throw ContractError("train: empty training set");
    model_ = std::make_unique<FairMoeModel>(cfg_.effective_model(), cfg_.seed);
    adam_ = std::make_unique<Adam>(model_->named_params(),
                                   AdamConfig{cfg_.lr, cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps});
    init_queues();
  }

  Trainer(const CheckpointData& ckpt, const Dataset& train_set, const Dataset& val_set)
      : Trainer(ckpt.manifest.at("config").get<TrainConfig>(), train_set, val_set) {
    load_model_params(ckpt, *model_);
    const auto& params = model_->named_params();
    for (std::size_t k = 0; k < params.size(); ++k) {
      adam_->moment1(k) = ckpt.at("adam.m." + params[k].first).f64;
      adam_->moment2(k) = ckpt.at("adam.v." + params[k].first).f64;
    }
    adam_->set_step_count(ckpt.manifest.at("adam_t").get<long>());
    step_ = ckpt.manifest.at("step").get<long>();
    best_val_auc_ = ckpt.manifest.at("best_val_auc").get<double>();
    best_val_step_ = ckpt.manifest.at("best_val_step").get<long>();
    restore_queue(main_queue_, ckpt, "queue.main");
    for (auto& [key, q] : group_queues_) restore_queue(q, ckpt, "queue." + key);
    if (ckpt.find("best." + params[0].first) != nullptr) {
      best_params_.clear();
      for (const auto& [name, t] : params) best_params_.push_back(ckpt.at("best." + name).f64);
    }
  }

  const TrainConfig& config() const { return cfg_; }
  FairMoeModel& model() { return *model_; }
  long step() const { return step_; }
  const std::vector<StepLog>& log() const { return log_; }
  double best_val_auc() const { return best_val_auc_; }
  long best_val_step() const { return best_val_step_; }

  // Runs `n` more steps (or to the configured total when n < 0), validating
  // every eval_every steps and once at the end.
  void run(int n = -1) {
    const long target = n < 0 ? cfg_.steps : std::min<long>(cfg_.steps, step_ + n);
    while (step_ < target) {
      log_.push_back(train_step());
      if (step_ % cfg_.eval_every == 0 || step_ == target) maybe_update_best();
    }
  }

  // Copies the best-validation parameter snapshot into the live model
  // (the evaluated artifact). No-op if validation never produced one.
  bool apply_best_params() {
    if (best_params_.empty()) return false;
    const auto& params = model_->named_params();
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor handle = params[k].second;
      handle.mutable_values() = best_params_[k];
    }
    return true;
  }

  CheckpointData make_checkpoint() const {
    CheckpointData ckpt;
    ckpt.manifest = {{"kind", "train"},        {"config", cfg_},
                     {"step", step_},          {"adam_t", adam_->step_count()},
                     {"best_val_auc", best_val_auc_}, {"best_val_step", best_val_step_}};
    add_model_params(ckpt, *model_);
    const auto& params = model_->named_params();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Adam& opt = *adam_;
      ckpt.add_f64("adam.m." + params[k].first, {static_cast<int>(opt.moment1(k).size())}, opt.moment1(k));
      ckpt.add_f64("adam.v." + params[k].first, {static_cast<int>(opt.moment2(k).size())}, opt.moment2(k));
    }
    if (!best_params_.empty())
      for (std::size_t k = 0; k < params.size(); ++k)
        ckpt.add_f64("best." + params[k].first, params[k].second.shape(), best_params_[k]);
    save_queue(main_queue_, ckpt, "queue.main");
    for (const auto& [key, q] : group_queues_) save_queue(q, ckpt, "queue." + key);
    return ckpt;
  }

private:
  struct GateParts {
    std::vector<Tensor> ei, et, fi, ft;
  };

  static void save_queue(const IndexQueue& q, CheckpointData& ckpt, const std::string& prefix) {
    IndexQueue::State s = q.state();
    std::vector<std::uint64_t> perm(s.perm.begin(), s.perm.end());
    ckpt.add_u64(prefix + ".perm", std::move(perm));
    ckpt.add_u64(prefix + ".cursor", {s.cursor});
    ckpt.add_u64(prefix + ".rng", {s.rng_state[0], s.rng_state[1], s.rng_state[2], s.rng_state[3]});
  }

  static void restore_queue(IndexQueue& q, const CheckpointData& ckpt, const std::string& prefix) {
    IndexQueue::State s;
    for (std::uint64_t v : ckpt.at(prefix + ".perm").u64) s.perm.push_back(static_cast<int>(v));
    s.cursor = ckpt.at(prefix + ".cursor").u64.at(0);
    const auto& r = ckpt.at(prefix + ".rng").u64;
    s.rng_state = {r.at(0), r.at(1), r.at(2), r.at(3)};
    q.restore(s);
  }

  std::vector<std::string> fol_attributes() const {
    if (!cfg_.multi_attribute_fol) return {cfg_.fol_attribute};
    std::vector<std::string> out;
    for (const auto& a : train_->meta.attributes) out.push_back(a.name);
    return out;
  }

  void init_queues() {
    std::vector<int> all(train_->items.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    main_queue_ = IndexQueue(all, Rng::stream(cfg_.seed, "batching/main"));
    for (const std::string& attr : fol_attributes()) {
      const int aidx = train_->attribute_index(attr);
      const int n_groups = static_cast<int>(train_->meta.attributes[aidx].priors.size());
      for (int g = 0; g < n_groups; ++g) {
        std::vector<int> members;
        for (std::size_t i = 0; i < train_->items.size(); ++i)
          if (train_->items[i].attributes.at(attr) == g) members.push_back(static_cast<int>(i));
        if (members.empty()) continue;  // empty groups simply do not contribute to FOL
        group_queues_.emplace_back(attr + "/" + std::to_string(g),
                                   IndexQueue(members, Rng::stream(cfg_.seed, "batching/" + attr + "/" +
                                                                                  std::to_string(g))));
      }
    }
  }

  Tensor fol_gate(const GateWeights& gw) const { return cfg_.fol_on_dense_gates ? gw.dense : gw.sparse; }

  void collect_gates(GateParts& parts, const std::optional<EncodeResult>& img,
                     const std::optional<EncodeResult>& txt) const {
    if (img.has_value()) {
      if (cfg_.active_ei() && img->em_gates.has_value()) parts.ei.push_back(fol_gate(*img->em_gates));
      if (cfg_.active_fi() && img->fm_gates.has_value()) parts.fi.push_back(fol_gate(*img->fm_gates));
    }
    if (txt.has_value()) {
      if (cfg_.active_et() && txt->em_gates.has_value()) parts.et.push_back(fol_gate(*txt->em_gates));
      if (cfg_.active_ft() && txt->fm_gates.has_value()) parts.ft.push_back(fol_gate(*txt->fm_gates));
    }
  }

  StepLog train_step() {
    const std::vector<int> batch = main_queue_.take_exact(cfg_.batch_size);
    TapeScope scope(model_->tape());
    model_->zero_grads();

    std::vector<Tensor> img_rows, txt_rows;
    GateParts batch_gates;
    for (int idx : batch) {
      const auto& ex = train_->items[idx];
      EncodeResult ri = encode_image(*model_, ex.image);
      EncodeResult rt = encode_text(*model_, ex.tokens);
      img_rows.push_back(as_row(ri.feature));
      txt_rows.push_back(as_row(rt.feature));
      collect_gates(batch_gates, ri, rt);
    }
    Tensor img_feats = concat_rows(img_rows);
    Tensor txt_feats = concat_rows(txt_rows);
    Tensor contrastive = contrastive_loss(img_feats, txt_feats, model_->inv_temperature());

    StepLog lg;
    lg.step = step_ + 1;
    lg.contrastive = contrastive.item();
    Tensor total = contrastive;

    if (cfg_.use_fol) {
      LossWeights w{cfg_.lambda_fol, cfg_.lambda_dist, cfg_.sinkhorn_epsilon, cfg_.sinkhorn_iters};
      const bool need_img = cfg_.active_ei() || cfg_.active_fi();
      const bool need_txt = cfg_.active_et() || cfg_.active_ft();

      // Auxiliary group forwards: n_f examples per populated group.
      std::map<std::string, std::map<int, GateParts>> group_gates;  // attr -> group -> parts
      if (need_img || need_txt) {
        for (auto& [key, q] : group_queues_) {
          const auto slash = key.find('/');
          const std::string attr = key.substr(0, slash);
          const int gid = std::stoi(key.substr(slash + 1));
          GateParts parts;
          for (int idx : q.take_exact(cfg_.effective_n_f())) {
            const auto& ex = train_->items[idx];
            std::optional<EncodeResult> ri, rt;
            if (need_img) ri = encode_image(*model_, ex.image);
            if (need_txt) rt = encode_text(*model_, ex.tokens);
            collect_gates(parts, ri, rt);
          }
          group_gates[attr][gid] = std::move(parts);
        }
      }

      Tensor sims = cosine_similarities(img_feats, txt_feats);
      Tensor fol_total = Tensor::scalar(0.0);
      for (const std::string& attr : fol_attributes()) {
        std::vector<int> groups;
        for (int idx : batch) groups.push_back(train_->items[idx].attributes.at(attr));

        auto stack_for = [&](const std::vector<Tensor>& overall_parts,
                             auto member_selector) -> std::optional<StackedGates> {
          if (overall_parts.empty()) return std::nullopt;
          StackedGates sg;
          sg.overall = concat_rows(overall_parts);
          for (auto& [gid, parts] : group_gates[attr]) {
            const std::vector<Tensor>& sel = member_selector(parts);
            if (!sel.empty()) sg.per_group.emplace_back(gid, concat_rows(sel));
          }
          return sg;
        };
        FolInputs fin;
        fin.ei = cfg_.active_ei()
                     ? stack_for(batch_gates.ei, [](const GateParts& p) -> const std::vector<Tensor>& { return p.ei; })
                     : std::nullopt;
        fin.et = cfg_.active_et()
                     ? stack_for(batch_gates.et, [](const GateParts& p) -> const std::vector<Tensor>& { return p.et; })
                     : std::nullopt;
        fin.fi = cfg_.active_fi()
                     ? stack_for(batch_gates.fi, [](const GateParts& p) -> const std::vector<Tensor>& { return p.fi; })
                     : std::nullopt;
        fin.ft = cfg_.active_ft()
                     ? stack_for(batch_gates.ft, [](const GateParts& p) -> const std::vector<Tensor>& { return p.ft; })
                     : std::nullopt;
        fin.similarities = sims;
        fin.groups = groups;
        FolBreakdown bd = fol(fin, w);
        lg.f_ei += bd.f_ei.item();
        lg.f_et += bd.f_et.item();
        lg.f_fi += bd.f_fi.item();
        lg.f_ft += bd.f_ft.item();
        lg.l_distance += bd.l_dist.item();
        fol_total = add(fol_total, bd.total);
      }
      total = total_loss(contrastive, fol_total, w);
    }

    lg.total = total.item();
    if (!std::isfinite(lg.total)) {
      std::ostringstream os;
      os << "training diverged at step " << lg.step << "; batch ids:";
      for (int idx : batch) os << " " << train_->items[idx].id;
      model_->tape().clear();
      throw TrainingDiverged(os.str());
    }
    backward(total);
    adam_->step();
    model_->tape().clear();
    ++step_;
    return lg;
  }

  void maybe_update_best() {
    if (!cfg_.select_best) return;
    const double v = validation_auc(*model_, *val_);
    if (std::isnan(v)) return;
    if (v > best_val_auc_) {
      best_val_auc_ = v;
      best_val_step_ = step_;
      best_params_.clear();
      for (const auto& [name, t] : model_->named_params()) best_params_.push_back(t.values());
    }
  }

  TrainConfig cfg_;
  const Dataset* train_;
  const Dataset* val_;
  std::unique_ptr<FairMoeModel> model_;
  std::unique_ptr<Adam> adam_;
  IndexQueue main_queue_;
  std::vector<std::pair<std::string, IndexQueue>> group_queues_;  // "attr/gid" -> queue
  long step_ = 0;
  std::vector<StepLog> log_;
  double best_val_auc_ = -1.0;
  long best_val_step_ = -1;
  std::vector<std::vector<double>> best_params_;
};

// Builds the inference model from a checkpoint, preferring the
// best-validation snapshot when one was selected during training.
inline FairMoeModel model_for_eval(const CheckpointData& ckpt) {
  const std::string kind = ckpt.manifest.value("kind", "model");
  if (kind == "model") {
    ModelConfig cfg = ckpt.manifest.at("config").get<ModelConfig>();
    FairMoeModel model(cfg, 0);
    load_model_params(ckpt, model);
    return model;
  }
  TrainConfig tc = ckpt.manifest.at("config").get<TrainConfig>();
  FairMoeModel model(tc.effective_model(), 0);
  load_model_params(ckpt, model);
  const auto& params = model.named_params();
  if (tc.select_best && ckpt.find("best." + params[0].first) != nullptr) {
    for (const auto& [name, t] : params) {
      Tensor handle = t;
      handle.mutable_values() = ckpt.at("best." + name).f64;
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Ablation suites
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string name;
  std::function<void(TrainConfig&)> mutate;
};

// The suite rows mirror the experiment grids: architecture on/off, fairness
// loss on/off, single-term removals, layer removals, modality removals.
inline std::vector<AblationVariant> ablation_suite(const std::string& suite) {
  auto sink_only = [](TrainConfig& c) {  // FairCLIP-style loss: Sinkhorn term only
    c.term_ei = c.term_et = c.term_fi = c.term_ft = false;
  };
  if (suite == "fom")
    return {{"FairCLIP", [=](TrainConfig& c) {
               c.use_fom = false;
               sink_only(c);
             }},
            {"FairCLIP w. FOM", [=](TrainConfig& c) { sink_only(c); }}};
  if (suite == "fol")
    return {{"FairMoE", [](TrainConfig&) {}},
            {"FairMoE w/o FOL", [](TrainConfig& c) { c.use_fol = false; }}};
  if (suite == "terms")
    return {{"FairMoE", [](TrainConfig&) {}},
            {"w/o loss of F_EI", [](TrainConfig& c) { c.term_ei = false; }},
            {"w/o loss of F_ET", [](TrainConfig& c) { c.term_et = false; }},
            {"w/o loss of F_FI", [](TrainConfig& c) { c.term_fi = false; }},
            {"w/o loss of F_FT", [](TrainConfig& c) { c.term_ft = false; }}};
  if (suite == "layers")
    return {{"FairMoE", [](TrainConfig&) {}},
            {"FairMoE w/o EM", [](TrainConfig& c) { c.use_em = false; }},
            {"FairMoE w/o FM", [](TrainConfig& c) { c.use_fm = false; }}};
  if (suite == "modality")
    return {{"FairMoE", [](TrainConfig&) {}},
            {"w/o Text MoE", [](TrainConfig& c) { c.use_text_moe = false; }},
            {"w/o Image MoE", [](TrainConfig& c) { c.use_image_moe = false; }}};
  throw ContractError("unknown ablation suite: " + suite);
}

struct AblationCell {
  std::vector<double> values;

  double mean() const {
    double s = 0.0;
    int n = 0;
    for (double v : values)
      if (std::isfinite(v)) {
        s += v;
        ++n;
      }
    return n > 0 ? s / n : std::numeric_limits<double>::quiet_NaN();
  }
  double stddev() const {  // sample standard deviation over seeds
    const double m = mean();
    double s = 0.0;
    int n = 0;
    for (double v : values)
      if (std::isfinite(v)) {
        s += (v - m) * (v - m);
        ++n;
      }
    return n > 1 ? std::sqrt(s / (n - 1)) : 0.0;
  }
};

struct AblationRow {
  std::string variant;
  AblationCell es_auc, auc, dpd, eod;
};

struct AblationGrid {
  std::string suite;
  std::string attribute;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;
};

// Trains every (variant, seed) pair with shared seeds for paired
// comparisons and evaluates the selected checkpoint on the test split.
// Variants may run in parallel worker threads; model instances and tapes
// are thread-confined.
inline AblationGrid run_ablation_suite(const TrainConfig& base, const Dataset& data,
                                       const std::vector<AblationVariant>& variants, int n_seeds, int jobs = 1,
                                       const std::function<void(const std::string&)>& progress = nullptr) {
  if (n_seeds < 1) throw ContractError("run_ablation_suite: need at least one seed");
  const Dataset train_set = data.filter_split("train");
  const Dataset val_set = data.filter_split("val");
  const Dataset test_set = data.filter_split("test");

  AblationGrid grid;
  grid.attribute = base.fol_attribute;
  for (int s = 0; s < n_seeds; ++s) grid.seeds.push_back(base.seed + s);
  grid.rows.resize(variants.size());

  struct Job {
    std::size_t variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs_list;
  for (std::size_t v = 0; v < variants.size(); ++v)
    for (std::uint64_t seed : grid.seeds) jobs_list.push_back({v, seed});

  struct JobResult {
    double es = std::numeric_limits<double>::quiet_NaN();
    double a = std::numeric_limits<double>::quiet_NaN();
    double d = std::numeric_limits<double>::quiet_NaN();
    double e = std::numeric_limits<double>::quiet_NaN();
  };
  std::vector<JobResult> results(jobs_list.size());

  auto run_job = [&](std::size_t j) {
    TrainConfig cfg = base;
    variants[jobs_list[j].variant].mutate(cfg);
    cfg.seed = jobs_list[j].seed;
    Trainer trainer(cfg, train_set, val_set);
    trainer.run();
    trainer.apply_best_params();
    EvalOutput ev = evaluate(trainer.model(), test_set);
    const MetricsReport& rep = ev.reports.at(cfg.fol_attribute);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    results[j] = {rep.es_auc.value_or(nan), rep.auc.value_or(nan), rep.dpd.value_or(nan), rep.eod.value_or(nan)};
    if (progress)
      progress(variants[jobs_list[j].variant].name + " seed " + std::to_string(jobs_list[j].seed) + " done");
  };

  if (jobs <= 1) {
    for (std::size_t j = 0; j < jobs_list.size(); ++j) run_job(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w)
      pool.emplace_back([&] {
        for (std::size_t j = next.fetch_add(1); j < jobs_list.size(); j = next.fetch_add(1)) run_job(j);
      });
    for (auto& t : pool) t.join();
  }

  for (std::size_t v = 0; v < variants.size(); ++v) {
    AblationRow row;
    row.variant = variants[v].name;
    for (std::size_t j = 0; j < jobs_list.size(); ++j) {
      if (jobs_list[j].variant != v) continue;
      row.es_auc.values.push_back(results[j].es);
      row.auc.values.push_back(results[j].a);
      row.dpd.values.push_back(results[j].d);
      row.eod.values.push_back(results[j].e);
    }
    grid.rows[v] = std::move(row);
  }
  return grid;
}

}  // namespace fairmoe
