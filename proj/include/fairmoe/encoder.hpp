// SPDX-License-Identifier: Apache-2.0
//
// Toy dual encoder in the CLIP shape: patch/token embedding, pre-norm
// attention blocks, an embedding MoE replacing the MLP of the last block,
// and a feature MoE (or dense head) pooling position 0 after the blocks.
// Ablation flags swap either MoE for a dense MLP of equal fan-in/out.
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fairmoe/errors.hpp"
#include "fairmoe/moe.hpp"
#include "fairmoe/rng.hpp"
#include "fairmoe/routing.hpp"
#include "fairmoe/tensor.hpp"

namespace fairmoe {

// Sequences shorter than text_len are padded with this token id.
constexpr int kPadToken = 0;

struct ModelConfig {
  int image_size = 16;
  int patch_size = 4;
  int dim = 32;
  int heads = 4;
  int blocks = 2;
  int d_feat = 16;
  int vocab = 64;
  int text_len = 16;
  int m1 = 4;  // embedding MoE experts
  int m2 = 4;  // feature MoE experts
  int k1 = 2;
  int k2 = 2;
  double capacity = 1.0;
  int hidden_mult = 4;
  Activation act = Activation::kGelu;
  // Architecture switches for the ablation grid. *_em replaces the last
  // block's MoE with a dense FFN; *_fm replaces the feature MoE with a
  // dense two-layer head.
  bool image_em = true;
  bool image_fm = true;
  bool text_em = true;
  bool text_fm = true;
  double temperature_init = 0.07;

  int n_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int image_tokens() const { return n_patches() + 1; }
  int hidden() const { return hidden_mult * dim; }

  void validate() const {
    if (image_size % patch_size != 0) throw ContractError("config: image_size must be divisible by patch_size");
    if (dim % heads != 0) throw ContractError("config: dim must be divisible by heads");
    if (blocks < 1) throw ContractError("config: need at least one block");
    if (k1 < 1 || k1 > m1 || k2 < 1 || k2 > m2) throw ContractError("config: top-k budgets out of range");
    if (capacity <= 0.0) throw ContractError("config: capacity factor must be positive");
    if (vocab < 2 || text_len < 1 || d_feat < 2 || dim < 2) throw ContractError("config: degenerate dimensions");
    if (temperature_init <= 0.0) throw ContractError("config: temperature must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"dim", c.dim},
                     {"heads", c.heads},           {"blocks", c.blocks},         {"d_feat", c.d_feat},
                     {"vocab", c.vocab},           {"text_len", c.text_len},     {"m1", c.m1},
                     {"m2", c.m2},                 {"k1", c.k1},                 {"k2", c.k2},
                     {"capacity", c.capacity},     {"hidden_mult", c.hidden_mult},
                     {"act", c.act == Activation::kGelu ? "gelu" : "relu"},
                     {"image_em", c.image_em},     {"image_fm", c.image_fm},     {"text_em", c.text_em},
                     {"text_fm", c.text_fm},       {"temperature_init", c.temperature_init}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("dim").get_to(c.dim);
  j.at("heads").get_to(c.heads);
  j.at("blocks").get_to(c.blocks);
  j.at("d_feat").get_to(c.d_feat);
  j.at("vocab").get_to(c.vocab);
  j.at("text_len").get_to(c.text_len);
  j.at("m1").get_to(c.m1);
  j.at("m2").get_to(c.m2);
  j.at("k1").get_to(c.k1);
  j.at("k2").get_to(c.k2);
  j.at("capacity").get_to(c.capacity);
  j.at("hidden_mult").get_to(c.hidden_mult);
  c.act = j.at("act").get<std::string>() == "relu" ? Activation::kRelu : Activation::kGelu;
  j.at("image_em").get_to(c.image_em);
  j.at("image_fm").get_to(c.image_fm);
  j.at("text_em").get_to(c.text_em);
  j.at("text_fm").get_to(c.text_fm);
  j.at("temperature_init").get_to(c.temperature_init);
}

// ---------------------------------------------------------------------------
// Parameter modules
// ---------------------------------------------------------------------------

struct LinearP {
  Tensor w;  // [out x in]
  Tensor b;  // [out]
};

inline Tensor linear(const LinearP& p, const Tensor& x) { return add_rowvec(matmul(x, transpose(p.w)), p.b); }

struct LayerNormP {
  Tensor gain, bias;
};

struct AttnP {
  LinearP q, k, v, o;
};

struct FfnP {
  LinearP fc1, fc2;
};

inline Tensor ffn_forward(const FfnP& p, const Tensor& x, Activation act) {
  return linear(p.fc2, apply_activation(linear(p.fc1, x), act));
}

struct BlockP {
  LayerNormP ln1, ln2;
  AttnP attn;
  bool has_moe = false;
  FfnP ffn;          // used when !has_moe
  EmbeddingMoe moe;  // used when has_moe
};

struct FeatureHeadP {
  bool has_moe = false;
  FeatureMoe moe;
  FfnP mlp;  // dense fallback, dim -> hidden -> d_feat
};

struct EncoderP {
  // Image: patch_proj [dim x patch^2], cls [1 x dim]. Text: token table
  // [vocab x dim]. Both: pos [(tokens) x dim].
  Tensor patch_proj;
  Tensor cls;
  Tensor token_table;
  Tensor pos;
  std::vector<BlockP> blocks;
  FeatureHeadP head;
};

struct EncodeResult {
  Tensor feature;                       // [d_feat]
  std::optional<GateWeights> em_gates;  // [(tokens) x m1] when the last block has a MoE
  std::optional<GateWeights> fm_gates;  // [1 x m2] when the head has a MoE
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

class FairMoeModel {
public:
  FairMoeModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng::stream(seed, "init");
    build_image(rng);
    build_text(rng);
    log_inv_temp_ = Tensor::param({1}, {std::log(1.0 / cfg_.temperature_init)});
    register_params();
  }

  const ModelConfig& config() const { return cfg_; }
  Tape& tape() { return tape_; }

  // Inverse temperature with the runaway clamp 1/T <= 100.
  Tensor inv_temperature() const { return min_const(exp_t(log_inv_temp_), 100.0); }
  Tensor log_inv_temp() const { return log_inv_temp_; }

  const EncoderP& image() const { return image_; }
  const EncoderP& text() const { return text_; }

  const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }

  Tensor param(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw ContractError("unknown parameter: " + name);
  }

  void zero_grads() {
    for (auto& [n, t] : params_) t.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

private:
  Tensor init_weight(std::vector<int> shape, Rng& rng, double stddev = 0.02) {
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.normal(0.0, stddev);
    return Tensor::param(std::move(shape), std::move(data));
  }
  Tensor init_zeros(std::vector<int> shape) { return Tensor::param(shape, std::vector<double>(shape_numel(shape), 0.0)); }
  Tensor init_ones(std::vector<int> shape) { return Tensor::param(shape, std::vector<double>(shape_numel(shape), 1.0)); }

  LinearP init_linear(int out, int in, Rng& rng) { return {init_weight({out, in}, rng), init_zeros({out})}; }

  EmbeddingMoe init_embedding_moe(int tokens, Rng& rng) {
    EmbeddingMoe moe;
    moe.gate = init_weight({cfg_.m1, cfg_.dim}, rng);
    for (int b = 0; b < cfg_.m1; ++b)
      moe.experts.push_back({init_weight({cfg_.hidden(), cfg_.dim}, rng), init_weight({cfg_.dim, cfg_.hidden()}, rng)});
    moe.k = cfg_.k1;
    moe.capacity = {cfg_.capacity, tokens, cfg_.k1, cfg_.m1};
    moe.act = cfg_.act;
    return moe;
  }

  FeatureHeadP init_head(bool use_moe, Rng& rng) {
    FeatureHeadP head;
    head.has_moe = use_moe;
    if (use_moe) {
      head.moe.gate = init_weight({cfg_.m2, cfg_.dim}, rng);
      for (int b = 0; b < cfg_.m2; ++b)
        head.moe.experts.push_back(
            {init_weight({cfg_.hidden(), cfg_.dim}, rng), init_weight({cfg_.d_feat, cfg_.hidden()}, rng)});
      head.moe.k = cfg_.k2;
      head.moe.act = cfg_.act;
    } else {
      head.mlp.fc1 = init_linear(cfg_.hidden(), cfg_.dim, rng);
      head.mlp.fc2 = init_linear(cfg_.d_feat, cfg_.hidden(), rng);
    }
    return head;
  }

  std::vector<BlockP> init_blocks(int tokens, bool last_has_moe, Rng& rng) {
    std::vector<BlockP> out;
    for (int i = 0; i < cfg_.blocks; ++i) {
      BlockP blk;
      blk.ln1 = {init_ones({cfg_.dim}), init_zeros({cfg_.dim})};
      blk.attn = {init_linear(cfg_.dim, cfg_.dim, rng), init_linear(cfg_.dim, cfg_.dim, rng),
                  init_linear(cfg_.dim, cfg_.dim, rng), init_linear(cfg_.dim, cfg_.dim, rng)};
      blk.ln2 = {init_ones({cfg_.dim}), init_zeros({cfg_.dim})};
      blk.has_moe = last_has_moe && i == cfg_.blocks - 1;
      if (blk.has_moe) {
        blk.moe = init_embedding_moe(tokens, rng);
      } else {
        blk.ffn.fc1 = init_linear(cfg_.hidden(), cfg_.dim, rng);
        blk.ffn.fc2 = init_linear(cfg_.dim, cfg_.hidden(), rng);
      }
      out.push_back(std::move(blk));
    }
    return out;
  }

  void build_image(Rng& rng) {
    image_.patch_proj = init_weight({cfg_.dim, cfg_.patch_size * cfg_.patch_size}, rng);
    image_.cls = init_weight({1, cfg_.dim}, rng);
    image_.pos = init_weight({cfg_.image_tokens(), cfg_.dim}, rng);
    image_.blocks = init_blocks(cfg_.image_tokens(), cfg_.image_em, rng);
    image_.head = init_head(cfg_.image_fm, rng);
  }

  void build_text(Rng& rng) {
    text_.token_table = init_weight({cfg_.vocab, cfg_.dim}, rng);
    text_.pos = init_weight({cfg_.text_len, cfg_.dim}, rng);
    text_.blocks = init_blocks(cfg_.text_len, cfg_.text_em, rng);
    text_.head = init_head(cfg_.text_fm, rng);
  }

  void register_encoder(const std::string& prefix, EncoderP& enc) {
    if (enc.patch_proj.defined()) params_.emplace_back(prefix + ".patch_proj.w", enc.patch_proj);
    if (enc.cls.defined()) params_.emplace_back(prefix + ".cls", enc.cls);
    if (enc.token_table.defined()) params_.emplace_back(prefix + ".token_emb", enc.token_table);
    params_.emplace_back(prefix + ".pos", enc.pos);
    for (std::size_t i = 0; i < enc.blocks.size(); ++i) {
      const std::string bp = prefix + ".block" + std::to_string(i);
      BlockP& blk = enc.blocks[i];
      params_.emplace_back(bp + ".ln1.gain", blk.ln1.gain);
      params_.emplace_back(bp + ".ln1.bias", blk.ln1.bias);
      auto reg_linear = [&](const std::string& name, LinearP& l) {
        params_.emplace_back(name + ".w", l.w);
        params_.emplace_back(name + ".b", l.b);
      };
      reg_linear(bp + ".attn.q", blk.attn.q);
      reg_linear(bp + ".attn.k", blk.attn.k);
      reg_linear(bp + ".attn.v", blk.attn.v);
      reg_linear(bp + ".attn.o", blk.attn.o);
      params_.emplace_back(bp + ".ln2.gain", blk.ln2.gain);
      params_.emplace_back(bp + ".ln2.bias", blk.ln2.bias);
      if (blk.has_moe) {
        params_.emplace_back(bp + ".moe.gate.w", blk.moe.gate);
        for (std::size_t b = 0; b < blk.moe.experts.size(); ++b) {
          params_.emplace_back(bp + ".moe.expert" + std::to_string(b) + ".w1", blk.moe.experts[b].w1);
          params_.emplace_back(bp + ".moe.expert" + std::to_string(b) + ".w2", blk.moe.experts[b].w2);
        }
      } else {
        reg_linear(bp + ".ffn.fc1", blk.ffn.fc1);
        reg_linear(bp + ".ffn.fc2", blk.ffn.fc2);
      }
    }
    if (enc.head.has_moe) {
      params_.emplace_back(prefix + ".feat_moe.gate.w", enc.head.moe.gate);
      for (std::size_t b = 0; b < enc.head.moe.experts.size(); ++b) {
        params_.emplace_back(prefix + ".feat_moe.expert" + std::to_string(b) + ".w1", enc.head.moe.experts[b].w1);
        params_.emplace_back(prefix + ".feat_moe.expert" + std::to_string(b) + ".w2", enc.head.moe.experts[b].w2);
      }
    } else {
      params_.emplace_back(prefix + ".feat_head.fc1.w", enc.head.mlp.fc1.w);
      params_.emplace_back(prefix + ".feat_head.fc1.b", enc.head.mlp.fc1.b);
      params_.emplace_back(prefix + ".feat_head.fc2.w", enc.head.mlp.fc2.w);
      params_.emplace_back(prefix + ".feat_head.fc2.b", enc.head.mlp.fc2.b);
    }
  }

  void register_params() {
    register_encoder("image", image_);
    register_encoder("text", text_);
    params_.emplace_back("logit_scale", log_inv_temp_);
  }

  ModelConfig cfg_;
  EncoderP image_;
  EncoderP text_;
  Tensor log_inv_temp_;
  std::vector<std::pair<std::string, Tensor>> params_;
  Tape tape_;
};

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor attention(const AttnP& p, const Tensor& x, int heads, const std::vector<double>* key_bias) {
  const int n = x.rows(), d = x.cols();
  const int dh = d / heads;
  Tensor q = linear(p.q, x), k = linear(p.k, x), v = linear(p.v, x);
  std::vector<Tensor> head_outs;
  std::vector<double> bias_matrix;
  if (key_bias != nullptr) {
    bias_matrix.resize(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) bias_matrix[static_cast<std::size_t>(i) * n + j] = (*key_bias)[j];
  }
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
    if (key_bias != nullptr) scores = mask_add(scores, bias_matrix);
    head_outs.push_back(matmul(softmax_rows(scores), vh));
  }
  return linear(p.o, concat_cols(head_outs));
}

// Pre-norm residual block; capacity-dropped tokens ride the residual.
inline Tensor block_forward(const BlockP& blk, Tensor x, int heads, Activation act,
                            const std::vector<double>* key_bias, std::optional<GateWeights>* gates_out) {
  x = add(x, attention(blk.attn, layer_norm(x, blk.ln1.gain, blk.ln1.bias), heads, key_bias));
  Tensor normed = layer_norm(x, blk.ln2.gain, blk.ln2.bias);
  if (blk.has_moe) {
    MoeOutput mo = embedding_moe_forward(blk.moe, normed);
    if (gates_out != nullptr) *gates_out = mo.gates;
    return add(x, mo.output);
  }
  return add(x, ffn_forward(blk.ffn, normed, act));
}

inline EncodeResult run_blocks(const EncoderP& enc, Tensor x, const ModelConfig& cfg,
                               const std::vector<double>* key_bias) {
  EncodeResult res;
  for (const auto& blk : enc.blocks) {
    std::optional<GateWeights> gates;
    x = block_forward(blk, x, cfg.heads, cfg.act, key_bias, &gates);
    if (gates.has_value()) res.em_gates = std::move(gates);
  }
  if (enc.head.has_moe) {
    MoeOutput fo = feature_moe_forward(enc.head.moe, x);
    res.feature = fo.output;
    res.fm_gates = fo.gates;
  } else {
    res.feature = flatten(ffn_forward(enc.head.mlp, slice_rows(x, 0, 1), cfg.act));
  }
  return res;
}

}  // namespace detail

// Image forward: patchify, project, prepend the class embedding, add
// positions, run the blocks, pool row 0 through the feature head.
inline EncodeResult encode_image(const FairMoeModel& model, const std::vector<double>& pixels) {
  const ModelConfig& cfg = model.config();
  const int s = cfg.image_size, p = cfg.patch_size;
  if (static_cast<int>(pixels.size()) != s * s) throw ContractError("encode_image: wrong pixel count");
  const int per_side = s / p;
  const int n_patches = per_side * per_side;
  std::vector<double> patch_data(static_cast<std::size_t>(n_patches) * p * p);
  for (int pr = 0; pr < per_side; ++pr)
    for (int pc = 0; pc < per_side; ++pc) {
      const int patch_idx = pr * per_side + pc;
      for (int r = 0; r < p; ++r)
        for (int c = 0; c < p; ++c)
          patch_data[static_cast<std::size_t>(patch_idx) * p * p + r * p + c] =
              pixels[static_cast<std::size_t>(pr * p + r) * s + pc * p + c];
    }
  Tensor patches = Tensor::constant({n_patches, p * p}, std::move(patch_data));
  Tensor tok = matmul(patches, transpose(model.image().patch_proj));
  Tensor x = add(concat_rows({model.image().cls, tok}), model.image().pos);
  return detail::run_blocks(model.image(), x, cfg, nullptr);
}

// Text forward. Token values beyond `length` are canonicalized to the pad
// token before embedding, and attention keys at those positions are masked,
// so supplied tail content cannot influence the feature.
inline EncodeResult encode_text(const FairMoeModel& model, std::span<const int> tokens_in,
                                std::optional<int> length = std::nullopt) {
  const ModelConfig& cfg = model.config();
  const int supplied = static_cast<int>(tokens_in.size());
  if (supplied > cfg.text_len) throw ContractError("encode_text: sequence longer than text_len");
  const int len = length.value_or(supplied);
  if (len < 0 || len > supplied) throw ContractError("encode_text: bad explicit length");
  std::vector<int> ids(cfg.text_len, kPadToken);
  for (int i = 0; i < len; ++i) {
    if (tokens_in[i] < 0 || tokens_in[i] >= cfg.vocab) throw ContractError("encode_text: token out of vocabulary");
    ids[i] = tokens_in[i];
  }
  std::vector<double> key_bias(cfg.text_len, 0.0);
  for (int i = len; i < cfg.text_len; ++i) key_bias[i] = -1e30;
  Tensor x = add(embedding_rows(model.text().token_table, ids), model.text().pos);
  return detail::run_blocks(model.text(), x, cfg, &key_bias);
}

}  // namespace fairmoe
