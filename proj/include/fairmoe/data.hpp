// SPDX-License-Identifier: Apache-2.0
//
// Synthetic biased image-text pair generator, dataset manifest IO, and
// group-stratified sampling.
//
// The generator plants a label signal (a brightened quadrant) and, with
// probability beta per attribute, a group-revealing artifact inside that
// same quadrant plus a group-dialect token in the text. Bias therefore
// lives in both modalities and overlaps the label signal spatially.
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairmoe/errors.hpp"
#include "fairmoe/rng.hpp"

namespace fairmoe {

static_assert(std::endian::native == std::endian::little, "blob format is little-endian");

// Token layout of the toy vocabulary.
namespace tokens {
constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kNegLabel = 2;
constexpr int kPosLabel = 3;
constexpr int kTemplateA = 4;
constexpr int kTemplateB = 5;
constexpr int kDialectBase = 10;
constexpr int kDialectStride = 6;  // per attribute
inline int dialect(int attribute_index, int group) {
  return kDialectBase + kDialectStride * attribute_index + group;
}
}  // namespace tokens

struct AttributeSpec {
  std::string name;
  std::vector<double> priors;  // one per group, sums to 1
};

inline std::vector<AttributeSpec> default_attributes() {
  return {{"race", {0.5, 0.3, 0.2}},
          {"gender", {0.55, 0.45}},
          {"ethnicity", {0.55, 0.45}},
          {"language", {0.4, 0.35, 0.25}}};
}

struct SynthSpec {
  int n = 1000;
  std::uint64_t seed = 1;
  double bias_strength = 0.9;         // beta: P(artifact | group)
  double label_signal_strength = 0.6;
  double artifact_strength = 0.8;
  double noise_sigma = 0.05;
  int image_size = 16;
  int text_len = 16;
  int vocab = 64;
  std::vector<AttributeSpec> attributes = default_attributes();
};

struct ExamplePair {
  std::string id;
  std::vector<double> image;  // image_size^2, row-major, values in [0,1]
  std::vector<int> tokens;
  int label = 0;
  std::map<std::string, int> attributes;
  std::string split;  // train / val / test
};

struct DatasetMeta {
  int image_size = 16;
  int text_len = 16;
  int vocab = 64;
  std::vector<int> prompt_pos;  // label-template tokens without dialect
  std::vector<int> prompt_neg;
  std::vector<AttributeSpec> attributes;
  nlohmann::json synth_echo;  // generator parameters for reproducibility
};

struct Dataset {
  DatasetMeta meta;
  std::vector<ExamplePair> items;

  std::vector<int> indices_of_split(const std::string& split) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].split == split) out.push_back(static_cast<int>(i));
    return out;
  }

  Dataset filter_split(const std::string& split) const {
    Dataset out;
    out.meta = meta;
    for (const auto& it : items)
      if (it.split == split) out.items.push_back(it);
    return out;
  }

  int attribute_index(const std::string& name) const {
    for (std::size_t i = 0; i < meta.attributes.size(); ++i)
      if (meta.attributes[i].name == name) return static_cast<int>(i);
    throw ContractError("unknown attribute: " + name);
  }
};

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

namespace detail {

// Artifact cells for (attribute a, group g): two pixels on row 2a+1 of the
// label quadrant, columns 2g and 2g+1. Disjoint across attributes and
// groups, and inside the quadrant the label signal brightens.
inline std::pair<int, int> artifact_row_cols(int attribute_index, int group) {
  return {2 * attribute_index + 1, 2 * group};
}

}  // namespace detail

inline std::vector<int> label_prompt_tokens(int label) {
  return {tokens::kBos, label == 1 ? tokens::kPosLabel : tokens::kNegLabel, tokens::kTemplateA,
          tokens::kTemplateB};
}

inline Dataset synthesize(const SynthSpec& spec) {
  if (spec.n < 1) throw ContractError("synthesize: n must be >= 1");
  for (const auto& attr : spec.attributes) {
    double s = 0.0;
    for (double p : attr.priors) {
      if (p < 0.0) throw ContractError("synthesize: negative prior");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ContractError("synthesize: priors of " + attr.name + " must sum to 1");
  }
  for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
    const int row = 2 * static_cast<int>(a) + 1;
    const int max_col = 2 * (static_cast<int>(spec.attributes[a].priors.size()) - 1) + 1;
    if (row >= spec.image_size || max_col >= spec.image_size)
      throw ContractError("synthesize: artifact layout does not fit the image; shrink groups or grow the image");
  }
  Rng rng = Rng::stream(spec.seed, "data");
  Dataset ds;
  ds.meta.image_size = spec.image_size;
  ds.meta.text_len = spec.text_len;
  ds.meta.vocab = spec.vocab;
  ds.meta.attributes = spec.attributes;
  ds.meta.prompt_pos = label_prompt_tokens(1);
  ds.meta.prompt_neg = label_prompt_tokens(0);
  ds.meta.synth_echo = {{"n", spec.n},
                        {"seed", spec.seed},
                        {"bias_strength", spec.bias_strength},
                        {"label_signal_strength", spec.label_signal_strength},
                        {"artifact_strength", spec.artifact_strength},
                        {"noise_sigma", spec.noise_sigma}};

  const int s = spec.image_size;
  const int quad = s / 2;
  for (int idx = 0; idx < spec.n; ++idx) {
    ExamplePair ex;
    std::ostringstream id;
    id << "ex" << std::setfill('0') << std::setw(6) << idx;
    ex.id = id.str();
    ex.label = rng.uniform() < 0.5 ? 1 : 0;
    for (const auto& attr : spec.attributes) ex.attributes[attr.name] = rng.categorical(attr.priors);

    ex.image.assign(static_cast<std::size_t>(s) * s, 0.0);
    for (auto& px : ex.image) px = 0.1 + rng.normal(0.0, spec.noise_sigma);
    if (ex.label == 1)
      for (int r = 0; r < quad; ++r)
        for (int c = 0; c < quad; ++c) ex.image[static_cast<std::size_t>(r) * s + c] += spec.label_signal_strength;

    ex.tokens = label_prompt_tokens(ex.label);
    for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
      const int g = ex.attributes.at(spec.attributes[a].name);
      if (rng.uniform() < spec.bias_strength) {
        auto [row, col] = detail::artifact_row_cols(static_cast<int>(a), g);
        ex.image[static_cast<std::size_t>(row) * s + col] += spec.artifact_strength;
        ex.image[static_cast<std::size_t>(row) * s + col + 1] += spec.artifact_strength;
        ex.tokens.push_back(tokens::dialect(static_cast<int>(a), g));
      }
    }
    for (auto& px : ex.image) px = std::clamp(px, 0.0, 1.0);

    // 70/10/20 split by index; examples are i.i.d.
    const double frac = static_cast<double>(idx) / spec.n;
    ex.split = frac < 0.7 ? "train" : (frac < 0.8 ? "val" : "test");
    ds.items.push_back(std::move(ex));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Manifest IO
// ---------------------------------------------------------------------------

inline void write_blob(const std::filesystem::path& path, const std::vector<double>& data) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open blob for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
}

inline std::vector<double> read_blob(const std::filesystem::path& path, std::size_t expect_count) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open blob: " + path.string());
  const auto bytes = static_cast<std::size_t>(f.tellg());
  if (bytes != expect_count * sizeof(double))
    throw SchemaError("blob " + path.string() + " has wrong size");
  std::vector<double> out(expect_count);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
  return out;
}

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "blobs");
  nlohmann::json meta;
  meta["image_size"] = ds.meta.image_size;
  meta["text_len"] = ds.meta.text_len;
  meta["vocab"] = ds.meta.vocab;
  meta["prompt_pos"] = ds.meta.prompt_pos;
  meta["prompt_neg"] = ds.meta.prompt_neg;
  meta["attributes"] = nlohmann::json::array();
  for (const auto& a : ds.meta.attributes) meta["attributes"].push_back({{"name", a.name}, {"priors", a.priors}});
  if (!ds.meta.synth_echo.is_null()) meta["synth"] = ds.meta.synth_echo;
  {
    std::ofstream f(dir / "meta.json");
    if (!f) throw IoError("cannot write meta.json");
    f << meta.dump(2) << "\n";
  }
  std::ofstream mf(dir / "manifest.jsonl");
  if (!mf) throw IoError("cannot write manifest.jsonl");
  for (const auto& ex : ds.items) {
    const std::string blob_rel = "blobs/" + ex.id + ".f64";
    write_blob(dir / blob_rel, ex.image);
    nlohmann::json rec{{"id", ex.id},      {"image_path", blob_rel}, {"tokens", ex.tokens},
                       {"label", ex.label}, {"attributes", ex.attributes}, {"split", ex.split}};
    mf << rec.dump() << "\n";
  }
}

inline Dataset load_manifest(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(dir / "meta.json")) throw IoError("missing meta.json in " + dir.string());
  Dataset ds;
  {
    std::ifstream f(dir / "meta.json");
    nlohmann::json meta;
    try {
      f >> meta;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("meta.json: ") + e.what());
    }
    ds.meta.image_size = meta.at("image_size").get<int>();
    ds.meta.text_len = meta.at("text_len").get<int>();
    ds.meta.vocab = meta.at("vocab").get<int>();
    ds.meta.prompt_pos = meta.at("prompt_pos").get<std::vector<int>>();
    ds.meta.prompt_neg = meta.at("prompt_neg").get<std::vector<int>>();
    for (const auto& a : meta.at("attributes"))
      ds.meta.attributes.push_back({a.at("name").get<std::string>(), a.at("priors").get<std::vector<double>>()});
    if (meta.contains("synth")) ds.meta.synth_echo = meta["synth"];
  }

  std::ifstream mf(dir / "manifest.jsonl");
  if (!mf) throw IoError("missing manifest.jsonl in " + dir.string());
  std::string line;
  int line_no = 0;
  const std::size_t pixels = static_cast<std::size_t>(ds.meta.image_size) * ds.meta.image_size;
  while (std::getline(mf, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    ExamplePair ex;
    try {
      ex.id = rec.at("id").get<std::string>();
      ex.tokens = rec.at("tokens").get<std::vector<int>>();
      ex.label = rec.at("label").get<int>();
      ex.split = rec.value("split", "train");
      for (const auto& [k, v] : rec.at("attributes").items()) ex.attributes[k] = v.get<int>();
      ex.image = read_blob(dir / rec.at("image_path").get<std::string>(), pixels);
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError("manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    if (ex.label != 0 && ex.label != 1)
      throw SchemaError("record " + ex.id + ": label must be 0 or 1");
    if (static_cast<int>(ex.tokens.size()) > ds.meta.text_len)
      throw SchemaError("record " + ex.id + ": token sequence exceeds text_len");
    for (int t : ex.tokens)
      if (t < 0 || t >= ds.meta.vocab)
        throw SchemaError("record " + ex.id + ": token " + std::to_string(t) + " out of vocabulary");
    for (const auto& a : ds.meta.attributes) {
      auto it = ex.attributes.find(a.name);
      if (it == ex.attributes.end()) throw SchemaError("record " + ex.id + ": missing attribute " + a.name);
      if (it->second < 0 || it->second >= static_cast<int>(a.priors.size()))
        throw SchemaError("record " + ex.id + ": group id out of range for " + a.name);
    }
    for (double px : ex.image)
      if (!std::isfinite(px)) throw SchemaError("record " + ex.id + ": non-finite pixel");
    ds.items.push_back(std::move(ex));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

// Shuffled queue over a fixed index set. Reshuffles per epoch; state is
// fully serializable for checkpoint resume.
class IndexQueue {
public:
  IndexQueue() = default;
  IndexQueue(std::vector<int> members, Rng rng) : members_(std::move(members)), rng_(rng) {
    if (members_.empty()) throw ContractError("IndexQueue: empty group");
    reshuffle();
  }

  // Up to n indices, never crossing an epoch boundary (last batch is short).
  std::vector<int> take_upto(int n) {
    if (cursor_ >= perm_.size()) reshuffle();
    const std::size_t take = std::min<std::size_t>(n, perm_.size() - cursor_);
    std::vector<int> out(perm_.begin() + cursor_, perm_.begin() + cursor_ + take);
    cursor_ += take;
    return out;
  }

  // Exactly n indices, reshuffling on exhaustion.
  std::vector<int> take_exact(int n) {
    std::vector<int> out;
    out.reserve(n);
    while (static_cast<int>(out.size()) < n) {
      if (cursor_ >= perm_.size()) reshuffle();
      out.push_back(perm_[cursor_++]);
    }
    return out;
  }

  std::size_t size() const { return members_.size(); }

  struct State {
    std::vector<int> perm;
    std::uint64_t cursor = 0;
    std::array<std::uint64_t, 4> rng_state{};
  };
  State state() const { return {perm_, cursor_, rng_.state()}; }
  void restore(const State& s) {
    perm_ = s.perm;
    cursor_ = s.cursor;
    rng_.set_state(s.rng_state);
  }

private:
  void reshuffle() {
    perm_ = members_;
    rng_.shuffle(perm_);
    cursor_ = 0;
  }

  std::vector<int> members_;
  std::vector<int> perm_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

// Epoch-bounded batches restricted to one group of one attribute.
inline std::vector<std::vector<int>> stratified_batches(const Dataset& ds, const std::string& attribute, int group,
                                                        int batch_size, std::uint64_t seed, int n_batches) {
  if (batch_size < 1) throw ContractError("stratified_batches: batch_size must be >= 1");
  std::vector<int> members;
  for (std::size_t i = 0; i < ds.items.size(); ++i)
    if (ds.items[i].attributes.at(attribute) == group) members.push_back(static_cast<int>(i));
  if (members.empty()) throw ContractError("stratified_batches: empty group");
  IndexQueue q(std::move(members), Rng::stream(seed, "batching/" + attribute + "/" + std::to_string(group)));
  std::vector<std::vector<int>> out;
  for (int b = 0; b < n_batches; ++b) out.push_back(q.take_upto(batch_size));
  return out;
}

// ---------------------------------------------------------------------------
// Planted-bias probe
// ---------------------------------------------------------------------------

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

// Multinomial logistic regression on raw pixels predicting the group of one
// attribute. Trains on even indices, evaluates on odd. Deterministic
// (zero init, full-batch gradient descent with momentum).
inline ProbeResult pixel_group_probe(const Dataset& ds, const std::string& attribute, int epochs = 300,
                                     double lr = 0.5) {
  const int aidx = ds.attribute_index(attribute);
  const int classes = static_cast<int>(ds.meta.attributes[aidx].priors.size());
  const int dim = ds.meta.image_size * ds.meta.image_size + 1;  // + bias feature
  std::vector<int> train_idx, test_idx;
  for (std::size_t i = 0; i < ds.items.size(); ++i) (i % 2 == 0 ? train_idx : test_idx).push_back(static_cast<int>(i));
  if (train_idx.empty() || test_idx.empty()) throw ContractError("probe: dataset too small");

  std::vector<double> w(static_cast<std::size_t>(classes) * dim, 0.0);
  std::vector<double> vel(w.size(), 0.0);
  std::vector<double> logits(classes), probs(classes), grad(w.size());
  auto forward = [&](const ExamplePair& ex) {
    for (int c = 0; c < classes; ++c) {
      double z = w[static_cast<std::size_t>(c) * dim + dim - 1];
      const double* wc = w.data() + static_cast<std::size_t>(c) * dim;
      for (int j = 0; j < dim - 1; ++j) z += wc[j] * ex.image[j];
      logits[c] = z;
    }
    double mx = logits[0];
    for (int c = 1; c < classes; ++c) mx = std::max(mx, logits[c]);
    double zsum = 0.0;
    for (int c = 0; c < classes; ++c) {
      probs[c] = std::exp(logits[c] - mx);
      zsum += probs[c];
    }
    for (int c = 0; c < classes; ++c) probs[c] /= zsum;
  };
  for (int e = 0; e < epochs; ++e) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (int i : train_idx) {
      const auto& ex = ds.items[i];
      forward(ex);
      const int y = ex.attributes.at(attribute);
      for (int c = 0; c < classes; ++c) {
        const double d = probs[c] - (c == y ? 1.0 : 0.0);
        double* gc = grad.data() + static_cast<std::size_t>(c) * dim;
        for (int j = 0; j < dim - 1; ++j) gc[j] += d * ex.image[j];
        gc[dim - 1] += d;
      }
    }
    const double scale = lr / static_cast<double>(train_idx.size());
    for (std::size_t j = 0; j < w.size(); ++j) {
      vel[j] = 0.9 * vel[j] - scale * grad[j];
      w[j] += vel[j];
    }
  }
  auto accuracy = [&](const std::vector<int>& idx) {
    int hit = 0;
    for (int i : idx) {
      forward(ds.items[i]);
      int best = 0;
      for (int c = 1; c < classes; ++c)
        if (probs[c] > probs[best]) best = c;
      hit += best == ds.items[i].attributes.at(attribute);
    }
    return static_cast<double>(hit) / idx.size();
  };
  return {accuracy(train_idx), accuracy(test_idx)};
}

}  // namespace fairmoe
