// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fairmoe/checkpoint.hpp"
#include "fairmoe/encoder.hpp"
#include "fairmoe/gradcheck.hpp"
#include "fairmoe/losses.hpp"
#include "fairmoe/rng.hpp"

using namespace fairmoe;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;  // 4 patches + cls = 5 tokens
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.d_feat = 4;
  cfg.vocab = 16;
  cfg.text_len = 6;
  cfg.m1 = 2;
  cfg.m2 = 2;
  cfg.k1 = 1;
  cfg.k2 = 1;
  cfg.hidden_mult = 2;
  return cfg;
}

std::vector<double> random_image(int s, Rng& rng) {
  std::vector<double> img(static_cast<std::size_t>(s) * s);
  for (auto& v : img) v = rng.uniform(0.0, 1.0);
  return img;
}

}  // namespace

TEST_CASE("encode_image traces the documented shapes") {
  ModelConfig cfg;  // defaults: 16x16, patch 4, D=32, 2 blocks, d_feat 16
  FairMoeModel model(cfg, 1);
  Rng rng(2);
  auto img = random_image(cfg.image_size, rng);
  EncodeResult res = encode_image(model, img);
  CHECK(res.feature.shape() == std::vector<int>{16});
  REQUIRE(res.em_gates.has_value());
  CHECK(res.em_gates->sparse.shape() == std::vector<int>{17, 4});
  REQUIRE(res.fm_gates.has_value());
  CHECK(res.fm_gates->sparse.shape() == std::vector<int>{1, 4});
  for (double v : res.feature.values()) CHECK(std::isfinite(v));
}

TEST_CASE("encode_text traces the documented shapes") {
  ModelConfig cfg;
  FairMoeModel model(cfg, 1);
  std::vector<int> toks{1, 3, 4, 5, 10};
  EncodeResult res = encode_text(model, toks);
  CHECK(res.feature.shape() == std::vector<int>{16});
  REQUIRE(res.em_gates.has_value());
  CHECK(res.em_gates->sparse.shape() == std::vector<int>{16, 4});
  REQUIRE(res.fm_gates.has_value());
  CHECK(res.fm_gates->sparse.shape() == std::vector<int>{1, 4});
}

TEST_CASE("encode rejects malformed inputs") {
  FairMoeModel model(tiny_config(), 1);
  CHECK_THROWS_AS(encode_image(model, std::vector<double>(10, 0.0)), ContractError);
  std::vector<int> oov{1, 99};
  CHECK_THROWS_AS(encode_text(model, oov), ContractError);
  std::vector<int> too_long(7, 1);
  CHECK_THROWS_AS(encode_text(model, too_long), ContractError);
}

TEST_CASE("zero image encodes to a deterministic constant feature") {
  FairMoeModel model(tiny_config(), 3);
  std::vector<double> img(64, 0.0);
  EncodeResult a = encode_image(model, img);
  EncodeResult b = encode_image(model, img);
  CHECK(a.feature.values() == b.feature.values());
  for (double v : a.feature.values()) CHECK(std::isfinite(v));
}

TEST_CASE("all-padding text encodes deterministically") {
  FairMoeModel model(tiny_config(), 3);
  std::vector<int> empty;
  EncodeResult a = encode_text(model, empty);
  EncodeResult b = encode_text(model, empty);
  CHECK(a.feature.values() == b.feature.values());
  for (double v : a.feature.values()) CHECK(std::isfinite(v));
}

TEST_CASE("class-token feature ignores patch order when positions are zeroed") {
  ModelConfig cfg = tiny_config();
  FairMoeModel model(cfg, 5);
  Tensor pos = model.param("image.pos");
  pos.mutable_values().assign(pos.numel(), 0.0);

  Rng rng(6);
  auto img = random_image(cfg.image_size, rng);
  // Swap patches (0,0) and (1,1): blocks of 4x4 pixels.
  auto swapped = img;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c)
      std::swap(swapped[static_cast<std::size_t>(r) * 8 + c], swapped[static_cast<std::size_t>(4 + r) * 8 + 4 + c]);

  EncodeResult a = encode_image(model, img);
  EncodeResult b = encode_image(model, swapped);
  for (std::size_t i = 0; i < a.feature.numel(); ++i)
    CHECK(a.feature.values()[i] == Catch::Approx(b.feature.values()[i]).margin(1e-10));
}

TEST_CASE("padded tail content cannot influence the text feature") {
  ModelConfig cfg = tiny_config();
  FairMoeModel model(cfg, 7);
  std::vector<int> a{5, 7, 9, 9, 9, 9};
  std::vector<int> b{5, 7, 3, 1, 2, 8};
  EncodeResult ra = encode_text(model, a, 2);
  EncodeResult rb = encode_text(model, b, 2);
  CHECK(ra.feature.values() == rb.feature.values());

  std::vector<int> plain{5, 7};
  EncodeResult rp = encode_text(model, plain);
  CHECK(ra.feature.values() == rp.feature.values());
}

TEST_CASE("swapping the last block's MoE for a dense FFN changes only that block") {
  ModelConfig with = tiny_config();
  ModelConfig without = with;
  without.image_em = false;
  FairMoeModel m1(with, 11);
  FairMoeModel m2(without, 11);

  auto names = [](const FairMoeModel& m) {
    std::vector<std::string> out;
    for (const auto& [n, t] : m.named_params()) out.push_back(n);
    return out;
  };
  auto n1 = names(m1), n2 = names(m2);
  // Every difference between the two rosters lives in image.block0's MLP.
  for (const auto& n : n1) {
    const bool in_other = std::find(n2.begin(), n2.end(), n) != n2.end();
    if (!in_other) CHECK(n.find("image.block0.moe") == 0);
  }
  for (const auto& n : n2) {
    const bool in_other = std::find(n1.begin(), n1.end(), n) != n1.end();
    if (!in_other) CHECK(n.find("image.block0.ffn") == 0);
  }
  // Parameter accounting: MoE = gate + m1 bias-free experts; FFN = two
  // biased linear layers.
  const ModelConfig& c = with;
  const std::size_t moe_params = static_cast<std::size_t>(c.m1) * c.dim +
                                 static_cast<std::size_t>(c.m1) * (c.hidden() * c.dim + c.dim * c.hidden());
  const std::size_t ffn_params =
      static_cast<std::size_t>(c.hidden()) * c.dim + c.hidden() + static_cast<std::size_t>(c.dim) * c.hidden() + c.dim;
  CHECK(m1.parameter_count() - moe_params == m2.parameter_count() - ffn_params);
}

TEST_CASE("two-sample contrastive batch passes the end-to-end gradient check") {
  ModelConfig cfg = tiny_config();
  FairMoeModel model(cfg, 13);
  Rng rng(14);
  auto img0 = random_image(cfg.image_size, rng);
  auto img1 = random_image(cfg.image_size, rng);
  std::vector<int> txt0{1, 3, 4};
  std::vector<int> txt1{1, 2, 5};

  auto build = [&] {
    Tensor ifeat = concat_rows({as_row(encode_image(model, img0).feature), as_row(encode_image(model, img1).feature)});
    Tensor tfeat = concat_rows({as_row(encode_text(model, txt0).feature), as_row(encode_text(model, txt1).feature)});
    return contrastive_loss(ifeat, tfeat, model.inv_temperature());
  };
  auto report = finite_diff_check(build, model.named_params(), 1e-4, 1e-3);
  CHECK(report.total_checked > 0);
  CHECK(report.pass_fraction() >= 0.99);
}

TEST_CASE("model checkpoints round-trip bit-exactly") {
  namespace fs = std::filesystem;
  ModelConfig cfg = tiny_config();
  FairMoeModel model(cfg, 17);
  fs::path path = fs::temp_directory_path() / "fairmoe_test_model.ckpt";
  save_model(path, model);
  FairMoeModel restored = load_model(path);
  const auto& a = model.named_params();
  const auto& b = restored.named_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.values() == b[i].second.values());
  }
  Rng rng(18);
  auto img = random_image(cfg.image_size, rng);
  CHECK(encode_image(model, img).feature.values() == encode_image(restored, img).feature.values());
  fs::remove(path);
}

TEST_CASE("corrupted checkpoints fail the checksum") {
  namespace fs = std::filesystem;
  FairMoeModel model(tiny_config(), 19);
  fs::path path = fs::temp_directory_path() / "fairmoe_test_corrupt.ckpt";
  save_model(path, model);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    char byte = 0x5a;
    f.write(&byte, 1);
  }
  CHECK_THROWS_AS(read_checkpoint(path), IoError);
  fs::remove(path);
}
