// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint container: a JSON manifest (version, config echo,
// scalar state) followed by named flat blocks of little-endian f64 or u64
// payloads, with a trailing FNV-1a checksum. Round-trips are bit-exact.
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairmoe/encoder.hpp"
#include "fairmoe/errors.hpp"
#include "fairmoe/rng.hpp"

namespace fairmoe {

struct CheckpointBlock {
  std::string name;
  std::uint8_t dtype = 0;  // 0 = f64, 1 = u64
  std::vector<int> dims;
  std::vector<double> f64;
  std::vector<std::uint64_t> u64;
};

struct CheckpointData {
  nlohmann::json manifest;
  std::vector<CheckpointBlock> blocks;

  CheckpointBlock& add_f64(const std::string& name, std::vector<int> dims, std::vector<double> data) {
    blocks.push_back({name, 0, std::move(dims), std::move(data), {}});
    return blocks.back();
  }
  CheckpointBlock& add_u64(const std::string& name, std::vector<std::uint64_t> data) {
    blocks.push_back({name, 1, {static_cast<int>(data.size())}, {}, std::move(data)});
    return blocks.back();
  }
  const CheckpointBlock* find(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return &b;
    return nullptr;
  }
  const CheckpointBlock& at(const std::string& name) const {
    const CheckpointBlock* b = find(name);
    if (b == nullptr) throw SchemaError("checkpoint: missing block " + name);
    return *b;
  }
};

namespace detail {

constexpr char kCkptMagic[4] = {'F', 'M', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

inline void put_bytes(std::vector<std::uint8_t>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}
template <typename T>
void put_scalar(std::vector<std::uint8_t>& out, T v) {
  put_bytes(out, &v, sizeof(T));
}

class ByteReader {
public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  void read(void* dst, std::size_t n) {
    if (off_ + n > n_) throw ParseError("checkpoint: truncated");
    std::memcpy(dst, p_ + off_, n);
    off_ += n;
  }
  template <typename T>
  T scalar() {
    T v;
    read(&v, sizeof(T));
    return v;
  }
  std::size_t offset() const { return off_; }

private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
};

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const CheckpointData& ckpt) {
  std::vector<std::uint8_t> buf;
  detail::put_bytes(buf, detail::kCkptMagic, 4);
  detail::put_scalar<std::uint32_t>(buf, detail::kCkptVersion);
  const std::string manifest = ckpt.manifest.dump();
  detail::put_scalar<std::uint64_t>(buf, manifest.size());
  detail::put_bytes(buf, manifest.data(), manifest.size());
  detail::put_scalar<std::uint32_t>(buf, static_cast<std::uint32_t>(ckpt.blocks.size()));
  for (const auto& b : ckpt.blocks) {
    detail::put_scalar<std::uint32_t>(buf, static_cast<std::uint32_t>(b.name.size()));
    detail::put_bytes(buf, b.name.data(), b.name.size());
    detail::put_scalar<std::uint8_t>(buf, b.dtype);
    detail::put_scalar<std::uint32_t>(buf, static_cast<std::uint32_t>(b.dims.size()));
    for (int d : b.dims) detail::put_scalar<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    if (b.dtype == 0) {
      detail::put_scalar<std::uint64_t>(buf, b.f64.size());
      detail::put_bytes(buf, b.f64.data(), b.f64.size() * sizeof(double));
    } else {
      detail::put_scalar<std::uint64_t>(buf, b.u64.size());
      detail::put_bytes(buf, b.u64.data(), b.u64.size() * sizeof(std::uint64_t));
    }
  }
  const std::uint64_t checksum = fnv1a64(buf.data(), buf.size());
  detail::put_scalar<std::uint64_t>(buf, checksum);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path.string());
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open checkpoint: " + path.string());
  const auto size = static_cast<std::size_t>(f.tellg());
  if (size < 4 + 4 + 8 + 8) throw ParseError("checkpoint: file too small");
  std::vector<std::uint8_t> buf(size);
  f.seekg(0);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));

  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + size - 8, 8);
  if (fnv1a64(buf.data(), size - 8) != stored) throw IoError("checkpoint: checksum mismatch (corrupted file)");

  detail::ByteReader r(buf.data(), size - 8);
  char magic[4];
  r.read(magic, 4);
  if (std::memcmp(magic, detail::kCkptMagic, 4) != 0) throw ParseError("checkpoint: bad magic");
  const auto version = r.scalar<std::uint32_t>();
  if (version != detail::kCkptVersion) throw ParseError("checkpoint: unsupported version");
  const auto mlen = r.scalar<std::uint64_t>();
  std::string manifest(mlen, '\0');
  r.read(manifest.data(), mlen);
  CheckpointData out;
  try {
    out.manifest = nlohmann::json::parse(manifest);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint manifest: ") + e.what());
  }
  const auto n_blocks = r.scalar<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    CheckpointBlock b;
    const auto nlen = r.scalar<std::uint32_t>();
    b.name.resize(nlen);
    r.read(b.name.data(), nlen);
    b.dtype = r.scalar<std::uint8_t>();
    const auto ndim = r.scalar<std::uint32_t>();
    for (std::uint32_t d = 0; d < ndim; ++d) b.dims.push_back(static_cast<int>(r.scalar<std::uint32_t>()));
    const auto count = r.scalar<std::uint64_t>();
    if (b.dtype == 0) {
      b.f64.resize(count);
      r.read(b.f64.data(), count * sizeof(double));
    } else {
      b.u64.resize(count);
      r.read(b.u64.data(), count * sizeof(std::uint64_t));
    }
    out.blocks.push_back(std::move(b));
  }
  return out;
}

// Snapshot of every named parameter of a model.
inline void add_model_params(CheckpointData& ckpt, const FairMoeModel& model, const std::string& prefix = "") {
  for (const auto& [name, t] : model.named_params()) ckpt.add_f64(prefix + name, t.shape(), t.values());
}

// Writes parameter values back into an existing model; shapes must agree.
inline void load_model_params(const CheckpointData& ckpt, FairMoeModel& model, const std::string& prefix = "") {
  for (const auto& [name, t] : model.named_params()) {
    const CheckpointBlock& b = ckpt.at(prefix + name);
    if (b.dims != t.shape() || b.f64.size() != t.numel())
      throw SchemaError("checkpoint: shape mismatch for " + name);
    Tensor handle = t;  // shallow handle onto the shared parameter node
    handle.mutable_values() = b.f64;
  }
}

// Model-only checkpoint (the encoder wire format): manifest carries the
// config echo, blocks carry the parameters.
inline void save_model(const std::filesystem::path& path, const FairMoeModel& model) {
  CheckpointData ckpt;
  ckpt.manifest = {{"kind", "model"}, {"config", model.config()}};
  add_model_params(ckpt, model);
  write_checkpoint(path, ckpt);
}

inline FairMoeModel load_model(const std::filesystem::path& path, std::uint64_t seed = 0) {
  CheckpointData ckpt = read_checkpoint(path);
  ModelConfig cfg = ckpt.manifest.at("config").get<ModelConfig>();
  FairMoeModel model(cfg, seed);
  load_model_params(ckpt, model);
  return model;
}

}  // namespace fairmoe
