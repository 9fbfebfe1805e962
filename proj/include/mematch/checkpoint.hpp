#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "mematch/model.hpp"
#include "mematch/trainer.hpp"

namespace mematch {

namespace ckpt_detail {

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1, i64 = 2, u64 = 3 };

struct Blob {
  Dtype dtype = Dtype::f32;
  Shape shape;
  std::vector<unsigned char> bytes;
};

using BlobList = std::vector<std::pair<std::string, Blob>>;

// Little-endian binary container: magic, version, manifest, raw buffers,
// trailing CRC32. Writing goes through a temp file + rename.
void write_file(const std::string& path, const BlobList& entries);

// Verifies the checksum before returning anything; throws IoError on a
// short/corrupt file and on version mismatch.
BlobList read_file(const std::string& path);

std::uint32_t crc32(const unsigned char* data, std::size_t n);

template <class S>
constexpr Dtype dtype_of() {
  if constexpr (std::is_same_v<S, float>) return Dtype::f32;
  else if constexpr (std::is_same_v<S, double>) return Dtype::f64;
  else static_assert(sizeof(S) == 0, "unsupported scalar type");
}

template <class S>
Blob tensor_blob(const Tensor<S>& t) {
  Blob b;
  b.dtype = dtype_of<S>();
  b.shape = t.shape();
  b.bytes.resize(t.size() * sizeof(S));
  std::memcpy(b.bytes.data(), t.data(), b.bytes.size());
  return b;
}

inline Blob scalar_blob_u64(std::uint64_t v) {
  Blob b;
  b.dtype = Dtype::u64;
  b.shape = {1};
  b.bytes.resize(sizeof(v));
  std::memcpy(b.bytes.data(), &v, sizeof(v));
  return b;
}

inline Blob scalar_blob_i64(std::int64_t v) {
  Blob b;
  b.dtype = Dtype::i64;
  b.shape = {1};
  b.bytes.resize(sizeof(v));
  std::memcpy(b.bytes.data(), &v, sizeof(v));
  return b;
}

const Blob& find_blob(const BlobList& entries, const std::string& name, const std::string& path);

template <class S>
void restore_tensor(const BlobList& entries, const std::string& name, const std::string& path,
                    Tensor<S>& into) {
  const Blob& b = find_blob(entries, name, path);
  if (b.dtype != dtype_of<S>()) {
    throw IoError(concat(path, ": tensor '", name, "' has wrong dtype"));
  }
  if (b.shape != into.shape()) {
    throw IoError(concat(path, ": tensor '", name, "' has shape ", shape_str(b.shape),
                         ", model expects ", shape_str(into.shape())));
  }
  std::memcpy(into.data(), b.bytes.data(), b.bytes.size());
}

}  // namespace ckpt_detail

// Serializes every trainable tensor, the batchnorm running statistics, the
// Adam moments, the step counter, and the run seed.
template <class S>
void save_checkpoint(ModelParams<S>& params, OptimState<S>& opt, std::uint64_t seed,
                     const std::string& path) {
  using namespace ckpt_detail;
  BlobList entries;
  auto named = params.named_params();
  for (auto& [name, t] : named) entries.emplace_back("param." + name, tensor_blob(t));
  for (auto& [name, t] : params.named_stats()) entries.emplace_back("stat." + name, tensor_blob(t));
  for (std::size_t i = 0; i < named.size(); ++i) {
    entries.emplace_back("adam.m." + named[i].first, tensor_blob(opt.m[i]));
    entries.emplace_back("adam.v." + named[i].first, tensor_blob(opt.v[i]));
  }
  entries.emplace_back("meta.step", scalar_blob_i64(opt.step));
  entries.emplace_back("meta.seed", scalar_blob_u64(seed));
  write_file(path, entries);
}

// Restores a checkpoint into an already-constructed model/optimizer of the
// same geometry; nothing is touched until the whole file has validated.
template <class S>
void load_checkpoint(ModelParams<S>& params, OptimState<S>& opt, std::uint64_t& seed,
                     const std::string& path) {
  using namespace ckpt_detail;
  const BlobList entries = read_file(path);
  auto named = params.named_params();
  if (opt.m.size() != named.size()) {
    throw ShapeError(concat("load_checkpoint: optimizer tracks ", opt.m.size(),
                            " tensors, model has ", named.size()));
  }
  // validation pass (shapes/dtypes/presence), then copy pass
  for (auto& [name, t] : named) {
    const Blob& b = find_blob(entries, "param." + name, path);
    if (b.dtype != dtype_of<S>() || b.shape != t.shape()) {
      throw IoError(concat(path, ": tensor 'param.", name, "' does not match the model"));
    }
  }
  for (auto& [name, t] : named) restore_tensor(entries, "param." + name, path, t);
  for (auto& [name, t] : params.named_stats()) restore_tensor(entries, "stat." + name, path, t);
  for (std::size_t i = 0; i < named.size(); ++i) {
    restore_tensor(entries, "adam.m." + named[i].first, path, opt.m[i]);
    restore_tensor(entries, "adam.v." + named[i].first, path, opt.v[i]);
  }
  for (auto& st : params.backbone.bn) st.initialized = true;
  std::int64_t step = 0;
  std::memcpy(&step, find_blob(entries, "meta.step", path).bytes.data(), sizeof(step));
  opt.step = static_cast<long>(step);
  std::memcpy(&seed, find_blob(entries, "meta.seed", path).bytes.data(), sizeof(seed));
}

}  // namespace mematch
