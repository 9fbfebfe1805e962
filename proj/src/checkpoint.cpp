#include "mematch/checkpoint.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace mematch::ckpt_detail {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', 'A', 'T', 'C', 'H', 'K'};
constexpr std::uint32_t kVersion = 1;

// x86-64 little-endian host assumed; buffers are written raw.
template <class T>
void put(std::vector<unsigned char>& out, const T& v) {
  const auto* p = reinterpret_cast<const unsigned char*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::vector<unsigned char>& in, std::size_t& pos, const std::string& path) {
  if (pos + sizeof(T) > in.size()) throw IoError(concat(path, ": truncated checkpoint"));
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t n = 0; n < 256; ++n) {
    std::uint32_t c = n;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[n] = c;
  }
  return table;
}

}  // namespace

std::uint32_t crc32(const unsigned char* data, std::size_t n) {
  static const std::array<std::uint32_t, 256> table = make_crc_table();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void write_file(const std::string& path, const BlobList& entries) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kMagic, kMagic + sizeof(kMagic));
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, blob] : entries) {
    put(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put(out, static_cast<std::uint8_t>(blob.dtype));
    put(out, static_cast<std::uint8_t>(blob.shape.size()));
    for (int d : blob.shape) put(out, static_cast<std::int32_t>(d));
    put(out, offset);
    offset += blob.bytes.size();
  }
  for (const auto& [name, blob] : entries) {
    out.insert(out.end(), blob.bytes.begin(), blob.bytes.end());
  }
  put(out, crc32(out.data(), out.size()));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(concat("cannot write checkpoint: ", tmp));
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError(concat("short write to ", tmp));
  }
  std::filesystem::rename(tmp, path);
}

BlobList read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(concat("cannot open checkpoint: ", path));
  std::vector<unsigned char> in((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (in.size() < sizeof(kMagic) + sizeof(kVersion) + sizeof(std::uint32_t) * 2) {
    throw IoError(concat(path, ": truncated checkpoint"));
  }
  std::uint32_t stored = 0;
  std::memcpy(&stored, in.data() + in.size() - sizeof(stored), sizeof(stored));
  if (crc32(in.data(), in.size() - sizeof(stored)) != stored) {
    throw IoError(concat(path, ": checksum mismatch (corrupt or truncated checkpoint)"));
  }
  in.resize(in.size() - sizeof(stored));

  std::size_t pos = 0;
  if (std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IoError(concat(path, ": not a checkpoint file (bad magic)"));
  }
  pos += sizeof(kMagic);
  const auto version = get<std::uint32_t>(in, pos, path);
  if (version != kVersion) {
    throw IoError(concat(path, ": unsupported checkpoint version ", version, " (expected ",
                         kVersion, ")"));
  }
  const auto count = get<std::uint32_t>(in, pos, path);
  struct Pending {
    std::string name;
    Blob blob;
    std::uint64_t offset = 0;
    std::size_t bytes = 0;
  };
  std::vector<Pending> pending(count);
  for (auto& p : pending) {
    const auto name_len = get<std::uint16_t>(in, pos, path);
    if (pos + name_len > in.size()) throw IoError(concat(path, ": truncated checkpoint"));
    p.name.assign(reinterpret_cast<const char*>(in.data() + pos), name_len);
    pos += name_len;
    const auto dtype = get<std::uint8_t>(in, pos, path);
    if (dtype > 3) throw IoError(concat(path, ": bad dtype tag ", int(dtype)));
    p.blob.dtype = static_cast<Dtype>(dtype);
    const auto ndim = get<std::uint8_t>(in, pos, path);
    std::size_t numel = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto extent = get<std::int32_t>(in, pos, path);
      if (extent < 1) throw IoError(concat(path, ": bad tensor extent ", extent));
      p.blob.shape.push_back(extent);
      numel *= static_cast<std::size_t>(extent);
    }
    p.offset = get<std::uint64_t>(in, pos, path);
    const std::size_t elem =
        (p.blob.dtype == Dtype::f32) ? sizeof(float)
                                     : sizeof(double);  // i64/u64 are also 8 bytes
    p.bytes = numel * elem;
  }
  const std::size_t payload_start = pos;
  BlobList entries;
  entries.reserve(count);
  for (auto& p : pending) {
    const std::size_t begin = payload_start + p.offset;
    if (begin + p.bytes > in.size()) throw IoError(concat(path, ": truncated checkpoint"));
    p.blob.bytes.assign(in.begin() + begin, in.begin() + begin + p.bytes);
    entries.emplace_back(std::move(p.name), std::move(p.blob));
  }
  return entries;
}

const Blob& find_blob(const BlobList& entries, const std::string& name, const std::string& path) {
  for (const auto& [n, b] : entries) {
    if (n == name) return b;
  }
  throw IoError(concat(path, ": checkpoint is missing tensor '", name, "'"));
}

}  // namespace mematch::ckpt_detail
