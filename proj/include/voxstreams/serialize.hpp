#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "voxstreams/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

namespace voxstreams::serialize {

// Atomic file write: temp file in the same directory, then rename. A crash
// mid-write leaves only the temp file behind, never a corrupt final file.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw RuntimeError("atomic_write: cannot open " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw RuntimeError("atomic_write: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw RuntimeError("atomic_write: rename failed for " + path.string() + ": " + ec.message());
  }
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw RuntimeError("read_all: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

// Raw little-endian float32 array files (one per record/roi and per image).
inline void write_f32_file(const std::filesystem::path& path, const std::vector<float>& values) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw RuntimeError("write_f32_file: cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(values.data()),
          static_cast<std::streamsize>(values.size() * sizeof(float)));
  if (!f) throw RuntimeError("write_f32_file: write failed for " + path.string());
}

inline std::vector<float> read_f32_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw RuntimeError("read_f32_file: cannot open " + path.string());
  const auto size = static_cast<std::size_t>(f.tellg());
  if (size % sizeof(float) != 0) {
    throw RuntimeError("read_f32_file: size not a multiple of 4 in " + path.string());
  }
  f.seekg(0);
  std::vector<float> values(size / sizeof(float));
  f.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(size));
  if (!f) throw RuntimeError("read_f32_file: short read in " + path.string());
  return values;
}

// Self-describing checkpoint container: a JSON meta block (model config,
// seed, training-step counter) followed by named parameter tensors stored
// as little-endian float32.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw RuntimeError("checkpoint: missing tensor '" + name + "'");
  }
};

namespace detail {

constexpr char kMagic[8] = {'V', 'X', 'S', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void append_pod(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_pod(const std::string& bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw RuntimeError("checkpoint: truncated file");
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace detail

inline std::string checkpoint_to_bytes(const Checkpoint& ckpt) {
  std::string out;
  out.append(detail::kMagic, sizeof(detail::kMagic));
  detail::append_pod<std::uint32_t>(out, 1);  // format version
  const std::string meta = ckpt.meta.dump();
  detail::append_pod<std::uint64_t>(out, meta.size());
  out.append(meta);
  detail::append_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    detail::append_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::append_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::append_pod<std::int64_t>(out, d);
    for (double v : t.data) detail::append_pod<float>(out, static_cast<float>(v));
  }
  return out;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  std::size_t pos = 0;
  if (bytes.size() < sizeof(detail::kMagic) ||
      std::memcmp(bytes.data(), detail::kMagic, sizeof(detail::kMagic)) != 0) {
    throw RuntimeError("checkpoint: bad magic (not a checkpoint file)");
  }
  pos += sizeof(detail::kMagic);
  const auto version = detail::read_pod<std::uint32_t>(bytes, pos);
  if (version != 1) throw RuntimeError("checkpoint: unsupported format version");
  const auto meta_len = detail::read_pod<std::uint64_t>(bytes, pos);
  if (pos + meta_len > bytes.size()) throw RuntimeError("checkpoint: truncated meta block");
  Checkpoint ckpt;
  ckpt.meta = nlohmann::json::parse(bytes.substr(pos, meta_len));
  pos += meta_len;
  const auto n_tensors = detail::read_pod<std::uint32_t>(bytes, pos);
  ckpt.tensors.reserve(n_tensors);
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const auto name_len = detail::read_pod<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw RuntimeError("checkpoint: truncated tensor name");
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto ndim = detail::read_pod<std::uint32_t>(bytes, pos);
    std::vector<std::int64_t> shape(ndim);
    for (auto& d : shape) d = detail::read_pod<std::int64_t>(bytes, pos);
    Tensor t(shape);
    for (auto& v : t.data) v = static_cast<double>(detail::read_pod<float>(bytes, pos));
    ckpt.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (pos != bytes.size()) throw RuntimeError("checkpoint: trailing bytes");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  atomic_write(path, checkpoint_to_bytes(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_bytes(read_all(path));
}

// Rounds tensor values to their float32 representation. Applied to model
// parameters at the end of training so that save -> load reproduces
// bit-identical predictions.
inline void round_to_f32(Tensor& t) {
  for (auto& v : t.data) v = static_cast<double>(static_cast<float>(v));
}

inline std::string hex_digest(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return s;
}

inline std::string file_digest(const std::filesystem::path& path) {
  return hex_digest(fnv1a64(read_all(path)));
}

}  // namespace voxstreams::serialize
