#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "glyphdiff/nn.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff {

// GMCK container: magic "GMCK", version u32, entry count u32, then per entry
// name length u32 + UTF-8 name, dtype tag u8 (0=f32, 1=f64), rank u32,
// extents u32[], little-endian payload. Entries are written sorted by name.

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::uint8_t dtype = 0;  // 0=f32, 1=f64
  Shape shape;
  std::vector<double> data;  // held widened; narrowed on f32 write
};

namespace detail {

template <typename V>
inline void write_raw(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
inline V read_raw(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::map<std::string, CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open for write: " + path);
  os.write("GMCK", 4);
  detail::write_raw<std::uint32_t>(os, kCheckpointVersion);
  detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, e] : entries) {  // std::map iterates name-sorted
    detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_raw<std::uint8_t>(os, e.dtype);
    detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (int ext : e.shape) detail::write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(ext));
    if (e.dtype == 0) {
      for (double d : e.data) {
        float f = static_cast<float>(d);
        detail::write_raw<float>(os, f);
      }
    } else {
      for (double d : e.data) detail::write_raw<double>(os, d);
    }
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline std::map<std::string, CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "GMCK", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  const auto version = detail::read_raw<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::read_raw<std::uint32_t>(is);
  std::map<std::string, CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto name_len = detail::read_raw<std::uint32_t>(is);
    e.name.resize(name_len);
    is.read(e.name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated name");
    e.dtype = detail::read_raw<std::uint8_t>(is);
    if (e.dtype > 1) throw std::runtime_error("checkpoint: unknown dtype tag");
    const auto rank = detail::read_raw<std::uint32_t>(is);
    std::int64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto ext = detail::read_raw<std::uint32_t>(is);
      e.shape.push_back(static_cast<int>(ext));
      n *= ext;
    }
    e.data.resize(static_cast<std::size_t>(n));
    if (e.dtype == 0) {
      for (auto& d : e.data) d = static_cast<double>(detail::read_raw<float>(is));
    } else {
      for (auto& d : e.data) d = detail::read_raw<double>(is);
    }
    entries.emplace(e.name, std::move(e));
  }
  return entries;
}

template <typename T>
inline std::map<std::string, CheckpointEntry> entries_from_params(const ParamStore<T>& params) {
  std::map<std::string, CheckpointEntry> out;
  for (const auto& [name, t] : params.all()) {
    CheckpointEntry e;
    e.name = name;
    e.dtype = std::is_same_v<T, float> ? 0 : 1;
    e.shape = t.shape();
    e.data.assign(t.data().begin(), t.data().end());
    out.emplace(name, std::move(e));
  }
  return out;
}

template <typename T>
inline void save_params(const std::string& path, const ParamStore<T>& params) {
  save_checkpoint(path, entries_from_params(params));
}

// Load values into already-constructed parameters; shapes must match.
// `prefix` restricts which checkpoint entries are consumed.
template <typename T>
inline void load_params(const std::map<std::string, CheckpointEntry>& entries,
                        ParamStore<T>& params, const std::string& prefix = "") {
  for (auto& [name, t] : params.all_mutable()) {
    if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("checkpoint: missing entry " + name);
    const auto& e = it->second;
    if (e.shape != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file " +
                               shape_str(e.shape) + " vs model " + shape_str(t.shape()));
    auto& v = t.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(e.data[i]);
  }
}

}  // namespace glyphdiff
