#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "vbsd/error.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/tensor.hpp"

namespace vbsd {

// Named parameter set with stable insertion order (checkpoint byte layout and
// gradient reduction order both depend on it).
class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    require(!index_.contains(name), "ParameterStore: duplicate parameter " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    values_.push_back(std::move(t));
    return values_.back();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor& get(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ParameterStore: unknown parameter " + name);
    return values_[it->second];
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "ParameterStore: unknown parameter " + name);
    return values_[it->second];
  }

  std::size_t count() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const Tensor& t : values_) n += t.size();
    return n;
  }

  // Flat view across all parameters in insertion order (finite-difference
  // checks treat the whole model as one vector).
  Tensor flatten() const {
    Tensor out({total_elements()});
    std::size_t k = 0;
    for (const Tensor& t : values_)
      for (double x : t.data()) out[k++] = x;
    return out;
  }

  void unflatten(const Tensor& flat) {
    require(flat.size() == total_elements(), "ParameterStore::unflatten: size mismatch");
    std::size_t k = 0;
    for (Tensor& t : values_)
      for (double& x : t.data()) x = flat[k++];
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Checkpoint layout: magic "VBSD", u32 version, then one record per parameter
// in store order: u32 name length, name bytes, u32 rank, u64 extents,
// little-endian f64 payload. Read back until EOF.
namespace checkpoint {

constexpr char kMagic[4] = {'V', 'B', 'S', 'D'};
constexpr std::uint32_t kVersion = 1;

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  // Serialize little-endian regardless of host order.
  unsigned char buf[sizeof(T)];
  std::uint64_t bits;
  if constexpr (sizeof(T) == 8) {
    std::memcpy(&bits, &v, 8);
  } else {
    bits = std::uint64_t(v);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = (unsigned char)((bits >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
bool get(std::istream& is, T& v) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) return false;
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= std::uint64_t(buf[i]) << (8 * i);
  if constexpr (sizeof(T) == 8) {
    std::memcpy(&v, &bits, 8);
  } else {
    v = T(bits);
  }
  return true;
}

}  // namespace detail

inline void save(const ParameterStore& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(bool(os), "checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 4);
  detail::put<std::uint32_t>(os, kVersion);
  for (std::size_t i = 0; i < store.count(); ++i) {
    const std::string& name = store.name(i);
    const Tensor& t = store.value(i);
    detail::put<std::uint32_t>(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::put<std::uint32_t>(os, std::uint32_t(t.rank()));
    for (std::size_t d : t.shape()) detail::put<std::uint64_t>(os, std::uint64_t(d));
    for (double x : t.data()) detail::put<double>(os, x);
  }
  require(bool(os), "checkpoint: write failed for " + path);
}

// Loads into an existing store; every record must name a known parameter with
// a matching shape, and every parameter must be covered exactly once.
inline void load(ParameterStore& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "checkpoint: cannot open " + path);
  char magic[4];
  require(bool(is.read(magic, 4)) && std::memcmp(magic, kMagic, 4) == 0,
          "checkpoint: bad magic in " + path);
  std::uint32_t version = 0;
  require(detail::get(is, version), "checkpoint: truncated header in " + path);
  require(version == kVersion,
          "checkpoint: unsupported version " + std::to_string(version) + " in " + path);
  std::vector<bool> seen(store.count(), false);
  std::uint32_t name_len = 0;
  while (detail::get(is, name_len)) {
    std::string name(name_len, '\0');
    require(bool(is.read(name.data(), name_len)), "checkpoint: truncated name in " + path);
    std::uint32_t rank = 0;
    require(detail::get(is, rank), "checkpoint: truncated record for " + name + " in " + path);
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
      std::uint64_t e = 0;
      require(detail::get(is, e), "checkpoint: truncated extents for " + name + " in " + path);
      d = std::size_t(e);
    }
    require(store.contains(name), "checkpoint: unknown parameter " + name + " in " + path);
    Tensor& t = store.get(name);
    require(t.shape() == shape, "checkpoint: shape mismatch for " + name + ": file has " +
                                    Tensor::shape_str(shape) + ", model has " +
                                    Tensor::shape_str(t.shape()));
    for (double& x : t.data())
      require(detail::get(is, x), "checkpoint: truncated payload for " + name + " in " + path);
    for (std::size_t i = 0; i < store.count(); ++i)
      if (store.name(i) == name) {
        require(!seen[i], "checkpoint: duplicate parameter " + name + " in " + path);
        seen[i] = true;
      }
  }
  for (std::size_t i = 0; i < store.count(); ++i)
    require(seen[i], "checkpoint: missing parameter " + store.name(i) + " in " + path);
}

}  // namespace checkpoint
}  // namespace vbsd
