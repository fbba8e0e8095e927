#pragma once

// Field-tagged binary container used for checkpoints and cached signatures.
//
//   "ADCK"            magic
//   u32 version       = 1
//   u32 entry count
//   per entry:
//     u32 len, bytes  name (UTF-8, unique)
//     u8  kind        1 u64, 2 f64, 3 string, 4 f32 tensor, 5 f64 tensor
//     u64 size        payload bytes
//     payload         u64 | f64 | raw bytes | { u32 rank, rank x u64 dims, values }
//
// Entries keep insertion order, so decode followed by encode reproduces the
// input byte for byte.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "adp/binary_io.hpp"
#include "adp/errors.hpp"
#include "adp/tensor.hpp"

namespace adp {

inline constexpr std::uint32_t kContainerVersion = 1;

class Container {
 public:
  enum class Kind : std::uint8_t { u64 = 1, f64 = 2, string = 3, tensor_f32 = 4, tensor_f64 = 5 };

  void put_u64(const std::string& name, std::uint64_t v) {
    io::ByteWriter w;
    w.u64(v);
    add(name, Kind::u64, w.take());
  }
  void put_f64(const std::string& name, double v) {
    io::ByteWriter w;
    w.f64(v);
    add(name, Kind::f64, w.take());
  }
  void put_string(const std::string& name, const std::string& v) {
    add(name, Kind::string, std::vector<std::uint8_t>(v.begin(), v.end()));
  }
  template <typename T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    io::ByteWriter w;
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (T v : t.values()) {
      if constexpr (std::is_same_v<T, float>) w.f32(v);
      else w.f64(v);
    }
    add(name, std::is_same_v<T, float> ? Kind::tensor_f32 : Kind::tensor_f64, w.take());
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  std::uint64_t get_u64(const std::string& name) const {
    io::ByteReader r(payload(name, Kind::u64));
    return r.u64(name);
  }
  double get_f64(const std::string& name) const {
    io::ByteReader r(payload(name, Kind::f64));
    return r.f64(name);
  }
  std::string get_string(const std::string& name) const {
    const auto& p = payload(name, Kind::string);
    return std::string(p.begin(), p.end());
  }
  template <typename T>
  Tensor<T> get_tensor(const std::string& name) const {
    constexpr Kind kind = std::is_same_v<T, float> ? Kind::tensor_f32 : Kind::tensor_f64;
    io::ByteReader r(payload(name, kind));
    const std::uint32_t rank = r.u32(name + " rank");
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
    Shape shape;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t d = r.u64(name + " dims");
      if (d != 0 && count > r.remaining() / d) throw FormatError("tensor '" + name + "' dims exceed payload");
      count *= d;
      shape.push_back(static_cast<std::size_t>(d));
    }
    std::vector<T> values(count);
    if constexpr (std::is_same_v<T, float>) r.f32_block(values.data(), count, name);
    else r.f64_block(values.data(), count, name);
    if (r.remaining() != 0) throw FormatError("tensor '" + name + "' payload has trailing bytes");
    return Tensor<T>(std::move(shape), std::move(values));
  }

  const std::vector<std::string>& names() const noexcept { return order_; }

  std::vector<std::uint8_t> encode() const {
    io::ByteWriter w;
    w.raw("ADCK", 4);
    w.u32(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(order_.size()));
    for (const auto& name : order_) {
      const Entry& e = entries_[index_.at(name)];
      w.str(name);
      w.u8(static_cast<std::uint8_t>(e.kind));
      w.u64(e.payload.size());
      w.raw(e.payload.data(), e.payload.size());
    }
    return w.take();
  }

  static Container decode(std::vector<std::uint8_t> bytes) {
    io::ByteReader r(std::move(bytes));
    r.need(4, "magic");
    std::string magic;
    for (int i = 0; i < 4; ++i) magic.push_back(static_cast<char>(r.u8("magic")));
    if (magic != "ADCK") throw FormatError("bad magic");
    const std::uint32_t version = r.u32("version");
    if (version != kContainerVersion) throw FormatError("unsupported version " + std::to_string(version));
    const std::uint32_t count = r.u32("entry count");
    Container c;
    for (std::uint32_t i = 0; i < count; ++i) {
      std::string name = r.str("entry name");
      const std::uint8_t kind = r.u8("entry kind");
      if (kind < 1 || kind > 5) throw FormatError("entry '" + name + "' has unknown kind");
      const std::uint64_t size = r.u64("entry size");
      r.need(size, "entry '" + name + "'");
      std::vector<std::uint8_t> payload(size);
      for (auto& b : payload) b = r.u8(name);
      c.add(name, static_cast<Kind>(kind), std::move(payload));
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after container entries");
    return c;
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, encode()); }
  static Container load(const std::filesystem::path& path) {
    try {
      return decode(io::read_file(path));
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }

 private:
  struct Entry {
    Kind kind;
    std::vector<std::uint8_t> payload;
  };

  void add(const std::string& name, Kind kind, std::vector<std::uint8_t> payload) {
    if (has(name)) throw FormatError("duplicate container entry '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({kind, std::move(payload)});
    order_.push_back(name);
  }

  const std::vector<std::uint8_t>& payload(const std::string& name, Kind kind) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw FormatError("missing container entry '" + name + "'");
    const Entry& e = entries_[it->second];
    if (e.kind != kind) throw FormatError("container entry '" + name + "' has unexpected kind");
    return e.payload;
  }

  std::vector<Entry> entries_;
  std::vector<std::string> order_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace adp
