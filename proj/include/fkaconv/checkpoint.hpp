#pragma once

// FKAC1 tensor container.
//
//   "FKAC1"                          5 bytes
//   u32 metadata length, bytes       free-form UTF-8 (JSON by convention)
//   u32 entry count
//   per entry: u32 name length, name bytes, u32 rank, u64 dims[rank], u8 dtype
//   payloads, in header order, little-endian IEEE-754 (dtype 0 = f32, 1 = f64)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "fkaconv/error.hpp"
#include "fkaconv/tensor.hpp"

namespace fkac {

inline constexpr char kCheckpointMagic[] = "FKAC1";

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

/// Writes `bytes` next to `path` and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                  std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
  const Bits b = std::bit_cast<Bits>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((b >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <class U>
  U get() {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                                    std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint8_t>>;
    need(sizeof(U));
    Bits b = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      b |= static_cast<Bits>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<U>(b);
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw Error("checkpoint truncated at byte " + std::to_string(pos_));
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct CheckpointEntry {
  std::string name;
  Shape shape;
  DType dtype = DType::kF32;
  std::vector<double> values;

  template <class T>
  Tensor<T> as_tensor() const {
    return Tensor<T>(shape, std::vector<T>(values.begin(), values.end()));
  }
};

struct Checkpoint {
  std::string metadata;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry& at(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw Error("checkpoint has no entry named '" + name + "'");
  }

  bool contains(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return true;
    return false;
  }
};

template <class T>
struct TensorRef {
  std::string name;
  const Tensor<T>* tensor;
};

template <class T>
std::string encode_checkpoint(const std::vector<TensorRef<T>>& tensors, const std::string& metadata) {
  std::string out(kCheckpointMagic, 5);
  detail::put_le(out, static_cast<std::uint32_t>(metadata.size()));
  out += metadata;
  detail::put_le(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_le(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    const auto& s = t.tensor->shape();
    detail::put_le(out, static_cast<std::uint32_t>(s.rank()));
    for (auto d : s.dims()) detail::put_le(out, static_cast<std::uint64_t>(d));
    detail::put_le(out, static_cast<std::uint8_t>(dtype_of<T>()));
  }
  for (const auto& t : tensors)
    for (T v : t.tensor->values()) detail::put_le(out, v);
  return out;
}

inline Checkpoint decode_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  if (r.get_string(5) != std::string(kCheckpointMagic, 5)) throw Error("not an FKAC1 checkpoint");
  Checkpoint ck;
  ck.metadata = r.get_string(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  ck.entries.resize(count);
  for (auto& e : ck.entries) {
    e.name = r.get_string(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > Shape::kMaxRank) throw Error("checkpoint entry '" + e.name + "' has invalid rank");
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    e.shape = Shape(std::move(dims));
    const auto dt = r.get<std::uint8_t>();
    if (dt > 1) throw Error("checkpoint entry '" + e.name + "' has unknown dtype " + std::to_string(dt));
    e.dtype = static_cast<DType>(dt);
  }
  for (auto& e : ck.entries) {
    e.values.resize(e.shape.numel());
    for (auto& v : e.values)
      v = e.dtype == DType::kF32 ? static_cast<double>(r.get<float>()) : r.get<double>();
  }
  if (!r.at_end()) throw Error("trailing bytes after checkpoint payload");
  return ck;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<TensorRef<T>>& tensors,
                     const std::string& metadata = {}) {
  write_file_atomic(path, encode_checkpoint(tensors, metadata));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace fkac
