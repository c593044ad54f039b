// .mnxw weight files.
//
//   "MNXW" | u32 version = 1 | u32 count
//   count x { u16 name_len | name (UTF-8) | u8 dtype (0 = f32) | u8 ndim | u32 dims[ndim] | f32 payload }
//
// All integers and floats little-endian. Tensors are written in store order,
// so save -> load -> save reproduces the file byte for byte.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "mnx/model.hpp"

namespace mnx::inline MNX_ABI {

class WeightFormatError : public WeightError {
 public:
  using WeightError::WeightError;
};
class BadMagicError : public WeightFormatError {
 public:
  using WeightFormatError::WeightFormatError;
};
class TruncatedFileError : public WeightFormatError {
 public:
  using WeightFormatError::WeightFormatError;
};
class DuplicateNameError : public WeightFormatError {
 public:
  using WeightFormatError::WeightFormatError;
};

inline constexpr char kWeightMagic[4] = {'M', 'N', 'X', 'W'};
inline constexpr std::uint32_t kWeightVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : b_(bytes), src_(std::move(source)) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n) {
      throw TruncatedFileError(src_ + ": truncated while reading " + what + " at byte " + std::to_string(pos_));
    }
  }
  const std::string& b_;
  std::string src_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_weights(const WeightStore& store) {
  std::string out(kWeightMagic, 4);
  detail::put_le<std::uint32_t>(out, kWeightVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store.entries()) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw WeightError("weight name too long: " + name);
    if (t.ndim() > 255) throw WeightError("tensor '" + name + "' has too many dimensions");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(0);  // dtype f32
    out.push_back(static_cast<char>(t.ndim()));
    for (auto d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (Real v : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline WeightStore deserialize_weights(const std::string& bytes, const std::string& source = "weights") {
  detail::ByteReader r(bytes, source);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kWeightMagic, 4) != 0) {
    throw BadMagicError(source + ": not an MNXW weight file (bad magic)");
  }
  r.bytes(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kWeightVersion) {
    throw WeightFormatError(source + ": unsupported version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name = r.bytes(len, "name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw WeightFormatError(source + ": tensor '" + name + "' has unsupported dtype " + std::to_string(dtype));
    const auto ndim = r.get<std::uint8_t>("ndim");
    Shape shape;
    std::uint64_t n = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto v = r.get<std::uint32_t>("dims");
      if (v == 0) throw WeightFormatError(source + ": tensor '" + name + "' has a zero dimension");
      shape.push_back(v);
      n *= v;
    }
    if (n > (bytes.size() - r.pos()) / 4) {
      throw TruncatedFileError(source + ": truncated in payload of '" + name + "'");
    }
    std::vector<Real> values(n);
    for (auto& v : values) v = static_cast<Real>(std::bit_cast<float>(r.get<std::uint32_t>("payload")));
    if (store.contains(name)) throw DuplicateNameError(source + ": duplicate tensor name '" + name + "'");
    store.add(name, Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw WeightFormatError(source + ": trailing bytes after " + std::to_string(count) + " tensors");
  return store;
}

inline void save_weights(const WeightStore& store, const std::string& path) {
  const std::string bytes = serialize_weights(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WeightError("write to '" + path + "' failed");
}

inline WeightStore load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes, path);
}

}  // namespace mnx
