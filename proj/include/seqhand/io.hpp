#pragma once

// Little-endian binary records with a trailing CRC-32, and the parameter
// checkpoint built on them. Layouts are specified in docs/formats.md.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "seqhand/tensor.hpp"

namespace seqhand::io {

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void magic(const char (&m)[5]) { bytes(m, 4); }
  void u32(std::uint32_t v) { le(v); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) { le(v); }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <class Range>
  void f32s(const Range& values) {
    for (const auto v : values) f32(static_cast<float>(v));
  }

  // Appends the CRC-32 of everything written so far.
  std::vector<std::uint8_t> finish() {
    u32(crc32_of(buf_.data(), buf_.size()));
    return std::move(buf_);
  }

 private:
  template <class U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  // Verifies the trailing checksum; `what` names the source in errors.
  Reader(std::vector<std::uint8_t> data, std::string what) : buf_(std::move(data)), what_(std::move(what)) {
    if (buf_.size() < 4) fail("truncated file");
    end_ = buf_.size() - 4;
    std::uint32_t stored = 0;
    for (std::size_t i = 0; i < 4; ++i) stored |= std::uint32_t(buf_[end_ + i]) << (8 * i);
    if (stored != crc32_of(buf_.data(), end_)) fail("checksum mismatch");
  }

  void expect_magic(const char (&m)[5]) {
    need(4);
    if (std::memcmp(buf_.data() + pos_, m, 4) != 0) fail(std::string("bad magic, expected ") + m);
    pos_ += 4;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(le<std::uint32_t>()); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  template <class T>
  void f32s(T* out, std::size_t n) {
    need(n * 4);
    for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(f32());
  }

  bool at_end() const { return pos_ == end_; }
  std::size_t remaining() const { return end_ - pos_; }
  [[noreturn]] void fail(const std::string& msg) const { throw IoError(what_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) fail("truncated record");
  }
  template <class U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(buf_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::vector<std::uint8_t> buf_;
  std::string what_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;
};

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Checkpoint: "STHP", version, then (name, rank, dims, f32 data) records.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  Shape shape;
  std::vector<float> data;
};

using Checkpoint = std::map<std::string, CheckpointRecord>;

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ad::ParamList<T>& params) {
  Writer w;
  w.magic("STHP");
  w.u32(kCheckpointVersion);
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (const auto d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f32s(p.tensor.data());
  }
  return w.finish();
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& what) {
  Reader r(std::move(bytes), what);
  r.expect_magic("STHP");
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    r.fail("unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ck;
  while (!r.at_end()) {
    auto name = r.str();
    CheckpointRecord rec;
    rec.shape.resize(r.u32());
    for (auto& d : rec.shape) d = r.u32();
    rec.data.resize(shape_numel(rec.shape));
    r.f32s(rec.data.data(), rec.data.size());
    if (!ck.emplace(name, std::move(rec)).second) r.fail("duplicate tensor '" + name + "'");
  }
  return ck;
}

template <class T>
void save_checkpoint(const std::string& path, const ad::ParamList<T>& params) {
  write_file(path, encode_checkpoint(params));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path), path);
}

// Copies every record into the matching parameter. Any missing name or shape
// difference is reported with the first offending tensor.
template <class T>
void restore(const Checkpoint& ck, ad::ParamList<T>& params) {
  for (auto& p : params) {
    const auto it = ck.find(p.name);
    if (it == ck.end()) throw ContractError("checkpoint has no tensor '" + p.name + "'");
    if (it->second.shape != p.tensor.shape()) {
      throw ContractError("checkpoint tensor '" + p.name + "' has shape " +
                          shape_str(it->second.shape) + ", model expects " +
                          shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.data[i]);
  }
}

}  // namespace seqhand::io
