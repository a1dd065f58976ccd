#pragma once

// Binary tensor (KIUT-v1) and checkpoint (KIUC-v1) files.
//
// KIUT-v1: "KIUT" | version u8 = 1 | dtype u8 = 0 (f32) | ndim u8 | 3 zero bytes
//          | ndim x u32 LE dims | row-major f32 LE payload
// KIUC-v1: "KIUC" | version u8 = 1 | u32 LE entry count
//          | per entry: u32 LE name length, name bytes, KIUT-v1 record

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "overseg/error.hpp"
#include "overseg/tensor.hpp"

namespace overseg {

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

// Reads exactly n bytes or reports how many arrived.
class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  std::size_t read_some(void* dst, std::size_t n) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    auto got = static_cast<std::size_t>(is_.gcount());
    offset_ += got;
    return got;
  }

  void read_exact(void* dst, std::size_t n, const char* what) {
    auto start = offset_;
    if (read_some(dst, n) != n)
      throw FormatError(std::string("truncated ") + what + " at byte offset " + std::to_string(start));
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read_exact(b, 4, what);
    return get_u32(b);
  }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

inline void check_sink(std::ostream& os, std::uint64_t offset) {
  if (!os) throw IoError("write failed at byte offset " + std::to_string(offset));
}

inline Tensor read_tensor_impl(Reader& in) {
  const auto start = in.offset();
  unsigned char header[10];
  in.read_exact(header, 10, "tensor header");
  if (std::memcmp(header, "KIUT", 4) != 0)
    throw FormatError("bad magic at byte offset " + std::to_string(start) + ", expected KIUT");
  if (header[4] != 0x01)
    throw FormatError("unsupported KIUT version " + std::to_string(header[4]) + " at byte offset " +
                      std::to_string(start + 4));
  if (header[5] != 0x00)
    throw FormatError("unsupported dtype " + std::to_string(header[5]) + " at byte offset " +
                      std::to_string(start + 5));
  const int ndim = header[6];
  if (ndim < 1 || ndim > static_cast<int>(Shape::kMaxRank))
    throw FormatError("invalid dim count " + std::to_string(ndim) + " at byte offset " +
                      std::to_string(start + 6));
  if (header[7] != 0 || header[8] != 0 || header[9] != 0)
    throw FormatError("reserved header bytes are not zero at byte offset " + std::to_string(start + 7));

  std::vector<std::int64_t> dims(static_cast<std::size_t>(ndim));
  for (auto& d : dims) {
    d = in.u32("tensor dims");
    if (d == 0) throw FormatError("zero extent in dims at byte offset " + std::to_string(in.offset() - 4));
  }
  Shape shape(std::move(dims));
  const auto count = static_cast<std::size_t>(shape.numel());
  std::vector<unsigned char> raw(count * 4);
  const auto payload_at = in.offset();
  const auto got = in.read_some(raw.data(), raw.size());
  if (got != raw.size())
    throw FormatError("payload length mismatch at byte offset " + std::to_string(payload_at) + ": expected " +
                      std::to_string(raw.size()) + " bytes, got " + std::to_string(got));
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = get_u32(raw.data() + 4 * i);
    data[i] = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

/// Writes one KIUT-v1 record; returns the number of bytes emitted.
inline std::uint64_t write_tensor(const Tensor& t, std::ostream& sink) {
  const std::uint64_t start = static_cast<std::uint64_t>(std::max<std::streamoff>(0, sink.tellp()));
  const char header[10] = {'K', 'I', 'U', 'T', 0x01, 0x00, static_cast<char>(t.rank()), 0, 0, 0};
  sink.write(header, 10);
  detail::check_sink(sink, start);
  for (std::size_t i = 0; i < t.rank(); ++i) detail::put_u32(sink, static_cast<std::uint32_t>(t.dim(i)));
  detail::check_sink(sink, start + 10);
  std::vector<char> payload(static_cast<std::size_t>(t.numel()) * 4);
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(t[i]);
    for (int b = 0; b < 4; ++b) payload[static_cast<std::size_t>(4 * i + b)] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  const std::uint64_t header_bytes = 10 + 4 * t.rank();
  sink.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  detail::check_sink(sink, start + header_bytes);
  return header_bytes + payload.size();
}

inline Tensor read_tensor(std::istream& source) {
  detail::Reader in(source);
  return detail::read_tensor_impl(in);
}

inline std::string tensor_bytes(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(t, os);
  return os.str();
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  try {
    write_tensor(t, os);
  } catch (const Error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_tensor(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Ordered collection of uniquely named tensors.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline std::uint64_t write_checkpoint(const NamedTensors& params, std::ostream& sink) {
  std::set<std::string> seen;
  for (const auto& [name, t] : params)
    if (!seen.insert(name).second) throw ValidationError("duplicate checkpoint entry name '" + name + "'");
  const char header[5] = {'K', 'I', 'U', 'C', 0x01};
  sink.write(header, 5);
  detail::put_u32(sink, static_cast<std::uint32_t>(params.size()));
  detail::check_sink(sink, 0);
  std::uint64_t bytes = 9;
  for (const auto& [name, t] : params) {
    detail::put_u32(sink, static_cast<std::uint32_t>(name.size()));
    sink.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::check_sink(sink, bytes);
    bytes += 4 + name.size();
    try {
      bytes += write_tensor(t, sink);
    } catch (const Error& e) {
      throw IoError("entry '" + name + "': " + e.what());
    }
  }
  return bytes;
}

inline NamedTensors read_checkpoint(std::istream& source) {
  detail::Reader in(source);
  unsigned char header[5];
  in.read_exact(header, 5, "checkpoint header");
  if (std::memcmp(header, "KIUC", 4) != 0) throw FormatError("bad checkpoint magic, expected KIUC");
  if (header[4] != 0x01) throw FormatError("unsupported KIUC version " + std::to_string(header[4]));
  const auto count = in.u32("checkpoint entry count");
  NamedTensors out;
  std::set<std::string> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = in.u32("entry name length");
    if (len > (1u << 20)) throw FormatError("entry name length " + std::to_string(len) + " is implausible");
    std::string name(len, '\0');
    in.read_exact(name.data(), len, "entry name");
    if (!seen.insert(name).second) throw ValidationError("duplicate checkpoint entry name '" + name + "'");
    try {
      out.emplace_back(name, detail::read_tensor_impl(in));
    } catch (const FormatError& err) {
      throw FormatError("entry '" + name + "': " + err.what());
    }
  }
  return out;
}

inline std::uint64_t save_checkpoint(const NamedTensors& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  return write_checkpoint(params, os);
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_checkpoint(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace overseg
