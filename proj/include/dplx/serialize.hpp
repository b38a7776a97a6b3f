#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dplx/tensor.hpp"

namespace dplx {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Named-tensor file:
///   "DPLX1" | u32 endianness tag 0x01020304 (LE) | u64 count |
///   per record: u32 name bytes, UTF-8 name, u8 scalar width (4|8), u32 rank,
///               u64 extents[rank], raw little-endian scalars.
template <class S>
using NamedTensors = std::vector<std::pair<std::string, Tensor<S>>>;

namespace io {

inline constexpr char kMagic[5] = {'D', 'P', 'L', 'X', '1'};
inline constexpr std::uint32_t kEndianTag = 0x01020304u;

static_assert(std::endian::native == std::endian::little, "named-tensor I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("named-tensor file truncated");
  return v;
}

}  // namespace io

template <class S>
void write_tensors(std::ostream& os, const NamedTensors<S>& items) {
  os.write(io::kMagic, sizeof io::kMagic);
  io::put<std::uint32_t>(os, io::kEndianTag);
  io::put<std::uint64_t>(os, items.size());
  for (auto& [name, t] : items) {
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put<std::uint8_t>(os, sizeof(S));
    io::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) io::put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(S)));
  }
}

template <class S>
void save_tensors(const std::string& path, const NamedTensors<S>& items) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_tensors(os, items);
  if (!os) throw FormatError("write failed for '" + path + "'");
}

/// Reads a named-tensor stream; scalars stored at a different width are
/// converted to S.
template <class S>
NamedTensors<S> read_tensors(std::istream& is) {
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, io::kMagic, 5) != 0) throw FormatError("bad magic: not a DPLX1 named-tensor file");
  if (io::get<std::uint32_t>(is) != io::kEndianTag) throw FormatError("unsupported endianness tag");
  const auto count = io::get<std::uint64_t>(is);
  NamedTensors<S> out;
  for (std::uint64_t r = 0; r < count; ++r) {
    const auto len = io::get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const auto width = io::get<std::uint8_t>(is);
    if (width != 4 && width != 8) throw FormatError("record '" + name + "': unsupported scalar width");
    const auto rank = io::get<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = io::get<std::uint64_t>(is);
    std::vector<S> data(numel(shape));
    if (width == sizeof(S)) {
      is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(S)));
    } else if (width == 4) {
      for (auto& v : data) v = static_cast<S>(io::get<float>(is));
    } else {
      for (auto& v : data) v = static_cast<S>(io::get<double>(is));
    }
    if (!is) throw FormatError("record '" + name + "' truncated");
    out.emplace_back(std::move(name), Tensor<S>(std::move(shape), std::move(data)));
  }
  return out;
}

template <class S>
NamedTensors<S> load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  return read_tensors<S>(is);
}

}  // namespace dplx
