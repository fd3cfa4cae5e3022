#pragma once

// Binary tensor file:
//   "TNSR" | version u8 = 1 | dtype u8 = 1 (f32) | rank u8 | dims u32 LE x rank
//   | payload f32 LE, row-major
//
// Named tensor bundles (checkpoints) are a plain concatenation of such
// records plus a text index with one "name offset" line per record.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "onconet/tensor.hpp"

namespace onconet {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline constexpr std::array<char, 4> kMagic = {'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("tensor file truncated in header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

/// Writes one tensor record; values are narrowed to f32.
template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw FormatError("rank exceeds 255");
  os.write(kMagic.data(), 4);
  const char hdr[3] = {static_cast<char>(kVersion), static_cast<char>(kDtypeF32),
                       static_cast<char>(t.rank())};
  os.write(hdr, 3);
  for (auto d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw FormatError("dimension exceeds u32");
    detail::put_u32(os, static_cast<std::uint32_t>(d));
  }
  std::vector<unsigned char> raw(t.numel() * 4);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(t[i]));
    for (int k = 0; k < 4; ++k) raw[4 * i + k] = static_cast<unsigned char>(u >> (8 * k));
  }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw FormatError("write failed");
}

template <class T = float>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("tensor file truncated before magic");
  if (std::memcmp(magic, kMagic.data(), 4) != 0) throw FormatError("bad magic, expected TNSR");
  unsigned char hdr[3];
  if (!is.read(reinterpret_cast<char*>(hdr), 3)) throw FormatError("tensor file truncated in header");
  if (hdr[0] != kVersion) throw FormatError("unsupported version " + std::to_string(hdr[0]));
  if (hdr[1] != kDtypeF32) throw FormatError("unsupported dtype code " + std::to_string(hdr[1]));
  Shape shape(hdr[2]);
  for (auto& d : shape) d = detail::get_u32(is);
  const std::size_t n = shape_numel(shape);
  std::vector<unsigned char> raw(n * 4);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw FormatError("tensor file truncated in payload");
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* b = raw.data() + 4 * i;
    const std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                            (static_cast<std::uint32_t>(b[2]) << 16) |
                            (static_cast<std::uint32_t>(b[3]) << 24);
    data[i] = static_cast<T>(std::bit_cast<float>(u));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <class T = float>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor<T>(is);
}

/// Writes `<stem>.bin` (concatenated records) and `<stem>.idx` (name offset).
template <class T>
void save_bundle(const std::filesystem::path& stem,
                 const std::vector<std::pair<std::string, const Tensor<T>*>>& named) {
  std::filesystem::path bin = stem, idx = stem;
  bin += ".bin";
  idx += ".idx";
  std::ofstream os(bin, std::ios::binary);
  std::ofstream index(idx);
  if (!os || !index) throw FormatError("cannot write bundle " + stem.string());
  for (const auto& [name, t] : named) {
    if (name.find_first_of(" \t\n") != std::string::npos)
      throw FormatError("tensor name contains whitespace: " + name);
    index << name << ' ' << static_cast<std::uint64_t>(os.tellp()) << '\n';
    write_tensor(os, *t);
  }
}

template <class T = float>
std::map<std::string, Tensor<T>> load_bundle(const std::filesystem::path& stem) {
  std::filesystem::path bin = stem, idx = stem;
  bin += ".bin";
  idx += ".idx";
  std::ifstream is(bin, std::ios::binary);
  std::ifstream index(idx);
  if (!is || !index) throw FormatError("cannot read bundle " + stem.string());
  std::map<std::string, Tensor<T>> out;
  std::string line;
  while (std::getline(index, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    std::uint64_t offset = 0;
    if (!(ls >> name >> offset)) throw FormatError("malformed index line: " + line);
    is.seekg(static_cast<std::streamoff>(offset));
    out.emplace(name, read_tensor<T>(is));
  }
  return out;
}

}  // namespace io
}  // namespace onconet
