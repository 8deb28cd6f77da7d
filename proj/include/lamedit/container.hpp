#pragma once

// Named-matrix container shared by every on-disk artifact (models, key
// statistics, delta sets, merged deltas, dataset vectors).
//
// Layout, all integers little-endian:
//
//   bytes 0..3   magic "LAMC"
//   u32          format version (currently 1)
//   u64          entry count
//   per entry:
//     u32        name length in bytes
//     bytes      name (UTF-8, no terminator)
//     u64        rows
//     u64        cols
//     f64 x r*c  values, row-major
//
// Entries keep insertion order, so writing the same logical content twice
// yields identical bytes.

#include "lamedit/core.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace lamedit {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

class MatrixContainer {
 public:
  static constexpr char kMagic[4] = {'L', 'A', 'M', 'C'};
  static constexpr std::uint32_t kVersion = 1;

  void put(const std::string& name, Matrix value) {
    if (auto it = index_.find(name); it != index_.end()) {
      entries_[it->second].second = std::move(value);
      return;
    }
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
  }

  void put_vector(const std::string& name, const Vector& v) { put(name, Matrix(v.transpose())); }

  void put_scalar(const std::string& name, double v) { put(name, Matrix::Constant(1, 1, v)); }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Matrix& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("container has no entry '" + name + "'");
    return entries_[it->second].second;
  }

  Vector get_vector(const std::string& name) const {
    const auto& m = get(name);
    if (m.rows() != 1) throw ShapeError("entry '" + name + "' is not a row vector");
    return m.row(0).transpose();
  }

  double get_scalar(const std::string& name) const {
    const auto& m = get(name);
    if (m.size() != 1) throw ShapeError("entry '" + name + "' is not a scalar");
    return m(0, 0);
  }

  const std::vector<std::pair<std::string, Matrix>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::string serialize() const {
    std::string out;
    out.append(kMagic, 4);
    append_pod(out, kVersion);
    append_pod(out, static_cast<std::uint64_t>(entries_.size()));
    for (const auto& [name, m] : entries_) {
      append_pod(out, static_cast<std::uint32_t>(name.size()));
      out.append(name);
      append_pod(out, static_cast<std::uint64_t>(m.rows()));
      append_pod(out, static_cast<std::uint64_t>(m.cols()));
      for (Index r = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c) append_pod(out, m(r, c));
    }
    return out;
  }

  static MatrixContainer deserialize(std::string_view bytes) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > bytes.size()) throw Error("matrix container truncated");
    };
    need(4);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error("not a matrix container (bad magic)");
    pos = 4;
    const auto version = read_pod<std::uint32_t>(bytes, pos, need);
    if (version != kVersion) throw Error("unsupported matrix container version " + std::to_string(version));
    const auto count = read_pod<std::uint64_t>(bytes, pos, need);
    MatrixContainer c;
    for (std::uint64_t e = 0; e < count; ++e) {
      const auto len = read_pod<std::uint32_t>(bytes, pos, need);
      need(len);
      std::string name(bytes.substr(pos, len));
      pos += len;
      const auto rows = read_pod<std::uint64_t>(bytes, pos, need);
      const auto cols = read_pod<std::uint64_t>(bytes, pos, need);
      if (cols != 0 && rows > (bytes.size() - pos) / 8 / cols) throw Error("matrix container truncated");
      Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
      for (Index r = 0; r < m.rows(); ++r)
        for (Index col = 0; col < m.cols(); ++col) m(r, col) = read_pod<double>(bytes, pos, need);
      c.put(name, std::move(m));
    }
    if (pos != bytes.size()) throw Error("trailing bytes after matrix container");
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path.string() + "' for writing");
    const auto bytes = serialize();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for '" + path.string() + "'");
  }

  static MatrixContainer load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
  }

 private:
  template <typename T>
  static void append_pod(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
  }

  template <typename T, typename Need>
  static T read_pod(std::string_view bytes, std::size_t& pos, Need&& need) {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }

  std::vector<std::pair<std::string, Matrix>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace lamedit
