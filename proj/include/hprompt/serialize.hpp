#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hprompt/tensor.hpp"

namespace hprompt {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// FNV-1a 64 over raw bytes; used for content checksums and freeze probes.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[i] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Little-endian f32 row-major blob format. A blob is a flat sequence of
//... named tensors; the layout lives in a JSON sidecar next to the data.
// ---------------------------------------------------------------------------

inline void write_f32_le(std::vector<std::uint8_t>& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  out.push_back(static_cast<std::uint8_t>(bits));
  out.push_back(static_cast<std::uint8_t>(bits >> 8));
  out.push_back(static_cast<std::uint8_t>(bits >> 16));
  out.push_back(static_cast<std::uint8_t>(bits >> 24));
}

inline float read_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
                       (std::uint32_t(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

/// Ordered collection of named f32 tensors with one data file + JSON sidecar.
struct TensorStore {
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  std::vector<Entry> entries;

  template <typename T>
  void put(const std::string& name, const Tensor<T>& t) {
    Entry e;
    e.name = name;
    e.shape = t.shape();
    e.data.reserve(t.numel());
    for (T v : t.value()) e.data.push_back(static_cast<float>(v));
    entries.push_back(std::move(e));
  }

  const Entry& get(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw std::runtime_error("tensor store: missing entry '" + name + "'");
  }

  bool has(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return true;
    return false;
  }

  template <typename T>
  Tensor<T> get_tensor(const std::string& name, bool trainable = false) const {
    const Entry& e = get(name);
    std::vector<T> d(e.data.begin(), e.data.end());
    return trainable ? Tensor<T>::param(e.shape, std::move(d)) : Tensor<T>::from(e.shape, std::move(d));
  }

  std::vector<std::uint8_t> pack() const {
    std::vector<std::uint8_t> bytes;
    for (const auto& e : entries)
      for (float v : e.data) write_f32_le(bytes, v);
    return bytes;
  }

  std::uint64_t checksum() const {
    auto bytes = pack();
    return fnv1a64(bytes.data(), bytes.size());
  }

  void save(const fs::path& data_path) const {
    auto bytes = pack();
    {
      std::ofstream out(data_path, std::ios::binary);
      check(out.good(), "cannot open " + data_path.string() + " for writing");
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    json side;
    side["format"] = "f32-le-rowmajor";
    side["checksum_fnv1a64"] = hex64(fnv1a64(bytes.data(), bytes.size()));
    side["tensors"] = json::array();
    for (const auto& e : entries) {
      json t;
      t["name"] = e.name;
      t["shape"] = e.shape;
      side["tensors"].push_back(t);
    }
    fs::path side_path = data_path;
    side_path += ".json";
    std::ofstream sout(side_path);
    sout << side.dump(2) << "\n";
  }

  static TensorStore load(const fs::path& data_path) {
    fs::path side_path = data_path;
    side_path += ".json";
    std::ifstream sin(side_path);
    check(sin.good(), "cannot open sidecar " + side_path.string());
    json side = json::parse(sin);
    check(side.at("format") == "f32-le-rowmajor", "unsupported tensor blob format");

    std::ifstream in(data_path, std::ios::binary);
    check(in.good(), "cannot open " + data_path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::string want = side.at("checksum_fnv1a64");
    std::string got = hex64(fnv1a64(bytes.data(), bytes.size()));
    check(want == got, "checksum mismatch in " + data_path.string() + ": sidecar " + want + " vs data " + got);

    TensorStore store;
    std::size_t off = 0;
    for (const auto& t : side.at("tensors")) {
      Entry e;
      e.name = t.at("name");
      e.shape = t.at("shape").get<Shape>();
      std::size_t n = shape_numel(e.shape);
      check(off + 4 * n <= bytes.size(), "tensor blob truncated at '" + e.name + "'");
      e.data.resize(n);
      for (std::size_t i = 0; i < n; ++i) e.data[i] = read_f32_le(bytes.data() + off + 4 * i);
      off += 4 * n;
      store.entries.push_back(std::move(e));
    }
    check(off == bytes.size(), "tensor blob has trailing bytes");
    return store;
  }
};

inline json load_json(const fs::path& p) {
  std::ifstream in(p);
  check(in.good(), "cannot open " + p.string());
  return json::parse(in);
}

inline void save_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  check(out.good(), "cannot open " + p.string() + " for writing");
  out << j.dump(2) << "\n";
}

inline std::uint64_t file_checksum(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  check(in.good(), "cannot open " + p.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace hprompt
