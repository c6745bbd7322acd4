#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "otfpf/tensor.hpp"

namespace otfpf::io {

namespace fs = std::filesystem;

/// Paths of the JSON header and binary payload for a tensor named by `base`.
/// `base` may be given with or without a ".json"/".bin" suffix.
struct TensorPaths {
  fs::path header;
  fs::path payload;
};

inline TensorPaths tensor_paths(const fs::path& base) {
  fs::path stem = base;
  if (stem.extension() == ".json" || stem.extension() == ".bin") {
    stem.replace_extension();
  }
  fs::path header = stem;
  header += ".json";
  fs::path payload = stem;
  payload += ".bin";
  return {header, payload};
}

inline void write_le_f32(std::ostream& os, std::span<const float> values) {
  for (float v : values) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    if constexpr (std::endian::native == std::endian::big) {
      bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) |
             ((bits >> 8) & 0xFF00u) | (bits >> 24);
    }
    char buf[4];
    std::memcpy(buf, &bits, 4);
    os.write(buf, 4);
  }
}

inline std::vector<float> read_le_f32(std::istream& is, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    char buf[4];
    if (!is.read(buf, 4)) throw DataError("tensor payload truncated");
    std::uint32_t bits;
    std::memcpy(&bits, buf, 4);
    if constexpr (std::endian::native == std::endian::big) {
      bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) |
             ((bits >> 8) & 0xFF00u) | (bits >> 24);
    }
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline nlohmann::json tensor_header(const Shape& shape) {
  return {{"dtype", "f32"}, {"shape", shape}, {"order", "row-major"}};
}

/// Writes `<base>.json` and `<base>.bin`.
template <typename T>
void save_tensor(const fs::path& base, const BasicTensor<T>& t) {
  const auto paths = tensor_paths(base);
  if (paths.header.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(paths.header.parent_path(), ec);
  }
  std::ofstream hdr(paths.header, std::ios::binary);
  if (!hdr) throw DataError("cannot write " + paths.header.string());
  hdr << tensor_header(t.shape()).dump() << '\n';
  std::ofstream bin(paths.payload, std::ios::binary);
  if (!bin) throw DataError("cannot write " + paths.payload.string());
  if constexpr (std::is_same_v<T, float>) {
    write_le_f32(bin, t.data());
  } else {
    auto f = t.template cast<float>();
    write_le_f32(bin, f.data());
  }
  if (!bin) throw DataError("write failed: " + paths.payload.string());
}

inline Tensor load_tensor(const fs::path& base) {
  const auto paths = tensor_paths(base);
  std::ifstream hdr(paths.header);
  if (!hdr) throw DataError("cannot read " + paths.header.string());
  nlohmann::json j;
  try {
    hdr >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed tensor header " + paths.header.string() + ": " +
                    e.what());
  }
  if (j.value("dtype", "") != "f32" || j.value("order", "") != "row-major" ||
      !j.contains("shape") || !j["shape"].is_array()) {
    throw DataError("unsupported tensor header " + paths.header.string());
  }
  Shape shape;
  for (const auto& e : j["shape"]) {
    if (!e.is_number_unsigned() || e.get<std::size_t>() == 0) {
      throw DataError("invalid extent in " + paths.header.string());
    }
    shape.push_back(e.get<std::size_t>());
  }
  std::ifstream bin(paths.payload, std::ios::binary);
  if (!bin) throw DataError("cannot read " + paths.payload.string());
  const auto n = shape_numel(shape);
  auto values = read_le_f32(bin, n);
  if (bin.peek() != std::char_traits<char>::eof()) {
    throw DataError("tensor payload longer than header shape: " +
                    paths.payload.string());
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace otfpf::io
