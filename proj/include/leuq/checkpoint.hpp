#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "leuq/common.hpp"
#include "leuq/tensor.hpp"

namespace leuq {

// Named-tensor container: 8-byte magic, little-endian u64 manifest length,
// JSON manifest (tensor names/shapes/byte offsets plus a free-form meta
// block), then raw little-endian float64 payload. Round trips bit-exactly.

inline constexpr char kCheckpointMagic[8] = {'L', 'E', 'U', 'Q', 'P', 'T', '1', '\0'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("truncated file: missing length field");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64_le(std::ostream& os, std::span<const double> xs) {
  static_assert(sizeof(double) == 8);
  // Assumes IEEE-754 little-endian host, checked once at load/save time.
  os.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(xs.size() * 8));
}

inline void check_little_endian() {
  const std::uint16_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  if (b != 1) throw IoError("big-endian hosts are not supported by the file formats");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  detail::check_little_endian();
  nlohmann::json manifest;
  manifest["version"] = kFormatVersion;
  manifest["meta"] = meta;
  auto list = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : tensors) {
    nlohmann::json e;
    e["name"] = nt.name;
    e["shape"] = nt.tensor.shape();
    e["offset"] = offset;
    e["count"] = nt.tensor.numel();
    list.push_back(std::move(e));
    offset += nt.tensor.numel() * 8;
  }
  manifest["tensors"] = std::move(list);
  const std::string m = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write(kCheckpointMagic, 8);
  detail::write_u64_le(os, m.size());
  os.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& nt : tensors) detail::write_f64_le(os, nt.tensor.data());
  if (!os) throw IoError("write failed: " + path.string());
}

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::json meta;

  const Tensor& find(const std::string& name) const {
    for (const auto& nt : tensors) {
      if (nt.name == name) return nt.tensor;
    }
    throw IoError("checkpoint is missing tensor '" + name + "'");
  }
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  detail::check_little_endian();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw IoError("not a parameter checkpoint (bad magic): " + path.string());
  }
  const std::uint64_t mlen = detail::read_u64_le(is);
  std::string mstr(mlen, '\0');
  is.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw IoError("truncated manifest: " + path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt manifest in " + path.string() + ": " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"].get<int>() != kFormatVersion) {
    throw IoError("unsupported checkpoint format version in " + path.string());
  }

  Checkpoint ck;
  ck.meta = manifest.value("meta", nlohmann::json::object());
  const auto payload_start = is.tellg();
  for (const auto& e : manifest["tensors"]) {
    const std::string name = e["name"].get<std::string>();
    Shape shape = e["shape"].get<Shape>();
    const std::uint64_t count = e["count"].get<std::uint64_t>();
    if (count != numel(shape)) {
      throw IoError("manifest count/shape mismatch for tensor '" + name + "'");
    }
    const std::uint64_t offset = e["offset"].get<std::uint64_t>();
    is.seekg(payload_start + static_cast<std::streamoff>(offset));
    std::vector<double> data(count);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * 8));
    if (!is) throw IoError("truncated payload reading tensor '" + name + "'");
    ck.tensors.push_back({name, Tensor::from_data(std::move(shape), std::move(data))});
  }
  return ck;
}

}  // namespace leuq
