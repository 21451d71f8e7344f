#pragma once

// Binary container for named tensors.
//
//   "VITF" | u32 version | u64 metadata length | metadata JSON
//   | u32 entry count | entries...
//   entry: u32 name length | name bytes | u8 dtype | u8 rank
//          | rank x u64 extents | raw little-endian element bytes
//
// All integers are little-endian. dtype: 0 = f32, 1 = f64, 2 = i64.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <unistd.h>
#include <vector>

#include "json.hpp"
#include "vitforge/errors.hpp"
#include "vitforge/tensor.hpp"
#include "vitforge/vit.hpp"

namespace vitforge::checkpoint {

inline constexpr char kMagic[4] = {'V', 'I', 'T', 'F'};
inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kI64 = 2 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kI64: return 8;
  }
  throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(d)));
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::kF32;
  else if constexpr (std::is_same_v<T, double>) return DType::kF64;
  else {
    static_assert(std::is_same_v<T, std::int64_t>);
    return DType::kI64;
  }
}

// One stored tensor; bytes hold the elements in little-endian order.
struct NamedTensor {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const { return shape_numel(shape); }

  template <typename T>
  static NamedTensor from_values(std::string name, Shape shape,
                                 std::span<const T> values) {
    NamedTensor t{std::move(name), dtype_of<T>(), std::move(shape), {}};
    if (values.size() != t.numel())
      throw DimensionError("tensor '" + t.name + "' shape/element count mismatch");
    t.bytes.resize(values.size() * sizeof(T));
    std::uint8_t* out = t.bytes.data();
    for (const T& v : values) {
      std::memcpy(out, &v, sizeof(T));
      if constexpr (std::endian::native == std::endian::big)
        std::reverse(out, out + sizeof(T));
      out += sizeof(T);
    }
    return t;
  }

  template <typename T>
  static NamedTensor from_tensor(std::string name, const Tensor<T>& tensor) {
    return from_values<T>(std::move(name), tensor.shape(), tensor.data());
  }

  // Elements decoded as the stored type.
  template <typename T>
  std::vector<T> values() const {
    if (dtype != dtype_of<T>()) {
      throw FormatError("tensor '" + name + "' has dtype code " +
                        std::to_string(static_cast<int>(dtype)));
    }
    std::vector<T> out(numel());
    const std::uint8_t* in = bytes.data();
    for (T& v : out) {
      std::uint8_t buf[sizeof(T)];
      std::memcpy(buf, in, sizeof(T));
      if constexpr (std::endian::native == std::endian::big)
        std::reverse(buf, buf + sizeof(T));
      std::memcpy(&v, buf, sizeof(T));
      in += sizeof(T);
    }
    return out;
  }

  // Floating tensor converted to T from either float dtype.
  template <typename T>
  Tensor<T> to_tensor() const {
    std::vector<T> data;
    if (dtype == DType::kF32) {
      auto v = values<float>();
      data.assign(v.begin(), v.end());
    } else if (dtype == DType::kF64) {
      auto v = values<double>();
      data.assign(v.begin(), v.end());
    } else {
      throw FormatError("tensor '" + name + "' is not floating point");
    }
    return Tensor<T>(shape, std::move(data));
  }

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const NamedTensor& at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw ManifestError("checkpoint has no tensor '" + name + "'");
  }
};

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}

  bool has(std::size_t n) const { return data_.size() - pos_ >= n; }
  std::size_t remaining() const { return data_.size() - pos_; }

  template <typename U>
  U le(const std::string& what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const std::string& what) {
    if (!has(n)) throw CorruptionError("truncated checkpoint while reading " + what);
  }

  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const std::vector<NamedTensor>& tensors,
                          const nlohmann::json& metadata) {
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    if (t.name.empty()) throw ContractError("checkpoint tensor names must be nonempty");
    if (!seen.insert(t.name).second)
      throw ContractError("duplicate checkpoint tensor name '" + t.name + "'");
    if (t.shape.size() > 255) throw ContractError("tensor '" + t.name + "' rank exceeds 255");
    if (t.bytes.size() != t.numel() * dtype_size(t.dtype))
      throw ContractError("tensor '" + t.name + "' byte length does not match its shape");
  }
  std::string out(kMagic, kMagic + 4);
  detail::put_le<std::uint32_t>(out, kVersion);
  const std::string meta = metadata.dump();
  detail::put_le<std::uint64_t>(out, meta.size());
  out += meta;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_u8(out, static_cast<std::uint8_t>(t.dtype));
    detail::put_u8(out, static_cast<std::uint8_t>(t.shape.size()));
    for (auto e : t.shape) detail::put_le<std::uint64_t>(out, e);
    out.append(reinterpret_cast<const char*>(t.bytes.data()), t.bytes.size());
  }
  return out;
}

inline Checkpoint decode(const std::string& data) {
  detail::Reader r(data);
  if (!r.has(4) || std::memcmp(data.data(), kMagic, 4) != 0)
    throw FormatError("not a checkpoint: bad magic");
  r.bytes(4, "magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kVersion)
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto meta_len = r.le<std::uint64_t>("metadata length");
  if (meta_len > r.remaining()) throw CorruptionError("truncated checkpoint metadata");
  const std::string meta = r.bytes(static_cast<std::size_t>(meta_len), "metadata");
  try {
    ck.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = r.le<std::uint32_t>("entry count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string label = "entry " + std::to_string(i);
    NamedTensor t;
    const auto name_len = r.le<std::uint32_t>(label + " name length");
    t.name = r.bytes(name_len, label + " name");
    const std::string where = label + " '" + t.name + "'";
    const auto code = r.le<std::uint8_t>(where + " dtype");
    if (code > 2) throw FormatError(where + ": unknown dtype code " + std::to_string(code));
    t.dtype = static_cast<DType>(code);
    const auto rank = r.le<std::uint8_t>(where + " rank");
    t.shape.resize(rank);
    for (auto& e : t.shape) e = r.le<std::uint64_t>(where + " extents");
    // Guard the product against overflow before trusting it as a length.
    const bool empty = std::find(t.shape.begin(), t.shape.end(), 0u) != t.shape.end();
    unsigned __int128 need = empty ? 0 : dtype_size(t.dtype);
    for (auto e : t.shape) {
      if (empty) break;
      need *= e;
      if (need > r.remaining()) break;
    }
    if (need > r.remaining())
      throw CorruptionError("truncated checkpoint: " + where + " declares more data than present");
    const std::string raw = r.bytes(static_cast<std::size_t>(need), where + " data");
    t.bytes.assign(raw.begin(), raw.end());
    if (t.name.empty() || !seen.insert(t.name).second)
      throw CorruptionError(where + ": empty or duplicate name");
    ck.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0)
    throw CorruptionError("checkpoint has " + std::to_string(r.remaining()) +
                          " trailing bytes");
  return ck;
}

// Writes via a temporary sibling file and rename, so the target path only
// ever holds a complete checkpoint.
inline void save(const std::filesystem::path& path,
                 const std::vector<NamedTensor>& tensors,
                 const nlohmann::json& metadata = nlohmann::json::object()) {
  const std::string blob = encode(tensors, metadata);
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot move checkpoint into place at " + path.string());
  }
}

inline Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode(data);
  } catch (const Error& e) {
    // Re-throw with the path while preserving the error class.
    const std::string msg = path.string() + ": " + e.what();
    if (dynamic_cast<const VersionError*>(&e)) throw VersionError(msg);
    if (dynamic_cast<const FormatError*>(&e)) throw FormatError(msg);
    if (dynamic_cast<const CorruptionError*>(&e)) throw CorruptionError(msg);
    throw;
  }
}

// Checks names and shapes against the manifest for `cfg`. With head_exempt,
// head.* entries may have any shape. Every offender is listed in one error.
inline void validate_against_config(const std::vector<NamedTensor>& tensors,
                                    const ViTConfig& cfg, bool head_exempt = false) {
  cfg.validate();
  std::vector<std::string> problems;
  std::set<std::string> expected;
  for (const auto& e : manifest(cfg)) {
    expected.insert(e.name);
    const NamedTensor* found = nullptr;
    for (const auto& t : tensors)
      if (t.name == e.name) found = &t;
    if (!found) {
      problems.push_back("missing " + e.name);
      continue;
    }
    if (found->dtype == DType::kI64) {
      problems.push_back(e.name + " is not floating point");
    } else if (found->shape != e.shape && !(head_exempt && is_head_param(e.name))) {
      problems.push_back(e.name + " has shape " + shape_str(found->shape) +
                         ", expected " + shape_str(e.shape));
    }
  }
  for (const auto& t : tensors)
    if (!expected.count(t.name)) problems.push_back("unexpected " + t.name);
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model config:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ManifestError(msg);
  }
}

template <typename T>
std::vector<NamedTensor> params_to_tensors(const ViTParams<T>& params) {
  std::vector<NamedTensor> out;
  for_each_param(
      [&](const std::string& name, const Tensor<T>& t) {
        out.push_back(NamedTensor::from_tensor(name, t));
      },
      params);
  return out;
}

// Parameters for `cfg` read from validated tensors. With head_exempt, a
// mismatched head is left zero-filled for the caller to reinitialize.
template <typename T>
ViTParams<T> params_from_tensors(const std::vector<NamedTensor>& tensors,
                                 const ViTConfig& cfg, bool head_exempt = false) {
  validate_against_config(tensors, cfg, head_exempt);
  ViTParams<T> p = zero_params<T>(cfg);
  for_each_param(
      [&](const std::string& name, Tensor<T>& t) {
        for (const auto& nt : tensors) {
          if (nt.name != name) continue;
          if (nt.shape == t.shape()) t = nt.to_tensor<T>();
        }
      },
      p);
  return p;
}

}  // namespace vitforge::checkpoint
