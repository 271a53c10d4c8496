#pragma once
// Binary container shared by checkpoints and datasets:
//
//   uint64 little-endian  header length H
//   H bytes               UTF-8 JSON header; "format" holds the version tag
//                         and "blob_bytes" the exact size of what follows
//   blob_bytes bytes      contiguous little-endian payload
//
// Array locations inside the blob are given by byte offsets in the header.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpkd/error.hpp"
#include "tpkd/model.hpp"

namespace tpkd {

inline constexpr const char* kCheckpointFormat = "tpkd-ckpt-v1";
inline constexpr const char* kDataFormat = "tpkd-data-v1";

struct Container {
  nlohmann::json header;
  std::vector<uint8_t> blob;
};

namespace detail {

template <typename V>
void append_le(std::vector<uint8_t>& out, V v) {
  static_assert(sizeof(V) == 4 || sizeof(V) == 8);
  using U = std::conditional_t<sizeof(V) == 4, uint32_t, uint64_t>;
  U u;
  std::memcpy(&u, &v, sizeof(V));
  for (size_t i = 0; i < sizeof(V); ++i) out.push_back(static_cast<uint8_t>(u >> (8 * i)));
}

template <typename V>
V read_le(const uint8_t* p) {
  using U = std::conditional_t<sizeof(V) == 4, uint32_t, uint64_t>;
  U u = 0;
  for (size_t i = 0; i < sizeof(V); ++i) u |= static_cast<U>(p[i]) << (8 * i);
  V v;
  std::memcpy(&v, &u, sizeof(V));
  return v;
}

}  // namespace detail

inline std::vector<uint8_t> encode_container(const Container& c) {
  nlohmann::json header = c.header;
  header["blob_bytes"] = c.blob.size();
  const std::string text = header.dump();
  std::vector<uint8_t> out;
  out.reserve(8 + text.size() + c.blob.size());
  detail::append_le<uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), c.blob.begin(), c.blob.end());
  return out;
}

/// Parses a container, checking the version tag against `format`.
inline Container decode_container(const std::vector<uint8_t>& bytes, const std::string& format) {
  using K = FormatError::Kind;
  if (bytes.size() < 8) throw FormatError(K::kUnexpectedEnd, "unexpected end of data: missing header length");
  const uint64_t hlen = detail::read_le<uint64_t>(bytes.data());
  if (hlen > bytes.size() - 8) throw FormatError(K::kUnexpectedEnd, "unexpected end of data: header truncated");
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::kMalformedHeader, std::string("malformed header: ") + e.what());
  }
  if (!c.header.is_object() || !c.header.contains("format") || !c.header["format"].is_string())
    throw FormatError(K::kMalformedHeader, "malformed header: no format tag");
  const std::string tag = c.header["format"].get<std::string>();
  if (tag != format) throw FormatError(K::kUnknownVersion, "unknown container version '" + tag + "', expected '" + format + "'");
  if (!c.header.contains("blob_bytes") || !c.header["blob_bytes"].is_number_unsigned())
    throw FormatError(K::kMalformedHeader, "malformed header: no blob_bytes");
  const uint64_t blob_bytes = c.header["blob_bytes"].get<uint64_t>();
  const uint64_t remaining = bytes.size() - 8 - hlen;
  if (remaining < blob_bytes) throw FormatError(K::kUnexpectedEnd, "unexpected end of data: blob truncated");
  if (remaining > blob_bytes) throw FormatError(K::kShapeMismatch, "trailing bytes after declared blob");
  c.blob.assign(bytes.begin() + 8 + static_cast<std::ptrdiff_t>(hlen), bytes.end());
  return c;
}

inline std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open '" + path.string() + "'");
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// Writes through a temporary sibling and renames into place.
inline void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void append_f32(std::vector<uint8_t>& blob, const std::vector<float>& values) {
  blob.reserve(blob.size() + values.size() * 4);
  for (float v : values) detail::append_le<float>(blob, v);
}

inline std::vector<float> read_f32(const std::vector<uint8_t>& blob, uint64_t offset, uint64_t count) {
  if (offset + count * 4 > blob.size())
    throw FormatError(FormatError::Kind::kShapeMismatch, "array extends past end of blob");
  std::vector<float> out(count);
  for (uint64_t i = 0; i < count; ++i) out[i] = detail::read_le<float>(blob.data() + offset + 4 * i);
  return out;
}

// --------------------------------------------------------------- checkpoints

struct Checkpoint {
  ModelSpec spec;
  std::vector<NamedArray> arrays;
  nlohmann::json meta = nlohmann::json::object();
};

inline std::vector<uint8_t> encode_checkpoint(const Checkpoint& ck) {
  Container c;
  c.header["format"] = kCheckpointFormat;
  c.header["dtype"] = "float32-le";
  c.header["spec"] = ck.spec;
  c.header["meta"] = ck.meta;
  auto& list = c.header["arrays"] = nlohmann::json::array();
  for (const auto& a : ck.arrays) {
    list.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", c.blob.size()}, {"nbytes", a.values.size() * 4}});
    append_f32(c.blob, a.values);
  }
  return encode_container(c);
}

inline Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes) {
  Container c = decode_container(bytes, kCheckpointFormat);
  Checkpoint ck;
  try {
    ck.spec = c.header.at("spec").get<ModelSpec>();
    if (c.header.contains("meta")) ck.meta = c.header["meta"];
    for (const auto& e : c.header.at("arrays")) {
      NamedArray a;
      a.name = e.at("name").get<std::string>();
      a.shape = e.at("shape").get<std::vector<int>>();
      const uint64_t n = shape_numel(a.shape);
      if (e.at("nbytes").get<uint64_t>() != n * 4)
        throw FormatError(FormatError::Kind::kShapeMismatch, "array '" + a.name + "' byte count disagrees with its shape");
      a.values = read_f32(c.blob, e.at("offset").get<uint64_t>(), n);
      ck.arrays.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::kMalformedHeader, std::string("malformed checkpoint header: ") + e.what());
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifact("checkpoint not found: " + path.string());
  return decode_checkpoint(read_file(path));
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, nlohmann::json meta = nlohmann::json::object()) {
  return {model.spec(), model.state(), std::move(meta)};
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  Model<T> m(ck.spec, 0);
  m.load_state(ck.arrays);
  return m;
}

}  // namespace tpkd
