#pragma once

// Model file layout (all integers little-endian):
//
//   "RCMP" | u32 version (=1) | u64 manifest length | UTF-8 JSON manifest | tensor blob
//
// The manifest carries the model config and a tensor table of
// {name, role, dtype, shape, byte_offset, byte_length[, scale, zero_point]}.
// Byte offsets are relative to the start of the blob; tensors are packed
// back to back in table order.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rcmp/hash.hpp"
#include "rcmp/model.hpp"
#include "rcmp/quant_params.hpp"
#include "rcmp/tensor.hpp"

namespace rcmp {

static_assert(std::endian::native == std::endian::little, "tensor blobs are written in host order");

inline constexpr std::array<char, 4> kFileMagic{'R', 'C', 'M', 'P'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class FormatErrorKind { io, bad_magic, bad_version, truncated, length_mismatch, bad_manifest };

inline std::string_view format_error_name(FormatErrorKind k) {
  switch (k) {
    case FormatErrorKind::io: return "io error";
    case FormatErrorKind::bad_magic: return "bad magic";
    case FormatErrorKind::bad_version: return "bad version";
    case FormatErrorKind::truncated: return "truncated";
    case FormatErrorKind::length_mismatch: return "length mismatch";
    case FormatErrorKind::bad_manifest: return "bad manifest";
  }
  return "?";
}

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(format_error_name(kind)) + ": " + detail), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

struct TensorRecord {
  std::string name;
  std::string role;  // param | buffer | mask | qweight | bias
  DType dtype = DType::f32;
  Shape shape;
  std::optional<QuantParams> quant;
  std::vector<std::byte> bytes;

  template <class T>
  static TensorRecord from(std::string name, std::string role, const Tensor<T>& t,
                           std::optional<QuantParams> q = std::nullopt) {
    TensorRecord r{std::move(name), std::move(role), Tensor<T>::dtype, t.shape(), q, {}};
    const auto b = std::as_bytes(t.values());
    r.bytes.assign(b.begin(), b.end());
    return r;
  }

  template <class T>
  Tensor<T> as() const {
    if (dtype != Tensor<T>::dtype)
      throw FormatError(FormatErrorKind::bad_manifest, "tensor '" + name + "' has dtype " +
                                                           std::string(dtype_name(dtype)) + ", expected " +
                                                           std::string(dtype_name(Tensor<T>::dtype)));
    std::vector<T> data(bytes.size() / sizeof(T));
    std::memcpy(data.data(), bytes.data(), bytes.size());
    return Tensor<T>(shape, std::move(data));
  }
};

struct Archive {
  std::string kind;             // "dense" | "quantized"
  nlohmann::json config;        // ModelConfig
  nlohmann::json meta = nlohmann::json::object();        // kind-specific content, hashed
  nlohmann::json provenance = nlohmann::json::object();  // producer record, not hashed
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(std::string_view name, std::string_view role) const {
    for (const auto& t : tensors)
      if (t.name == name && t.role == role) return &t;
    return nullptr;
  }

  std::size_t blob_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.bytes.size();
    return n;
  }

  std::size_t blob_size(std::string_view role) const {
    std::size_t n = 0;
    for (const auto& t : tensors)
      if (t.role == role) n += t.bytes.size();
    return n;
  }
};

namespace detail {

inline nlohmann::json tensor_table(const Archive& a) {
  auto table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : a.tensors) {
    nlohmann::json e{{"name", t.name},
                     {"role", t.role},
                     {"dtype", dtype_name(t.dtype)},
                     {"shape", t.shape},
                     {"byte_offset", offset},
                     {"byte_length", t.bytes.size()}};
    if (t.quant) {
      e["scale"] = t.quant->scale;
      e["zero_point"] = t.quant->zero_point;
      e["bits"] = t.quant->bits;
      e["qmin"] = t.quant->qmin;
      e["qmax"] = t.quant->qmax;
      if (t.quant->offset != 0.0f) e["const_offset"] = t.quant->offset;
    }
    offset += t.bytes.size();
    table.push_back(std::move(e));
  }
  return table;
}

inline nlohmann::json hashed_manifest(const Archive& a) {
  return nlohmann::json{{"format", "RCMP"},
                        {"kind", a.kind},
                        {"config", a.config},
                        {"meta", a.meta},
                        {"tensors", tensor_table(a)}};
}

template <class Int>
void put_le(std::vector<std::byte>& out, Int v) {
  for (std::size_t i = 0; i < sizeof(Int); ++i)
    out.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class Int>
Int get_le(std::span<const std::byte> in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(Int); ++i) v |= static_cast<std::uint64_t>(in[i]) << (8 * i);
  return static_cast<Int>(v);
}

}  // namespace detail

/// Identity of the model content: manifest (minus provenance) plus blob.
inline std::string content_hash(const Archive& a) {
  ContentHasher h;
  h.update(detail::hashed_manifest(a).dump());
  for (const auto& t : a.tensors) h.update(t.bytes);
  return h.hex();
}

inline std::vector<std::byte> encode_archive(const Archive& a) {
  auto manifest = detail::hashed_manifest(a);
  manifest["provenance"] = a.provenance;
  const std::string text = manifest.dump(1);
  std::vector<std::byte> out;
  out.reserve(16 + text.size() + a.blob_size());
  for (char c : kFileMagic) out.push_back(static_cast<std::byte>(c));
  detail::put_le<std::uint32_t>(out, kFormatVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  for (const auto& t : a.tensors) out.insert(out.end(), t.bytes.begin(), t.bytes.end());
  return out;
}

inline Archive decode_archive(std::span<const std::byte> in) {
  using K = FormatErrorKind;
  if (in.size() < 4) throw FormatError(K::truncated, "file shorter than the magic bytes");
  if (!std::equal(kFileMagic.begin(), kFileMagic.end(), in.begin(),
                  [](char c, std::byte b) { return static_cast<std::byte>(c) == b; }))
    throw FormatError(K::bad_magic, "not an RCMP model file");
  if (in.size() < 16) throw FormatError(K::truncated, "header incomplete");
  const auto version = detail::get_le<std::uint32_t>(in.subspan(4));
  if (version != kFormatVersion)
    throw FormatError(K::bad_version, "unsupported format version " + std::to_string(version));
  const auto mlen = detail::get_le<std::uint64_t>(in.subspan(8));
  if (mlen > in.size() - 16) throw FormatError(K::truncated, "manifest extends past end of file");
  const auto mbytes = in.subspan(16, mlen);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(mbytes.data()), mbytes.size()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::bad_manifest, e.what());
  }
  const auto blob = in.subspan(16 + mlen);

  Archive a;
  try {
    if (manifest.at("format") != "RCMP") throw FormatError(K::bad_manifest, "format tag is not RCMP");
    a.kind = manifest.at("kind").get<std::string>();
    a.config = manifest.at("config");
    a.meta = manifest.value("meta", nlohmann::json::object());
    a.provenance = manifest.value("provenance", nlohmann::json::object());
    std::size_t expected_end = 0;
    for (const auto& e : manifest.at("tensors")) {
      TensorRecord r;
      r.name = e.at("name").get<std::string>();
      r.role = e.at("role").get<std::string>();
      r.dtype = parse_dtype(e.at("dtype").get<std::string>());
      r.shape = e.at("shape").get<Shape>();
      validate_shape(r.shape);
      if (e.contains("scale")) {
        QuantParams q;
        q.scale = e.at("scale").get<float>();
        q.zero_point = e.at("zero_point").get<int>();
        q.bits = e.value("bits", 8);
        q.qmin = e.value("qmin", 0);
        q.qmax = e.value("qmax", (1 << q.bits) - 1);
        q.offset = e.value("const_offset", 0.0f);
        r.quant = q;
      }
      const auto off = e.at("byte_offset").get<std::size_t>();
      const auto len = e.at("byte_length").get<std::size_t>();
      if (len != shape_numel(r.shape) * dtype_size(r.dtype))
        throw FormatError(K::length_mismatch, "tensor '" + r.name + "' declares " + std::to_string(len) +
                                                  " bytes for shape " + shape_str(r.shape));
      if (off != expected_end)
        throw FormatError(K::length_mismatch, "tensor '" + r.name + "' is not packed at offset " +
                                                  std::to_string(expected_end));
      if (off + len > blob.size())
        throw FormatError(K::truncated, "blob ends before tensor '" + r.name + "'");
      const auto src = blob.subspan(off, len);
      r.bytes.assign(src.begin(), src.end());
      expected_end = off + len;
      a.tensors.push_back(std::move(r));
    }
    if (expected_end != blob.size())
      throw FormatError(K::length_mismatch, "blob holds " + std::to_string(blob.size()) +
                                                " bytes but the manifest describes " + std::to_string(expected_end));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(K::bad_manifest, e.what());
  } catch (const ShapeError& e) {
    throw FormatError(K::bad_manifest, e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(K::bad_manifest, e.what());
  }
  return a;
}

inline std::vector<std::byte> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot open '" + path.string() + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(buf.size());
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot write '" + path.string() + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError(FormatErrorKind::io, "write failed for '" + path.string() + "'");
}

inline Archive read_archive(const std::filesystem::path& path) { return decode_archive(read_file_bytes(path)); }

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
  write_file_bytes(path, encode_archive(a));
}

// ---------------------------------------------------------------------------
// Dense models

inline Archive to_archive(const Model& m, nlohmann::json provenance = nlohmann::json::object()) {
  Archive a;
  a.kind = "dense";
  a.config = m.config;
  a.provenance = std::move(provenance);
  for (const auto& p : m.arch.parameters()) a.tensors.push_back(TensorRecord::from(p.name, "param", m.param(p.name)));
  for (const auto& bn : m.arch.batchnorms())
    for (const char* s : {".running_mean", ".running_var"})
      a.tensors.push_back(TensorRecord::from(bn + s, "buffer", m.buffer(bn + s)));
  for (const auto& [name, mask] : m.masks) a.tensors.push_back(TensorRecord::from(name, "mask", mask));
  return a;
}

inline ModelConfig config_from_archive(const Archive& a) {
  try {
    return a.config.get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorKind::bad_manifest, std::string("config: ") + e.what());
  }
}

inline Model model_from_archive(const Archive& a) {
  if (a.kind != "dense")
    throw FormatError(FormatErrorKind::bad_manifest, "expected a dense model, file holds kind '" + a.kind + "'");
  Model m;
  m.config = config_from_archive(a);
  m.arch = describe(m.config);
  auto fetch = [&](const std::string& name, const char* role, const Shape& shape) {
    const auto* r = a.find(name, role);
    if (!r) throw FormatError(FormatErrorKind::bad_manifest, "missing tensor '" + name + "'");
    if (r->shape != shape)
      throw FormatError(FormatErrorKind::bad_manifest, "tensor '" + name + "' has shape " + shape_str(r->shape) +
                                                           ", architecture expects " + shape_str(shape));
    return r->as<float>();
  };
  for (const auto& p : m.arch.parameters()) m.params.emplace(p.name, fetch(p.name, "param", p.shape));
  for (const auto& bn : m.arch.batchnorms()) {
    const auto shape = m.params.at(bn + ".weight").shape();
    for (const char* s : {".running_mean", ".running_var"}) m.buffers.emplace(bn + s, fetch(bn + s, "buffer", shape));
  }
  for (const auto& t : a.tensors) {
    if (t.role != "mask") continue;
    auto it = m.params.find(t.name);
    if (it == m.params.end() || it->second.shape() != t.shape)
      throw FormatError(FormatErrorKind::bad_manifest, "mask '" + t.name + "' matches no parameter");
    m.masks.emplace(t.name, t.as<std::uint8_t>());
  }
  return m;
}

inline void save(const Model& m, const std::filesystem::path& path,
                 nlohmann::json provenance = nlohmann::json::object()) {
  write_archive(path, to_archive(m, std::move(provenance)));
}

inline Model load(const std::filesystem::path& path) { return model_from_archive(read_archive(path)); }

inline std::string model_hash(const Model& m) { return content_hash(to_archive(m)); }

// ---------------------------------------------------------------------------
// External weight import

/// Maps names found in a foreign archive onto this library's parameter
/// names. Loaded from the JSON mapping table shipped with the repository.
struct WeightMapping {
  std::vector<std::string> strip_prefixes{"module."};
  std::vector<std::string> ignore_suffixes{".num_batches_tracked"};
  std::map<std::string, std::string> rename;
  std::set<std::string> head{"fc.weight", "fc.bias"};

  std::optional<std::string> map(std::string name) const {
    for (const auto& s : ignore_suffixes)
      if (name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0) return std::nullopt;
    for (const auto& p : strip_prefixes)
      if (name.rfind(p, 0) == 0) name = name.substr(p.size());
    if (auto it = rename.find(name); it != rename.end()) return it->second;
    return name;
  }
};

inline WeightMapping weight_mapping_from_json(const nlohmann::json& j) {
  WeightMapping m;
  m.strip_prefixes = j.value("strip_prefixes", m.strip_prefixes);
  m.ignore_suffixes = j.value("ignore_suffixes", m.ignore_suffixes);
  m.rename = j.value("rename", m.rename);
  if (j.contains("head")) m.head = j.at("head").get<std::set<std::string>>();
  return m;
}

inline WeightMapping load_weight_mapping(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot open mapping table '" + path.string() + "'");
  return weight_mapping_from_json(nlohmann::json::parse(f));
}

struct ImportReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;
};

inline void to_json(nlohmann::json& j, const ImportReport& r) {
  j = nlohmann::json{{"loaded", r.loaded}, {"skipped", r.skipped}};
}

class ImportError : public std::runtime_error {
 public:
  ImportError(std::string tensor, const std::string& msg) : std::runtime_error(msg), tensor_(std::move(tensor)) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

/// Copies every f32 parameter/buffer in `archive` whose mapped name exists in
/// `model`. Head tensors are skipped when their shape differs (class-count
/// change); any other shape disagreement is an error naming the tensor.
inline ImportReport import_external_weights(Model& model, const Archive& archive,
                                            const WeightMapping& mapping = {}) {
  ImportReport report;
  Model staged = model;
  for (const auto& r : archive.tensors) {
    if (r.role != "param" && r.role != "buffer") {
      report.skipped.push_back(r.name);
      continue;
    }
    const auto target = mapping.map(r.name);
    if (!target || r.dtype != DType::f32) {
      report.skipped.push_back(r.name);
      continue;
    }
    Tensor<float>* dst = nullptr;
    if (auto it = staged.params.find(*target); it != staged.params.end()) dst = &it->second;
    else if (auto jt = staged.buffers.find(*target); jt != staged.buffers.end()) dst = &jt->second;
    if (!dst) {
      report.skipped.push_back(r.name);
      continue;
    }
    if (dst->shape() != r.shape) {
      if (mapping.head.count(*target)) {
        report.skipped.push_back(r.name);
        continue;
      }
      throw ImportError(r.name, "import: tensor '" + r.name + "' has shape " + shape_str(r.shape) +
                                    " but '" + *target + "' expects " + shape_str(dst->shape()));
    }
    *dst = r.as<float>();
    report.loaded.push_back(r.name);
  }
  model = std::move(staged);
  return report;
}

}  // namespace rcmp
