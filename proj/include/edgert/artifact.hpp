#pragma once

// Model artifacts: architecture metadata, the f32 tensor set, the EFMT
// container format, and the deterministic reference-weight generator.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "edgert/common.hpp"
#include "edgert/errors.hpp"

namespace edgert {

using nlohmann::json;

enum class ModelRole { base, draft };

struct ArchMeta {
  std::string name = "ref_decoder";
  ModelRole role = ModelRole::base;
  std::int64_t vocab_size = 256;
  std::int64_t hidden_dim = 64;
  std::int64_t n_layers = 4;
  std::int64_t n_heads = 4;
  std::int64_t n_kv_heads = 2;
  std::int64_t head_dim = 16;
  std::int64_t mlp_dim = 128;
  double rope_theta = 10000.0;
  double rmsnorm_eps = 1e-6;
  std::string gelu_variant = "erf";  // "erf" | "tanh"
  std::vector<std::int64_t> feature_tap_layers = {0, 2, 3};

  std::int64_t q_dim() const { return n_heads * head_dim; }
  std::int64_t kv_dim() const { return n_kv_heads * head_dim; }
  std::int64_t feature_dim() const {
    return static_cast<std::int64_t>(feature_tap_layers.size()) * hidden_dim;
  }

  bool operator==(const ArchMeta&) const = default;
};

// Reference draft architecture: one decoder layer fed by the token embedding
// plus a projection of the base model's tapped features.
inline ArchMeta reference_draft_arch(const ArchMeta& base) {
  ArchMeta d = base;
  d.name = "ref_draft";
  d.role = ModelRole::draft;
  d.n_layers = 1;
  return d;
}

inline void validate_arch(const ArchMeta& a) {
  auto fail = [&](const std::string& what) {
    throw ValidationError("arch '" + a.name + "': " + what);
  };
  if (a.vocab_size <= 0 || a.hidden_dim <= 0 || a.n_layers <= 0 || a.n_heads <= 0 ||
      a.n_kv_heads <= 0 || a.head_dim <= 0 || a.mlp_dim <= 0)
    fail("dimensions must be positive");
  if (a.hidden_dim != a.n_heads * a.head_dim) fail("hidden_dim must equal n_heads * head_dim");
  if (a.n_heads % a.n_kv_heads != 0) fail("n_heads must be divisible by n_kv_heads");
  if (a.head_dim % 2 != 0) fail("head_dim must be even for rotary embedding");
  if (!(a.rope_theta > 0.0)) fail("rope_theta must be positive");
  if (!(a.rmsnorm_eps > 0.0)) fail("rmsnorm_eps must be positive");
  if (a.gelu_variant != "erf" && a.gelu_variant != "tanh") fail("gelu_variant must be erf or tanh");
  if (a.role == ModelRole::draft && a.feature_tap_layers.empty())
    fail("draft models need at least one feature tap layer");
  if (a.role == ModelRole::base) {
    for (auto l : a.feature_tap_layers)
      if (l < 0 || l >= a.n_layers) fail("feature tap layer out of range");
  }
}

inline json arch_to_json(const ArchMeta& a) {
  return json{{"name", a.name},
              {"role", a.role == ModelRole::base ? "base" : "draft"},
              {"vocab_size", a.vocab_size},
              {"hidden_dim", a.hidden_dim},
              {"n_layers", a.n_layers},
              {"n_heads", a.n_heads},
              {"n_kv_heads", a.n_kv_heads},
              {"head_dim", a.head_dim},
              {"mlp_dim", a.mlp_dim},
              {"rope_theta", a.rope_theta},
              {"rmsnorm_eps", a.rmsnorm_eps},
              {"gelu_variant", a.gelu_variant},
              {"feature_tap_layers", a.feature_tap_layers}};
}

inline ArchMeta arch_from_json(const json& j) {
  ArchMeta a;
  try {
    a.name = j.at("name").get<std::string>();
    const auto role = j.value("role", std::string("base"));
    if (role != "base" && role != "draft") throw ValidationError("arch role must be base or draft");
    a.role = role == "base" ? ModelRole::base : ModelRole::draft;
    a.vocab_size = j.at("vocab_size").get<std::int64_t>();
    a.hidden_dim = j.at("hidden_dim").get<std::int64_t>();
    a.n_layers = j.at("n_layers").get<std::int64_t>();
    a.n_heads = j.at("n_heads").get<std::int64_t>();
    a.n_kv_heads = j.at("n_kv_heads").get<std::int64_t>();
    a.head_dim = j.at("head_dim").get<std::int64_t>();
    a.mlp_dim = j.at("mlp_dim").get<std::int64_t>();
    a.rope_theta = j.at("rope_theta").get<double>();
    a.rmsnorm_eps = j.at("rmsnorm_eps").get<double>();
    a.gelu_variant = j.at("gelu_variant").get<std::string>();
    a.feature_tap_layers = j.at("feature_tap_layers").get<std::vector<std::int64_t>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed arch metadata: ") + e.what());
  }
  validate_arch(a);
  return a;
}

struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
  }
};

struct TensorSpec {
  std::string name;
  std::vector<std::int64_t> shape;
};

// Every tensor an artifact of this architecture must carry, in canonical order.
inline std::vector<TensorSpec> parameter_manifest(const ArchMeta& a) {
  const auto H = a.hidden_dim;
  std::vector<TensorSpec> m;
  m.push_back({"tok_embeddings", {a.vocab_size, H}});
  if (a.role == ModelRole::draft) m.push_back({"feature_fc", {H, a.feature_dim()}});
  for (std::int64_t l = 0; l < a.n_layers; ++l) {
    const auto p = "layers." + std::to_string(l) + ".";
    m.push_back({p + "attn_norm", {H}});
    m.push_back({p + "wq", {a.q_dim(), H}});
    m.push_back({p + "wk", {a.kv_dim(), H}});
    m.push_back({p + "wv", {a.kv_dim(), H}});
    m.push_back({p + "wo", {H, a.q_dim()}});
    m.push_back({p + "mlp_norm", {H}});
    m.push_back({p + "w_up", {a.mlp_dim, H}});
    m.push_back({p + "w_down", {H, a.mlp_dim}});
  }
  m.push_back({"norm", {H}});
  m.push_back({"lm_head", {a.vocab_size, H}});
  return m;
}

namespace detail {
inline std::string shape_str(const std::vector<std::int64_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}
}  // namespace detail

class ModelArtifact {
 public:
  ArchMeta arch;

  const Tensor& tensor(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing tensor '" + name + "'");
    return it->second;
  }
  Tensor& mutable_tensor(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ShapeError("missing tensor '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  void add(const std::string& name, Tensor t) {
    if (tensors_.emplace(name, std::move(t)).second) order_.push_back(name);
    else throw ShapeError("duplicate tensor '" + name + "'");
  }

  void remove(const std::string& name) {
    tensors_.erase(name);
    order_.erase(std::remove(order_.begin(), order_.end(), name), order_.end());
  }

  // Payload order (file order when loaded, insertion order otherwise).
  const std::vector<std::string>& order() const { return order_; }
  std::size_t size() const { return tensors_.size(); }

  // Throws ShapeError naming the first missing or mis-shaped tensor.
  void check_manifest() const {
    for (const auto& spec : parameter_manifest(arch)) {
      auto it = tensors_.find(spec.name);
      if (it == tensors_.end()) throw ShapeError("missing tensor '" + spec.name + "'");
      if (it->second.shape != spec.shape)
        throw ShapeError("tensor '" + spec.name + "' has shape " + detail::shape_str(it->second.shape) +
                         ", expected " + detail::shape_str(spec.shape));
      if (static_cast<std::int64_t>(it->second.data.size()) != it->second.numel())
        throw ShapeError("tensor '" + spec.name + "' data size does not match its shape");
    }
  }

 private:
  std::map<std::string, Tensor> tensors_;
  std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// EFMT container
//   [0, 8)    magic "EFMT0001"
//   [8, 16)   u64 LE header length H
//   [16, 16+H) UTF-8 JSON header
//   payload at the first 64-byte aligned offset after the header; tensor
//   offsets are payload-relative.

inline constexpr char kEfmtMagic[8] = {'E', 'F', 'M', 'T', '0', '0', '0', '1'};
inline constexpr std::uint64_t kEfmtAlign = 64;

namespace detail {
inline std::uint64_t align_up(std::uint64_t v, std::uint64_t a) { return (v + a - 1) / a * a; }

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}
}  // namespace detail

inline std::vector<char> serialize_artifact(const ModelArtifact& art) {
  json tensors = json::object();
  std::uint64_t cursor = 0;
  std::vector<std::pair<std::uint64_t, const Tensor*>> layout;
  for (const auto& name : art.order()) {
    const auto& t = art.tensor(name);
    cursor = detail::align_up(cursor, kEfmtAlign);
    const std::uint64_t nbytes = t.data.size() * sizeof(float);
    tensors[name] = {{"dtype", "f32"}, {"shape", t.shape}, {"offset", cursor}, {"nbytes", nbytes}};
    layout.emplace_back(cursor, &t);
    cursor += nbytes;
  }

  std::vector<char> payload(cursor, 0);
  for (const auto& [off, t] : layout)
    if (!t->data.empty()) std::memcpy(payload.data() + off, t->data.data(), t->data.size() * sizeof(float));

  json header = {{"arch", arch_to_json(art.arch)},
                 {"tensors", tensors},
                 {"checksum", "fnv1a64:" + detail::hex64(fnv1a64(payload.data(), payload.size()))}};
  const std::string header_text = header.dump();
  const std::uint64_t header_len = header_text.size();
  const std::uint64_t payload_start = detail::align_up(16 + header_len, kEfmtAlign);

  std::vector<char> out(payload_start + payload.size(), 0);
  std::memcpy(out.data(), kEfmtMagic, 8);
  std::memcpy(out.data() + 8, &header_len, 8);
  std::memcpy(out.data() + 16, header_text.data(), header_len);
  if (!payload.empty()) std::memcpy(out.data() + payload_start, payload.data(), payload.size());
  return out;
}

inline void write_artifact(const ModelArtifact& art, const std::filesystem::path& path) {
  const auto bytes = serialize_artifact(art);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("failed writing '" + path.string() + "'");
}

// Byte offset where the payload starts in a serialized artifact.
inline std::uint64_t efmt_payload_offset(std::span<const char> bytes) {
  if (bytes.size() < 16) throw FormatError("file shorter than EFMT preamble");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  return detail::align_up(16 + header_len, kEfmtAlign);
}

inline ModelArtifact parse_artifact(std::span<const char> bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 16) throw FormatError(origin + ": file shorter than EFMT preamble");
  if (std::memcmp(bytes.data(), kEfmtMagic, 8) != 0) throw FormatError(origin + ": bad magic");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (header_len > bytes.size() - 16) throw FormatError(origin + ": header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw FormatError(origin + ": malformed header: " + e.what());
  }
  if (!header.is_object() || !header.contains("arch") || !header.contains("tensors") ||
      !header["tensors"].is_object())
    throw FormatError(origin + ": header must contain 'arch' and 'tensors'");

  const std::uint64_t payload_start = detail::align_up(16 + header_len, kEfmtAlign);
  if (payload_start > bytes.size()) throw FormatError(origin + ": truncated before payload");
  const std::uint64_t payload_size = bytes.size() - payload_start;
  const char* payload = bytes.data() + payload_start;

  ModelArtifact art;
  art.arch = arch_from_json(header["arch"]);

  struct Entry {
    std::uint64_t offset;
    std::string name;
  };
  std::vector<Entry> entries;
  for (const auto& [name, desc] : header["tensors"].items()) {
    Tensor t;
    std::uint64_t offset = 0, nbytes = 0;
    try {
      if (desc.at("dtype").get<std::string>() != "f32")
        throw FormatError(origin + ": tensor '" + name + "' has unsupported dtype");
      t.shape = desc.at("shape").get<std::vector<std::int64_t>>();
      offset = desc.at("offset").get<std::uint64_t>();
      nbytes = desc.at("nbytes").get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw FormatError(origin + ": tensor '" + name + "' descriptor: " + e.what());
    }
    for (auto d : t.shape)
      if (d < 0) throw FormatError(origin + ": tensor '" + name + "' has negative dimension");
    if (static_cast<std::uint64_t>(t.numel()) * sizeof(float) != nbytes)
      throw FormatError(origin + ": tensor '" + name + "' nbytes does not match shape");
    if (offset > payload_size || nbytes > payload_size - offset)
      throw FormatError(origin + ": tensor '" + name + "' extends past end of file (truncated?)");
    t.data.resize(static_cast<std::size_t>(t.numel()));
    if (nbytes) std::memcpy(t.data.data(), payload + offset, nbytes);
    entries.push_back({offset, name});
    art.add(name, std::move(t));
  }

  if (header.contains("checksum")) {
    const auto expected = header["checksum"].get<std::string>();
    const auto actual = "fnv1a64:" + detail::hex64(fnv1a64(payload, payload_size));
    if (expected != actual)
      throw ChecksumError(origin + ": payload checksum " + actual + " does not match header " + expected);
  }

  // Tensors keep payload order.
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
  ModelArtifact ordered;
  ordered.arch = art.arch;
  for (auto& e : entries) ordered.add(e.name, std::move(art.mutable_tensor(e.name)));
  ordered.check_manifest();
  return ordered;
}

inline ModelArtifact load_artifact(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open artifact '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_artifact(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Reference generator: every parameter, in manifest order and row-major
// within a tensor, is one draw from Lcg64(seed).

inline ModelArtifact generate_reference_artifact(const ArchMeta& arch, std::uint64_t seed) {
  validate_arch(arch);
  ModelArtifact art;
  art.arch = arch;
  Lcg64 rng(seed);
  for (const auto& spec : parameter_manifest(arch)) {
    Tensor t;
    t.shape = spec.shape;
    t.data.resize(static_cast<std::size_t>(t.numel()));
    for (auto& v : t.data) v = rng.next_weight();
    art.add(spec.name, std::move(t));
  }
  return art;
}

// Draft that shares the base model's embedding, final norm and LM head; the
// decoder layer and feature projection are fresh draws. Drafts built this way
// agree with the base model often enough to exercise partial acceptance.
inline ModelArtifact generate_derived_draft(const ModelArtifact& base, std::uint64_t seed) {
  auto draft = generate_reference_artifact(reference_draft_arch(base.arch), seed);
  for (const char* name : {"tok_embeddings", "norm", "lm_head"})
    draft.mutable_tensor(name).data = base.tensor(name).data;
  return draft;
}

}  // namespace edgert
