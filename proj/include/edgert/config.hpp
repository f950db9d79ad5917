#pragma once

// Engine configuration document and artifact resolution.

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "edgert/artifact.hpp"
#include "edgert/common.hpp"
#include "edgert/errors.hpp"

namespace edgert {

struct SamplingConfig {
  double temperature = 0.0;
  std::int64_t top_k = 1;
  double top_p = 1.0;

  bool greedy() const { return temperature == 0.0 && top_k == 1 && top_p == 1.0; }
  bool operator==(const SamplingConfig&) const = default;
};

enum class KVCompression { none, int8_per_channel };

inline const char* to_string(KVCompression c) {
  return c == KVCompression::none ? "none" : "int8_per_channel";
}

struct KVConfig {
  std::int64_t max_slots = 8;
  std::int64_t max_seq_len = 512;
  KVCompression compression = KVCompression::none;

  bool operator==(const KVConfig&) const = default;
};

struct SlotConfig {
  std::string request_id;
  std::vector<TokenId> prefix_tokens;
  std::optional<std::string> prefix_file;
  std::int64_t max_new_tokens = 128;

  bool operator==(const SlotConfig&) const = default;
};

struct SpecConfig {
  bool enabled = false;
  std::int64_t block_len = 4;

  bool operator==(const SpecConfig&) const = default;
};

struct EngineConfig {
  std::string prefill_artifact_path;
  std::optional<std::string> decode_artifact_path;
  std::optional<std::string> draft_artifact_path;
  SamplingConfig sampling;
  KVConfig kv;
  std::vector<SlotConfig> slots = {SlotConfig{"default", {}, std::nullopt, 128}};
  std::optional<std::string> dispatch_table_path;
  bool capture_decode_plan = true;
  SpecConfig speculative;
  std::uint64_t seed = 0;

  // Directory relative paths are resolved against; not part of the document.
  std::filesystem::path base_dir;

  std::filesystem::path resolve_path(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  }

  bool operator==(const EngineConfig& o) const {
    return prefill_artifact_path == o.prefill_artifact_path && decode_artifact_path == o.decode_artifact_path &&
           draft_artifact_path == o.draft_artifact_path && sampling == o.sampling && kv == o.kv &&
           slots == o.slots && dispatch_table_path == o.dispatch_table_path &&
           capture_decode_plan == o.capture_decode_plan && speculative == o.speculative && seed == o.seed;
  }
};

namespace detail {

inline void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!obj.is_object()) throw ParseError(where + " must be a JSON object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ParseError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get_as(const json& obj, const char* key, const std::string& where) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + "." + key + ": " + e.what());
  }
}

template <typename T>
std::optional<T> get_optional(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return get_as<T>(obj, key, where);
}

}  // namespace detail

inline void validate_config(const EngineConfig& cfg) {
  if (cfg.prefill_artifact_path.empty()) throw ValidationError("prefill_artifact_path is required");
  if (!cfg.sampling.greedy())
    throw ValidationError("only greedy sampling is supported (temperature=0, top_k=1, top_p=1)");
  if (cfg.kv.max_slots < 1) throw ValidationError("kv.max_slots must be positive");
  if (cfg.kv.max_seq_len < 1) throw ValidationError("kv.max_seq_len must be positive");
  if (cfg.slots.empty()) throw ValidationError("slots must not be empty");
  std::set<std::string> seen;
  for (const auto& s : cfg.slots) {
    if (s.request_id.empty()) throw ValidationError("slot request_id must not be empty");
    if (!seen.insert(s.request_id).second) throw ValidationError("duplicate slot request_id '" + s.request_id + "'");
    if (s.max_new_tokens < 1) throw ValidationError("slot '" + s.request_id + "': max_new_tokens must be positive");
    if (s.prefix_file && !s.prefix_tokens.empty())
      throw ValidationError("slot '" + s.request_id + "': give prefix_tokens or prefix_file, not both");
    for (auto t : s.prefix_tokens)
      if (t < 0) throw ValidationError("slot '" + s.request_id + "': negative prefix token id");
  }
  if (cfg.speculative.block_len < 1) throw ValidationError("speculative.block_len must be >= 1");
  if (cfg.speculative.block_len > cfg.kv.max_seq_len)
    throw ValidationError("speculative.block_len exceeds kv.max_seq_len");
}

inline EngineConfig config_from_json(const json& doc) {
  using detail::get_as;
  using detail::get_optional;
  detail::reject_unknown_keys(doc,
                              {"prefill_artifact_path", "decode_artifact_path", "draft_artifact_path", "sampling",
                               "kv", "slots", "dispatch_table_path", "capture_decode_plan", "speculative", "seed"},
                              "config");
  EngineConfig cfg;
  if (!doc.contains("prefill_artifact_path")) throw ValidationError("prefill_artifact_path is required");
  cfg.prefill_artifact_path = get_as<std::string>(doc, "prefill_artifact_path", "config");
  cfg.decode_artifact_path = get_optional<std::string>(doc, "decode_artifact_path", "config");
  cfg.draft_artifact_path = get_optional<std::string>(doc, "draft_artifact_path", "config");
  cfg.dispatch_table_path = get_optional<std::string>(doc, "dispatch_table_path", "config");
  if (doc.contains("capture_decode_plan"))
    cfg.capture_decode_plan = get_as<bool>(doc, "capture_decode_plan", "config");
  if (doc.contains("seed")) cfg.seed = get_as<std::uint64_t>(doc, "seed", "config");

  if (doc.contains("sampling")) {
    const auto& s = doc["sampling"];
    detail::reject_unknown_keys(s, {"temperature", "top_k", "top_p"}, "sampling");
    if (s.contains("temperature")) cfg.sampling.temperature = get_as<double>(s, "temperature", "sampling");
    if (s.contains("top_k")) cfg.sampling.top_k = get_as<std::int64_t>(s, "top_k", "sampling");
    if (s.contains("top_p")) cfg.sampling.top_p = get_as<double>(s, "top_p", "sampling");
  }
  if (doc.contains("kv")) {
    const auto& k = doc["kv"];
    detail::reject_unknown_keys(k, {"max_slots", "max_seq_len", "compression"}, "kv");
    if (k.contains("max_slots")) cfg.kv.max_slots = get_as<std::int64_t>(k, "max_slots", "kv");
    if (k.contains("max_seq_len")) cfg.kv.max_seq_len = get_as<std::int64_t>(k, "max_seq_len", "kv");
    if (k.contains("compression")) {
      const auto c = get_as<std::string>(k, "compression", "kv");
      if (c == "none") cfg.kv.compression = KVCompression::none;
      else if (c == "int8_per_channel") cfg.kv.compression = KVCompression::int8_per_channel;
      else throw ValidationError("kv.compression must be none or int8_per_channel, got '" + c + "'");
    }
  }
  if (doc.contains("slots")) {
    if (!doc["slots"].is_array()) throw ParseError("slots must be an array");
    cfg.slots.clear();
    for (const auto& s : doc["slots"]) {
      detail::reject_unknown_keys(s, {"request_id", "prefix_tokens", "prefix_file", "max_new_tokens"}, "slot");
      SlotConfig sc;
      sc.request_id = get_as<std::string>(s, "request_id", "slot");
      if (s.contains("prefix_tokens")) sc.prefix_tokens = get_as<std::vector<TokenId>>(s, "prefix_tokens", "slot");
      sc.prefix_file = get_optional<std::string>(s, "prefix_file", "slot");
      if (s.contains("max_new_tokens")) sc.max_new_tokens = get_as<std::int64_t>(s, "max_new_tokens", "slot");
      cfg.slots.push_back(std::move(sc));
    }
  }
  if (doc.contains("speculative")) {
    const auto& s = doc["speculative"];
    detail::reject_unknown_keys(s, {"enabled", "block_len"}, "speculative");
    if (s.contains("enabled")) cfg.speculative.enabled = get_as<bool>(s, "enabled", "speculative");
    if (s.contains("block_len")) cfg.speculative.block_len = get_as<std::int64_t>(s, "block_len", "speculative");
  }
  validate_config(cfg);
  return cfg;
}

inline json config_to_json(const EngineConfig& cfg) {
  json slots = json::array();
  for (const auto& s : cfg.slots) {
    json j = {{"request_id", s.request_id}, {"prefix_tokens", s.prefix_tokens}, {"max_new_tokens", s.max_new_tokens}};
    if (s.prefix_file) j["prefix_file"] = *s.prefix_file;
    slots.push_back(std::move(j));
  }
  json doc = {
      {"prefill_artifact_path", cfg.prefill_artifact_path},
      {"sampling", {{"temperature", cfg.sampling.temperature}, {"top_k", cfg.sampling.top_k}, {"top_p", cfg.sampling.top_p}}},
      {"kv", {{"max_slots", cfg.kv.max_slots}, {"max_seq_len", cfg.kv.max_seq_len}, {"compression", to_string(cfg.kv.compression)}}},
      {"slots", slots},
      {"capture_decode_plan", cfg.capture_decode_plan},
      {"speculative", {{"enabled", cfg.speculative.enabled}, {"block_len", cfg.speculative.block_len}}},
      {"seed", cfg.seed}};
  if (cfg.decode_artifact_path) doc["decode_artifact_path"] = *cfg.decode_artifact_path;
  if (cfg.draft_artifact_path) doc["draft_artifact_path"] = *cfg.draft_artifact_path;
  if (cfg.dispatch_table_path) doc["dispatch_table_path"] = *cfg.dispatch_table_path;
  return doc;
}

inline EngineConfig load_engine_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError("config '" + path.string() + "': " + e.what());
  }
  auto cfg = config_from_json(doc);
  cfg.base_dir = path.parent_path();
  return cfg;
}

// Little-endian u32 token ids.
inline std::vector<TokenId> load_token_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open token file '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw FormatError("token file '" + path.string() + "' size is not a multiple of 4");
  std::vector<TokenId> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t v = 0;
    std::memcpy(&v, bytes.data() + 4 * i, 4);
    if (v > static_cast<std::uint32_t>(std::numeric_limits<TokenId>::max()))
      throw FormatError("token file '" + path.string() + "' holds an id beyond the supported range");
    out[i] = static_cast<TokenId>(v);
  }
  return out;
}

inline void write_token_file(const std::filesystem::path& path, std::span<const TokenId> tokens) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open token file '" + path.string() + "' for writing");
  for (auto t : tokens) {
    const auto v = static_cast<std::uint32_t>(t);
    f.write(reinterpret_cast<const char*>(&v), 4);
  }
}

struct ResolvedArtifacts {
  std::shared_ptr<const ModelArtifact> prefill;
  std::shared_ptr<const ModelArtifact> decode;  // same object as prefill when no decode artifact is configured
  std::shared_ptr<const ModelArtifact> draft;   // set iff speculative decoding is enabled
};

inline void check_phase_compatible(const ArchMeta& p, const ArchMeta& d) {
  if (p.vocab_size != d.vocab_size || p.hidden_dim != d.hidden_dim)
    throw ArchMismatch("prefill and decode artifacts disagree on vocab_size/hidden_dim");
  if (p.n_layers != d.n_layers || p.n_kv_heads != d.n_kv_heads || p.head_dim != d.head_dim)
    throw ArchMismatch("prefill and decode artifacts disagree on KV geometry");
}

inline void check_draft_compatible(const ArchMeta& base, const ArchMeta& draft) {
  if (draft.role != ModelRole::draft) throw ArchMismatch("draft artifact is not a draft model");
  if (draft.vocab_size != base.vocab_size || draft.hidden_dim != base.hidden_dim)
    throw ArchMismatch("draft artifact disagrees with base on vocab_size/hidden_dim");
  if (draft.feature_tap_layers != base.feature_tap_layers)
    throw ArchMismatch("draft feature taps differ from the base model's tap layers");
}

inline ResolvedArtifacts resolve_artifacts(const EngineConfig& cfg) {
  if (cfg.speculative.enabled && !cfg.draft_artifact_path)
    throw ValidationError("speculative decoding is enabled but draft_artifact_path is not set");

  ResolvedArtifacts r;
  auto prefill = std::make_shared<ModelArtifact>(load_artifact(cfg.resolve_path(cfg.prefill_artifact_path)));
  if (prefill->arch.role != ModelRole::base) throw ArchMismatch("prefill artifact must be a base model");
  r.prefill = prefill;
  if (cfg.decode_artifact_path) {
    auto decode = std::make_shared<ModelArtifact>(load_artifact(cfg.resolve_path(*cfg.decode_artifact_path)));
    if (decode->arch.role != ModelRole::base) throw ArchMismatch("decode artifact must be a base model");
    check_phase_compatible(prefill->arch, decode->arch);
    if (decode->arch.feature_tap_layers != prefill->arch.feature_tap_layers)
      throw ArchMismatch("prefill and decode artifacts tap different feature layers");
    r.decode = decode;
  } else {
    r.decode = r.prefill;
  }
  if (cfg.speculative.enabled) {
    auto draft = std::make_shared<ModelArtifact>(load_artifact(cfg.resolve_path(*cfg.draft_artifact_path)));
    check_draft_compatible(prefill->arch, draft->arch);
    r.draft = draft;
  }
  return r;
}

}  // namespace edgert
