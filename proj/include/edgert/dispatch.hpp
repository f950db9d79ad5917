#pragma once

// Operator implementation table.
//
// An entry matches a context when each of its non-empty key fields equals the
// context's field (empty = wildcard). Among matching entries whose kernel can
// run the context, the winner is decided by:
//   1. more non-wildcard fields
//   2. non-wildcard on the higher-priority field, in the order
//      shape_sig > stage > op_name > layer_role > op_kind > hw_profile > model_name
//   3. external entries over built-in defaults
//   4. lexicographically smallest impl_id
//   5. the entry added last

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "edgert/errors.hpp"
#include "edgert/kernels.hpp"
#include "edgert/shape_sig.hpp"

namespace edgert {

using nlohmann::json;

inline constexpr const char* kStagePrefill = "prefill";
inline constexpr const char* kStageDecode = "decode";
inline constexpr const char* kCpuHwProfile = "cpu_ref";

struct DispatchKey {
  std::string model_name;
  std::string hw_profile;
  std::string op_kind;
  std::string layer_role;
  std::string op_name;
  std::string stage;
  std::string shape_sig;

  // Fields in descending tie-break priority.
  std::array<const std::string*, 7> by_priority() const {
    return {&shape_sig, &stage, &op_name, &layer_role, &op_kind, &hw_profile, &model_name};
  }

  int specificity() const {
    int n = 0;
    for (const auto* f : by_priority()) n += !f->empty();
    return n;
  }

  bool fully_concrete() const { return specificity() == 7; }

  bool matches(const DispatchKey& ctx) const {
    const auto mine = by_priority();
    const auto theirs = ctx.by_priority();
    for (std::size_t i = 0; i < mine.size(); ++i)
      if (!mine[i]->empty() && *mine[i] != *theirs[i]) return false;
    return true;
  }

  std::string cache_key() const {
    std::string k;
    for (const auto* f : by_priority()) {
      k += *f;
      k += '\x1f';
    }
    return k;
  }

  bool operator==(const DispatchKey&) const = default;
  auto operator<=>(const DispatchKey&) const = default;
};

struct DispatchEntry {
  DispatchKey key;
  std::string impl_id;
  json impl_params = json::object();
  bool builtin = false;
};

// True when `a` should be preferred over `b`; a_index/b_index are insertion order.
inline bool outranks(const DispatchEntry& a, std::size_t a_index, const DispatchEntry& b, std::size_t b_index) {
  const int sa = a.key.specificity(), sb = b.key.specificity();
  if (sa != sb) return sa > sb;
  const auto pa = a.key.by_priority(), pb = b.key.by_priority();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->empty() != pb[i]->empty()) return !pa[i]->empty();
  if (a.builtin != b.builtin) return !a.builtin;
  if (a.impl_id != b.impl_id) return a.impl_id < b.impl_id;
  return a_index > b_index;
}

inline std::vector<DispatchEntry> builtin_default_entries() {
  auto entry = [](std::string op_kind, std::string impl, json params = json::object(), std::string stage = "",
                  std::string op_name = "") {
    DispatchEntry e;
    e.key.op_kind = std::move(op_kind);
    e.key.stage = std::move(stage);
    e.key.op_name = std::move(op_name);
    e.impl_id = std::move(impl);
    e.impl_params = std::move(params);
    e.builtin = true;
    return e;
  };
  return {
      entry("linear", "linear.blocked", json{{"tile", 16}}),
      entry("attention", "attention.prefill_masked"),
      entry("attention", "attention.decode_cached", json::object(), kStageDecode),
      entry("rope", "rope.fused"),
      entry("gelu", "gelu.erf"),
      entry("gelu", "gelu.erf", json::object(), "", "gelu_erf"),
      entry("gelu", "gelu.tanh", json::object(), "", "gelu_tanh"),
      entry("rmsnorm", "rmsnorm.ref"),
      entry("add", "add.ref"),
      entry("embedding", "embedding.lookup"),
      entry("kv_update", "kv_update.append"),
  };
}

struct ResolvedKernel {
  DispatchEntry entry;
  const KernelImpl* impl = nullptr;
  KernelFn fn;
};

class DispatchTable {
 public:
  explicit DispatchTable(const KernelRegistry& registry, bool with_defaults = true) : registry_(&registry) {
    if (with_defaults)
      for (auto& e : builtin_default_entries()) add(std::move(e));
  }

  DispatchTable(const DispatchTable&) = delete;
  DispatchTable& operator=(const DispatchTable&) = delete;

  const KernelRegistry& registry() const { return *registry_; }

  void add(DispatchEntry e) {
    if (frozen_) throw ValidationError("dispatch table is frozen");
    const auto& impl = registry_->at(e.impl_id);
    if (!e.key.op_kind.empty() && e.key.op_kind != impl.op_kind)
      throw ValidationError("entry op_kind '" + e.key.op_kind + "' does not match kernel '" + e.impl_id + "'");
    if (!e.key.stage.empty() && e.key.stage != kStagePrefill && e.key.stage != kStageDecode)
      throw ValidationError("entry stage must be prefill, decode or empty");
    if (!e.key.shape_sig.empty()) parse_shape_sig(impl.op_kind, e.key.shape_sig);
    if (!e.impl_params.is_object()) throw ValidationError("impl_params must be an object");
    impl.bind(e.impl_params);  // validates impl_params
    entries_.push_back(std::move(e));
    invalidate();
  }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  const std::vector<DispatchEntry>& entries() const { return entries_; }

  std::vector<DispatchEntry> override_entries() const {
    std::vector<DispatchEntry> out;
    for (const auto& e : entries_)
      if (!e.builtin) out.push_back(e);
    return out;
  }

  // Called with every context passed to resolve(); used to collect a
  // calibration set for tuning.
  void set_observer(std::function<void(const DispatchKey&)> observer) {
    std::lock_guard lock(mutex_);
    observer_ = std::move(observer);
  }

  // Number of resolve() calls, cache hits included.
  std::uint64_t resolution_count() const {
    std::lock_guard lock(mutex_);
    return resolutions_;
  }

  const ResolvedKernel& resolve(const DispatchKey& ctx) const {
    if (!ctx.fully_concrete()) throw ValidationError("resolve needs a fully concrete context");
    std::lock_guard lock(mutex_);
    ++resolutions_;
    if (observer_) observer_(ctx);
    const auto key = ctx.cache_key();
    if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    auto resolved = resolve_uncached(ctx);
    return cache_.emplace(key, std::move(resolved)).first->second;
  }

  // Winning entry without touching the cache or counters.
  const DispatchEntry* select(const DispatchKey& ctx) const {
    std::vector<std::int64_t> shape;
    const bool has_grammar = has_shape_grammar(ctx.op_kind);
    if (has_grammar) shape = parse_shape_sig(ctx.op_kind, ctx.shape_sig);
    const DispatchEntry* best = nullptr;
    std::size_t best_index = 0;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& e = entries_[i];
      if (!e.key.matches(ctx)) continue;
      const auto* impl = registry_->find(e.impl_id);
      if (!impl || impl->op_kind != ctx.op_kind || !impl->applicable(ctx.stage, shape)) continue;
      if (!best || outranks(e, i, *best, best_index)) {
        best = &e;
        best_index = i;
      }
    }
    return best;
  }

 private:
  ResolvedKernel resolve_uncached(const DispatchKey& ctx) const {
    const auto* best = select(ctx);
    if (!best)
      throw NoKernel("no kernel for op_kind '" + ctx.op_kind + "' (stage " + ctx.stage + ", " + ctx.shape_sig + ")");
    ResolvedKernel r;
    r.entry = *best;
    r.impl = &registry_->at(best->impl_id);
    r.fn = r.impl->bind(best->impl_params);
    return r;
  }

  void invalidate() {
    std::lock_guard lock(mutex_);
    cache_.clear();
  }

  const KernelRegistry* registry_;
  std::vector<DispatchEntry> entries_;
  bool frozen_ = false;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::string, ResolvedKernel> cache_;
  mutable std::uint64_t resolutions_ = 0;
  std::function<void(const DispatchKey&)> observer_;
};

// ---------------------------------------------------------------------------
// Override / tuning files: a JSON array of objects with exactly the keys
// model_name, hw_profile, op_kind, layer_role, op_name, stage, shape_sig,
// impl_id, impl_params.

inline json entry_to_json(const DispatchEntry& e) {
  return json{{"model_name", e.key.model_name}, {"hw_profile", e.key.hw_profile}, {"op_kind", e.key.op_kind},
              {"layer_role", e.key.layer_role}, {"op_name", e.key.op_name},       {"stage", e.key.stage},
              {"shape_sig", e.key.shape_sig},   {"impl_id", e.impl_id},           {"impl_params", e.impl_params}};
}

inline json entries_to_json(const std::vector<DispatchEntry>& entries) {
  json out = json::array();
  for (const auto& e : entries) out.push_back(entry_to_json(e));
  return out;
}

inline DispatchEntry entry_from_json(const json& j) {
  static const std::array<const char*, 9> keys = {"model_name", "hw_profile", "op_kind",  "layer_role", "op_name",
                                                  "stage",      "shape_sig",  "impl_id", "impl_params"};
  if (!j.is_object()) throw ParseError("override entries must be objects");
  if (j.size() != keys.size()) throw ParseError("override entry must have exactly the keys of the table schema");
  for (const char* k : keys)
    if (!j.contains(k)) throw ParseError(std::string("override entry is missing '") + k + "'");
  DispatchEntry e;
  try {
    e.key.model_name = j["model_name"].get<std::string>();
    e.key.hw_profile = j["hw_profile"].get<std::string>();
    e.key.op_kind = j["op_kind"].get<std::string>();
    e.key.layer_role = j["layer_role"].get<std::string>();
    e.key.op_name = j["op_name"].get<std::string>();
    e.key.stage = j["stage"].get<std::string>();
    e.key.shape_sig = j["shape_sig"].get<std::string>();
    e.impl_id = j["impl_id"].get<std::string>();
  } catch (const json::exception& ex) {
    throw ParseError(std::string("override entry: ") + ex.what());
  }
  e.impl_params = j["impl_params"];
  if (!e.impl_params.is_object()) throw ParseError("impl_params must be an object");
  for (const auto& [k, v] : e.impl_params.items())
    if (!v.is_primitive() || v.is_null()) throw ParseError("impl_params." + k + " must be a scalar");
  return e;
}

inline void load_overrides(DispatchTable& table, const json& doc) {
  if (!doc.is_array()) throw ParseError("override document must be a JSON array");
  std::vector<DispatchEntry> parsed;
  for (const auto& j : doc) parsed.push_back(entry_from_json(j));
  for (const auto& e : parsed) table.registry().at(e.impl_id);  // UnknownImpl before any mutation
  for (auto& e : parsed) table.add(std::move(e));
}

inline void load_overrides(DispatchTable& table, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open dispatch table '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(f);
  } catch (const json::exception& e) {
    throw ParseError("dispatch table '" + path.string() + "': " + e.what());
  }
  load_overrides(table, doc);
}

}  // namespace edgert
