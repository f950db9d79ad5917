#pragma once

// Canonical shape signatures: `key=value(|key=value)*`, keys in a fixed
// per-op_kind order, decimal integer values, no spaces.

#include <array>
#include <charconv>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "edgert/errors.hpp"

namespace edgert {

struct OpShapeKeys {
  std::string_view op_kind;
  std::vector<std::string_view> keys;
};

inline const std::vector<OpShapeKeys>& shape_grammar() {
  static const std::vector<OpShapeKeys> grammar = {
      {"linear", {"m", "in_features", "out_features"}},
      {"attention", {"q_len", "kv_len", "heads", "head_dim"}},
      {"rope", {"seq", "heads", "head_dim"}},
      {"rmsnorm", {"m", "features"}},
      {"gelu", {"m", "features"}},
      {"add", {"m", "features"}},
      {"embedding", {"m", "vocab", "hidden"}},
      {"kv_update", {"tokens", "kv_heads", "head_dim"}},
  };
  return grammar;
}

inline const std::vector<std::string_view>& shape_keys(std::string_view op_kind) {
  for (const auto& g : shape_grammar())
    if (g.op_kind == op_kind) return g.keys;
  throw ValidationError("no shape grammar for op_kind '" + std::string(op_kind) + "'");
}

inline bool has_shape_grammar(std::string_view op_kind) {
  for (const auto& g : shape_grammar())
    if (g.op_kind == op_kind) return true;
  return false;
}

inline std::string shape_sig_of(std::string_view op_kind, std::initializer_list<std::int64_t> values) {
  const auto& keys = shape_keys(op_kind);
  if (values.size() != keys.size())
    throw ValidationError("shape_sig for '" + std::string(op_kind) + "' needs " + std::to_string(keys.size()) +
                          " values");
  std::string out;
  std::size_t i = 0;
  for (auto v : values) {
    if (v < 0) throw ValidationError("shape_sig values must be non-negative");
    if (i) out += '|';
    out += keys[i++];
    out += '=';
    out += std::to_string(v);
  }
  return out;
}

// Parses and checks a signature against the op_kind's grammar.
inline std::vector<std::int64_t> parse_shape_sig(std::string_view op_kind, std::string_view sig) {
  const auto& keys = shape_keys(op_kind);
  std::vector<std::int64_t> values;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < keys.size(); ++k) {
    const auto bar = sig.find('|', pos);
    const auto field = sig.substr(pos, bar == std::string_view::npos ? std::string_view::npos : bar - pos);
    const auto eq = field.find('=');
    if (eq == std::string_view::npos || field.substr(0, eq) != keys[k])
      throw ParseError("shape_sig '" + std::string(sig) + "' does not match the " + std::string(op_kind) +
                       " grammar (expected key '" + std::string(keys[k]) + "')");
    const auto num = field.substr(eq + 1);
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
    if (num.empty() || ec != std::errc() || ptr != num.data() + num.size() || v < 0 ||
        (num.size() > 1 && num.front() == '0'))
      throw ParseError("shape_sig '" + std::string(sig) + "': value for '" + std::string(keys[k]) +
                       "' is not a decimal integer");
    values.push_back(v);
    const bool last = k + 1 == keys.size();
    if (last != (bar == std::string_view::npos))
      throw ParseError("shape_sig '" + std::string(sig) + "' has the wrong number of fields");
    pos = bar + 1;
  }
  return values;
}

}  // namespace edgert
