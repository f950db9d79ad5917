#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "edgert/edgert.hpp"

namespace edgert::testing {

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// Small architecture used by most tests (fast, still GQA).
ArchMeta small_arch();

// Base (and optional draft) artifacts written into `dir` plus a config that
// points at them. The config is returned with base_dir set.
struct Setup {
  EngineConfig config;
  std::filesystem::path config_path;
  std::filesystem::path base_path;
  std::filesystem::path draft_path;
};

Setup write_setup(const TempDir& dir, const ModelArtifact& base, const ModelArtifact* draft = nullptr,
                  std::int64_t max_seq_len = 256);

// Base with every decoder layer zeroed, and a derived draft with its layer and
// feature projection zeroed. Both reduce to lm_head(norm(embedding)), so the
// draft always agrees with the base.
std::pair<ModelArtifact, ModelArtifact> self_draft_pair(const ArchMeta& arch, std::uint64_t seed);

// Same pair with every third row of the draft's LM head zeroed, so the draft
// agrees with the base only part of the time.
std::pair<ModelArtifact, ModelArtifact> partial_draft_pair(const ArchMeta& arch, std::uint64_t seed);

// A draft whose final norm weight is zero: every logit is 0 and it always
// proposes token 0.
ModelArtifact constant_draft(const ModelArtifact& base, std::uint64_t seed);

std::vector<TokenId> random_tokens(std::int64_t n, std::int64_t vocab, std::uint64_t seed);

// Independent double-precision forward pass over the whole sequence; returns
// per-position logits [T][V].
std::vector<std::vector<double>> oracle_logits(const ModelArtifact& art, const std::vector<TokenId>& tokens);

// Greedy generation with a fresh runner and no plan, cache or engine.
std::vector<TokenId> oracle_greedy(const ModelArtifact& art, const std::vector<TokenId>& prompt, std::int64_t max_new);

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

CliResult run_cli(const std::vector<std::string>& args);

// Checks `doc` against the subset of JSON Schema used by schemas/*.json
// (type, required, properties, additionalProperties, items, minItems,
// minimum, enum, local $ref). Returns the violations found.
std::vector<std::string> schema_violations(const json& schema, const json& doc);

json read_json(const std::filesystem::path& path);

}  // namespace edgert::testing
