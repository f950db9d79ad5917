#pragma once

// Shape-matrix latency benchmarking and the tuning workflow behind the CLI.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "edgert/autotune.hpp"
#include "edgert/config.hpp"
#include "edgert/engine.hpp"

namespace edgert {

struct BenchShape {
  std::int64_t prefill_len = 0;
  std::int64_t decode_len = 0;

  std::string label() const { return std::to_string(prefill_len) + "/" + std::to_string(decode_len); }
  bool operator==(const BenchShape&) const = default;
};

namespace detail {

inline std::int64_t parse_positive(const std::string& s, const std::string& whole) {
  if (s.empty() || s.size() > 9 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw ParseError("malformed shape '" + whole + "': expected P/D with positive integers");
  const auto v = std::stoll(s);
  if (v < 1) throw ParseError("malformed shape '" + whole + "': lengths must be >= 1");
  return v;
}

}  // namespace detail

// "512/32,1024/64" -> {(512,32), (1024,64)}; order is kept.
inline std::vector<BenchShape> parse_shapes(const std::string& list) {
  std::vector<BenchShape> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = list.find(',', start);
    const auto item = list.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    const auto slash = item.find('/');
    if (slash == std::string::npos) throw ParseError("malformed shape '" + item + "': expected P/D");
    out.push_back({detail::parse_positive(item.substr(0, slash), item), detail::parse_positive(item.substr(slash + 1), item)});
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

struct BenchSpec {
  std::vector<BenchShape> shapes;
  int warmup_runs = 3;
  int timed_runs = 10;
  std::uint64_t seed = 0;
  std::string request_id;  // slot to run in; first configured slot when empty
};

struct BenchMode {
  bool plan = true;
  bool speculative = false;
};

// Seeded uniform prompt over the whole vocabulary (bench runs have no stop token).
inline std::vector<TokenId> synthetic_prompt(std::int64_t length, std::int64_t vocab, std::uint64_t seed) {
  Lcg64 rng(seed);
  std::vector<TokenId> out(static_cast<std::size_t>(length));
  for (auto& t : out) t = static_cast<TokenId>(rng.next_below(static_cast<std::uint64_t>(vocab)));
  return out;
}

inline json summarize(const std::vector<double>& v) {
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  return {{"mean", v.empty() ? 0.0 : sum / static_cast<double>(v.size())},
          {"median", v.empty() ? 0.0 : median_of(v)},
          {"min", v.empty() ? 0.0 : *std::min_element(v.begin(), v.end())},
          {"max", v.empty() ? 0.0 : *std::max_element(v.begin(), v.end())}};
}

inline json environment_fingerprint() {
  json env;
#if defined(__clang__)
  env["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  env["compiler"] = std::string("gcc ") + __VERSION__;
#else
  env["compiler"] = "unknown";
#endif
  env["cplusplus"] = static_cast<std::int64_t>(__cplusplus);
#if defined(NDEBUG)
  env["build"] = "release";
#else
  env["build"] = "debug";
#endif
#if defined(__linux__)
  env["os"] = "linux";
#elif defined(__APPLE__)
  env["os"] = "darwin";
#elif defined(_WIN32)
  env["os"] = "windows";
#else
  env["os"] = "unknown";
#endif
  env["hw_profile"] = kCpuHwProfile;
  env["hardware_concurrency"] = static_cast<std::int64_t>(std::thread::hardware_concurrency());
  env["pointer_bits"] = static_cast<std::int64_t>(sizeof(void*) * 8);
  return env;
}

// Resolution of every given context against the table, for reports.
inline json dispatch_probe(const DispatchTable& table, const std::set<DispatchKey>& contexts) {
  json out = json::array();
  for (const auto& ctx : contexts) {
    const auto* e = table.select(ctx);
    json row = entry_to_json(DispatchEntry{ctx, e ? e->impl_id : "", e ? e->impl_params : json::object(), false});
    row["source"] = !e ? "none" : e->builtin ? "builtin" : "override";
    out.push_back(std::move(row));
  }
  return out;
}

inline EngineConfig bench_config(EngineConfig cfg, const BenchSpec& spec, const BenchMode& mode) {
  cfg.capture_decode_plan = mode.plan;
  cfg.speculative.enabled = mode.speculative;
  std::int64_t prefix = 0;
  for (const auto& s : cfg.slots)
    if (spec.request_id.empty() ? &s == &cfg.slots.front() : s.request_id == spec.request_id)
      prefix = static_cast<std::int64_t>(s.prefix_tokens.size());
  std::int64_t need = 0;
  for (const auto& sh : spec.shapes) need = std::max(need, prefix + sh.prefill_len + sh.decode_len);
  cfg.kv.max_seq_len = std::max(cfg.kv.max_seq_len, need);
  return cfg;
}

// Runs every shape with warmups then timed runs; rows follow spec.shapes order.
inline json run_bench(const EngineConfig& base_cfg, const BenchSpec& spec, const BenchMode& mode) {
  if (spec.shapes.empty()) throw ValidationError("bench needs at least one shape");
  if (spec.warmup_runs < 0 || spec.timed_runs < 1) throw ValidationError("bench needs warmup >= 0 and runs >= 1");
  const auto cfg = bench_config(base_cfg, spec, mode);
  Engine engine(cfg);
  const auto request_id = spec.request_id.empty() ? cfg.slots.front().request_id : spec.request_id;
  engine.kv_manager().slot(request_id);

  std::set<DispatchKey> seen;
  engine.table().set_observer([&](const DispatchKey& k) { seen.insert(k); });
  if (const auto* plan = engine.plan(request_id))
    for (const auto& op : plan->ops()) seen.insert(op.context);

  json rows = json::array();
  for (std::size_t si = 0; si < spec.shapes.size(); ++si) {
    const auto& shape = spec.shapes[si];
    const auto prompt = synthetic_prompt(shape.prefill_len, engine.arch().vocab_size, spec.seed + si);
    const InferenceRequest req{request_id, prompt, shape.decode_len, std::nullopt};
    for (int i = 0; i < spec.warmup_runs; ++i) engine.execute(req);

    std::vector<double> prefill, decode, total, step;
    std::vector<std::int64_t> tokens_per_run;
    double worst_gap = 0.0;
    std::vector<TokenId> first_output;
    bool deterministic = true;
    SpeculativeStats spec_total;
    for (int i = 0; i < spec.timed_runs; ++i) {
      const auto resp = engine.execute(req);
      const auto& s = resp.stats;
      prefill.push_back(s.prefill_ms);
      decode.push_back(s.decode_ms);
      total.push_back(s.total_ms);
      step.insert(step.end(), s.per_step_ms.begin(), s.per_step_ms.end());
      tokens_per_run.push_back(s.new_tokens);
      if (s.total_ms > 0) worst_gap = std::max(worst_gap, std::abs(s.total_ms - s.prefill_ms - s.decode_ms) / s.total_ms);
      if (i == 0)
        first_output = resp.output_tokens;
      else if (resp.output_tokens != first_output)
        deterministic = false;
      if (s.speculative) {
        spec_total.proposed += s.speculative->proposed;
        spec_total.accepted += s.speculative->accepted;
        spec_total.cycles += s.speculative->cycles;
      }
    }
    json row = {{"shape", shape.label()},
                {"prefill_len", shape.prefill_len},
                {"decode_len", shape.decode_len},
                {"prompt_tokens", engine.kv_manager().slot(request_id).prefix_len() + shape.prefill_len},
                {"mode", {{"plan", mode.plan}, {"speculative", mode.speculative}}},
                {"runs", spec.timed_runs},
                {"prefill_ms", summarize(prefill)},
                {"decode_ms", summarize(decode)},
                {"total_ms", summarize(total)},
                {"step_ms", summarize(step)},
                {"tokens_per_run", tokens_per_run},
                {"max_decomposition_gap", worst_gap},
                {"deterministic", deterministic},
                {"output_tokens", first_output}};
    if (mode.speculative) row["accept_ratio"] = spec_total.accept_ratio();
    rows.push_back(std::move(row));
  }
  engine.table().set_observer(nullptr);

  return {{"schema_version", 1},
          {"seed", spec.seed},
          {"request_id", request_id},
          {"warmup_runs", spec.warmup_runs},
          {"timed_runs", spec.timed_runs},
          {"mode", {{"plan", mode.plan}, {"speculative", mode.speculative}}},
          {"config", config_to_json(cfg)},
          {"environment", environment_fingerprint()},
          {"rows", rows},
          {"dispatch_probe", dispatch_probe(engine.table(), seen)}};
}

struct TuneSpec {
  std::int64_t prompt_len = 32;
  std::int64_t decode_len = 8;
  std::uint64_t seed = 0;
  std::string request_id;
  TuneOptions options{1, 5};
};

// Eager calibration generation; returns every context it resolved.
inline std::vector<DispatchKey> calibration_contexts(const EngineConfig& base_cfg, const TuneSpec& spec) {
  auto cfg = base_cfg;
  cfg.capture_decode_plan = false;
  cfg.speculative.enabled = false;
  BenchSpec shape_spec;
  shape_spec.shapes = {{spec.prompt_len, spec.decode_len}};
  shape_spec.request_id = spec.request_id;
  cfg = bench_config(cfg, shape_spec, {false, false});
  Engine engine(cfg);
  const auto request_id = spec.request_id.empty() ? cfg.slots.front().request_id : spec.request_id;
  std::set<DispatchKey> seen;
  engine.table().set_observer([&](const DispatchKey& k) { seen.insert(k); });
  engine.execute({request_id, synthetic_prompt(spec.prompt_len, engine.arch().vocab_size, spec.seed), spec.decode_len,
                  std::nullopt});
  engine.table().set_observer(nullptr);
  return {seen.begin(), seen.end()};
}

// Calibrate, tune against the configured table, return the winning entries.
inline std::vector<TuneResult> run_tune(const EngineConfig& cfg, const TuneSpec& spec) {
  const auto contexts = calibration_contexts(cfg, spec);
  const auto registry = builtin_registry();
  DispatchTable table(registry, true);
  if (cfg.dispatch_table_path) load_overrides(table, cfg.resolve_path(*cfg.dispatch_table_path));
  return auto_tune(table, contexts, registry, spec.options);
}

}  // namespace edgert
