// edgert command-line front end: run, bench, tune, list-kernels, gen-artifact.
//
// Exit codes: 0 success, 1 usage/config/engine-creation error, 2 request-time error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "edgert/edgert.hpp"

namespace {

using namespace edgert;

constexpr int kExitConfig = 1;
constexpr int kExitRequest = 2;

struct ExitWith {
  int code;
};

void fail(int code, const std::string& what) {
  std::cerr << "edgert: " << what << "\n";
  throw ExitWith{code};
}

EngineConfig load_config_or_fail(const std::string& path) {
  if (path.empty()) fail(kExitConfig, "--config is required");
  try {
    return load_engine_config(path);
  } catch (const std::exception& e) {
    fail(kExitConfig, std::string("config error: ") + e.what());
  }
  return {};
}

std::unique_ptr<Engine> make_engine_or_fail(const EngineConfig& cfg) {
  try {
    return std::make_unique<Engine>(cfg);
  } catch (const Error& e) {
    fail(kExitConfig, "engine creation failed (" + e.kind() + "): " + e.what());
  } catch (const std::exception& e) {
    fail(kExitConfig, std::string("engine creation failed: ") + e.what());
  }
  return nullptr;
}

bool parse_on_off(const std::string& v, const char* flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  fail(kExitConfig, std::string(flag) + " expects on|off, got '" + v + "'");
  return false;
}

void write_json(const std::filesystem::path& path, const json& doc) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) fail(kExitConfig, "cannot write '" + path.string() + "'");
  f << doc.dump(2) << "\n";
  if (!f) fail(kExitConfig, "failed writing '" + path.string() + "'");
}

bool writable(const std::filesystem::path& path) {
  const bool existed = std::filesystem::exists(path);
  {
    std::ofstream f(path, std::ios::app);
    if (!f) return false;
  }
  if (!existed) std::filesystem::remove(path);
  return true;
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
};

struct RunArgs {
  std::string request_id;
  std::vector<TokenId> tokens;
  std::string tokens_file;
  std::optional<std::int64_t> max_new;
  std::optional<TokenId> stop;
};

int cmd_run(const Globals& g, const RunArgs& a) {
  auto cfg = load_config_or_fail(g.config);
  if (g.seed) cfg.seed = *g.seed;
  std::vector<TokenId> tokens = a.tokens;
  if (!a.tokens_file.empty()) {
    if (!a.tokens.empty()) fail(kExitConfig, "--tokens and --tokens-file are mutually exclusive");
    try {
      tokens = load_token_file(a.tokens_file);
    } catch (const std::exception& e) {
      fail(kExitConfig, e.what());
    }
  }
  auto engine = make_engine_or_fail(cfg);
  const auto id = a.request_id.empty() ? cfg.slots.front().request_id : a.request_id;
  try {
    const auto resp = engine->execute({id, tokens, a.max_new, a.stop});
    std::cout << json{{"request_id", id}, {"output_tokens", resp.output_tokens}, {"stats", stats_to_json(resp.stats)}}
                     .dump()
              << "\n";
  } catch (const Error& e) {
    fail(kExitRequest, e.kind() + ": " + e.what());
  }
  return 0;
}

struct BenchArgs {
  std::string shapes = "128/16,256/32";
  int warmup = 3;
  int runs = 10;
  std::string report;
  std::string plan;
  std::string speculative;
  std::string dispatch_table;
  std::string request_id;
};

int cmd_bench(const Globals& g, const BenchArgs& a) {
  BenchSpec spec;
  try {
    spec.shapes = parse_shapes(a.shapes);
  } catch (const std::exception& e) {
    fail(kExitConfig, e.what());
  }
  auto cfg = load_config_or_fail(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!a.dispatch_table.empty()) cfg.dispatch_table_path = std::filesystem::absolute(a.dispatch_table).string();
  spec.warmup_runs = a.warmup;
  spec.timed_runs = a.runs;
  spec.seed = cfg.seed;
  spec.request_id = a.request_id;
  BenchMode mode{cfg.capture_decode_plan, cfg.speculative.enabled};
  if (!a.plan.empty()) mode.plan = parse_on_off(a.plan, "--plan");
  if (!a.speculative.empty()) mode.speculative = parse_on_off(a.speculative, "--speculative");
  if (!a.report.empty() && !writable(a.report)) fail(kExitConfig, "cannot write report '" + a.report + "'");

  // engine creation happens inside run_bench; separate its failures from run failures
  make_engine_or_fail(bench_config(cfg, spec, mode));
  json report;
  try {
    report = run_bench(cfg, spec, mode);
  } catch (const Error& e) {
    fail(kExitRequest, e.kind() + ": " + e.what());
  }
  if (a.report.empty())
    std::cout << report.dump(2) << "\n";
  else
    write_json(a.report, report);
  return 0;
}

struct TuneArgs {
  std::string output;
  int warmup = 1;
  int reps = 5;
  std::int64_t prompt_len = 32;
  std::int64_t decode_len = 8;
  std::string request_id;
};

int cmd_tune(const Globals& g, const TuneArgs& a) {
  if (!writable(a.output)) fail(kExitConfig, "cannot write tuning output '" + a.output + "'");
  auto cfg = load_config_or_fail(g.config);
  if (g.seed) cfg.seed = *g.seed;
  make_engine_or_fail(cfg);
  TuneSpec spec;
  spec.prompt_len = a.prompt_len;
  spec.decode_len = a.decode_len;
  spec.seed = cfg.seed;
  spec.request_id = a.request_id;
  spec.options = {a.warmup, a.reps};
  std::vector<TuneResult> results;
  try {
    results = run_tune(cfg, spec);
  } catch (const Error& e) {
    fail(e.kind() == "ValidationError" ? kExitConfig : kExitRequest, e.kind() + ": " + e.what());
  }
  write_json(a.output, entries_to_json(tuned_entries(results)));
  std::size_t changed = 0;
  for (const auto& r : results)
    if (r.winner != 0) ++changed;
  std::cerr << "edgert: tuned " << results.size() << " contexts (" << changed
            << " differ from the first candidate), wrote " << a.output << "\n";
  return 0;
}

struct GenArgs {
  std::string output;
  std::string kind = "base";
  std::string base;
  ArchMeta arch;
};

int cmd_gen(const Globals& g, GenArgs a) {
  const auto seed = g.seed.value_or(0);
  try {
    ModelArtifact art;
    if (a.kind == "base") {
      art = generate_reference_artifact(a.arch, seed);
    } else if (a.kind == "draft") {
      const auto base = a.base.empty() ? generate_reference_artifact(a.arch, seed) : load_artifact(a.base);
      art = generate_derived_draft(base, seed + 1);
    } else {
      fail(kExitConfig, "--kind expects base|draft");
    }
    write_artifact(art, a.output);
  } catch (const Error& e) {
    fail(kExitConfig, e.kind() + ": " + e.what());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"edgert: single-request decoder inference runtime"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "engine config JSON");
  auto* seed_opt = app.add_option("--seed", seed, "seed for synthetic prompts and generated artifacts");

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "execute one request and print tokens and stats as JSON");
  run_cmd->add_option("--request-id", run.request_id, "slot request id (default: first slot)");
  run_cmd->add_option("--tokens", run.tokens, "comma separated input token ids")->delimiter(',');
  run_cmd->add_option("--tokens-file", run.tokens_file, "input tokens as little-endian uint32");
  run_cmd->add_option("--max-new-tokens", run.max_new, "override the slot's max_new_tokens");
  run_cmd->add_option("--stop-token", run.stop, "EOS token id");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "latency benchmark over prefill/decode shapes");
  bench_cmd->add_option("--shapes", bench.shapes, "P/D list, e.g. 128/16,256/32")->capture_default_str();
  bench_cmd->add_option("--warmup", bench.warmup, "warmup runs per shape")->capture_default_str();
  bench_cmd->add_option("--runs", bench.runs, "timed runs per shape")->capture_default_str();
  bench_cmd->add_option("--report", bench.report, "report path (stdout when omitted)");
  bench_cmd->add_option("--plan", bench.plan, "on|off (default: config)");
  bench_cmd->add_option("--speculative", bench.speculative, "on|off (default: config)");
  bench_cmd->add_option("--dispatch-table", bench.dispatch_table, "override file replacing the config's");
  bench_cmd->add_option("--request-id", bench.request_id, "slot to benchmark (default: first slot)");

  TuneArgs tune;
  auto* tune_cmd = app.add_subcommand("tune", "calibrate, auto-tune and write a dispatch override file");
  tune_cmd->add_option("--output", tune.output, "override file to write")->required();
  tune_cmd->add_option("--warmup", tune.warmup, "warmup calls per candidate")->capture_default_str();
  tune_cmd->add_option("--reps", tune.reps, "timed calls per candidate (odd, >= 3)")->capture_default_str();
  tune_cmd->add_option("--prompt-len", tune.prompt_len, "calibration prompt length")->capture_default_str();
  tune_cmd->add_option("--decode-len", tune.decode_len, "calibration decode length")->capture_default_str();
  tune_cmd->add_option("--request-id", tune.request_id, "slot to calibrate in (default: first slot)");

  auto* list_cmd = app.add_subcommand("list-kernels", "print the kernel registry as JSON");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-artifact", "write a seeded reference model artifact");
  gen_cmd->add_option("--output", gen.output, "artifact path")->required();
  gen_cmd->add_option("--kind", gen.kind, "base|draft")->capture_default_str();
  gen_cmd->add_option("--base", gen.base, "base artifact a draft is derived from");
  gen_cmd->add_option("--vocab", gen.arch.vocab_size)->capture_default_str();
  gen_cmd->add_option("--hidden", gen.arch.hidden_dim)->capture_default_str();
  gen_cmd->add_option("--layers", gen.arch.n_layers)->capture_default_str();
  gen_cmd->add_option("--heads", gen.arch.n_heads)->capture_default_str();
  gen_cmd->add_option("--kv-heads", gen.arch.n_kv_heads)->capture_default_str();
  gen_cmd->add_option("--head-dim", gen.arch.head_dim)->capture_default_str();
  gen_cmd->add_option("--mlp", gen.arch.mlp_dim)->capture_default_str();
  gen_cmd->add_option("--gelu", gen.arch.gelu_variant, "erf|tanh")->capture_default_str();
  gen_cmd->add_option("--taps", gen.arch.feature_tap_layers, "layers whose outputs feed the draft")
      ->delimiter(',')
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*run_cmd) return cmd_run(g, run);
    if (*bench_cmd) return cmd_bench(g, bench);
    if (*tune_cmd) return cmd_tune(g, tune);
    if (*list_cmd) {
      std::cout << builtin_registry().listing().dump(2) << "\n";
      return 0;
    }
    if (*gen_cmd) return cmd_gen(g, gen);
  } catch (const ExitWith& e) {
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "edgert: " << e.what() << "\n";
    return kExitRequest;
  }
  return 0;
}
