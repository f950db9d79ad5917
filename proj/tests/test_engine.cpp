#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support/fixtures.hpp"

using namespace edgert;
using namespace edgert::testing;

namespace {

EngineConfig with(EngineConfig c, bool plan, bool spec, std::int64_t block = 4) {
  c.capture_decode_plan = plan;
  c.speculative.enabled = spec;
  c.speculative.block_len = block;
  return c;
}

std::vector<TokenId> run(Engine& e, const std::vector<TokenId>& prompt, std::int64_t max_new,
                         std::optional<TokenId> stop = std::nullopt) {
  return e.execute({"default", prompt, max_new, stop}).output_tokens;
}

}  // namespace

TEST(Engine, PlainMatchesIndependentGreedy) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 31);
  const auto s = write_setup(dir, base);
  const auto prompt = random_tokens(10, 64, 5);
  const auto want = oracle_greedy(base, prompt, 24);
  for (bool plan : {true, false}) {
    Engine e(with(s.config, plan, false));
    EXPECT_EQ(plan, e.plan("default") != nullptr);
    EXPECT_EQ(run(e, prompt, 24), want) << "plan " << plan;
  }
}

TEST(Engine, SpeculativeIsLosslessAcrossSeedsAndBlockLengths) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TempDir dir;
    const auto base = generate_reference_artifact(small_arch(), seed);
    const auto draft = generate_derived_draft(base, seed + 50);
    const auto s = write_setup(dir, base, &draft);
    const auto prompt = random_tokens(7 + static_cast<std::int64_t>(seed), 64, seed);
    const auto want = oracle_greedy(base, prompt, 30);
    for (std::int64_t m : {1, 2, 4, 8}) {
      Engine e(with(s.config, false, true, m));
      const auto resp = e.execute({"default", prompt, 30, std::nullopt});
      EXPECT_EQ(resp.output_tokens, want) << "seed " << seed << " m " << m;
      ASSERT_TRUE(resp.stats.speculative);
      EXPECT_EQ(resp.stats.speculative->proposed, resp.stats.speculative->cycles * m);
    }
  }
}

TEST(Engine, PartialAcceptanceStaysLossless) {
  for (std::uint64_t seed : {4u, 5u}) {
    TempDir dir;
    auto [base, draft] = partial_draft_pair(small_arch(), seed);
    const auto s = write_setup(dir, base, &draft);
    const auto prompt = random_tokens(6, 64, seed);
    const auto want = oracle_greedy(base, prompt, 40);
    for (std::int64_t m : {1, 3, 4, 8}) {
      Engine e(with(s.config, true, true, m));
      const auto resp = e.execute({"default", prompt, 40, std::nullopt});
      EXPECT_EQ(resp.output_tokens, want) << "seed " << seed << " m " << m;
    }
  }
}

TEST(Engine, SelfDraftAcceptsEverything) {
  TempDir dir;
  auto [base, draft] = self_draft_pair(small_arch(), 8);
  const auto s = write_setup(dir, base, &draft);
  const auto prompt = random_tokens(5, 64, 1);
  Engine e(with(s.config, true, true, 4));
  const auto resp = e.execute({"default", prompt, 33, std::nullopt});
  EXPECT_EQ(resp.output_tokens, oracle_greedy(base, prompt, 33));
  ASSERT_TRUE(resp.stats.speculative);
  EXPECT_EQ(resp.stats.speculative->accept_ratio(), 1.0);
  // one token from the prefill logits, then five tokens per cycle
  EXPECT_EQ(resp.stats.speculative->cycles, 7);
}

TEST(Engine, ConstantDraftAcceptsNothing) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 12);
  const auto draft = constant_draft(base, 13);
  const auto s = write_setup(dir, base, &draft);
  const auto prompt = random_tokens(9, 64, 3);
  const auto want = oracle_greedy(base, prompt, 20);
  ASSERT_EQ(std::count(want.begin(), want.end(), 0), 0) << "precondition: base never emits token 0";
  Engine e(with(s.config, false, true, 4));
  const auto resp = e.execute({"default", prompt, 20, std::nullopt});
  EXPECT_EQ(resp.output_tokens, want);
  EXPECT_EQ(resp.stats.speculative->accepted, 0);
  EXPECT_EQ(resp.stats.speculative->accept_ratio(), 0.0);
  EXPECT_EQ(resp.stats.speculative->cycles, 19);
}

TEST(Engine, StopTokenHandling) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 14);
  const auto draft = generate_derived_draft(base, 15);
  const auto s = write_setup(dir, base, &draft);
  const auto prompt = random_tokens(8, 64, 4);
  const auto full = oracle_greedy(base, prompt, 20);
  for (bool spec : {false, true}) {
    Engine e(with(s.config, true, spec));
    // first generated token is the stop token: empty output
    const auto first = e.execute({"default", prompt, 20, full[0]});
    EXPECT_TRUE(first.output_tokens.empty());
    EXPECT_EQ(first.stats.new_tokens, 0);
    // a later stop truncates before it and excludes it
    const auto stop = full[6];
    const auto cut = static_cast<std::size_t>(std::find(full.begin(), full.end(), stop) - full.begin());
    EXPECT_EQ(run(e, prompt, 20, stop), std::vector<TokenId>(full.begin(), full.begin() + cut));
  }
}

TEST(Engine, MaxNewZeroHasNoDecodePhase) {
  TempDir dir;
  const auto s = write_setup(dir, generate_reference_artifact(small_arch(), 16));
  Engine e(s.config);
  const auto r = e.execute({"default", {1, 2, 3}, 0, std::nullopt});
  EXPECT_TRUE(r.output_tokens.empty());
  EXPECT_EQ(r.stats.decode_ms, 0.0);
  EXPECT_TRUE(r.stats.per_step_ms.empty());
  EXPECT_GT(r.stats.prefill_ms, 0.0);
  EXPECT_EQ(r.stats.prompt_tokens, 3);
  EXPECT_THROW(e.execute({"default", {1}, -1, std::nullopt}), ValidationError);
}

TEST(Engine, StatsAccounting) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 17);
  auto s = write_setup(dir, base);
  s.config.slots = {SlotConfig{"warm", {5, 6, 7, 8}, std::nullopt, 16}};
  Engine e(s.config);
  const auto r = e.execute({"warm", {1, 2}, std::nullopt, std::nullopt});
  EXPECT_EQ(r.stats.prompt_tokens, 6);
  EXPECT_EQ(r.stats.new_tokens, 16);
  EXPECT_EQ(r.stats.per_step_ms.size(), 16u);
  for (double x : r.stats.per_step_ms) EXPECT_GE(x, 0.0);
  const double steps = std::accumulate(r.stats.per_step_ms.begin(), r.stats.per_step_ms.end(), 0.0);
  EXPECT_NEAR(steps, r.stats.decode_ms, 0.05 * r.stats.decode_ms + 1e-3);
  EXPECT_LE(r.stats.prefill_ms + r.stats.decode_ms, r.stats.total_ms);
  EXPECT_NEAR(r.stats.prefill_ms + r.stats.decode_ms, r.stats.total_ms, 0.05 * r.stats.total_ms + 0.05);
  const auto j = stats_to_json(r.stats);
  EXPECT_EQ(j["new_tokens"], 16);
  EXPECT_FALSE(j.contains("speculative"));
}

TEST(Engine, CollectStatsExample) {
  RequestTimers t;
  t.start = Clock::now();
  t.end = t.start + std::chrono::milliseconds(10);
  t.speculative = SpeculativeStats{12, 10, 3};
  const auto s = collect_stats(t);
  EXPECT_EQ(s.prefill_ms, 0.0);
  EXPECT_EQ(s.decode_ms, 0.0);
  EXPECT_DOUBLE_EQ(s.total_ms, 10.0);
  EXPECT_DOUBLE_EQ(s.speculative->accept_ratio(), 10.0 / 12.0);
  EXPECT_DOUBLE_EQ(stats_to_json(s)["speculative"]["accept_ratio"].get<double>(), 10.0 / 12.0);
  EXPECT_EQ(SpeculativeStats{}.accept_ratio(), 0.0);
}

TEST(Engine, WarmPrefixAndEmptySuffix) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 18);
  const auto draft = generate_derived_draft(base, 19);
  auto s = write_setup(dir, base, &draft);
  const std::vector<TokenId> prefix = {9, 8, 7, 6, 5};
  s.config.slots = {SlotConfig{"default", prefix, std::nullopt, 16}};
  const auto want = oracle_greedy(base, prefix, 12);
  for (bool spec : {false, true})
    for (bool plan : {false, true}) {
      Engine e(with(s.config, plan, spec));
      for (int i = 0; i < 3; ++i) EXPECT_EQ(run(e, {}, 12), want);
      auto suffix = random_tokens(4, 64, 2);
      auto all = prefix;
      all.insert(all.end(), suffix.begin(), suffix.end());
      EXPECT_EQ(run(e, suffix, 12), oracle_greedy(base, all, 12));
    }
}

TEST(Engine, CompressedPrefixStillServesRequests) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 20);
  auto s = write_setup(dir, base);
  s.config.kv.compression = KVCompression::int8_per_channel;
  s.config.slots = {SlotConfig{"default", random_tokens(12, 64, 3), std::nullopt, 8}};
  Engine e(s.config);
  const auto a = run(e, {1, 2}, 8);
  const auto b = run(e, {1, 2}, 8);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.size(), 8u);
  EXPECT_TRUE(e.kv_manager().slot("default").compressed());
}

TEST(Engine, Deterministic) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 22);
  const auto draft = generate_derived_draft(base, 23);
  const auto s = write_setup(dir, base, &draft);
  const auto prompt = random_tokens(11, 64, 9);
  Engine a(with(s.config, true, true)), b(with(s.config, true, true));
  const auto first = run(a, prompt, 20);
  EXPECT_EQ(run(a, prompt, 20), first);
  EXPECT_EQ(run(b, prompt, 20), first);
}

TEST(Engine, RequestErrors) {
  TempDir dir;
  auto s = write_setup(dir, generate_reference_artifact(small_arch(), 24), nullptr, 32);
  Engine e(s.config);
  EXPECT_THROW(e.execute({"nobody", {1}, 1, std::nullopt}), UnknownRequest);
  EXPECT_THROW(e.execute({"default", {}, 1, std::nullopt}), ValidationError);
  EXPECT_THROW(e.execute({"default", random_tokens(30, 64, 1), 3, std::nullopt}), CapacityError);
  EXPECT_NO_THROW(e.execute({"default", random_tokens(30, 64, 1), 2, std::nullopt}));
  EXPECT_THROW(e.execute({"default", {64}, 1, std::nullopt}), RangeError);
  // the slot is usable again after every failure
  EXPECT_EQ(run(e, {1, 2}, 3).size(), 3u);
}

TEST(Engine, CreationErrors) {
  TempDir dir;
  auto s = write_setup(dir, generate_reference_artifact(small_arch(), 25));
  auto bad = s.config;
  bad.slots = {SlotConfig{"default", {999}, std::nullopt, 4}};
  EXPECT_THROW(Engine{bad}, ValidationError);
  auto spec = s.config;
  spec.speculative.enabled = true;
  EXPECT_THROW(Engine{spec}, ValidationError);
  auto missing = s.config;
  missing.prefill_artifact_path = "nope.efmt";
  EXPECT_THROW(Engine{missing}, Error);
  EXPECT_NO_THROW(create_engine(s.config_path));
}

TEST(Engine, ConcurrentCallsFailWithSlotBusy) {
  TempDir dir;
  auto s = write_setup(dir, generate_reference_artifact(small_arch(), 26));
  s.config.capture_decode_plan = false;
  Engine e(s.config);
  int rejected = 0;
  e.table().set_observer([&](const DispatchKey&) {
    try {
      e.execute({"default", {1}, 1, std::nullopt});
    } catch (const SlotBusy&) {
      ++rejected;
    }
  });
  run(e, {1, 2}, 2);
  e.table().set_observer(nullptr);
  EXPECT_GT(rejected, 0);

  // a held slot is busy for plain requests too
  e.prefill("default", {1, 2});
  EXPECT_THROW(e.execute({"default", {1}, 1, std::nullopt}), SlotBusy);
  e.release("default");
  EXPECT_NO_THROW(run(e, {1}, 1));
}

TEST(Engine, SessionApiMatchesExecute) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 27);
  const auto draft = generate_derived_draft(base, 28);
  const auto s = write_setup(dir, base, &draft);
  const auto a = random_tokens(5, 64, 1), b = random_tokens(3, 64, 2);
  auto ab = a;
  ab.insert(ab.end(), b.begin(), b.end());
  for (bool spec : {false, true}) {
    Engine e(with(s.config, true, spec));
    const auto pre = e.prefill("default", a);
    EXPECT_EQ(pre.prompt_tokens, 5);
    EXPECT_EQ(pre.new_tokens, 0);
    const auto g = e.generate("default", b, 10);
    EXPECT_EQ(g.output_tokens, oracle_greedy(base, ab, 10));
    EXPECT_EQ(g.stats.prompt_tokens, 8);

    e.prefill("default", ab);
    EXPECT_EQ(e.generate("default", {}, 10).output_tokens, oracle_greedy(base, ab, 10));
    // not held: generate runs a complete request
    EXPECT_EQ(e.generate("default", ab, 10).output_tokens, oracle_greedy(base, ab, 10));

    e.prefill("default", a);
    e.release("default");
    e.release("default");
    EXPECT_EQ(e.generate("default", ab, 10).output_tokens, oracle_greedy(base, ab, 10));
  }
}

TEST(Engine, ShutdownClosesEverything) {
  TempDir dir;
  const auto s = write_setup(dir, generate_reference_artifact(small_arch(), 29));
  auto e = create_engine(s.config_path);
  run(*e, {1}, 2);
  e->shutdown();
  EXPECT_TRUE(e->closed());
  EXPECT_NO_THROW(e->shutdown());
  EXPECT_THROW(e->execute({"default", {1}, 1, std::nullopt}), EngineClosed);
  EXPECT_THROW(e->prefill("default", {1}), EngineClosed);
  EXPECT_THROW(e->generate("default", {1}), EngineClosed);
  EXPECT_THROW(e->release("default"), EngineClosed);
}

TEST(Engine, CapacityIncludesSpeculativeHeadroom) {
  TempDir dir;
  const auto base = generate_reference_artifact(small_arch(), 30);
  const auto draft = generate_derived_draft(base, 31);
  const auto s = write_setup(dir, base, &draft, 40);
  Engine plain(with(s.config, true, false)), spec(with(s.config, true, true, 6));
  EXPECT_EQ(plain.capacity(), 40);
  EXPECT_EQ(spec.capacity(), 46);
  // a request that exactly fills max_seq_len works in both modes
  const auto prompt = random_tokens(10, 64, 4);
  EXPECT_EQ(run(spec, prompt, 30), run(plain, prompt, 30));
  EXPECT_EQ(run(plain, prompt, 30), oracle_greedy(base, prompt, 30));
}
