#pragma once

// Request execution: acquire slot -> prefill suffix -> decode -> release.
//
// Decoding is greedy. The plain loop replays the slot's captured step plan
// when one exists and falls back to eager decode steps otherwise. The
// speculative loop drafts m tokens with the draft model, verifies them in one
// base pass and commits the accepted prefix plus the base model's own token.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "edgert/artifact.hpp"
#include "edgert/config.hpp"
#include "edgert/dispatch.hpp"
#include "edgert/kernels.hpp"
#include "edgert/kv_manager.hpp"
#include "edgert/model.hpp"
#include "edgert/ops.hpp"
#include "edgert/step_plan.hpp"

namespace edgert {

struct InferenceRequest {
  std::string request_id;
  std::vector<TokenId> input_tokens;
  std::optional<std::int64_t> max_new_tokens;  // slot default when unset
  std::optional<TokenId> stop_token;
};

struct SpeculativeStats {
  std::int64_t proposed = 0;
  std::int64_t accepted = 0;
  std::int64_t cycles = 0;

  double accept_ratio() const { return proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0; }
};

struct RequestStats {
  double prefill_ms = 0.0;
  double decode_ms = 0.0;
  double total_ms = 0.0;
  std::int64_t prompt_tokens = 0;
  std::int64_t new_tokens = 0;
  std::vector<double> per_step_ms;  // one entry per emitted token
  std::optional<SpeculativeStats> speculative;
};

inline json stats_to_json(const RequestStats& s) {
  json j = {{"prefill_ms", s.prefill_ms},       {"decode_ms", s.decode_ms},   {"total_ms", s.total_ms},
            {"prompt_tokens", s.prompt_tokens}, {"new_tokens", s.new_tokens}, {"per_step_ms", s.per_step_ms}};
  if (s.speculative)
    j["speculative"] = {{"proposed", s.speculative->proposed},
                        {"accepted", s.speculative->accepted},
                        {"accept_ratio", s.speculative->accept_ratio()}};
  return j;
}

struct InferenceResponse {
  std::vector<TokenId> output_tokens;
  RequestStats stats;
};

using Clock = std::chrono::steady_clock;

inline double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

// Raw timestamps of one request. Phases left unset count as zero.
struct RequestTimers {
  Clock::time_point start, end;
  std::optional<Clock::time_point> prefill_begin, prefill_end;
  std::optional<Clock::time_point> decode_begin, decode_end;
  std::vector<double> per_step_ms;
  std::int64_t prompt_tokens = 0;
  std::int64_t new_tokens = 0;
  std::optional<SpeculativeStats> speculative;
};

inline RequestStats collect_stats(const RequestTimers& t) {
  RequestStats s;
  if (t.prefill_begin && t.prefill_end) s.prefill_ms = ms_between(*t.prefill_begin, *t.prefill_end);
  if (t.decode_begin && t.decode_end) s.decode_ms = ms_between(*t.decode_begin, *t.decode_end);
  s.total_ms = ms_between(t.start, t.end);
  s.prompt_tokens = t.prompt_tokens;
  s.new_tokens = t.new_tokens;
  s.per_step_ms = t.per_step_ms;
  s.speculative = t.speculative;
  return s;
}

class Engine {
 public:
  explicit Engine(EngineConfig config) : config_(std::move(config)) {
    validate_config(config_);
    artifacts_ = resolve_artifacts(config_);
    registry_ = std::make_unique<KernelRegistry>(builtin_registry());
    table_ = std::make_unique<DispatchTable>(*registry_, true);
    if (config_.dispatch_table_path) load_overrides(*table_, config_.resolve_path(*config_.dispatch_table_path));

    const auto& arch = artifacts_.prefill->arch;
    std::vector<SlotSpec> specs;
    for (const auto& s : config_.slots) {
      SlotSpec spec{s, s.prefix_tokens};
      if (s.prefix_file) spec.prefix_tokens = load_token_file(config_.resolve_path(*s.prefix_file));
      for (auto t : spec.prefix_tokens)
        if (t < 0 || t >= arch.vocab_size)
          throw ValidationError("prefix token " + std::to_string(t) + " of slot '" + s.request_id +
                                "' is outside the vocabulary");
      specs.push_back(std::move(spec));
    }

    const bool spec_on = config_.speculative.enabled;
    block_len_ = config_.speculative.block_len;
    const std::int64_t headroom = spec_on ? block_len_ : 0;
    capacity_ = config_.kv.max_seq_len + headroom;
    KVGeometry geometry{arch.n_layers, arch.n_kv_heads, arch.head_dim, capacity_};
    std::optional<KVGeometry> draft_geometry;
    if (spec_on) {
      const auto& d = artifacts_.draft->arch;
      draft_geometry = KVGeometry{d.n_layers, d.n_kv_heads, d.head_dim, capacity_};
    }
    kv_ = std::make_unique<KVManager>(config_.kv, specs, geometry, draft_geometry, headroom);

    prefill_runner_ = std::make_unique<ModelRunner>(*artifacts_.prefill, *table_, capacity_, capacity_);
    if (artifacts_.decode.get() != artifacts_.prefill.get())
      decode_runner_ = std::make_unique<ModelRunner>(*artifacts_.decode, *table_, capacity_, capacity_);
    if (spec_on) draft_runner_ = std::make_unique<ModelRunner>(*artifacts_.draft, *table_, capacity_, capacity_);

    const auto V = static_cast<std::size_t>(arch.vocab_size);
    const auto FD = static_cast<std::size_t>(std::max<std::int64_t>(arch.feature_dim(), 1));
    kv_->for_each_slot([&](KVSlot& slot) {
      auto& st = states_[slot.request_id()];
      st.prefix_logits = Buffer<float>(V);
      st.prefix_features = Buffer<float>(FD);
      st.logits = Buffer<float>(V);
      st.features = Buffer<float>(FD);
      if (spec_on) {
        st.context = Buffer<TokenId>(static_cast<std::size_t>(capacity_));
        st.block = Buffer<TokenId>(static_cast<std::size_t>(block_len_ + 1));
      }
    });

    warmup(*kv_, *prefill_runner_, [&](KVSlot& slot, const ForwardOutput& out) {
      auto& st = states_.at(slot.request_id());
      copy_last_row(out, st.prefix_logits, st.prefix_features);
    });
    table_->freeze();

    if (config_.capture_decode_plan) {
      kv_->for_each_slot([&](KVSlot& slot) {
        const auto k = slot.prefix_len();
        if (k + 1 > slot.capacity()) return;
        auto& s = kv_->acquire(slot.request_id());
        try {
          plans_.emplace(slot.request_id(), StepPlan::capture(decode_runner(), s, 0));
          s.truncate(k);
        } catch (...) {
          kv_->release(s);
          throw;
        }
        kv_->release(s);
      });
    }
  }

  static std::unique_ptr<Engine> create(const std::filesystem::path& config_path) {
    return std::make_unique<Engine>(load_engine_config(config_path));
  }

  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  // Full request: acquire, prefill, decode, release.
  InferenceResponse execute(const InferenceRequest& req) {
    BusyGuard busy(*this);
    RequestTimers timers;
    timers.start = Clock::now();
    auto& slot = kv_->acquire(req.request_id);
    InferenceResponse resp;
    try {
      auto& st = states_.at(req.request_id);
      const auto max_new = requested_max_new(slot, req.max_new_tokens);
      check_request_fits(slot, req.input_tokens.size(), max_new);
      run_prefill(slot, st, req.input_tokens, timers);
      run_decode(slot, st, max_new, req.stop_token, resp.output_tokens, timers);
    } catch (...) {
      kv_->release(slot);
      throw;
    }
    kv_->release(slot);
    timers.end = Clock::now();
    resp.stats = collect_stats(timers);
    return resp;
  }

  // Session API: prefill() holds the slot until generate() or release().
  RequestStats prefill(const std::string& request_id, const std::vector<TokenId>& tokens) {
    BusyGuard busy(*this);
    RequestTimers timers;
    timers.start = Clock::now();
    auto& slot = kv_->acquire(request_id);
    try {
      auto& st = states_.at(request_id);
      check_request_fits(slot, tokens.size(), 0);
      run_prefill(slot, st, tokens, timers);
      st.held = true;
      st.held_prompt = timers.prompt_tokens;
    } catch (...) {
      kv_->release(slot);
      throw;
    }
    timers.end = Clock::now();
    return collect_stats(timers);
  }

  // Continues a slot held by prefill() (extending it by `tokens` first), or
  // runs a complete request when the slot is not held.
  InferenceResponse generate(const std::string& request_id, const std::vector<TokenId>& tokens,
                             std::optional<std::int64_t> max_new_tokens = std::nullopt,
                             std::optional<TokenId> stop_token = std::nullopt) {
    check_open();
    auto it = states_.find(request_id);
    if (it == states_.end() || !it->second.held)
      return execute({request_id, tokens, max_new_tokens, stop_token});

    BusyGuard busy(*this);
    auto& st = it->second;
    auto& slot = kv_->slot(request_id);
    RequestTimers timers;
    timers.start = Clock::now();
    InferenceResponse resp;
    try {
      const auto max_new = requested_max_new(slot, max_new_tokens);
      const auto held = st.held_prompt;
      check_request_fits(slot, static_cast<std::size_t>(slot.current_len() - slot.prefix_len()) + tokens.size(),
                         max_new);
      if (!tokens.empty()) {
        run_prefill(slot, st, tokens, timers);
      }
      timers.prompt_tokens = held + static_cast<std::int64_t>(tokens.size());
      run_decode(slot, st, max_new, stop_token, resp.output_tokens, timers);
    } catch (...) {
      st.held = false;
      kv_->release(slot);
      throw;
    }
    st.held = false;
    kv_->release(slot);
    timers.end = Clock::now();
    resp.stats = collect_stats(timers);
    return resp;
  }

  void release(const std::string& request_id) {
    check_open();
    auto& slot = kv_->slot(request_id);
    auto& st = states_.at(request_id);
    if (!st.held) return;
    st.held = false;
    kv_->release(slot);
  }

  void shutdown() {
    if (closed_) return;
    if (busy_.load()) throw SlotBusy("cannot shut down while a request is running");
    closed_ = true;
    plans_.clear();
    states_.clear();
    draft_runner_.reset();
    decode_runner_.reset();
    prefill_runner_.reset();
    kv_.reset();
    table_.reset();
    registry_.reset();
    artifacts_ = {};
  }

  bool closed() const { return closed_; }
  const EngineConfig& config() const { return config_; }
  const ArchMeta& arch() const { return artifacts_.prefill->arch; }
  std::int64_t capacity() const { return capacity_; }
  DispatchTable& table() { return *table_; }
  const KernelRegistry& registry() const { return *registry_; }
  KVManager& kv_manager() { return *kv_; }
  ModelRunner& prefill_runner() { return *prefill_runner_; }
  ModelRunner& decode_runner() { return decode_runner_ ? *decode_runner_ : *prefill_runner_; }
  ModelRunner* draft_runner() { return draft_runner_.get(); }
  const StepPlan* plan(const std::string& request_id) const {
    auto it = plans_.find(request_id);
    return it == plans_.end() ? nullptr : &it->second;
  }
  bool speculative() const { return draft_runner_ != nullptr; }

 private:
  struct SlotState {
    Buffer<float> prefix_logits, prefix_features;  // last prefix position, from warmup
    Buffer<float> logits, features;                // pending position of the current request
    Buffer<TokenId> context;                       // committed tokens (speculative only)
    std::int64_t n_ctx = 0;
    Buffer<TokenId> block;                         // pending token + draft block
    bool held = false;
    std::int64_t held_prompt = 0;
  };

  class BusyGuard {
   public:
    explicit BusyGuard(Engine& e) : e_(e) {
      e_.check_open();
      bool expected = false;
      if (!e_.busy_.compare_exchange_strong(expected, true))
        throw SlotBusy("engine is already executing a request");
    }
    ~BusyGuard() { e_.busy_.store(false); }
    BusyGuard(const BusyGuard&) = delete;
    BusyGuard& operator=(const BusyGuard&) = delete;

   private:
    Engine& e_;
  };

  void check_open() const {
    if (closed_) throw EngineClosed("engine has been shut down");
  }

  std::int64_t requested_max_new(const KVSlot& slot, std::optional<std::int64_t> v) const {
    const auto n = v.value_or(slot.config().max_new_tokens);
    if (n < 0) throw ValidationError("max_new_tokens must be >= 0");
    return n;
  }

  void check_request_fits(const KVSlot& slot, std::size_t suffix, std::int64_t max_new) const {
    const auto prompt = slot.prefix_len() + static_cast<std::int64_t>(suffix);
    if (prompt == 0) throw ValidationError("request has no prompt tokens (empty prefix and empty input)");
    if (prompt + max_new > config_.kv.max_seq_len)
      throw CapacityError("prompt of " + std::to_string(prompt) + " tokens plus " + std::to_string(max_new) +
                          " new tokens exceeds kv.max_seq_len " + std::to_string(config_.kv.max_seq_len));
  }

  static void copy_last_row(const ForwardOutput& out, Buffer<float>& logits, Buffer<float>& features) {
    const auto V = logits.size();
    std::memcpy(logits.data(), out.logits.data() + (out.rows - 1) * static_cast<std::int64_t>(V), V * sizeof(float));
    if (!out.features.empty()) {
      const auto FD = features.size();
      std::memcpy(features.data(), out.features.data() + out.features.size() - FD, FD * sizeof(float));
    }
  }

  // Leaves the pending logits/features of the last prompt token in `st`.
  void run_prefill(KVSlot& slot, SlotState& st, const std::vector<TokenId>& tokens, RequestTimers& t) {
    t.prompt_tokens = slot.current_len() + static_cast<std::int64_t>(tokens.size());
    t.prefill_begin = Clock::now();
    if (draft_runner_) {
      if (slot.current_len() == slot.prefix_len()) {
        std::copy(slot.prefix_tokens().begin(), slot.prefix_tokens().end(), st.context.data());
        st.n_ctx = slot.prefix_len();
      }
      std::copy(tokens.begin(), tokens.end(), st.context.data() + st.n_ctx);
      st.n_ctx += static_cast<std::int64_t>(tokens.size());
    }
    if (tokens.empty()) {
      if (slot.current_len() == slot.prefix_len()) {
        std::memcpy(st.logits.data(), st.prefix_logits.data(), st.logits.size() * sizeof(float));
        std::memcpy(st.features.data(), st.prefix_features.data(), st.features.size() * sizeof(float));
      }
    } else {
      const auto out = prefill_runner_->prefill(slot.base_view(), tokens);
      copy_last_row(out, st.logits, st.features);
    }
    t.prefill_end = Clock::now();
  }

  void run_decode(KVSlot& slot, SlotState& st, std::int64_t max_new, std::optional<TokenId> stop,
                  std::vector<TokenId>& output, RequestTimers& t) {
    output.reserve(static_cast<std::size_t>(max_new));
    t.per_step_ms.reserve(static_cast<std::size_t>(max_new));
    if (max_new > 0) {
      t.decode_begin = Clock::now();
      if (draft_runner_)
        decode_loop_speculative(slot, st, max_new, stop, output, t);
      else
        decode_loop_plain(slot, st, max_new, stop, output, t);
      t.decode_end = Clock::now();
    }
    t.new_tokens = static_cast<std::int64_t>(output.size());
  }

  void decode_loop_plain(KVSlot& slot, SlotState& st, std::int64_t max_new, std::optional<TokenId> stop,
                         std::vector<TokenId>& output, RequestTimers& t) {
    const auto it = plans_.find(slot.request_id());
    const StepPlan* plan = it == plans_.end() ? nullptr : &it->second;
    auto& runner = decode_runner();
    auto last = *t.decode_begin;
    TokenId next = ops::argmax(std::span<const float>(st.logits.data(), st.logits.size()));
    for (;;) {
      if (stop && next == *stop) break;
      output.push_back(next);
      const auto now = Clock::now();
      t.per_step_ms.push_back(ms_between(last, now));
      last = now;
      if (static_cast<std::int64_t>(output.size()) == max_new) break;
      std::span<const float> logits =
          plan ? plan->replay(next, slot.current_len(), slot) : runner.decode_step(slot.base_view(), next).logits;
      next = ops::argmax(logits);
    }
  }

  void decode_loop_speculative(KVSlot& slot, SlotState& st, std::int64_t max_new, std::optional<TokenId> stop,
                               std::vector<TokenId>& output, RequestTimers& t) {
    auto& base = decode_runner();
    auto& draft = *draft_runner_;
    const auto m = block_len_;
    const auto V = arch().vocab_size;
    SpeculativeStats spec;
    auto last = *t.decode_begin;

    // committed context; its last entry is pending (not yet in the base cache)
    TokenId* ctx = st.context.data();
    auto& n_ctx = st.n_ctx;
    bool done = false;
    auto commit = [&](TokenId tok) {
      if (stop && tok == *stop) {
        done = true;
        return;
      }
      output.push_back(tok);
      ctx[n_ctx++] = tok;
      const auto now = Clock::now();
      t.per_step_ms.push_back(ms_between(last, now));
      last = now;
      if (static_cast<std::int64_t>(output.size()) == max_new) done = true;
    };

    commit(ops::argmax(std::span<const float>(st.logits.data(), st.logits.size())));
    TokenId* block = st.block.data();
    while (!done) {
      const auto base_len = slot.current_len();  // == n_ctx - 1

      // draft: catch up on committed tokens, then propose m tokens
      const auto keep = std::min(slot.draft_len(), base_len);
      slot.truncate_draft(keep);
      ForwardOptions dopts;
      dopts.draft_features = st.features.data();
      auto dview = slot.draft_view();
      const std::span<const TokenId> feed(ctx + keep, static_cast<std::size_t>(n_ctx - keep));
      auto dout = draft.forward(dview, feed, feed.size() > 1 ? Stage::prefill : Stage::decode, dopts);
      block[0] = ctx[n_ctx - 1];
      block[1] = ops::argmax(dout.logits);
      for (std::int64_t i = 1; i < m; ++i) {
        dout = draft.decode_step(dview, block[i], dopts);
        block[i + 1] = ops::argmax(dout.logits);
      }

      // verify the whole block in one base pass
      ForwardOptions vopts;
      vopts.all_positions = true;
      const auto vout = base.forward(slot.base_view(), std::span<const TokenId>(block, static_cast<std::size_t>(m + 1)),
                                     Stage::prefill, vopts);
      std::int64_t k = 0;
      TokenId g = 0;
      for (;; ++k) {
        g = ops::argmax(vout.logits.subspan(static_cast<std::size_t>(k * V), static_cast<std::size_t>(V)));
        if (k == m || g != block[k + 1]) break;
      }
      spec.proposed += m;
      spec.accepted += k;
      spec.cycles += 1;

      slot.truncate(base_len + k + 1);
      const auto FD = st.features.size();
      std::memcpy(st.features.data(), vout.features.data() + static_cast<std::size_t>(k) * FD, FD * sizeof(float));

      for (std::int64_t i = 0; i < k && !done; ++i) commit(block[i + 1]);
      if (!done) commit(g);
    }
    t.speculative = spec;
  }

  EngineConfig config_;
  ResolvedArtifacts artifacts_;
  std::unique_ptr<KernelRegistry> registry_;
  std::unique_ptr<DispatchTable> table_;
  std::unique_ptr<KVManager> kv_;
  std::unique_ptr<ModelRunner> prefill_runner_, decode_runner_, draft_runner_;
  std::map<std::string, StepPlan> plans_;
  std::map<std::string, SlotState> states_;
  std::int64_t capacity_ = 0;
  std::int64_t block_len_ = 1;
  std::atomic<bool> busy_{false};
  bool closed_ = false;
};

inline std::unique_ptr<Engine> create_engine(const std::filesystem::path& config_path) {
  return Engine::create(config_path);
}

inline std::unique_ptr<Engine> create_engine(EngineConfig config) { return std::make_unique<Engine>(std::move(config)); }

}  // namespace edgert
