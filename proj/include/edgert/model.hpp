#pragma once

// Forward pass of the reference decoder. Every operator goes through the
// dispatch table. A runner owns its scratch buffers and serves one pass at a time.
//
// Layer structure (pre-norm, no biases, ungated GELU MLP):
//   xn = rmsnorm(x); q,k,v = linear(xn); rope(q), rope(k); append k,v
//   x += o_proj(attention(q, K, V)); x += down(gelu(up(rmsnorm(x))))
// Drafts add linear(feature_fc, base features) to every embedded row.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "edgert/artifact.hpp"
#include "edgert/common.hpp"
#include "edgert/dispatch.hpp"
#include "edgert/kernels.hpp"
#include "edgert/kv_manager.hpp"

namespace edgert {

enum class Stage { prefill, decode };

inline const char* to_string(Stage s) { return s == Stage::prefill ? kStagePrefill : kStageDecode; }

struct LayerWeights {
  const float* attn_norm;
  const float* wq;
  const float* wk;
  const float* wv;
  const float* wo;
  const float* mlp_norm;
  const float* w_up;
  const float* w_down;
};

struct ModelWeights {
  const float* tok_embeddings = nullptr;
  const float* feature_fc = nullptr;
  std::vector<LayerWeights> layers;
  const float* norm = nullptr;
  const float* lm_head = nullptr;

  static ModelWeights bind(const ModelArtifact& art) {
    art.check_manifest();
    ModelWeights w;
    auto t = [&](const std::string& name) { return art.tensor(name).data.data(); };
    w.tok_embeddings = t("tok_embeddings");
    if (art.arch.role == ModelRole::draft) w.feature_fc = t("feature_fc");
    for (std::int64_t l = 0; l < art.arch.n_layers; ++l) {
      const auto p = "layers." + std::to_string(l) + ".";
      w.layers.push_back({t(p + "attn_norm"), t(p + "wq"), t(p + "wk"), t(p + "wv"), t(p + "wo"), t(p + "mlp_norm"),
                          t(p + "w_up"), t(p + "w_down")});
    }
    w.norm = t("norm");
    w.lm_head = t("lm_head");
    return w;
  }
};

// One resolved kernel call with its bound arguments.
struct RecordedOp {
  DispatchKey context;
  std::string impl_id;
  KernelFn fn;
  OpArgs args;
};

struct ForwardOptions {
  bool all_positions = false;              // logits for every row instead of the last one only
  const float* draft_features = nullptr;   // required for draft models: [n_taps × hidden]
  std::vector<RecordedOp>* recorder = nullptr;
};

struct ForwardOutput {
  std::span<const float> logits;    // [rows × vocab]
  std::int64_t rows = 0;
  std::int64_t first_row = 0;       // token index of logits row 0 within the pass
  std::span<const float> features;  // [tokens × n_taps × hidden] (base models)
};

class ModelRunner {
 public:
  // max_rows bounds the tokens of one pass; capacity bounds cache positions.
  ModelRunner(const ModelArtifact& artifact, const DispatchTable& table, std::int64_t max_rows,
              std::int64_t capacity)
      : arch_(artifact.arch),
        weights_(ModelWeights::bind(artifact)),
        table_(&table),
        max_rows_(max_rows),
        capacity_(capacity),
        gelu_op_name_(artifact.arch.gelu_variant == "tanh" ? "gelu_tanh" : "gelu_erf") {
    const auto H = arch_.hidden_dim;
    const auto R = max_rows_;
    auto alloc = [](std::int64_t n) { return Buffer<float>(static_cast<std::size_t>(n)); };
    x_ = alloc(R * H);
    xn_ = alloc(R * H);
    q_ = alloc(R * arch_.q_dim());
    k_ = alloc(R * arch_.kv_dim());
    v_ = alloc(R * arch_.kv_dim());
    att_ = alloc(R * arch_.q_dim());
    proj_ = alloc(R * H);
    up_ = alloc(R * arch_.mlp_dim);
    logits_ = alloc(R * arch_.vocab_size);
    features_ = alloc(R * std::max<std::int64_t>(arch_.feature_dim(), 1));
    fproj_ = alloc(H);
    scores_ = alloc(capacity_);
    rope_scratch_ = alloc(arch_.head_dim);
    const auto half = arch_.head_dim / 2;
    rope_cos_ = alloc(capacity_ * half);
    rope_sin_ = alloc(capacity_ * half);
    for (std::int64_t p = 0; p < capacity_; ++p)
      ops::rope_angles(p, arch_.head_dim, arch_.rope_theta, rope_cos_.data() + p * half, rope_sin_.data() + p * half);
    tokens_ = Buffer<TokenId>(static_cast<std::size_t>(R));
  }

  ModelRunner(const ModelRunner&) = delete;
  ModelRunner& operator=(const ModelRunner&) = delete;

  const ArchMeta& arch() const { return arch_; }
  const DispatchTable& table() const { return *table_; }
  std::int64_t max_rows() const { return max_rows_; }
  std::int64_t capacity() const { return capacity_; }

  KVGeometry kv_geometry(std::int64_t capacity) const {
    return {arch_.n_layers, arch_.n_kv_heads, arch_.head_dim, capacity};
  }

  // Fixed buffers a captured plan writes before replaying.
  TokenId* token_buffer() { return tokens_.data(); }
  DynamicInputs* dynamic_inputs() { return &dyn_; }
  const float* logits_buffer() const { return logits_.data(); }

  // Appends tokens.size() entries to the region behind `kv` and returns
  // logits for the last token (or every token with all_positions).
  ForwardOutput forward(const KVView& kv, std::span<const TokenId> tokens, Stage stage,
                        const ForwardOptions& opts = {}) {
    const auto T = static_cast<std::int64_t>(tokens.size());
    if (T < 1) throw ValidationError("forward pass needs at least one token");
    if (T > max_rows_) throw CapacityError("pass of " + std::to_string(T) + " tokens exceeds workspace rows");
    const auto& g = kv.geometry;
    if (g.n_layers != arch_.n_layers || g.n_kv_heads != arch_.n_kv_heads || g.head_dim != arch_.head_dim)
      throw ArchMismatch("slot geometry does not match model '" + arch_.name + "'");
    const auto pos = *kv.length;
    if (pos + T > g.capacity || pos + T > capacity_)
      throw CapacityError("KV slot full: " + std::to_string(pos) + " + " + std::to_string(T) + " > " +
                          std::to_string(g.capacity));
    for (auto t : tokens)
      if (t < 0 || t >= arch_.vocab_size)
        throw RangeError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(arch_.vocab_size));
    if (arch_.role == ModelRole::draft && !opts.draft_features)
      throw ValidationError("draft forward pass needs base features");

    std::copy(tokens.begin(), tokens.end(), tokens_.data());
    dyn_.position = pos;
    run_pass(kv, T, stage, opts);
    *kv.length = pos + T;

    ForwardOutput out;
    out.first_row = opts.all_positions ? 0 : T - 1;
    out.rows = opts.all_positions ? T : 1;
    out.logits = {logits_.data(), static_cast<std::size_t>(out.rows * arch_.vocab_size)};
    if (arch_.role == ModelRole::base)
      out.features = {features_.data(), static_cast<std::size_t>(T * arch_.feature_dim())};
    return out;
  }

  ForwardOutput prefill(const KVView& kv, std::span<const TokenId> tokens, const ForwardOptions& opts = {}) {
    return forward(kv, tokens, Stage::prefill, opts);
  }

  ForwardOutput decode_step(const KVView& kv, TokenId token, const ForwardOptions& opts = {}) {
    return forward(kv, std::span<const TokenId>(&token, 1), Stage::decode, opts);
  }

  // Ops recorded per decode step: 15 per layer plus embedding, final norm and LM head.
  static constexpr std::int64_t kOpsPerLayer = 15;
  static constexpr std::int64_t kHeadOps = 3;

 private:
  struct Dispatcher {
    const DispatchTable& table;
    const ArchMeta& arch;
    const char* stage;
    std::vector<RecordedOp>* recorder;

    void operator()(const char* op_kind, const char* layer_role, const std::string& op_name, std::string shape_sig,
                    const OpArgs& args) const {
      DispatchKey ctx{arch.name, kCpuHwProfile, op_kind, layer_role, op_name, stage, std::move(shape_sig)};
      const auto& r = table.resolve(ctx);
      if (recorder) {
        if (!r.impl->capturable)
          throw CaptureUnsupported("kernel '" + r.entry.impl_id + "' cannot be captured into a step plan");
        recorder->push_back({ctx, r.entry.impl_id, r.fn, args});
      }
      r.fn(args);
    }
  };

  void run_pass(const KVView& kv, std::int64_t T, Stage stage, const ForwardOptions& opts) {
    const auto H = arch_.hidden_dim, V = arch_.vocab_size, QD = arch_.q_dim(), KD = arch_.kv_dim();
    const auto F = arch_.mlp_dim, hd = arch_.head_dim;
    const float eps = static_cast<float>(arch_.rmsnorm_eps);
    Dispatcher run{*table_, arch_, to_string(stage), opts.recorder};
    const std::string op_linear = "linear";

    auto linear = [&](const char* role, const float* x, const float* w, float* y, std::int64_t m, std::int64_t in,
                      std::int64_t out) {
      OpArgs a;
      a.in = {x, w, nullptr};
      a.out = {y, nullptr};
      a.dim = {m, in, out, 0};
      run("linear", role, op_linear, shape_sig_of("linear", {m, in, out}), a);
    };
    auto rmsnorm = [&](const char* role, const float* x, const float* w, float* y, std::int64_t m) {
      OpArgs a;
      a.in = {x, w, nullptr};
      a.out = {y, nullptr};
      a.dim = {m, H, 0, 0};
      a.scalar = eps;
      run("rmsnorm", role, "rmsnorm", shape_sig_of("rmsnorm", {m, H}), a);
    };
    auto add = [&](const char* role, float* dst, const float* src, std::int64_t m, bool broadcast) {
      OpArgs a;
      a.in = {src, nullptr, nullptr};
      a.out = {dst, nullptr};
      a.dim = {m, H, broadcast ? 1 : 0, 0};
      run("add", role, "add", shape_sig_of("add", {m, H}), a);
    };
    auto rope = [&](const char* role, float* data, std::int64_t heads) {
      OpArgs a;
      a.in = {rope_cos_.data(), rope_sin_.data(), nullptr};
      a.out = {data, nullptr};
      a.scratch = rope_scratch_.data();
      a.dyn = &dyn_;
      a.dim = {T, heads, hd, 0};
      run("rope", role, "rope", shape_sig_of("rope", {T, heads, hd}), a);
    };

    {
      OpArgs a;
      a.tokens = tokens_.data();
      a.in = {weights_.tok_embeddings, nullptr, nullptr};
      a.out = {x_.data(), nullptr};
      a.dim = {T, V, H, 0};
      run("embedding", "embed", "embedding", shape_sig_of("embedding", {T, V, H}), a);
    }
    if (arch_.role == ModelRole::draft) {
      linear("feature_fc", opts.draft_features, weights_.feature_fc, fproj_.data(), 1, arch_.feature_dim(), H);
      add("feature_fuse", x_.data(), fproj_.data(), T, true);
    }

    for (std::int64_t l = 0; l < arch_.n_layers; ++l) {
      const auto& w = weights_.layers[static_cast<std::size_t>(l)];
      rmsnorm("attn_norm", x_.data(), w.attn_norm, xn_.data(), T);
      linear("q_proj", xn_.data(), w.wq, q_.data(), T, H, QD);
      linear("k_proj", xn_.data(), w.wk, k_.data(), T, H, KD);
      linear("v_proj", xn_.data(), w.wv, v_.data(), T, H, KD);
      rope("q_rope", q_.data(), arch_.n_heads);
      rope("k_rope", k_.data(), arch_.n_kv_heads);
      {
        OpArgs a;
        a.in = {k_.data(), v_.data(), nullptr};
        a.out = {kv.layer_keys(l), kv.layer_values(l)};
        a.dyn = &dyn_;
        a.dim = {T, arch_.n_kv_heads, hd, 0};
        run("kv_update", "kv_cache", "kv_update", shape_sig_of("kv_update", {T, arch_.n_kv_heads, hd}), a);
      }
      {
        OpArgs a;
        a.in = {q_.data(), kv.layer_keys(l), kv.layer_values(l)};
        a.out = {att_.data(), nullptr};
        a.scratch = scores_.data();
        a.dyn = &dyn_;
        a.dim = {T, arch_.n_heads, arch_.n_kv_heads, hd};
        run("attention", "self_attn", "attention",
            shape_sig_of("attention", {T, dyn_.position + T, arch_.n_heads, hd}), a);
      }
      linear("o_proj", att_.data(), w.wo, proj_.data(), T, QD, H);
      add("attn_residual", x_.data(), proj_.data(), T, false);
      rmsnorm("mlp_norm", x_.data(), w.mlp_norm, xn_.data(), T);
      linear("up_proj", xn_.data(), w.w_up, up_.data(), T, H, F);
      {
        OpArgs a;
        a.in = {up_.data(), nullptr, nullptr};
        a.out = {up_.data(), nullptr};
        a.dim = {T, F, 0, 0};
        run("gelu", "mlp_act", gelu_op_name_, shape_sig_of("gelu", {T, F}), a);
      }
      linear("down_proj", up_.data(), w.w_down, proj_.data(), T, F, H);
      add("mlp_residual", x_.data(), proj_.data(), T, false);

      if (arch_.role == ModelRole::base) tap_features(l, T);
    }

    const auto first = opts.all_positions ? 0 : T - 1;
    const auto rows = T - first;
    rmsnorm("final_norm", x_.data() + first * H, weights_.norm, xn_.data() + first * H, rows);
    linear("lm_head", xn_.data() + first * H, weights_.lm_head, logits_.data(), rows, H, V);
  }

  void tap_features(std::int64_t layer, std::int64_t T) {
    const auto& taps = arch_.feature_tap_layers;
    const auto H = arch_.hidden_dim;
    for (std::size_t i = 0; i < taps.size(); ++i) {
      if (taps[i] != layer) continue;
      for (std::int64_t r = 0; r < T; ++r)
        std::memcpy(features_.data() + r * arch_.feature_dim() + static_cast<std::int64_t>(i) * H,
                    x_.data() + r * H, static_cast<std::size_t>(H) * sizeof(float));
    }
  }

  ArchMeta arch_;
  ModelWeights weights_;
  const DispatchTable* table_;
  std::int64_t max_rows_;
  std::int64_t capacity_;
  std::string gelu_op_name_;

  Buffer<float> x_, xn_, q_, k_, v_, att_, proj_, up_, logits_, features_, fproj_, scores_, rope_scratch_;
  Buffer<float> rope_cos_, rope_sin_;
  Buffer<TokenId> tokens_;
  DynamicInputs dyn_;
};

// Computes and freezes KV for every configured prefix. Slots already warmed
// are left untouched. `on_warm` sees the prefill output of each non-empty prefix.
template <typename OnWarm>
void warmup(KVManager& manager, ModelRunner& prefill_runner, OnWarm&& on_warm) {
  manager.for_each_slot([&](KVSlot& slot) {
    if (slot.prefix_frozen()) return;
    if (slot.prefix_len() > 0) {
      auto view = slot.base_view();
      if (*view.length != 0) throw RangeError("slot '" + slot.request_id() + "' is not empty before warmup");
      const auto out = prefill_runner.prefill(view, slot.prefix_tokens());
      on_warm(slot, out);
    }
    slot.freeze_prefix();
  });
}

inline void warmup(KVManager& manager, ModelRunner& prefill_runner) {
  warmup(manager, prefill_runner, [](const KVSlot&, const ForwardOutput&) {});
}

}  // namespace edgert
