#pragma once

// Kernel registry for the reference CPU backend.
//
// All kernels share one calling convention (OpArgs). Per-step values (token
// ids, the write position) are read through `tokens` and `dyn`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "edgert/common.hpp"
#include "edgert/errors.hpp"
#include "edgert/ops.hpp"
#include "edgert/shape_sig.hpp"

namespace edgert {

using nlohmann::json;

// Fixed input buffers for per-step values.
struct DynamicInputs {
  std::int64_t position = 0;  // cache index of the first token in this pass
};

// Dimension meanings by op_kind:
//   linear     {m, in, out}            in0=x[m×in] in1=W[out×in] out0=y[m×out]
//   attention  {q_len, heads, kv_heads, head_dim}
//                                       in0=q in1=K cache in2=V cache out0; scratch >= capacity
//   rope       {m, heads, head_dim}     out0 in place; in0/in1 = cos/sin tables [pos × head_dim/2]
//   rmsnorm    {m, features}            in0=x in1=w out0=y; scalar=eps
//   gelu       {m, features}            in0 -> out0 (may alias)
//   add        {m, features, broadcast} out0 += in0 (in0 is a single row when broadcast=1)
//   embedding  {m, vocab, hidden}       tokens, in0=table, out0
//   kv_update  {m, kv_heads, head_dim}  in0=k rows in1=v rows -> out0/out1 cache at dyn->position
struct OpArgs {
  std::array<const float*, 3> in{};
  std::array<float*, 2> out{};
  float* scratch = nullptr;
  const TokenId* tokens = nullptr;
  const DynamicInputs* dyn = nullptr;
  std::array<std::int64_t, 4> dim{};
  float scalar = 0.0f;
};

using KernelFn = std::function<void(const OpArgs&)>;

struct KernelImpl {
  std::string impl_id;
  std::string op_kind;
  // Implementations with the same semantic are interchangeable schedules of
  // the same math. gelu.tanh and gelu.erf differ here and never substitute.
  std::string semantic;
  std::vector<std::string> stages;  // empty: valid in every stage
  bool capturable = true;
  json param_schema = json::object();
  std::vector<json> tuning_space = {json::object()};
  std::string description;
  std::function<KernelFn(const json& params)> bind;
  // Optional shape predicate over parsed shape_sig values.
  std::function<bool(const std::vector<std::int64_t>&)> accepts_shape;

  bool supports_stage(const std::string& stage) const {
    return stages.empty() || std::find(stages.begin(), stages.end(), stage) != stages.end();
  }
  bool applicable(const std::string& stage, const std::vector<std::int64_t>& shape) const {
    return supports_stage(stage) && (!accepts_shape || accepts_shape(shape));
  }
};

class KernelRegistry {
 public:
  void add(KernelImpl impl) {
    if (!impl.bind) throw ValidationError("kernel '" + impl.impl_id + "' has no entry point");
    if (impls_.count(impl.impl_id)) throw DuplicateImpl("kernel '" + impl.impl_id + "' is already registered");
    order_.push_back(impl.impl_id);
    impls_.emplace(impl.impl_id, std::move(impl));
  }

  const KernelImpl* find(const std::string& impl_id) const {
    auto it = impls_.find(impl_id);
    return it == impls_.end() ? nullptr : &it->second;
  }

  const KernelImpl& at(const std::string& impl_id) const {
    if (const auto* k = find(impl_id)) return *k;
    throw UnknownImpl("kernel '" + impl_id + "' is not registered");
  }

  std::vector<const KernelImpl*> impls_for(const std::string& op_kind) const {
    std::vector<const KernelImpl*> out;
    for (const auto& id : order_)
      if (impls_.at(id).op_kind == op_kind) out.push_back(&impls_.at(id));
    return out;
  }

  std::size_t size() const { return impls_.size(); }

  json listing() const {
    json out = json::array();
    for (const auto& id : order_) {
      const auto& k = impls_.at(id);
      out.push_back({{"impl_id", k.impl_id},
                     {"op_kind", k.op_kind},
                     {"semantic", k.semantic},
                     {"stages", k.stages},
                     {"capturable", k.capturable},
                     {"impl_params", k.param_schema},
                     {"tuning_space", k.tuning_space},
                     {"description", k.description}});
    }
    return out;
  }

 private:
  std::map<std::string, KernelImpl> impls_;
  std::vector<std::string> order_;
};

// ---------------------------------------------------------------------------
// Built-in kernels

namespace kernels {

inline void linear_naive(const OpArgs& a) {
  const auto m = a.dim[0], in = a.dim[1], out = a.dim[2];
  const float* x = a.in[0];
  const float* w = a.in[1];
  float* y = a.out[0];
  for (std::int64_t r = 0; r < m; ++r)
    for (std::int64_t o = 0; o < out; ++o) y[r * out + o] = ops::dot(x + r * in, w + o * in, in);
}

// Output and reduction tiles, one running accumulator per output.
inline void linear_blocked(const OpArgs& a, std::int64_t tile) {
  const auto m = a.dim[0], in = a.dim[1], out = a.dim[2];
  const float* x = a.in[0];
  const float* w = a.in[1];
  float* y = a.out[0];
  for (std::int64_t r = 0; r < m; ++r) {
    const float* xr = x + r * in;
    float* yr = y + r * out;
    for (std::int64_t o0 = 0; o0 < out; o0 += tile) {
      const auto o1 = std::min(out, o0 + tile);
      for (std::int64_t o = o0; o < o1; ++o) yr[o] = 0.0f;
      for (std::int64_t k0 = 0; k0 < in; k0 += tile) {
        const auto k1 = std::min(in, k0 + tile);
        for (std::int64_t o = o0; o < o1; ++o) {
          const float* wo = w + o * in;
          float acc = yr[o];
          for (std::int64_t k = k0; k < k1; ++k) acc += xr[k] * wo[k];
          yr[o] = acc;
        }
      }
    }
  }
}

// Walks W column-wise (as B^T) broadcasting one input element at a time.
inline void linear_transposed_b(const OpArgs& a) {
  const auto m = a.dim[0], in = a.dim[1], out = a.dim[2];
  const float* x = a.in[0];
  const float* w = a.in[1];
  float* y = a.out[0];
  for (std::int64_t r = 0; r < m; ++r) {
    float* yr = y + r * out;
    for (std::int64_t o = 0; o < out; ++o) yr[o] = 0.0f;
    for (std::int64_t k = 0; k < in; ++k) {
      const float xk = x[r * in + k];
      for (std::int64_t o = 0; o < out; ++o) yr[o] += xk * w[o * in + k];
    }
  }
}

// One query row against cache rows [0, kv_len). `valid` rows are attended;
// rows in [valid, kv_len) take the mask value.
inline void attend_row(const float* q, const float* kcache, const float* vcache, float* out, float* scores,
                       std::int64_t kv_len, std::int64_t valid, std::int64_t kv_head, std::int64_t kv_stride,
                       std::int64_t head_dim) {
  const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));
  for (std::int64_t j = 0; j < kv_len; ++j)
    scores[j] = j < valid ? ops::dot(q, kcache + j * kv_stride + kv_head * head_dim, head_dim) * scale
                          : ops::kMaskValue;
  ops::softmax_row(scores, kv_len);
  for (std::int64_t d = 0; d < head_dim; ++d) out[d] = 0.0f;
  for (std::int64_t j = 0; j < kv_len; ++j) {
    const float p = scores[j];
    const float* v = vcache + j * kv_stride + kv_head * head_dim;
    for (std::int64_t d = 0; d < head_dim; ++d) out[d] += p * v[d];
  }
}

inline void attention_decode_cached(const OpArgs& a) {
  const auto heads = a.dim[1], kv_heads = a.dim[2], hd = a.dim[3];
  const auto kv_len = a.dyn->position + 1;
  const auto group = heads / kv_heads;
  for (std::int64_t h = 0; h < heads; ++h)
    attend_row(a.in[0] + h * hd, a.in[1], a.in[2], a.out[0] + h * hd, a.scratch, kv_len, kv_len, h / group,
               kv_heads * hd, hd);
}

// Full score rows over every cached position with a causal mask.
inline void attention_prefill_masked(const OpArgs& a) {
  const auto q_len = a.dim[0], heads = a.dim[1], kv_heads = a.dim[2], hd = a.dim[3];
  const auto start = a.dyn->position;
  const auto kv_len = start + q_len;
  const auto group = heads / kv_heads;
  const auto q_stride = heads * hd;
  for (std::int64_t t = 0; t < q_len; ++t)
    for (std::int64_t h = 0; h < heads; ++h)
      attend_row(a.in[0] + t * q_stride + h * hd, a.in[1], a.in[2], a.out[0] + t * q_stride + h * hd, a.scratch,
                 kv_len, start + t + 1, h / group, kv_heads * hd, hd);
}

template <bool Decomposed>
inline void rope(const OpArgs& a) {
  const auto m = a.dim[0], heads = a.dim[1], hd = a.dim[2];
  const auto half = hd / 2;
  for (std::int64_t t = 0; t < m; ++t) {
    const auto pos = a.dyn->position + t;
    const float* c = a.in[0] + pos * half;
    const float* s = a.in[1] + pos * half;
    for (std::int64_t h = 0; h < heads; ++h) {
      float* row = a.out[0] + (t * heads + h) * hd;
      if constexpr (Decomposed) ops::rope_decomposed_row(row, c, s, hd, a.scratch);
      else ops::rope_fused_row(row, c, s, hd);
    }
  }
}

template <float (*Fn)(float)>
inline void unary(const OpArgs& a) {
  const auto n = a.dim[0] * a.dim[1];
  for (std::int64_t i = 0; i < n; ++i) a.out[0][i] = Fn(a.in[0][i]);
}

inline void rmsnorm(const OpArgs& a) {
  const auto m = a.dim[0], n = a.dim[1];
  for (std::int64_t r = 0; r < m; ++r) ops::rmsnorm_row(a.in[0] + r * n, a.in[1], a.out[0] + r * n, n, a.scalar);
}

inline void add(const OpArgs& a) {
  const auto m = a.dim[0], n = a.dim[1];
  const bool broadcast = a.dim[2] != 0;
  for (std::int64_t r = 0; r < m; ++r) {
    const float* src = a.in[0] + (broadcast ? 0 : r * n);
    float* dst = a.out[0] + r * n;
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }
}

inline void embedding(const OpArgs& a) {
  const auto m = a.dim[0], hidden = a.dim[2];
  for (std::int64_t r = 0; r < m; ++r)
    std::memcpy(a.out[0] + r * hidden, a.in[0] + static_cast<std::int64_t>(a.tokens[r]) * hidden,
                static_cast<std::size_t>(hidden) * sizeof(float));
}

inline void kv_append(const OpArgs& a) {
  const auto m = a.dim[0];
  const auto row = a.dim[1] * a.dim[2];
  const auto bytes = static_cast<std::size_t>(m * row) * sizeof(float);
  const auto at = a.dyn->position * row;
  std::memcpy(a.out[0] + at, a.in[0], bytes);
  std::memcpy(a.out[1] + at, a.in[1], bytes);
}

inline KernelFn fixed(void (*fn)(const OpArgs&)) {
  return KernelFn(fn);
}

}  // namespace kernels

inline std::int64_t param_int(const json& params, const char* key, std::int64_t fallback) {
  if (!params.is_object() || !params.contains(key)) return fallback;
  if (!params[key].is_number_integer()) throw ValidationError(std::string("impl_params.") + key + " must be an integer");
  return params[key].get<std::int64_t>();
}

inline void register_builtin_kernels(KernelRegistry& reg) {
  using kernels::fixed;
  auto no_params = [](void (*fn)(const OpArgs&)) { return [fn](const json&) { return fixed(fn); }; };

  reg.add({"linear.naive", "linear", "linear", {}, true, json::object(), {json::object()},
           "row-by-row dot products", no_params(kernels::linear_naive), {}});
  reg.add({"linear.blocked", "linear", "linear", {}, true,
           json{{"tile", {{"type", "integer"}, {"default", 16}, {"minimum", 1}}}},
           {json{{"tile", 8}}, json{{"tile", 16}}, json{{"tile", 32}}, json{{"tile", 64}}},
           "output/reduction tiling",
           [](const json& params) {
             const auto tile = param_int(params, "tile", 16);
             if (tile < 1) throw ValidationError("linear.blocked: tile must be >= 1");
             return KernelFn([tile](const OpArgs& a) { kernels::linear_blocked(a, tile); });
           },
           {}});
  reg.add({"linear.transposed_b", "linear", "linear", {}, true, json::object(), {json::object()},
           "column walk over the weight matrix", no_params(kernels::linear_transposed_b), {}});

  reg.add({"attention.prefill_masked", "attention", "attention", {}, true, json::object(), {json::object()},
           "full causal rows with masked softmax", no_params(kernels::attention_prefill_masked), {}});
  reg.add({"attention.decode_cached", "attention", "attention", {"decode"}, true, json::object(), {json::object()},
           "single query over the cached prefix", no_params(kernels::attention_decode_cached),
           [](const std::vector<std::int64_t>& s) { return !s.empty() && s[0] == 1; }});

  reg.add({"rope.fused", "rope", "rope", {}, true, json::object(), {json::object()},
           "pairwise rotation in one pass", no_params(kernels::rope<false>), {}});
  reg.add({"rope.decomposed", "rope", "rope", {}, true, json::object(), {json::object()},
           "slice / negate / concat formulation", no_params(kernels::rope<true>), {}});

  reg.add({"gelu.tanh", "gelu", "gelu_tanh", {}, true, json::object(), {json::object()},
           "tanh approximation", no_params(kernels::unary<ops::gelu_tanh>), {}});
  reg.add({"gelu.erf", "gelu", "gelu_erf", {}, true, json::object(), {json::object()},
           "exact erf form", no_params(kernels::unary<ops::gelu_erf>), {}});

  reg.add({"rmsnorm.ref", "rmsnorm", "rmsnorm", {}, true, json::object(), {json::object()},
           "reference rmsnorm", no_params(kernels::rmsnorm), {}});
  reg.add({"add.ref", "add", "add", {}, true, json::object(), {json::object()},
           "in-place residual add", no_params(kernels::add), {}});
  reg.add({"embedding.lookup", "embedding", "embedding", {}, true, json::object(), {json::object()},
           "row gather", no_params(kernels::embedding), {}});
  reg.add({"kv_update.append", "kv_update", "kv_update", {}, true, json::object(), {json::object()},
           "append rows at the dynamic position", no_params(kernels::kv_append), {}});
}

inline KernelRegistry builtin_registry() {
  KernelRegistry reg;
  register_builtin_kernels(reg);
  return reg;
}

// ---------------------------------------------------------------------------
// Synthetic workloads for tuning: buffers shaped after a shape signature,
// filled from a fixed PRNG stream.

class SyntheticWorkload {
 public:
  SyntheticWorkload(const std::string& op_kind, const std::vector<std::int64_t>& s, std::uint64_t seed = 7) {
    Lcg64 rng(seed);
    auto buf = [&](std::int64_t n) -> float* {
      auto& b = buffers_.emplace_back(static_cast<std::size_t>(std::max<std::int64_t>(n, 1)));
      for (auto& v : b) v = rng.next_float(-1.0, 1.0);
      return b.data();
    };
    if (op_kind == "linear") {
      args_.dim = {s[0], s[1], s[2], 0};
      args_.in[0] = buf(s[0] * s[1]);
      args_.in[1] = buf(s[2] * s[1]);
      args_.out[0] = buf(s[0] * s[2]);
    } else if (op_kind == "attention") {
      const auto q_len = s[0], kv_len = s[1], heads = s[2], hd = s[3];
      args_.dim = {q_len, heads, heads, hd};
      dyn_.position = kv_len - q_len;
      args_.in[0] = buf(q_len * heads * hd);
      args_.in[1] = buf(kv_len * heads * hd);
      args_.in[2] = buf(kv_len * heads * hd);
      args_.out[0] = buf(q_len * heads * hd);
      args_.scratch = buf(kv_len);
    } else if (op_kind == "rope") {
      const auto m = s[0], heads = s[1], hd = s[2];
      args_.dim = {m, heads, hd, 0};
      float* c = buf(m * hd / 2);
      float* sn = buf(m * hd / 2);
      for (std::int64_t p = 0; p < m; ++p) ops::rope_angles(p, hd, 10000.0, c + p * hd / 2, sn + p * hd / 2);
      args_.in[0] = c;
      args_.in[1] = sn;
      args_.out[0] = buf(m * heads * hd);
      args_.scratch = buf(hd);
    } else if (op_kind == "rmsnorm" || op_kind == "gelu" || op_kind == "add") {
      args_.dim = {s[0], s[1], 0, 0};
      args_.in[0] = buf(s[0] * s[1]);
      args_.in[1] = buf(s[1]);
      args_.out[0] = buf(s[0] * s[1]);
      args_.scalar = 1e-6f;
    } else if (op_kind == "embedding") {
      args_.dim = {s[0], s[1], s[2], 0};
      tokens_.resize(static_cast<std::size_t>(s[0]));
      for (auto& t : tokens_) t = static_cast<TokenId>(rng.next_below(static_cast<std::uint32_t>(s[1])));
      args_.tokens = tokens_.data();
      args_.in[0] = buf(s[1] * s[2]);
      args_.out[0] = buf(s[0] * s[2]);
    } else if (op_kind == "kv_update") {
      args_.dim = {s[0], s[1], s[2], 0};
      args_.in[0] = buf(s[0] * s[1] * s[2]);
      args_.in[1] = buf(s[0] * s[1] * s[2]);
      args_.out[0] = buf(s[0] * s[1] * s[2]);
      args_.out[1] = buf(s[0] * s[1] * s[2]);
    } else {
      throw ValidationError("no synthetic workload for op_kind '" + op_kind + "'");
    }
    args_.dyn = &dyn_;
  }

  SyntheticWorkload(const SyntheticWorkload&) = delete;
  SyntheticWorkload& operator=(const SyntheticWorkload&) = delete;

  const OpArgs& args() const { return args_; }

 private:
  std::vector<std::vector<float>> buffers_;
  std::vector<TokenId> tokens_;
  DynamicInputs dyn_;
  OpArgs args_;
};

}  // namespace edgert
