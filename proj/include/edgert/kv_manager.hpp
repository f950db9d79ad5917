#pragma once

// Slot-based KV cache.
//
// Every slot is allocated when the manager is built. Layout per region is
// [layer][position][kv_head][head_dim]. Positions [0, prefix_len) hold the
// warmed prefix and are never written again; acquire() recycles everything
// after it.

#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "edgert/common.hpp"
#include "edgert/config.hpp"
#include "edgert/errors.hpp"

namespace edgert {

struct KVGeometry {
  std::int64_t n_layers = 0;
  std::int64_t n_kv_heads = 0;
  std::int64_t head_dim = 0;
  std::int64_t capacity = 0;

  std::int64_t row() const { return n_kv_heads * head_dim; }
  std::int64_t layer_stride() const { return capacity * row(); }
  std::int64_t elements() const { return n_layers * layer_stride(); }
  bool operator==(const KVGeometry&) const = default;
};

// Mutable view of one region (base or draft) used by the forward pass.
struct KVView {
  float* keys = nullptr;
  float* values = nullptr;
  KVGeometry geometry;
  std::int64_t* length = nullptr;

  float* layer_keys(std::int64_t l) const { return keys + l * geometry.layer_stride(); }
  float* layer_values(std::int64_t l) const { return values + l * geometry.layer_stride(); }
};

// ---------------------------------------------------------------------------
// Compression: C(KV) with reconstruction back to f32.

struct KVBlockDims {
  std::int64_t n_layers = 0;
  std::int64_t n_positions = 0;
  std::int64_t row = 0;           // kv_heads * head_dim: one scale per channel
  std::int64_t layer_stride = 0;  // elements between layers in the f32 source/destination
};

class Compressor {
 public:
  virtual ~Compressor() = default;
  virtual KVCompression strategy() const = 0;
  // q: [layer][position][row] int8, scales: [layer][row]
  virtual void compress(const float* src, const KVBlockDims& dims, std::int8_t* q, float* scales) const = 0;
  // Writes reconstructed values into dst; the identity strategy leaves dst as is.
  virtual void reconstruct(const std::int8_t* q, const float* scales, const KVBlockDims& dims, float* dst) const = 0;
};

class IdentityCompressor final : public Compressor {
 public:
  KVCompression strategy() const override { return KVCompression::none; }
  void compress(const float*, const KVBlockDims&, std::int8_t*, float*) const override {}
  void reconstruct(const std::int8_t*, const float*, const KVBlockDims&, float*) const override {}
};

// Symmetric per-(layer, kv_head, channel) int8. Scale is max|v|/127 rounded
// up to 16 significant bits.
class Int8PerChannelCompressor final : public Compressor {
 public:
  KVCompression strategy() const override { return KVCompression::int8_per_channel; }

  static float scale_for(float amax) {
    if (amax == 0.0f) return 0.0f;
    int exp = 0;
    const double mant = std::frexp(static_cast<double>(amax) / 127.0, &exp);
    return static_cast<float>(std::ldexp(std::ceil(mant * 65536.0) / 65536.0, exp));
  }

  void compress(const float* src, const KVBlockDims& d, std::int8_t* q, float* scales) const override {
    for (std::int64_t l = 0; l < d.n_layers; ++l) {
      const float* layer = src + l * d.layer_stride;
      float* s = scales + l * d.row;
      for (std::int64_t c = 0; c < d.row; ++c) {
        float amax = 0.0f;
        for (std::int64_t p = 0; p < d.n_positions; ++p) amax = std::max(amax, std::fabs(layer[p * d.row + c]));
        s[c] = scale_for(amax);
      }
      std::int8_t* ql = q + l * d.n_positions * d.row;
      for (std::int64_t p = 0; p < d.n_positions; ++p)
        for (std::int64_t c = 0; c < d.row; ++c) {
          const double v = layer[p * d.row + c];
          const double r = s[c] == 0.0f ? 0.0 : std::nearbyint(v / static_cast<double>(s[c]));
          ql[p * d.row + c] = static_cast<std::int8_t>(std::clamp(r, -127.0, 127.0));
        }
    }
  }

  void reconstruct(const std::int8_t* q, const float* scales, const KVBlockDims& d, float* dst) const override {
    for (std::int64_t l = 0; l < d.n_layers; ++l) {
      float* layer = dst + l * d.layer_stride;
      const float* s = scales + l * d.row;
      const std::int8_t* ql = q + l * d.n_positions * d.row;
      for (std::int64_t p = 0; p < d.n_positions; ++p)
        for (std::int64_t c = 0; c < d.row; ++c)
          layer[p * d.row + c] = static_cast<float>(ql[p * d.row + c]) * s[c];
    }
  }
};

inline std::unique_ptr<Compressor> make_compressor(KVCompression c) {
  if (c == KVCompression::int8_per_channel) return std::make_unique<Int8PerChannelCompressor>();
  return std::make_unique<IdentityCompressor>();
}

// Standalone KV block, [layer][position][kv_head][head_dim] for keys and values.
struct KVBlock {
  std::int64_t n_layers = 0;
  std::int64_t n_positions = 0;
  std::int64_t n_heads = 0;
  std::int64_t head_dim = 0;
  std::vector<float> keys;
  std::vector<float> values;

  KVBlockDims dims() const {
    const auto row = n_heads * head_dim;
    return {n_layers, n_positions, row, n_positions * row};
  }
};

struct CompressedKV {
  std::vector<std::int8_t> q_keys, q_values;
  std::vector<float> key_scales, value_scales;
};

inline CompressedKV compress_block(const Compressor& c, const KVBlock& block) {
  const auto d = block.dims();
  if (static_cast<std::int64_t>(block.keys.size()) != d.n_layers * d.layer_stride ||
      block.values.size() != block.keys.size())
    throw ShapeError("KV block size does not match its geometry");
  CompressedKV out;
  out.q_keys.resize(block.keys.size());
  out.q_values.resize(block.values.size());
  out.key_scales.resize(static_cast<std::size_t>(d.n_layers * d.row));
  out.value_scales.resize(out.key_scales.size());
  c.compress(block.keys.data(), d, out.q_keys.data(), out.key_scales.data());
  c.compress(block.values.data(), d, out.q_values.data(), out.value_scales.data());
  return out;
}

inline KVBlock compress_roundtrip(const Compressor& c, const KVBlock& block) {
  const auto packed = compress_block(c, block);
  KVBlock out = block;
  c.reconstruct(packed.q_keys.data(), packed.key_scales.data(), block.dims(), out.keys.data());
  c.reconstruct(packed.q_values.data(), packed.value_scales.data(), block.dims(), out.values.data());
  return out;
}

// ---------------------------------------------------------------------------

class KVSlot {
 public:
  KVSlot(SlotConfig cfg, std::vector<TokenId> prefix, const KVGeometry& geometry,
         const std::optional<KVGeometry>& draft_geometry, KVCompression compression)
      : config_(std::move(cfg)),
        prefix_(std::move(prefix)),
        geometry_(geometry),
        keys_(static_cast<std::size_t>(geometry.elements())),
        values_(static_cast<std::size_t>(geometry.elements())) {
    if (draft_geometry) {
      draft_geometry_ = *draft_geometry;
      draft_keys_ = Buffer<float>(static_cast<std::size_t>(draft_geometry->elements()));
      draft_values_ = Buffer<float>(static_cast<std::size_t>(draft_geometry->elements()));
    }
    const auto k = static_cast<std::int64_t>(prefix_.size());
    if (compression != KVCompression::none && k > 0) {
      const auto n = static_cast<std::size_t>(geometry.n_layers * k * geometry.row());
      q_keys_ = Buffer<std::int8_t>(n);
      q_values_ = Buffer<std::int8_t>(n);
      key_scales_ = Buffer<float>(static_cast<std::size_t>(geometry.n_layers * geometry.row()));
      value_scales_ = Buffer<float>(static_cast<std::size_t>(geometry.n_layers * geometry.row()));
    }
  }

  const std::string& request_id() const { return config_.request_id; }
  const SlotConfig& config() const { return config_; }
  const std::vector<TokenId>& prefix_tokens() const { return prefix_; }
  const KVGeometry& geometry() const { return geometry_; }
  std::int64_t capacity() const { return geometry_.capacity; }
  std::int64_t prefix_len() const { return static_cast<std::int64_t>(prefix_.size()); }
  std::int64_t current_len() const { return current_len_; }
  bool in_use() const { return in_use_; }
  bool prefix_frozen() const { return frozen_; }
  bool compressed() const { return cold_; }
  bool has_draft_region() const { return draft_geometry_.n_layers > 0; }
  const KVGeometry& draft_geometry() const { return draft_geometry_; }
  std::int64_t draft_len() const { return draft_len_; }

  KVView base_view() { return {keys_.data(), values_.data(), geometry_, &current_len_}; }
  KVView draft_view() {
    if (!has_draft_region()) throw CapacityError("slot '" + request_id() + "' has no draft region");
    return {draft_keys_.data(), draft_values_.data(), draft_geometry_, &draft_len_};
  }

  // Read access to live entries only; anything at or past current_len is dead.
  std::span<const float> key_at(std::int64_t layer, std::int64_t pos) const { return live_row(keys_, layer, pos); }
  std::span<const float> value_at(std::int64_t layer, std::int64_t pos) const {
    return live_row(values_, layer, pos);
  }

  // Raw storage, for inspection and isolation checks.
  std::span<const float> raw_keys() const { return keys_.span(); }
  std::span<const float> raw_values() const { return values_.span(); }
  std::span<const float> raw_draft_keys() const { return draft_keys_.span(); }
  std::span<const float> raw_draft_values() const { return draft_values_.span(); }

  // Checksum over [0, prefix_len) of every layer, keys then values.
  std::uint64_t prefix_checksum() const {
    std::uint64_t h = 14695981039346656037ULL;
    const auto bytes = static_cast<std::size_t>(prefix_len() * geometry_.row()) * sizeof(float);
    for (std::int64_t l = 0; l < geometry_.n_layers; ++l) {
      h = fnv1a64(keys_.data() + l * geometry_.layer_stride(), bytes, h);
      h = fnv1a64(values_.data() + l * geometry_.layer_stride(), bytes, h);
    }
    return h;
  }

  void truncate(std::int64_t new_len) {
    if (new_len < prefix_len())
      throw RangeError("cannot truncate slot '" + request_id() + "' into its frozen prefix (" +
                       std::to_string(new_len) + " < " + std::to_string(prefix_len()) + ")");
    if (new_len > current_len_)
      throw RangeError("truncate length " + std::to_string(new_len) + " exceeds current length " +
                       std::to_string(current_len_));
    current_len_ = new_len;
  }

  void truncate_draft(std::int64_t new_len) {
    if (new_len < 0 || new_len > draft_len_) throw RangeError("draft truncate length out of range");
    draft_len_ = new_len;
  }

  // Used by warmup once the prefix KV has been written.
  void freeze_prefix() {
    if (current_len_ != prefix_len()) throw RangeError("prefix warmup left slot at the wrong length");
    frozen_ = true;
  }

 private:
  friend class KVManager;

  std::span<const float> live_row(const Buffer<float>& buf, std::int64_t layer, std::int64_t pos) const {
    if (layer < 0 || layer >= geometry_.n_layers) throw RangeError("layer index out of range");
    if (pos < 0 || pos >= current_len_)
      throw RangeError("position " + std::to_string(pos) + " is not live (length " + std::to_string(current_len_) +
                       ")");
    return {buf.data() + layer * geometry_.layer_stride() + pos * geometry_.row(),
            static_cast<std::size_t>(geometry_.row())};
  }

  KVBlockDims prefix_dims() const {
    return {geometry_.n_layers, prefix_len(), geometry_.row(), geometry_.layer_stride()};
  }

  SlotConfig config_;
  std::vector<TokenId> prefix_;
  KVGeometry geometry_;
  KVGeometry draft_geometry_{};
  Buffer<float> keys_, values_;
  Buffer<float> draft_keys_, draft_values_;
  Buffer<std::int8_t> q_keys_, q_values_;
  Buffer<float> key_scales_, value_scales_;
  std::int64_t current_len_ = 0;
  std::int64_t draft_len_ = 0;
  bool frozen_ = false;
  bool in_use_ = false;
  bool cold_ = false;
};

struct SlotSpec {
  SlotConfig config;
  std::vector<TokenId> prefix_tokens;  // resolved (inline or from prefix_file)
};

class KVManager {
 public:
  // `headroom` extra positions past max_seq_len absorb speculative
  // verification writes before rollback.
  KVManager(const KVConfig& cfg, const std::vector<SlotSpec>& slots, KVGeometry geometry,
            std::optional<KVGeometry> draft_geometry = std::nullopt, std::int64_t headroom = 0)
      : config_(cfg), compressor_(make_compressor(cfg.compression)) {
    if (static_cast<std::int64_t>(slots.size()) > cfg.max_slots)
      throw CapacityError(std::to_string(slots.size()) + " slots configured but kv.max_slots is " +
                          std::to_string(cfg.max_slots));
    if (headroom < 0) throw CapacityError("negative headroom");
    geometry.capacity = cfg.max_seq_len + headroom;
    if (draft_geometry) draft_geometry->capacity = geometry.capacity;
    slots_.reserve(slots.size());
    for (const auto& s : slots) {
      if (static_cast<std::int64_t>(s.prefix_tokens.size()) >= cfg.max_seq_len)
        throw CapacityError("prefix of slot '" + s.config.request_id + "' does not fit kv.max_seq_len");
      for (const auto& existing : slots_)
        if (existing->request_id() == s.config.request_id)
          throw ValidationError("duplicate slot request_id '" + s.config.request_id + "'");
      slots_.push_back(std::make_unique<KVSlot>(s.config, s.prefix_tokens, geometry, draft_geometry, cfg.compression));
    }
  }

  KVManager(const KVManager&) = delete;
  KVManager& operator=(const KVManager&) = delete;

  const KVConfig& config() const { return config_; }
  const Compressor& compressor() const { return *compressor_; }
  std::size_t size() const { return slots_.size(); }

  KVSlot& slot(const std::string& request_id) {
    for (auto& s : slots_)
      if (s->request_id() == request_id) return *s;
    throw UnknownRequest("no slot configured for request_id '" + request_id + "'");
  }

  template <typename Fn>
  void for_each_slot(Fn&& fn) {
    for (auto& s : slots_) fn(*s);
  }

  KVSlot& acquire(const std::string& request_id) {
    std::lock_guard lock(mutex_);
    auto& s = slot(request_id);
    if (s.in_use_) throw SlotBusy("slot '" + request_id + "' is already in use");
    if (s.cold_) {
      compressor_->reconstruct(s.q_keys_.data(), s.key_scales_.data(), s.prefix_dims(), s.keys_.data());
      compressor_->reconstruct(s.q_values_.data(), s.value_scales_.data(), s.prefix_dims(), s.values_.data());
      s.cold_ = false;
    }
    s.current_len_ = s.prefix_len();
    s.draft_len_ = 0;
    s.in_use_ = true;
    return s;
  }

  // Returns the slot to the pool. With compression enabled the prefix goes
  // to cold storage and is reconstructed on the next acquire.
  void release(KVSlot& s) {
    std::lock_guard lock(mutex_);
    if (!s.in_use_) return;
    if (config_.compression != KVCompression::none && s.prefix_len() > 0 && s.frozen_) {
      compressor_->compress(s.keys_.data(), s.prefix_dims(), s.q_keys_.data(), s.key_scales_.data());
      compressor_->compress(s.values_.data(), s.prefix_dims(), s.q_values_.data(), s.value_scales_.data());
      s.cold_ = true;
    }
    s.in_use_ = false;
  }

  void release(const std::string& request_id) { release(slot(request_id)); }

  static void truncate(KVSlot& s, std::int64_t new_len) { s.truncate(new_len); }

 private:
  KVConfig config_;
  std::unique_ptr<Compressor> compressor_;
  std::vector<std::unique_ptr<KVSlot>> slots_;
  std::mutex mutex_;
};

}  // namespace edgert
