#pragma once

#include <atomic>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace edgert {

static_assert(std::endian::native == std::endian::little,
              "EFMT and token files are read with native little-endian loads");

using TokenId = std::int32_t;

// 64-bit LCG used for reference weights and synthetic prompts. The state is
// seeded directly and advanced before each draw.
class Lcg64 {
 public:
  static constexpr std::uint64_t kMultiplier = 6364136223846793005ULL;
  static constexpr std::uint64_t kIncrement = 1442695040888963407ULL;

  explicit Lcg64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    state_ = state_ * kMultiplier + kIncrement;
    return state_;
  }

  // Top 24 bits of the new state as a dyadic fraction in [0, 1). Exact in double.
  double next_unit() noexcept { return static_cast<double>(next() >> 40) * 0x1.0p-24; }

  // f32 uniform in [lo, hi); every step is an exactly specified IEEE operation.
  float next_float(double lo, double hi) noexcept {
    return static_cast<float>(lo + (hi - lo) * next_unit());
  }

  // Weight draw for reference artifacts: uniform in [-0.05, 0.05].
  float next_weight() noexcept { return next_float(-0.05, 0.05); }

  // Uniform integer in [0, n) from the high bits.
  std::uint32_t next_below(std::uint32_t n) noexcept {
    return static_cast<std::uint32_t>((next() >> 32) % n);
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

inline std::atomic<std::uint64_t>& buffer_allocation_counter() noexcept {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

// Number of Buffer<T> allocations so far in this process.
inline std::uint64_t buffer_allocations() noexcept {
  return buffer_allocation_counter().load(std::memory_order_relaxed);
}

// Fixed-size, zero-initialized heap array. Never grows.
template <typename T>
class Buffer {
 public:
  Buffer() = default;
  explicit Buffer(std::size_t n) : size_(n) {
    if (n > 0) {
      data_ = std::make_unique<T[]>(n);
      buffer_allocation_counter().fetch_add(1, std::memory_order_relaxed);
    }
  }

  Buffer(Buffer&&) noexcept = default;
  Buffer& operator=(Buffer&&) noexcept = default;

  T* data() noexcept { return data_.get(); }
  const T* data() const noexcept { return data_.get(); }
  std::size_t size() const noexcept { return size_; }
  std::span<T> span() noexcept { return {data_.get(), size_}; }
  std::span<const T> span() const noexcept { return {data_.get(), size_}; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

 private:
  std::unique_ptr<T[]> data_;
  std::size_t size_ = 0;
};

// FNV-1a over raw bytes; used for artifact payload checksums and prefix
// immutability checks.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t hash = 14695981039346656037ULL) noexcept {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    hash ^= p[i];
    hash *= 1099511628211ULL;
  }
  return hash;
}

}  // namespace edgert
