#pragma once

// Scalar operator math. Kernels call the row-level helpers; the vector
// overloads are the standalone operator API.
//
// Reductions run in index-ascending order with f32 accumulators.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "edgert/errors.hpp"

namespace edgert::ops {

// Finite masking constant: softmax mass at masked entries underflows to zero
// for any realistic score range without pushing the tensor toward f32 limits.
inline constexpr float kMaskValue = -1e4f;

inline float dot(const float* a, const float* b, std::int64_t n) noexcept {
  float acc = 0.0f;
  for (std::int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

inline void rmsnorm_row(const float* x, const float* w, float* y, std::int64_t n, float eps) noexcept {
  float ss = 0.0f;
  for (std::int64_t i = 0; i < n; ++i) ss += x[i] * x[i];
  const float denom = std::sqrt(ss / static_cast<float>(n) + eps);
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] / denom * w[i];
}

inline std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> weight, float eps) {
  if (x.size() != weight.size()) throw ShapeError("rmsnorm: input and weight sizes differ");
  if (!(eps > 0.0f)) throw ShapeError("rmsnorm: eps must be positive");
  std::vector<float> y(x.size());
  rmsnorm_row(x.data(), weight.data(), y.data(), static_cast<std::int64_t>(x.size()), eps);
  return y;
}

// ---------------------------------------------------------------------------
// Rotary embedding over half-split pairs (i, i + head_dim/2).

inline void rope_angles(std::int64_t position, std::int64_t head_dim, double theta, float* cos_out,
                        float* sin_out) noexcept {
  const std::int64_t half = head_dim / 2;
  for (std::int64_t i = 0; i < half; ++i) {
    const double inv_freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    const double angle = static_cast<double>(position) * inv_freq;
    cos_out[i] = static_cast<float>(std::cos(angle));
    sin_out[i] = static_cast<float>(std::sin(angle));
  }
}

// Single pass over rotation pairs.
inline void rope_fused_row(float* x, const float* c, const float* s, std::int64_t head_dim) noexcept {
  const std::int64_t half = head_dim / 2;
  for (std::int64_t i = 0; i < half; ++i) {
    const float lo = x[i];
    const float hi = x[i + half];
    x[i] = lo * c[i] - hi * s[i];
    x[i + half] = hi * c[i] + lo * s[i];
  }
}

// out = x * cos + concat(-x[half:], x[:half]) * sin, written as explicit
// slice / negate / concat steps. `rotated` needs head_dim floats.
inline void rope_decomposed_row(float* x, const float* c, const float* s, std::int64_t head_dim,
                                float* rotated) noexcept {
  const std::int64_t half = head_dim / 2;
  const float* x_lo = x;
  const float* x_hi = x + half;
  for (std::int64_t i = 0; i < half; ++i) rotated[i] = -x_hi[i];  // negate(slice(x, half, d))
  for (std::int64_t i = 0; i < half; ++i) rotated[half + i] = x_lo[i];  // concat with slice(x, 0, half)
  for (std::int64_t i = 0; i < head_dim; ++i) {
    const std::int64_t j = i < half ? i : i - half;
    x[i] = x[i] * c[j] + rotated[i] * s[j];
  }
}

enum class RopeVariant { fused, decomposed };

// data: [seq × heads × head_dim], rotated in a copy.
inline std::vector<float> apply_rope(std::span<const float> data, std::span<const std::int64_t> positions,
                                     std::int64_t heads, std::int64_t head_dim, double theta, RopeVariant variant) {
  if (head_dim % 2 != 0) throw ShapeError("apply_rope: head_dim must be even");
  const auto seq = static_cast<std::int64_t>(positions.size());
  if (static_cast<std::int64_t>(data.size()) != seq * heads * head_dim)
    throw ShapeError("apply_rope: data size does not match seq × heads × head_dim");
  std::vector<float> out(data.begin(), data.end());
  std::vector<float> c(static_cast<std::size_t>(head_dim / 2)), s(c.size()), scratch(static_cast<std::size_t>(head_dim));
  for (std::int64_t t = 0; t < seq; ++t) {
    rope_angles(positions[static_cast<std::size_t>(t)], head_dim, theta, c.data(), s.data());
    for (std::int64_t h = 0; h < heads; ++h) {
      float* row = out.data() + (t * heads + h) * head_dim;
      if (variant == RopeVariant::fused) rope_fused_row(row, c.data(), s.data(), head_dim);
      else rope_decomposed_row(row, c.data(), s.data(), head_dim, scratch.data());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// GELU

inline float gelu_tanh(float x) noexcept {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

inline float gelu_erf(float x) noexcept {
  constexpr float inv_sqrt2 = 0.7071067811865476f;
  return 0.5f * x * (1.0f + std::erf(x * inv_sqrt2));
}

enum class GeluVariant { tanh, erf };

inline std::vector<float> gelu(std::span<const float> x, GeluVariant variant) {
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = variant == GeluVariant::tanh ? gelu_tanh(x[i]) : gelu_erf(x[i]);
  return y;
}

// ---------------------------------------------------------------------------
// Softmax

inline void softmax_row(float* row, std::int64_t n) noexcept {
  float mx = row[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, row[i]);
  float sum = 0.0f;
  for (std::int64_t i = 0; i < n; ++i) {
    row[i] = std::exp(row[i] - mx);
    sum += row[i];
  }
  for (std::int64_t i = 0; i < n; ++i) row[i] /= sum;
}

// scores, mask: [rows × cols]. Masked entries (mask == false) are replaced
// by v_safe before the softmax.
inline std::vector<float> masked_softmax(std::span<const float> scores, std::span<const bool> mask, std::int64_t cols,
                                         float v_safe = kMaskValue) {
  if (scores.size() != mask.size()) throw ShapeError("masked_softmax: scores and mask shapes differ");
  if (cols <= 0 || scores.size() % static_cast<std::size_t>(cols) != 0)
    throw ShapeError("masked_softmax: size is not a multiple of the row length");
  std::vector<float> out(scores.size());
  const auto rows = static_cast<std::int64_t>(scores.size()) / cols;
  for (std::int64_t r = 0; r < rows; ++r) {
    bool any = false;
    for (std::int64_t c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r * cols + c);
      out[i] = mask[i] ? scores[i] : v_safe;
      any = any || mask[i];
    }
    if (!any) throw DegenerateRow("masked_softmax: row " + std::to_string(r) + " is fully masked");
    softmax_row(out.data() + r * cols, cols);
  }
  return out;
}

// Index of the largest value; ties go to the lowest index.
inline std::int64_t argmax(std::span<const float> v) noexcept {
  std::int64_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<std::int64_t>(i);
  return best;
}

}  // namespace edgert::ops
