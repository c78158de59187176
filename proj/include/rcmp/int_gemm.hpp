#pragma once

// i16 x i16 -> i32 matrix product for integer-mode inference.
//
// Both operands are row-major with a row stride padded to kIntGemmAlign
// elements (padding must be zero), so every row is a whole number of SIMD
// vectors. out[i * n + j] = sum_k a[i, k] * b[j, k].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#if defined(__AVX2__)
#include <immintrin.h>
#elif defined(__SSE2__)
#include <emmintrin.h>
#endif

namespace rcmp {

inline constexpr std::int64_t kIntGemmAlign = 16;

inline std::int64_t padded_depth(std::int64_t k) { return (k + kIntGemmAlign - 1) / kIntGemmAlign * kIntGemmAlign; }

/// Round half to even (std::nearbyint in the default rounding mode).
/// Inputs are clamped to +-2^30 first so the conversion cannot overflow.
inline int round_half_even(float v) {
  v = std::min(std::max(v, -1073741824.0f), 1073741824.0f);
#if defined(__SSE2__)
  return _mm_cvtss_si32(_mm_set_ss(v));
#else
  return static_cast<int>(std::nearbyint(v));
#endif
}

/// Portable reference.
inline void int_gemm_nt_scalar(const std::int16_t* a, const std::int16_t* b, std::int64_t m, std::int64_t n,
                               std::int64_t kp, std::int32_t* out) {
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      std::int32_t s = 0;
      for (std::int64_t k = 0; k < kp; ++k)
        s += static_cast<std::int32_t>(a[i * kp + k]) * static_cast<std::int32_t>(b[j * kp + k]);
      out[i * n + j] = s;
    }
}

namespace detail {

#if defined(__AVX2__)
using IVec = __m256i;
inline constexpr std::int64_t kLanes = 16;
inline IVec vload(const std::int16_t* p) { return _mm256_loadu_si256(reinterpret_cast<const __m256i*>(p)); }
inline IVec vmadd(IVec acc, IVec a, IVec b) { return _mm256_add_epi32(acc, _mm256_madd_epi16(a, b)); }
inline IVec vzero() { return _mm256_setzero_si256(); }
inline __m128i half_sum(IVec v) { return _mm_add_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256(v, 1)); }
inline std::int32_t vsum(IVec v) {
  __m128i s = half_sum(v);
  s = _mm_add_epi32(s, _mm_shuffle_epi32(s, _MM_SHUFFLE(1, 0, 3, 2)));
  s = _mm_add_epi32(s, _mm_shuffle_epi32(s, _MM_SHUFFLE(2, 3, 0, 1)));
  return _mm_cvtsi128_si32(s);
}
#elif defined(__SSE2__)
using IVec = __m128i;
inline constexpr std::int64_t kLanes = 8;
inline IVec vload(const std::int16_t* p) { return _mm_loadu_si128(reinterpret_cast<const __m128i*>(p)); }
inline IVec vmadd(IVec acc, IVec a, IVec b) { return _mm_add_epi32(acc, _mm_madd_epi16(a, b)); }
inline IVec vzero() { return _mm_setzero_si128(); }
inline __m128i half_sum(IVec v) { return v; }
inline std::int32_t vsum(IVec s) {
  s = _mm_add_epi32(s, _mm_shuffle_epi32(s, _MM_SHUFFLE(1, 0, 3, 2)));
  s = _mm_add_epi32(s, _mm_shuffle_epi32(s, _MM_SHUFFLE(2, 3, 0, 1)));
  return _mm_cvtsi128_si32(s);
}
#endif

#if defined(__AVX2__) || defined(__SSE2__)
/// Horizontal sums of four accumulators as lanes {a, b, c, d}.
inline __m128i vsum4(IVec a, IVec b, IVec c, IVec d) {
  const __m128i x = half_sum(a), y = half_sum(b), z = half_sum(c), w = half_sum(d);
  const __m128i xy = _mm_add_epi32(_mm_unpacklo_epi32(x, y), _mm_unpackhi_epi32(x, y));
  const __m128i zw = _mm_add_epi32(_mm_unpacklo_epi32(z, w), _mm_unpackhi_epi32(z, w));
  return _mm_add_epi32(_mm_unpacklo_epi64(xy, zw), _mm_unpackhi_epi64(xy, zw));
}

/// Stores lanes {0, 1} at p and lanes {2, 3} at q.
inline void store_pairs(std::int32_t* p, std::int32_t* q, __m128i v) {
  _mm_storel_epi64(reinterpret_cast<__m128i*>(p), v);
  _mm_storel_epi64(reinterpret_cast<__m128i*>(q), _mm_unpackhi_epi64(v, v));
}
#endif

}  // namespace detail

inline void int_gemm_nt(const std::int16_t* a, const std::int16_t* b, std::int64_t m, std::int64_t n,
                        std::int64_t kp, std::int32_t* out) {
#if defined(__AVX2__) || defined(__SSE2__)
  using namespace detail;
  std::int64_t i = 0;
  // 4 x 2 register tile: six loads feed eight multiply-adds per step.
  for (; i + 4 <= m; i += 4) {
    const std::int16_t* a0 = a + i * kp;
    const std::int16_t* a1 = a0 + kp;
    const std::int16_t* a2 = a1 + kp;
    const std::int16_t* a3 = a2 + kp;
    std::int64_t j = 0;
    for (; j + 2 <= n; j += 2) {
      const std::int16_t* b0 = b + j * kp;
      const std::int16_t* b1 = b0 + kp;
      IVec s00 = vzero(), s01 = vzero(), s10 = vzero(), s11 = vzero();
      IVec s20 = vzero(), s21 = vzero(), s30 = vzero(), s31 = vzero();
      for (std::int64_t k = 0; k < kp; k += kLanes) {
        const IVec x0 = vload(b0 + k), x1 = vload(b1 + k);
        IVec w = vload(a0 + k);
        s00 = vmadd(s00, w, x0);
        s01 = vmadd(s01, w, x1);
        w = vload(a1 + k);
        s10 = vmadd(s10, w, x0);
        s11 = vmadd(s11, w, x1);
        w = vload(a2 + k);
        s20 = vmadd(s20, w, x0);
        s21 = vmadd(s21, w, x1);
        w = vload(a3 + k);
        s30 = vmadd(s30, w, x0);
        s31 = vmadd(s31, w, x1);
      }
      store_pairs(out + i * n + j, out + (i + 1) * n + j, vsum4(s00, s01, s10, s11));
      store_pairs(out + (i + 2) * n + j, out + (i + 3) * n + j, vsum4(s20, s21, s30, s31));
    }
    for (; j < n; ++j) {
      const std::int16_t* b0 = b + j * kp;
      IVec s0 = vzero(), s1 = vzero(), s2 = vzero(), s3 = vzero();
      for (std::int64_t k = 0; k < kp; k += kLanes) {
        const IVec x0 = vload(b0 + k);
        s0 = vmadd(s0, vload(a0 + k), x0);
        s1 = vmadd(s1, vload(a1 + k), x0);
        s2 = vmadd(s2, vload(a2 + k), x0);
        s3 = vmadd(s3, vload(a3 + k), x0);
      }
      const __m128i r = vsum4(s0, s1, s2, s3);
      out[i * n + j] = _mm_cvtsi128_si32(r);
      out[(i + 1) * n + j] = _mm_cvtsi128_si32(_mm_shuffle_epi32(r, _MM_SHUFFLE(1, 1, 1, 1)));
      out[(i + 2) * n + j] = _mm_cvtsi128_si32(_mm_shuffle_epi32(r, _MM_SHUFFLE(2, 2, 2, 2)));
      out[(i + 3) * n + j] = _mm_cvtsi128_si32(_mm_shuffle_epi32(r, _MM_SHUFFLE(3, 3, 3, 3)));
    }
  }
  for (; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      IVec s = vzero();
      for (std::int64_t k = 0; k < kp; k += kLanes) s = vmadd(s, vload(a + i * kp + k), vload(b + j * kp + k));
      out[i * n + j] = vsum(s);
    }
  }
#else
  int_gemm_nt_scalar(a, b, m, n, kp, out);
#endif
}

}  // namespace rcmp
