// SPDX-License-Identifier: Apache-2.0
//
// AVX2 variants of the kernel core. Compiled with -mavx2 in its own TU;
// only reached when dispatch confirmed CPU support at runtime.

#include <cstddef>

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

namespace moedge::kernels::avx2 {

namespace {

// https://stackoverflow.com/questions/23189488 horizontal sum of __m256
inline float hsum256(__m256 x) {
    const __m128 lo = _mm256_castps256_ps128(x);
    const __m128 hi = _mm256_extractf128_ps(x, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 0x55));
    return _mm_cvtss_f32(s);
}

}  // namespace

float dot(const float* a, const float* b, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 va = _mm256_loadu_ps(a + i);
        const __m256 vb = _mm256_loadu_ps(b + i);
        acc = _mm256_add_ps(acc, _mm256_mul_ps(va, vb));
    }
    float result = hsum256(acc);
    for (; i < n; ++i) result += a[i] * b[i];
    return result;
}

float squared_norm(const float* a, std::size_t n) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 va = _mm256_loadu_ps(a + i);
        acc = _mm256_add_ps(acc, _mm256_mul_ps(va, va));
    }
    float result = hsum256(acc);
    for (; i < n; ++i) result += a[i] * a[i];
    return result;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 vx = _mm256_loadu_ps(x + i);
        const __m256 vy = _mm256_loadu_ps(y + i);
        _mm256_storeu_ps(y + i, _mm256_add_ps(vy, _mm256_mul_ps(va, vx)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale(float* x, float alpha, std::size_t n) {
    const __m256 va = _mm256_set1_ps(alpha);
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(x + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), va));
    }
    for (; i < n; ++i) x[i] *= alpha;
}

void vecmat(const double* x, const double* m, std::size_t rows, std::size_t cols, double* y) {
    for (std::size_t j = 0; j < cols; ++j) y[j] = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const __m256d vx = _mm256_set1_pd(xi);
        const double* row = m + i * cols;
        std::size_t j = 0;
        for (; j + 4 <= cols; j += 4) {
            const __m256d vr = _mm256_loadu_pd(row + j);
            const __m256d vy = _mm256_loadu_pd(y + j);
            _mm256_storeu_pd(y + j, _mm256_add_pd(vy, _mm256_mul_pd(vx, vr)));
        }
        for (; j < cols; ++j) y[j] += xi * row[j];
    }
}

}  // namespace moedge::kernels::avx2

#endif  // x86_64
