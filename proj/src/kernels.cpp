// SPDX-License-Identifier: Apache-2.0
#include "moedge/kernels.hpp"

#include <cassert>
#include <cmath>

#include "moedge/errors.hpp"

namespace moedge::kernels {

namespace scalar {

float dot(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

float squared_norm(const float* a, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * a[i];
    return acc;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale(float* x, float alpha, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void vecmat(const double* x, const double* m, std::size_t rows, std::size_t cols, double* y) {
    for (std::size_t j = 0; j < cols; ++j) y[j] = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* row = m + i * cols;
        for (std::size_t j = 0; j < cols; ++j) y[j] += xi * row[j];
    }
}

}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define MOEDGE_X86 1
#else
#define MOEDGE_X86 0
#endif

#if MOEDGE_X86
namespace avx2 {
float dot(const float* a, const float* b, std::size_t n);
float squared_norm(const float* a, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void scale(float* x, float alpha, std::size_t n);
void vecmat(const double* x, const double* m, std::size_t rows, std::size_t cols, double* y);
}  // namespace avx2
#endif

namespace {

struct Ops {
    float (*dot)(const float*, const float*, std::size_t);
    float (*squared_norm)(const float*, std::size_t);
    void (*axpy)(float, const float*, float*, std::size_t);
    void (*scale)(float*, float, std::size_t);
    void (*vecmat)(const double*, const double*, std::size_t, std::size_t, double*);
};

constexpr Ops kScalarOps{scalar::dot, scalar::squared_norm, scalar::axpy, scalar::scale,
                         scalar::vecmat};
#if MOEDGE_X86
constexpr Ops kAvx2Ops{avx2::dot, avx2::squared_norm, avx2::axpy, avx2::scale, avx2::vecmat};
#endif

Backend g_backend = [] {
#if MOEDGE_X86
    if (__builtin_cpu_supports("avx2")) return Backend::avx2;
#endif
    return Backend::scalar;
}();

const Ops* g_ops = [] {
#if MOEDGE_X86
    if (g_backend == Backend::avx2) return &kAvx2Ops;
#endif
    return &kScalarOps;
}();

}  // namespace

Backend active_backend() { return g_backend; }

bool avx2_supported() {
#if MOEDGE_X86
    return __builtin_cpu_supports("avx2");
#else
    return false;
#endif
}

void force_backend(Backend b) {
    if (b == Backend::avx2) {
        if (!avx2_supported()) throw ConfigError("kernels: avx2 backend not supported on this CPU");
#if MOEDGE_X86
        g_ops = &kAvx2Ops;
#endif
    } else {
        g_ops = &kScalarOps;
    }
    g_backend = b;
}

float dot(std::span<const float> a, std::span<const float> b) {
    assert(a.size() == b.size());
    return g_ops->dot(a.data(), b.data(), a.size());
}

float squared_norm(std::span<const float> a) { return g_ops->squared_norm(a.data(), a.size()); }

void axpy(float alpha, std::span<const float> x, std::span<float> y) {
    assert(x.size() == y.size());
    g_ops->axpy(alpha, x.data(), y.data(), x.size());
}

void scale(std::span<float> x, float alpha) { g_ops->scale(x.data(), alpha, x.size()); }

float cosine(std::span<const float> a, std::span<const float> b) {
    const float na = squared_norm(a);
    const float nb = squared_norm(b);
    if (na == 0.0f || nb == 0.0f) return 0.0f;
    return dot(a, b) / (std::sqrt(na) * std::sqrt(nb));
}

void vecmat(std::span<const double> x, std::span<const double> m, std::size_t rows,
            std::size_t cols, std::span<double> y) {
    assert(x.size() == rows && m.size() == rows * cols && y.size() == cols);
    g_ops->vecmat(x.data(), m.data(), rows, cols, y.data());
}

}  // namespace moedge::kernels
