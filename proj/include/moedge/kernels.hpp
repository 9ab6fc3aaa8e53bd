// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>

// Data-parallel inner loops used by token fusion (cosine similarity over
// hidden_dim activation vectors) and by distribution propagation over
// co-activation matrices. Scalar reference implementations plus AVX2
// variants selected at runtime; the two are equivalence-tested.
namespace moedge::kernels {

enum class Backend { scalar, avx2 };

// Backend currently driving dispatch. Auto-detected on first use.
Backend active_backend();

// Testing hook. Throws ConfigError if the requested backend is not
// available on this CPU.
void force_backend(Backend b);

bool avx2_supported();

float dot(std::span<const float> a, std::span<const float> b);
float squared_norm(std::span<const float> a);

// y += alpha * x
void axpy(float alpha, std::span<const float> x, std::span<float> y);
// x *= alpha
void scale(std::span<float> x, float alpha);

// Cosine similarity; 0 when either vector has zero norm.
float cosine(std::span<const float> a, std::span<const float> b);

// y = x^T * M for row-major M (rows x cols). Probability-vector propagation,
// hence double precision.
void vecmat(std::span<const double> x, std::span<const double> m, std::size_t rows,
            std::size_t cols, std::span<double> y);

}  // namespace moedge::kernels
