#pragma once

// Forward kernels shared by the tape and by inference-only code paths.

#include "mone/tensor.hpp"

namespace mone {

/// Σ a[i]·b[i] as a vectorized reduction (summation order differs from a serial loop).
inline double dot(const double* a, const double* b, std::size_t n)
{
    double s = 0.0;
#pragma omp simd reduction(+ : s)
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

/// y[i] += alpha·x[i]
inline void axpy(double alpha, const double* x, double* y, std::size_t n)
{
#pragma omp simd
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline constexpr double kLayerNormEps = 1e-6;

/// C = A·B for A m×k, B k×n.
Tensor matmul(const Tensor& a, const Tensor& b);
/// C = A·Bᵀ for A m×k, B n×k.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// C = Aᵀ·B for A k×m, B k×n.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

/// Accumulating variants used by backward rules: C += A·B, C += A·Bᵀ, C += Aᵀ·B.
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c);
void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& c);
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c);

/// Softmax along every row with per-row max subtraction. NaN input raises NumericError.
Tensor row_softmax(const Tensor& x);

/// gamma ⊙ (x − mean)/sqrt(var + eps) + beta with biased variance.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps);

/// Row-wise layer norm over the last axis of an m×n matrix. When `normalized`
/// and `inv_std` are given they receive x̂ (m×n) and 1/σ (m) for backward.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                       Tensor* normalized = nullptr, std::vector<double>* inv_std = nullptr);

double gelu(double x);
/// d/dx of the exact-erf GeLU.
double gelu_derivative(double x);
Tensor gelu(const Tensor& x);

} // namespace mone
