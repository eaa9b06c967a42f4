#pragma once
// Vector kernels for the dense inner loops (GEMM rows, CG updates).
//
// Every kernel has a portable scalar reference and, where the target supports
// it, an AVX2+FMA (x86-64) or NEON (AArch64) variant. The variant is selected
// once at startup from CPU feature detection; FLUIDDIFF_ISA=scalar forces the
// reference path. Results are deterministic for a fixed selection, but the
// scalar and vector paths are allowed to differ by reassociation roundoff.

#include <cstddef>
#include <span>
#include <string_view>

namespace fluiddiff::simd {

enum class Isa { Scalar, Avx2, Neon };

std::string_view isa_name(Isa isa);

template <typename T>
struct KernelTable {
  // y[i] += a * x[i]
  void (*axpy)(std::size_t n, T a, const T* x, T* y);
  // sum_i x[i] * y[i]
  T (*dot)(std::size_t n, const T* x, const T* y);
  // x[i] *= a
  void (*scale)(std::size_t n, T a, T* x);
  // sum_i x[i]
  T (*sum)(std::size_t n, const T* x);
};

namespace scalar {
template <typename T> const KernelTable<T>& table();
}
namespace avx2 {
bool available();
template <typename T> const KernelTable<T>& table();
}
namespace neon {
bool available();
template <typename T> const KernelTable<T>& table();
}

/// ISA the dispatcher picked (or was forced to).
Isa active_isa();

/// Overrides the dispatched ISA; throws std::invalid_argument when the CPU
/// lacks it. Intended for equivalence tests.
void set_active_isa(Isa isa);

bool isa_supported(Isa isa);

template <typename T> const KernelTable<T>& kernels();

template <typename T>
inline void axpy(T a, std::span<const T> x, std::span<T> y) {
  kernels<T>().axpy(x.size(), a, x.data(), y.data());
}

template <typename T>
inline T dot(std::span<const T> x, std::span<const T> y) {
  return kernels<T>().dot(x.size(), x.data(), y.data());
}

// Row-major GEMM variants, all accumulating into C.
//   gemm_nn: C[M,N] += A[M,K]   * B[K,N]
//   gemm_nt: C[M,N] += A[M,K]   * B[N,K]^T
//   gemm_tn: C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);

}  // namespace fluiddiff::simd
