#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "fluiddiff/simd.hpp"

namespace fluiddiff::simd {
namespace {

Isa detect() {
  if (const char* forced = std::getenv("FLUIDDIFF_ISA")) {
    const std::string name(forced);
    if (name == "scalar") return Isa::Scalar;
    if (name == "avx2" && avx2::available()) return Isa::Avx2;
    if (name == "neon" && neon::available()) return Isa::Neon;
  }
  if (avx2::available()) return Isa::Avx2;
  if (neon::available()) return Isa::Neon;
  return Isa::Scalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{detect()};
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return "scalar";
    case Isa::Avx2: return "avx2";
    case Isa::Neon: return "neon";
  }
  return "unknown";
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::Scalar: return true;
    case Isa::Avx2: return avx2::available();
    case Isa::Neon: return neon::available();
  }
  return false;
}

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw std::invalid_argument("ISA not supported on this CPU: " + std::string(isa_name(isa)));
  }
  current().store(isa, std::memory_order_relaxed);
}

template <typename T>
const KernelTable<T>& kernels() {
  switch (active_isa()) {
    case Isa::Avx2: return avx2::table<T>();
    case Isa::Neon: return neon::table<T>();
    case Isa::Scalar: break;
  }
  return scalar::table<T>();
}

template const KernelTable<float>& kernels<float>();
template const KernelTable<double>& kernels<double>();

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto& kt = kernels<T>();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip != T(0)) kt.axpy(n, aip, b + p * n, crow);
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto& kt = kernels<T>();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += kt.dot(k, a + i * k, b + j * k);
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  const auto& kt = kernels<T>();
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = a[p * m + i];
      if (api != T(0)) kt.axpy(n, api, brow, c + i * n);
    }
  }
}

template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);

}  // namespace fluiddiff::simd
