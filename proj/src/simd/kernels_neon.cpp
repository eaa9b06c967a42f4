#include "fluiddiff/simd.hpp"

#if defined(__aarch64__)
#include <arm_neon.h>

namespace fluiddiff::simd::neon {
namespace {

void axpy_f32(std::size_t n, float a, const float* x, float* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_n_f32(vld1q_f32(y + i), vld1q_f32(x + i), a));
  for (; i < n; ++i) y[i] += a * x[i];
}

void axpy_f64(std::size_t n, double a, const double* x, double* y) {
  const float64x2_t va = vdupq_n_f64(a);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), vld1q_f64(x + i), va));
  for (; i < n; ++i) y[i] += a * x[i];
}

float dot_f32(std::size_t n, const float* x, const float* y) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vfmaq_f32(acc, vld1q_f32(x + i), vld1q_f32(y + i));
  float s = vaddvq_f32(acc);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

double dot_f64(std::size_t n, const double* x, const double* y) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vfmaq_f64(acc, vld1q_f64(x + i), vld1q_f64(y + i));
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

void scale_f32(std::size_t n, float a, float* x) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(x + i, vmulq_n_f32(vld1q_f32(x + i), a));
  for (; i < n; ++i) x[i] *= a;
}

void scale_f64(std::size_t n, double a, double* x) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(x + i, vmulq_n_f64(vld1q_f64(x + i), a));
  for (; i < n; ++i) x[i] *= a;
}

float sum_f32(std::size_t n, const float* x) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
  float s = vaddvq_f32(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

double sum_f64(std::size_t n, const double* x) {
  float64x2_t acc = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) acc = vaddq_f64(acc, vld1q_f64(x + i));
  double s = vaddvq_f64(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

}  // namespace

bool available() { return true; }

template <>
const KernelTable<float>& table<float>() {
  static const KernelTable<float> t{&axpy_f32, &dot_f32, &scale_f32, &sum_f32};
  return t;
}

template <>
const KernelTable<double>& table<double>() {
  static const KernelTable<double> t{&axpy_f64, &dot_f64, &scale_f64, &sum_f64};
  return t;
}

}  // namespace fluiddiff::simd::neon

#else

namespace fluiddiff::simd::neon {
bool available() { return false; }
template <>
const KernelTable<float>& table<float>() { return scalar::table<float>(); }
template <>
const KernelTable<double>& table<double>() { return scalar::table<double>(); }
}  // namespace fluiddiff::simd::neon

#endif
