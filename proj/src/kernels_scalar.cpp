#include <cstddef>

#include "mematch/kernels.hpp"

// Reference lane. Deliberately plain loops: this is the semantics the AVX2
// lane is equivalence-tested against.

namespace mematch::kernels {

namespace {

template <class S>
S dot_scalar(const S* a, const S* b, std::size_t n) {
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class S>
void axpy_scalar(std::size_t n, S alpha, const S* x, S* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class S>
void scale_scalar(std::size_t n, S alpha, const S* x, S* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <class S>
void add_scalar(std::size_t n, const S* a, const S* b, S* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <class S>
void sub_scalar(std::size_t n, const S* a, const S* b, S* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <class S>
void mul_scalar(std::size_t n, const S* a, const S* b, S* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <class S>
S sum_scalar(const S* x, std::size_t n) {
  S acc = S(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <class S>
S max_scalar(const S* x, std::size_t n) {
  S best = x[0];
  for (std::size_t i = 1; i < n; ++i) {
    if (x[i] > best) best = x[i];
  }
  return best;
}

template <class S>
constexpr Kernels<S> make_table() {
  return Kernels<S>{
      dot_scalar<S>, axpy_scalar<S>, scale_scalar<S>, add_scalar<S>,
      sub_scalar<S>, mul_scalar<S>,  sum_scalar<S>,   max_scalar<S>,
  };
}

}  // namespace

extern const Kernels<float> kScalarKernelsF32;
const Kernels<float> kScalarKernelsF32 = make_table<float>();
extern const Kernels<double> kScalarKernelsF64;
const Kernels<double> kScalarKernelsF64 = make_table<double>();

}  // namespace mematch::kernels
