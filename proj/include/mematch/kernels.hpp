#pragma once

#include <cstddef>

namespace mematch::kernels {

// Vector primitives come in a scalar reference lane and an AVX2 lane selected
// at runtime from CPUID. The two lanes are equivalence-tested against each
// other; everything above this layer (gemm drivers, tensor ops) is
// lane-independent code calling through the active table.
//
// MEMATCH_SIMD=scalar|avx2 overrides the automatic choice.

enum class Lane { scalar = 0, avx2 = 1 };

template <class S>
struct Kernels {
  S (*dot)(const S* a, const S* b, std::size_t n);
  void (*axpy)(std::size_t n, S alpha, const S* x, S* y);    // y += alpha * x
  void (*scale)(std::size_t n, S alpha, const S* x, S* out); // out = alpha * x
  void (*add)(std::size_t n, const S* a, const S* b, S* out);
  void (*sub)(std::size_t n, const S* a, const S* b, S* out);
  void (*mul)(std::size_t n, const S* a, const S* b, S* out);
  S (*sum)(const S* x, std::size_t n);
  S (*max)(const S* x, std::size_t n);                       // n >= 1
};

const char* lane_name(Lane lane);
bool lane_supported(Lane lane);
Lane active_lane();
void set_active_lane(Lane lane);  // throws ValueError if unsupported

template <class S>
const Kernels<S>& active();

template <class S>
const Kernels<S>& table_for(Lane lane);

// ------------------------------------------------------------- thin wrappers

template <class S>
inline S dot(const S* a, const S* b, std::size_t n) {
  return active<S>().dot(a, b, n);
}

template <class S>
inline void axpy(std::size_t n, S alpha, const S* x, S* y) {
  active<S>().axpy(n, alpha, x, y);
}

template <class S>
inline void scale(std::size_t n, S alpha, const S* x, S* out) {
  active<S>().scale(n, alpha, x, out);
}

template <class S>
inline void add(std::size_t n, const S* a, const S* b, S* out) {
  active<S>().add(n, a, b, out);
}

template <class S>
inline void sub(std::size_t n, const S* a, const S* b, S* out) {
  active<S>().sub(n, a, b, out);
}

template <class S>
inline void mul(std::size_t n, const S* a, const S* b, S* out) {
  active<S>().mul(n, a, b, out);
}

template <class S>
inline S sum(const S* x, std::size_t n) {
  return active<S>().sum(x, n);
}

template <class S>
inline S max(const S* x, std::size_t n) {
  return active<S>().max(x, n);
}

// ------------------------------------------------- lane-independent drivers
// Row-major throughout.

// c[m,n] (+)= a[m,k] * b[k,n]
template <class S>
void gemm(std::size_t m, std::size_t k, std::size_t n, const S* a, const S* b, S* c,
          bool accumulate = false) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = S(0);
  }
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      if (arow[l] != S(0)) axpy(n, arow[l], b + l * n, crow);
    }
  }
}

// c[i,j] = dot(a_i, b_j); a[m,d], b[n,d]
template <class S>
void gemm_nt(std::size_t m, std::size_t n, std::size_t d, const S* a, const S* b, S* c,
             bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      S v = dot(a + i * d, b + j * d, d);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
  }
}

// c[n,p] (+)= a^T * b with a[m,n], b[m,p]
template <class S>
void gemm_tn(std::size_t m, std::size_t n, std::size_t p, const S* a, const S* b, S* c,
             bool accumulate = false) {
  if (!accumulate) {
    for (std::size_t i = 0; i < n * p; ++i) c[i] = S(0);
  }
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = a + i * n;
    const S* brow = b + i * p;
    for (std::size_t j = 0; j < n; ++j) {
      if (arow[j] != S(0)) axpy(p, arow[j], brow, c + j * p);
    }
  }
}

// y[m] (+)= a[m,k] * x[k]
template <class S>
void gemv(std::size_t m, std::size_t k, const S* a, const S* x, S* y, bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) {
    S v = dot(a + i * k, x, k);
    y[i] = accumulate ? y[i] + v : v;
  }
}

// y[k] (+)= a^T x with a[m,k], x[m]
template <class S>
void gemv_t(std::size_t m, std::size_t k, const S* a, const S* x, S* y, bool accumulate = false) {
  if (!accumulate) {
    for (std::size_t i = 0; i < k; ++i) y[i] = S(0);
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (x[i] != S(0)) axpy(k, x[i], a + i * k, y);
  }
}

}  // namespace mematch::kernels
