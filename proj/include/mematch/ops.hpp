#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "mematch/kernels.hpp"
#include "mematch/tensor.hpp"

namespace mematch::testing {

// Fault-injection fixture for the verification battery: when set, conv2d
// backward flips the sign of the input gradient so the conv gradcheck must
// fail. Never set outside tests (the CLI honors MEMATCH_FAULT=conv-backward-sign).
inline bool conv_backward_sign_flip = false;

}  // namespace mematch::testing

namespace mematch::ops {

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(concat(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
                            shape_str(b.shape())));
  }
}

template <class S>
void check_ndim(const char* op, const Tensor<S>& t, std::size_t nd) {
  if (t.ndim() != nd) {
    throw ShapeError(concat(op, ": expected ", nd, "-d tensor, got ", shape_str(t.shape())));
  }
}

// ------------------------------------------------------------- elementwise

template <class S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("add", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  kernels::add(a.size(), a.data(), b.data(), out.data());
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (a.requires_grad()) kernels::axpy(a.size(), S(1), out.grad(), a.grad());
      if (b.requires_grad()) kernels::axpy(b.size(), S(1), out.grad(), b.grad());
    });
  }
  return out;
}

template <class S>
Tensor<S> sub(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("sub", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  kernels::sub(a.size(), a.data(), b.data(), out.data());
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (a.requires_grad()) kernels::axpy(a.size(), S(1), out.grad(), a.grad());
      if (b.requires_grad()) kernels::axpy(b.size(), S(-1), out.grad(), b.grad());
    });
  }
  return out;
}

template <class S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("mul", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  kernels::mul(a.size(), a.data(), b.data(), out.data());
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      const std::size_t n = a.size();
      if (a.requires_grad()) {
        for (std::size_t i = 0; i < n; ++i) a.grad()[i] += out.grad()[i] * b[i];
      }
      if (b.requires_grad()) {
        for (std::size_t i = 0; i < n; ++i) b.grad()[i] += out.grad()[i] * a[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, S alpha) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  kernels::scale(a.size(), alpha, a.data(), out.data());
  if (detail::want_grad(tape, a)) {
    out.set_requires_grad(true);
    tape->record([a, out, alpha]() mutable {
      kernels::axpy(a.size(), alpha, out.grad(), a.grad());
    });
  }
  return out;
}

template <class S>
Tensor<S> relu(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    // Subgradient 1 at the kink: a zero-predicted parameter vector makes
    // whole feature maps sit exactly at 0 early in training, and choosing 0
    // there would freeze the bias/shift directions permanently.
    tape->record([x, out]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] >= S(0)) x.grad()[i] += out.grad()[i];
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> tanh(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) {
        x.grad()[i] += out.grad()[i] * (S(1) - out[i] * out[i]);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> sigmoid(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = S(1) / (S(1) + std::exp(-x[i]));
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      for (std::size_t i = 0; i < x.size(); ++i) {
        x.grad()[i] += out.grad()[i] * out[i] * (S(1) - out[i]);
      }
    });
  }
  return out;
}

// --------------------------------------------------------- vector reductions

template <class S>
Tensor<S> dot(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  check_same_shape("dot", a, b);
  Tensor<S> out = Tensor<S>::scalar(kernels::dot(a.data(), b.data(), a.size()));
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      const S g = out.grad()[0];
      if (a.requires_grad()) kernels::axpy(a.size(), g, b.data(), a.grad());
      if (b.requires_grad()) kernels::axpy(b.size(), g, a.data(), b.grad());
    });
  }
  return out;
}

template <class S>
Tensor<S> sum(Tape<S>* tape, const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::scalar(kernels::sum(x.data(), x.size()));
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      const S g = out.grad()[0];
      for (std::size_t i = 0; i < x.size(); ++i) x.grad()[i] += g;
    });
  }
  return out;
}

// Softmax over a vector, computed with max subtraction.
template <class S>
Tensor<S> softmax_vec(Tape<S>* tape, const Tensor<S>& x) {
  check_ndim("softmax_vec", x, 1);
  const std::size_t n = x.size();
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S m = kernels::max(x.data(), n);
  S total = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(x[i] - m);
    total += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= total;
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      const std::size_t k = x.size();
      const S gy = kernels::dot(out.grad(), out.data(), k);
      for (std::size_t i = 0; i < k; ++i) {
        x.grad()[i] += out[i] * (out.grad()[i] - gy);
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> l2_normalize(Tape<S>* tape, const Tensor<S>& x) {
  check_ndim("l2_normalize", x, 1);
  const S norm = std::sqrt(kernels::dot(x.data(), x.data(), x.size()));
  if (!(norm > S(1e-12))) {
    throw ValueError(concat("l2_normalize: degenerate input, norm=", norm));
  }
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  kernels::scale(x.size(), S(1) / norm, x.data(), out.data());
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, norm]() mutable {
      const std::size_t n = x.size();
      const S gy = kernels::dot(out.grad(), out.data(), n);
      for (std::size_t i = 0; i < n; ++i) {
        x.grad()[i] += (out.grad()[i] - out[i] * gy) / norm;
      }
    });
  }
  return out;
}

// ------------------------------------------------------------ linear algebra

// c[m,n] = a[m,k] * b[k,n]
template <class S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  check_ndim("matmul", a, 2);
  check_ndim("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError(concat("matmul: inner dims differ, ", shape_str(a.shape()), " vs ",
                            shape_str(b.shape())));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({a.dim(0), b.dim(1)});
  kernels::gemm(m, k, n, a.data(), b.data(), out.data());
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, k, n]() mutable {
      if (a.requires_grad()) kernels::gemm_nt(m, k, n, out.grad(), b.data(), a.grad(), true);
      if (b.requires_grad()) kernels::gemm_tn(m, k, n, a.data(), out.grad(), b.grad(), true);
    });
  }
  return out;
}

// c[m,n] = a[m,d] * b[n,d]^T
template <class S>
Tensor<S> matmul_nt(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  check_ndim("matmul_nt", a, 2);
  check_ndim("matmul_nt", b, 2);
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError(concat("matmul_nt: feature dims differ, ", shape_str(a.shape()), " vs ",
                            shape_str(b.shape())));
  }
  const std::size_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({a.dim(0), b.dim(0)});
  kernels::gemm_nt(m, n, d, a.data(), b.data(), out.data());
  if (detail::want_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape->record([a, b, out, m, n, d]() mutable {
      if (a.requires_grad()) kernels::gemm(m, n, d, out.grad(), b.data(), a.grad(), true);
      if (b.requires_grad()) kernels::gemm_tn(m, n, d, out.grad(), a.data(), b.grad(), true);
    });
  }
  return out;
}

// y = w[m,k] * x[k] (+ bias[m])
template <class S>
Tensor<S> linear(Tape<S>* tape, const Tensor<S>& w, const Tensor<S>& x,
                 std::optional<Tensor<S>> bias = std::nullopt) {
  check_ndim("linear", w, 2);
  check_ndim("linear", x, 1);
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError(concat("linear: ", shape_str(w.shape()), " * ", shape_str(x.shape())));
  }
  const std::size_t m = w.dim(0), k = w.dim(1);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != w.dim(0))) {
    throw ShapeError(concat("linear: bias ", shape_str(bias->shape()), " vs rows ", w.dim(0)));
  }
  Tensor<S> out = Tensor<S>::zeros({w.dim(0)});
  kernels::gemv(m, k, w.data(), x.data(), out.data());
  if (bias) kernels::add(m, out.data(), bias->data(), out.data());
  const bool rec = tape != nullptr && (w.requires_grad() || x.requires_grad() ||
                                       (bias && bias->requires_grad()));
  if (rec) {
    out.set_requires_grad(true);
    tape->record([w, x, bias, out, m, k]() mutable {
      if (w.requires_grad()) {
        for (std::size_t i = 0; i < m; ++i) {
          if (out.grad()[i] != S(0)) kernels::axpy(k, out.grad()[i], x.data(), w.grad() + i * k);
        }
      }
      if (x.requires_grad()) kernels::gemv_t(m, k, w.data(), out.grad(), x.grad(), true);
      if (bias && bias->requires_grad()) kernels::axpy(m, S(1), out.grad(), bias->grad());
    });
  }
  return out;
}

// y[k] = a[m,k]^T * x[m]
template <class S>
Tensor<S> matvec_t(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& x) {
  check_ndim("matvec_t", a, 2);
  check_ndim("matvec_t", x, 1);
  if (a.dim(0) != x.dim(0)) {
    throw ShapeError(concat("matvec_t: ", shape_str(a.shape()), "^T * ", shape_str(x.shape())));
  }
  const std::size_t m = a.dim(0), k = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({a.dim(1)});
  kernels::gemv_t(m, k, a.data(), x.data(), out.data());
  if (detail::want_grad(tape, a, x)) {
    out.set_requires_grad(true);
    tape->record([a, x, out, m, k]() mutable {
      if (a.requires_grad()) {
        for (std::size_t i = 0; i < m; ++i) {
          if (x[i] != S(0)) kernels::axpy(k, x[i], out.grad(), a.grad() + i * k);
        }
      }
      if (x.requires_grad()) kernels::gemv(m, k, a.data(), out.grad(), x.grad(), true);
    });
  }
  return out;
}

// y = w1*x1 + w2*x2 + bias; the fused gate pre-activation used by lstm_cell.
template <class S>
Tensor<S> affine2(Tape<S>* tape, const Tensor<S>& w1, const Tensor<S>& x1, const Tensor<S>& w2,
                  const Tensor<S>& x2, const Tensor<S>& bias) {
  check_ndim("affine2", w1, 2);
  check_ndim("affine2", w2, 2);
  if (w1.dim(1) != x1.dim(0) || w2.dim(1) != x2.dim(0) || w1.dim(0) != w2.dim(0) ||
      bias.dim(0) != w1.dim(0)) {
    throw ShapeError(concat("affine2: incompatible shapes ", shape_str(w1.shape()), "*",
                            shape_str(x1.shape()), " + ", shape_str(w2.shape()), "*",
                            shape_str(x2.shape()), " + ", shape_str(bias.shape())));
  }
  const std::size_t m = w1.dim(0), k1 = w1.dim(1), k2 = w2.dim(1);
  Tensor<S> out = Tensor<S>::zeros({w1.dim(0)});
  kernels::gemv(m, k1, w1.data(), x1.data(), out.data());
  kernels::gemv(m, k2, w2.data(), x2.data(), out.data(), true);
  kernels::add(m, out.data(), bias.data(), out.data());
  const bool rec = tape != nullptr &&
                   (w1.requires_grad() || x1.requires_grad() || w2.requires_grad() ||
                    x2.requires_grad() || bias.requires_grad());
  if (rec) {
    out.set_requires_grad(true);
    tape->record([w1, x1, w2, x2, bias, out, m, k1, k2]() mutable {
      const S* g = out.grad();
      if (w1.requires_grad()) {
        for (std::size_t i = 0; i < m; ++i) {
          if (g[i] != S(0)) kernels::axpy(k1, g[i], x1.data(), w1.grad() + i * k1);
        }
      }
      if (x1.requires_grad()) kernels::gemv_t(m, k1, w1.data(), g, x1.grad(), true);
      if (w2.requires_grad()) {
        for (std::size_t i = 0; i < m; ++i) {
          if (g[i] != S(0)) kernels::axpy(k2, g[i], x2.data(), w2.grad() + i * k2);
        }
      }
      if (x2.requires_grad()) kernels::gemv_t(m, k2, w2.data(), g, x2.grad(), true);
      if (bias.requires_grad()) kernels::axpy(m, S(1), g, bias.grad());
    });
  }
  return out;
}

// ------------------------------------------------------------- shape moves

template <class S>
Tensor<S> reshape(Tape<S>* tape, const Tensor<S>& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError(concat("reshape: ", shape_str(x.shape()), " -> ", shape_str(shape),
                            " changes element count"));
  }
  Tensor<S> out = Tensor<S>::from_data(std::move(shape),
                                       std::vector<S>(x.data(), x.data() + x.size()));
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out]() mutable {
      kernels::axpy(x.size(), S(1), out.grad(), x.grad());
    });
  }
  return out;
}

// Stack equal-shaped tensors along a new leading dimension.
template <class S>
Tensor<S> stack(Tape<S>* tape, const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& inner = parts[0].shape();
  const std::size_t block = parts[0].size();
  Shape shape;
  shape.push_back(static_cast<int>(parts.size()));
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor<S> out = Tensor<S>::zeros(std::move(shape));
  bool any_grad = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    check_same_shape("stack", parts[0], parts[i]);
    std::copy(parts[i].data(), parts[i].data() + block, out.data() + i * block);
    any_grad = any_grad || parts[i].requires_grad();
  }
  if (tape != nullptr && any_grad) {
    out.set_requires_grad(true);
    tape->record([parts, out, block]() mutable {
      for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].requires_grad()) {
          kernels::axpy(block, S(1), out.grad() + i * block, parts[i].grad());
        }
      }
    });
  }
  return out;
}

// Slice index i of the leading dimension.
template <class S>
Tensor<S> index0(Tape<S>* tape, const Tensor<S>& x, int i) {
  if (x.ndim() < 2) throw ShapeError(concat("index0: need >=2-d tensor, got ", shape_str(x.shape())));
  if (i < 0 || i >= x.dim(0)) {
    throw ShapeError(concat("index0: index ", i, " out of range [0,", x.dim(0), ")"));
  }
  Shape inner(x.shape().begin() + 1, x.shape().end());
  const std::size_t block = shape_numel(inner);
  Tensor<S> out = Tensor<S>::from_data(
      std::move(inner), std::vector<S>(x.data() + i * block, x.data() + (i + 1) * block));
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, i, block]() mutable {
      kernels::axpy(block, S(1), out.grad(), x.grad() + i * block);
    });
  }
  return out;
}

// ----------------------------------------------------------------- conv2d

namespace detail_conv {

// Patch layout: row p = (y*W + x), column l = (cin*3 + ky)*3 + kx; same index
// order the direct 6-loop reference uses.
template <class S>
void im2row(const S* in, int cin, int h, int w, S* patches) {
  const int hw = h * w;
  std::size_t idx = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < cin; ++c) {
        const S* plane = in + c * hw;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = x + kx - 1;
            patches[idx++] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[iy * w + ix] : S(0);
          }
        }
      }
    }
  }
}

template <class S>
void forward_one(const S* in, const S* w, const S* b, int cin, int cout, int h, int width, S* out,
                 S* patches /* [h*w, cin*9] scratch */) {
  const std::size_t hw = static_cast<std::size_t>(h) * width;
  const std::size_t cols = static_cast<std::size_t>(cin) * 9;
  im2row(in, cin, h, width, patches);
  // out[c, p] = dot(w_c, patch_p) + b[c]
  kernels::gemm_nt(cout, hw, cols, w, patches, out);
  for (int c = 0; c < cout; ++c) {
    S* row = out + static_cast<std::size_t>(c) * hw;
    for (std::size_t p = 0; p < hw; ++p) row[p] += b[c];
  }
}

template <class S>
void backward_one(const S* in, const S* w, const S* gout, int cin, int cout, int h, int width,
                  S* gin /* nullable */, S* gw /* nullable */, S* gb /* nullable */, S* patches,
                  S* gpatches) {
  const std::size_t hw = static_cast<std::size_t>(h) * width;
  const std::size_t cols = static_cast<std::size_t>(cin) * 9;
  if (gb != nullptr) {
    for (int c = 0; c < cout; ++c) gb[c] += kernels::sum(gout + c * hw, hw);
  }
  if (gw != nullptr || gin != nullptr) im2row(in, cin, h, width, patches);
  if (gw != nullptr) kernels::gemm(cout, hw, cols, gout, patches, gw, true);
  if (gin != nullptr) {
    kernels::gemm_tn(cout, hw, cols, gout, w, gpatches);
    const S sign = mematch::testing::conv_backward_sign_flip ? S(-1) : S(1);
    std::size_t idx = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < width; ++x) {
        for (int c = 0; c < cin; ++c) {
          S* plane = gin + static_cast<std::size_t>(c) * hw;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = y + ky - 1;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = x + kx - 1;
              if (iy >= 0 && iy < h && ix >= 0 && ix < width) {
                plane[iy * width + ix] += sign * gpatches[idx];
              }
              ++idx;
            }
          }
        }
      }
    }
  }
}

template <class S>
void check_conv_shapes(const char* op, const Tensor<S>& w, const Tensor<S>& b, int cin) {
  if (w.ndim() != 4 || w.dim(2) != 3 || w.dim(3) != 3) {
    throw ShapeError(concat(op, ": weight must be [Cout,Cin,3,3], got ", shape_str(w.shape())));
  }
  if (w.dim(1) != cin) {
    throw ShapeError(concat(op, ": weight expects ", w.dim(1), " input channels, input has ", cin));
  }
  if (b.ndim() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError(concat(op, ": bias ", shape_str(b.shape()), " vs Cout ", w.dim(0)));
  }
}

}  // namespace detail_conv

// 3x3 cross-correlation, padding 1, stride 1. Input [Cin,H,W] -> [Cout,H,W].
template <class S>
Tensor<S> conv2d(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  check_ndim("conv2d", x, 3);
  detail_conv::check_conv_shapes("conv2d", w, b, x.dim(0));
  const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2), cout = w.dim(0);
  Tensor<S> out = Tensor<S>::zeros({cout, h, wd});
  std::vector<S> patches(static_cast<std::size_t>(h) * wd * cin * 9);
  detail_conv::forward_one(x.data(), w.data(), b.data(), cin, cout, h, wd, out.data(),
                           patches.data());
  if (detail::want_grad(tape, x, w, b)) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, cin, cout, h, wd]() mutable {
      std::vector<S> patches_b(static_cast<std::size_t>(h) * wd * cin * 9);
      std::vector<S> gpatches(patches_b.size());
      detail_conv::backward_one(x.data(), w.data(), out.grad(), cin, cout, h, wd,
                                x.requires_grad() ? x.grad() : nullptr,
                                w.requires_grad() ? w.grad() : nullptr,
                                b.requires_grad() ? b.grad() : nullptr, patches_b.data(),
                                gpatches.data());
    });
  }
  return out;
}

// Batched conv2d: input [B,Cin,H,W] -> [B,Cout,H,W].
template <class S>
Tensor<S> conv2d_batched(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& w,
                         const Tensor<S>& b) {
  check_ndim("conv2d_batched", x, 4);
  detail_conv::check_conv_shapes("conv2d_batched", w, b, x.dim(1));
  const int bs = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(0);
  const std::size_t in_block = static_cast<std::size_t>(cin) * h * wd;
  const std::size_t out_block = static_cast<std::size_t>(cout) * h * wd;
  Tensor<S> out = Tensor<S>::zeros({bs, cout, h, wd});
  std::vector<S> patches(static_cast<std::size_t>(h) * wd * cin * 9);
  for (int i = 0; i < bs; ++i) {
    detail_conv::forward_one(x.data() + i * in_block, w.data(), b.data(), cin, cout, h, wd,
                             out.data() + i * out_block, patches.data());
  }
  if (detail::want_grad(tape, x, w, b)) {
    out.set_requires_grad(true);
    tape->record([x, w, b, out, bs, cin, cout, h, wd, in_block, out_block]() mutable {
      std::vector<S> patches_b(static_cast<std::size_t>(h) * wd * cin * 9);
      std::vector<S> gpatches(patches_b.size());
      for (int i = 0; i < bs; ++i) {
        detail_conv::backward_one(x.data() + i * in_block, w.data(), out.grad() + i * out_block,
                                  cin, cout, h, wd,
                                  x.requires_grad() ? x.grad() + i * in_block : nullptr,
                                  w.requires_grad() ? w.grad() : nullptr,
                                  b.requires_grad() ? b.grad() : nullptr, patches_b.data(),
                                  gpatches.data());
      }
    });
  }
  return out;
}

// --------------------------------------------------------------- maxpool2

namespace detail_pool {

template <class S>
void forward_one(const S* in, int c, int h, int w, int ho, int wo, S* out, std::int32_t* argmax) {
  for (int ch = 0; ch < c; ++ch) {
    const S* plane = in + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        // Ties keep the first candidate in row-major window order.
        int best_idx = (2 * y) * w + 2 * x;
        S best = plane[best_idx];
        for (int ky = 0; ky < 2; ++ky) {
          for (int kx = 0; kx < 2; ++kx) {
            const int idx = (2 * y + ky) * w + 2 * x + kx;
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (static_cast<std::size_t>(ch) * ho + y) * wo + x;
        out[o] = best;
        argmax[o] = static_cast<std::int32_t>(ch * h * w + best_idx);
      }
    }
  }
}

}  // namespace detail_pool

// 2x2 max pooling with stride 2. Odd trailing row/column is dropped
// (floor semantics); inputs smaller than 2x2 are rejected.
template <class S>
Tensor<S> maxpool2(Tape<S>* tape, const Tensor<S>& x) {
  check_ndim("maxpool2", x, 3);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h < 2 || w < 2) {
    throw ShapeError(concat("maxpool2: spatial dims too small ", shape_str(x.shape())));
  }
  const int ho = h / 2, wo = w / 2;
  Tensor<S> out = Tensor<S>::zeros({c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());
  detail_pool::forward_one(x.data(), c, h, w, ho, wo, out.data(), argmax->data());
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, argmax]() mutable {
      for (std::size_t i = 0; i < out.size(); ++i) {
        x.grad()[(*argmax)[i]] += out.grad()[i];
      }
    });
  }
  return out;
}

// Batched maxpool2: [B,C,H,W] -> [B,C,H/2,W/2].
template <class S>
Tensor<S> maxpool2_batched(Tape<S>* tape, const Tensor<S>& x) {
  check_ndim("maxpool2_batched", x, 4);
  const int bs = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) {
    throw ShapeError(concat("maxpool2_batched: spatial dims too small ", shape_str(x.shape())));
  }
  const int ho = h / 2, wo = w / 2;
  const std::size_t in_block = static_cast<std::size_t>(c) * h * w;
  const std::size_t out_block = static_cast<std::size_t>(c) * ho * wo;
  Tensor<S> out = Tensor<S>::zeros({bs, c, ho, wo});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());
  for (int i = 0; i < bs; ++i) {
    detail_pool::forward_one(x.data() + i * in_block, c, h, w, ho, wo, out.data() + i * out_block,
                             argmax->data() + i * out_block);
  }
  if (detail::want_grad(tape, x)) {
    out.set_requires_grad(true);
    tape->record([x, out, argmax, bs, in_block, out_block]() mutable {
      for (int i = 0; i < bs; ++i) {
        S* gin = x.grad() + i * in_block;
        const S* gout = out.grad() + i * out_block;
        const std::int32_t* am = argmax->data() + i * out_block;
        for (std::size_t j = 0; j < out_block; ++j) gin[am[j]] += gout[j];
      }
    });
  }
  return out;
}

// -------------------------------------------------------------- batchnorm

enum class BnMode { train, eval };

template <class S>
struct BnState {
  Tensor<S> running_mean;
  Tensor<S> running_var;
  bool initialized = false;

  static BnState make(int channels) {
    BnState st;
    st.running_mean = Tensor<S>::zeros({channels});
    st.running_var = Tensor<S>::full({channels}, S(1));  // (0, 1) prior
    return st;
  }
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

// Per-channel batch normalization over [B,C,H,W]. Train mode normalizes with
// batch statistics and, when `state` is given, folds them into the running
// averages (first call seeds them directly). Eval mode requires initialized
// running statistics.
template <class S>
Tensor<S> batchnorm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gamma,
                    const Tensor<S>& beta, BnState<S>* state, BnMode mode) {
  check_ndim("batchnorm", x, 4);
  const int bs = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c) {
    throw ShapeError(concat("batchnorm: gamma/beta must be [", c, "], got ",
                            shape_str(gamma.shape()), " and ", shape_str(beta.shape())));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t n_per_c = static_cast<std::size_t>(bs) * plane;

  Tensor<S> mean = Tensor<S>::zeros({c});
  Tensor<S> invstd = Tensor<S>::zeros({c});
  if (mode == BnMode::train) {
    for (int ch = 0; ch < c; ++ch) {
      S m = S(0);
      for (int b = 0; b < bs; ++b) {
        m += kernels::sum(x.data() + (static_cast<std::size_t>(b) * c + ch) * plane, plane);
      }
      m /= static_cast<S>(n_per_c);
      S var = S(0);
      for (int b = 0; b < bs; ++b) {
        const S* blk = x.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const S d = blk[p] - m;
          var += d * d;
        }
      }
      var /= static_cast<S>(n_per_c);
      mean[ch] = m;
      invstd[ch] = S(1) / std::sqrt(var + static_cast<S>(kBnEps));
      if (state != nullptr) {
        if (!state->initialized) {
          state->running_mean[ch] = m;
          state->running_var[ch] = var;
        } else {
          const S mom = static_cast<S>(kBnMomentum);
          state->running_mean[ch] = (S(1) - mom) * state->running_mean[ch] + mom * m;
          state->running_var[ch] = (S(1) - mom) * state->running_var[ch] + mom * var;
        }
      }
    }
    if (state != nullptr) state->initialized = true;
  } else {
    if (state == nullptr || !state->initialized) {
      throw ValueError("batchnorm: eval mode with uninitialized running stats");
    }
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = state->running_mean[ch];
      invstd[ch] = S(1) / std::sqrt(state->running_var[ch] + static_cast<S>(kBnEps));
    }
  }

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int b = 0; b < bs; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const S* xin = x.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
      S* y = out.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
      const S g = gamma[ch], bt = beta[ch], m = mean[ch], is = invstd[ch];
      for (std::size_t p = 0; p < plane; ++p) y[p] = g * (xin[p] - m) * is + bt;
    }
  }

  if (detail::want_grad(tape, x, gamma, beta)) {
    out.set_requires_grad(true);
    const bool batch_stats = mode == BnMode::train;
    tape->record([x, gamma, beta, out, mean, invstd, bs, c, plane, n_per_c,
                  batch_stats]() mutable {
      for (int ch = 0; ch < c; ++ch) {
        const S m = mean[ch], is = invstd[ch], g = gamma[ch];
        S sum_dy = S(0), sum_dy_xhat = S(0);
        for (int b = 0; b < bs; ++b) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
          const S* dy = out.grad() + off;
          const S* xin = x.data() + off;
          for (std::size_t p = 0; p < plane; ++p) {
            sum_dy += dy[p];
            sum_dy_xhat += dy[p] * (xin[p] - m) * is;
          }
        }
        if (gamma.requires_grad()) gamma.grad()[ch] += sum_dy_xhat;
        if (beta.requires_grad()) beta.grad()[ch] += sum_dy;
        if (x.requires_grad()) {
          const S inv_n = S(1) / static_cast<S>(n_per_c);
          for (int b = 0; b < bs; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
            const S* dy = out.grad() + off;
            const S* xin = x.data() + off;
            S* dx = x.grad() + off;
            if (batch_stats) {
              for (std::size_t p = 0; p < plane; ++p) {
                const S xhat = (xin[p] - m) * is;
                dx[p] += g * is * (dy[p] - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
              }
            } else {
              for (std::size_t p = 0; p < plane; ++p) dx[p] += g * is * dy[p];
            }
          }
        }
      }
    });
  }
  return out;
}

// ------------------------------------------------- factorized 1x1 pieces

// Channel mixing 1x1 convolution: [B,Ci,H,W] * m[Co,Ci] -> [B,Co,H,W].
template <class S>
Tensor<S> conv1x1_batched(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& m,
                          std::optional<Tensor<S>> bias = std::nullopt) {
  check_ndim("conv1x1_batched", x, 4);
  check_ndim("conv1x1_batched", m, 2);
  if (m.dim(1) != x.dim(1)) {
    throw ShapeError(concat("conv1x1_batched: ", shape_str(m.shape()), " on input ",
                            shape_str(x.shape())));
  }
  const int bs = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3), co = m.dim(0);
  if (bias && (bias->ndim() != 1 || bias->dim(0) != co)) {
    throw ShapeError(concat("conv1x1_batched: bias ", shape_str(bias->shape()), " vs Cout ", co));
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t in_block = ci * hw, out_block = co * hw;
  Tensor<S> out = Tensor<S>::zeros({bs, co, h, w});
  for (int b = 0; b < bs; ++b) {
    kernels::gemm(co, ci, hw, m.data(), x.data() + b * in_block, out.data() + b * out_block);
    if (bias) {
      for (int ch = 0; ch < co; ++ch) {
        S* row = out.data() + b * out_block + ch * hw;
        for (std::size_t p = 0; p < hw; ++p) row[p] += (*bias)[ch];
      }
    }
  }
  const bool rec = tape != nullptr && (x.requires_grad() || m.requires_grad() ||
                                       (bias && bias->requires_grad()));
  if (rec) {
    out.set_requires_grad(true);
    tape->record([x, m, bias, out, bs, ci, co, hw, in_block, out_block]() mutable {
      for (int b = 0; b < bs; ++b) {
        const S* g = out.grad() + b * out_block;
        if (m.requires_grad()) {
          kernels::gemm_nt(co, ci, hw, g, x.data() + b * in_block, m.grad(), true);
        }
        if (x.requires_grad()) {
          kernels::gemm_tn(co, ci, hw, m.data(), g, x.grad() + b * in_block, true);
        }
        if (bias && bias->requires_grad()) {
          for (int ch = 0; ch < co; ++ch) bias->grad()[ch] += kernels::sum(g + ch * hw, hw);
        }
      }
    });
  }
  return out;
}

// Per-channel scaling: out[b,c,:,:] = s[c] * x[b,c,:,:]. This is where the
// predicted parameter vector enters the query network.
template <class S>
Tensor<S> channel_scale_batched(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& s) {
  check_ndim("channel_scale_batched", x, 4);
  check_ndim("channel_scale_batched", s, 1);
  if (s.dim(0) != x.dim(1)) {
    throw ShapeError(concat("channel_scale_batched: scale ", shape_str(s.shape()), " on input ",
                            shape_str(x.shape())));
  }
  const int bs = x.dim(0), c = x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int b = 0; b < bs; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
      kernels::scale(hw, s[ch], x.data() + off, out.data() + off);
    }
  }
  if (detail::want_grad(tape, x, s)) {
    out.set_requires_grad(true);
    tape->record([x, s, out, bs, c, hw]() mutable {
      for (int b = 0; b < bs; ++b) {
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
          if (x.requires_grad()) kernels::axpy(hw, s[ch], out.grad() + off, x.grad() + off);
          if (s.requires_grad()) {
            s.grad()[ch] += kernels::dot(out.grad() + off, x.data() + off, hw);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- lstm cell

// Gate order: input, forget, candidate, output.
template <class S>
struct LstmCellWeights {
  Tensor<S> w_x[4];
  Tensor<S> w_h[4];
  Tensor<S> bias[4];

  int hidden() const { return w_h[0].dim(0); }
  int input() const { return w_x[0].dim(1); }
};

// Standard LSTM cell built from primitive ops, so its backward pass comes
// from the tape.
template <class S>
std::pair<Tensor<S>, Tensor<S>> lstm_cell(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& h,
                                          const Tensor<S>& c, const LstmCellWeights<S>& wts) {
  Tensor<S> gate_i = sigmoid(tape, affine2(tape, wts.w_x[0], x, wts.w_h[0], h, wts.bias[0]));
  Tensor<S> gate_f = sigmoid(tape, affine2(tape, wts.w_x[1], x, wts.w_h[1], h, wts.bias[1]));
  Tensor<S> cand = tanh(tape, affine2(tape, wts.w_x[2], x, wts.w_h[2], h, wts.bias[2]));
  Tensor<S> gate_o = sigmoid(tape, affine2(tape, wts.w_x[3], x, wts.w_h[3], h, wts.bias[3]));
  Tensor<S> c_next = add(tape, mul(tape, gate_f, c), mul(tape, gate_i, cand));
  Tensor<S> h_next = mul(tape, gate_o, tanh(tape, c_next));
  return {h_next, c_next};
}

// ------------------------------------------------------------ episode loss

// Matching loss over an episode: for every query, sum over the support
// samples sharing its label of the negative log-softmax across all support
// entries (log-sum-exp stabilized). With `average_matches` the per-query sum
// is divided by the number of matching support samples.
template <class S>
Tensor<S> matching_loss(Tape<S>* tape, const Tensor<S>& logits,
                        const std::vector<int>& support_labels,
                        const std::vector<int>& query_labels, bool average_matches = false) {
  check_ndim("matching_loss", logits, 2);
  const int q = logits.dim(0), n = logits.dim(1);
  if (static_cast<int>(support_labels.size()) != n) {
    throw ShapeError(concat("matching_loss: ", support_labels.size(), " support labels for ", n,
                            " columns"));
  }
  if (static_cast<int>(query_labels.size()) != q) {
    throw ShapeError(concat("matching_loss: ", query_labels.size(), " query labels for ", q,
                            " rows"));
  }
  Tensor<S> probs = Tensor<S>::zeros(logits.shape());  // row softmax, reused in backward
  std::vector<S> weights(q);
  S loss = S(0);
  for (int j = 0; j < q; ++j) {
    const S* z = logits.data() + static_cast<std::size_t>(j) * n;
    S* p = probs.data() + static_cast<std::size_t>(j) * n;
    const S m = kernels::max(z, n);
    S total = S(0);
    for (int t = 0; t < n; ++t) {
      p[t] = std::exp(z[t] - m);
      total += p[t];
    }
    const S lse = m + std::log(total);
    for (int t = 0; t < n; ++t) p[t] /= total;
    int matches = 0;
    S qloss = S(0);
    for (int t = 0; t < n; ++t) {
      if (support_labels[t] == query_labels[j]) {
        ++matches;
        qloss += lse - z[t];
      }
    }
    if (matches == 0) {
      throw ValueError(concat("matching_loss: query label ", query_labels[j],
                              " absent from support set"));
    }
    weights[j] = average_matches ? S(1) / static_cast<S>(matches) : S(1);
    loss += weights[j] * qloss;
  }
  Tensor<S> out = Tensor<S>::scalar(loss);
  if (detail::want_grad(tape, logits)) {
    out.set_requires_grad(true);
    tape->record([logits, out, probs, weights, support_labels, query_labels, q, n]() mutable {
      const S g = out.grad()[0];
      for (int j = 0; j < q; ++j) {
        S* dz = logits.grad() + static_cast<std::size_t>(j) * n;
        const S* p = probs.data() + static_cast<std::size_t>(j) * n;
        int matches = 0;
        for (int t = 0; t < n; ++t) {
          if (support_labels[t] == query_labels[j]) ++matches;
        }
        const S scale_match = weights[j];
        for (int t = 0; t < n; ++t) {
          const S indicator = support_labels[t] == query_labels[j] ? S(1) : S(0);
          dz[t] += g * scale_match * (static_cast<S>(matches) * p[t] - indicator);
        }
      }
    });
  }
  return out;
}

// Nearest-support prediction: label of the column with the largest logit,
// ties resolved toward the lowest support index. `per_class_sum` switches to
// summing logits per class before the argmax.
template <class S>
int predict_label(const S* logits_row, std::size_t n, const std::vector<int>& support_labels,
                  bool per_class_sum = false) {
  if (n == 0 || support_labels.size() != n) {
    throw ShapeError(concat("predict_label: row length ", n, " vs ", support_labels.size(),
                            " labels"));
  }
  if (!per_class_sum) {
    std::size_t best = 0;
    for (std::size_t t = 1; t < n; ++t) {
      if (logits_row[t] > logits_row[best]) best = t;
    }
    return support_labels[best];
  }
  int max_label = 0;
  for (int lbl : support_labels) max_label = std::max(max_label, lbl);
  std::vector<S> per_class(static_cast<std::size_t>(max_label) + 1, S(0));
  for (std::size_t t = 0; t < n; ++t) per_class[support_labels[t]] += logits_row[t];
  std::size_t best = 0;
  for (std::size_t c = 1; c < per_class.size(); ++c) {
    if (per_class[c] > per_class[best]) best = c;
  }
  return static_cast<int>(best);
}

}  // namespace mematch::ops
