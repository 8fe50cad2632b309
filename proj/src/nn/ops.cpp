#include "motionbook/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "motionbook/error.hpp"

namespace motionbook::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

using Index = Eigen::Index;

Index ix(std::size_t v) { return static_cast<Index>(v); }

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  fail(ErrorKind::kShapeMismatch, std::string(op) + ": " + detail);
}

void expect_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " + shape_string(s));
  }
}

template <typename T>
void check_defined(const char* op, const Tensor<T>& t) {
  if (!t.defined()) shape_error(op, "undefined input tensor");
}

// True when b broadcasts against a: same shape, trailing suffix, or a single element.
bool broadcastable(const Shape& a, const Shape& b) {
  if (shape_numel(b) == 1) return true;
  if (b.size() > a.size()) return false;
  return std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

void check_ranges(const char* op, std::span<const ColumnRange> ranges, std::size_t width) {
  std::size_t next = 0;
  for (const auto& r : ranges) {
    if (r.start != next || r.width == 0) shape_error(op, "column ranges must be sorted, disjoint and non-empty");
    next = r.start + r.width;
  }
  if (next != width) shape_error(op, "column ranges must cover all " + std::to_string(width) + " columns");
}

template <typename T, typename F, typename G>
Tensor<T> unary(Tape<T>& tape, const char* op, const Tensor<T>& x, F f, G dfdx) {
  check_defined(op, x);
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return tape.record(op, x.shape(), std::move(out), {x}, [dfdx](Node<T>& o) {
    T* dx = o.input_grad(0);
    if (!dx) return;
    const T* xin = o.input_value(0);
    for (std::size_t i = 0; i < o.value.size(); ++i) dx[i] += o.grad[i] * dfdx(xin[i], o.value[i]);
  });
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(Tape<T>& tape, const char* op, BinaryKind kind, const Tensor<T>& a,
                 const Tensor<T>& b) {
  check_defined(op, a);
  check_defined(op, b);
  if (!broadcastable(a.shape(), b.shape())) {
    shape_error(op, "cannot broadcast " + shape_string(b.shape()) + " onto " + shape_string(a.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t n = av.size(), nb = bv.size();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T y = bv[i % nb];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = av[i] + y; break;
      case BinaryKind::kSub: out[i] = av[i] - y; break;
      case BinaryKind::kMul: out[i] = av[i] * y; break;
    }
  }
  return tape.record(op, a.shape(), std::move(out), {a, b}, [kind, n, nb](Node<T>& o) {
    T* da = o.input_grad(0);
    T* db = o.input_grad(1);
    const T* aval = o.input_value(0);
    const T* bval = o.input_value(1);
    const T* g = o.grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i % nb;
      switch (kind) {
        case BinaryKind::kAdd:
          if (da) da[i] += g[i];
          if (db) db[j] += g[i];
          break;
        case BinaryKind::kSub:
          if (da) da[i] += g[i];
          if (db) db[j] -= g[i];
          break;
        case BinaryKind::kMul:
          if (da) da[i] += g[i] * bval[j];
          if (db) db[j] += g[i] * aval[i];
          break;
      }
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  constexpr const char* op = "matmul";
  check_defined(op, a);
  check_defined(op, b);
  expect_rank(op, a.shape(), 2);
  expect_rank(op, b.shape(), 2);
  const std::size_t M = a.dim(0), K = a.dim(1);
  const std::size_t N = transpose_b ? b.dim(0) : b.dim(1);
  const std::size_t Kb = transpose_b ? b.dim(1) : b.dim(0);
  if (K != Kb) shape_error(op, shape_string(a.shape()) + " x " + shape_string(b.shape()));
  std::vector<T> out(M * N);
  MatMap<T> C(out.data(), ix(M), ix(N));
  CMatMap<T> A(a.values().data(), ix(M), ix(K));
  if (transpose_b) {
    C.noalias() = A * CMatMap<T>(b.values().data(), ix(N), ix(K)).transpose();
  } else {
    C.noalias() = A * CMatMap<T>(b.values().data(), ix(K), ix(N));
  }
  return tape.record(op, {M, N}, std::move(out), {a, b}, [M, N, K, transpose_b](Node<T>& o) {
    CMatMap<T> dC(o.grad.data(), ix(M), ix(N));
    CMatMap<T> A(o.input_value(0), ix(M), ix(K));
    if (T* da = o.input_grad(0)) {
      if (transpose_b) {
        MatMap<T>(da, ix(M), ix(K)).noalias() += dC * CMatMap<T>(o.input_value(1), ix(N), ix(K));
      } else {
        MatMap<T>(da, ix(M), ix(K)).noalias() +=
            dC * CMatMap<T>(o.input_value(1), ix(K), ix(N)).transpose();
      }
    }
    if (T* db = o.input_grad(1)) {
      if (transpose_b) {
        MatMap<T>(db, ix(N), ix(K)).noalias() += dC.transpose() * A;
      } else {
        MatMap<T>(db, ix(K), ix(N)).noalias() += A.transpose() * dC;
      }
    }
  });
}

template <typename T>
Tensor<T> bmm(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  constexpr const char* op = "bmm";
  check_defined(op, a);
  check_defined(op, b);
  expect_rank(op, a.shape(), 3);
  expect_rank(op, b.shape(), 3);
  const std::size_t G = a.dim(0), M = a.dim(1), K = a.dim(2);
  const std::size_t N = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t Kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != G || K != Kb) shape_error(op, shape_string(a.shape()) + " x " + shape_string(b.shape()));
  std::vector<T> out(G * M * N);
  for (std::size_t g = 0; g < G; ++g) {
    MatMap<T> C(out.data() + g * M * N, ix(M), ix(N));
    CMatMap<T> A(a.values().data() + g * M * K, ix(M), ix(K));
    const T* bp = b.values().data() + g * K * N;
    if (transpose_b) {
      C.noalias() = A * CMatMap<T>(bp, ix(N), ix(K)).transpose();
    } else {
      C.noalias() = A * CMatMap<T>(bp, ix(K), ix(N));
    }
  }
  return tape.record(op, {G, M, N}, std::move(out), {a, b}, [G, M, N, K, transpose_b](Node<T>& o) {
    T* da = o.input_grad(0);
    T* db = o.input_grad(1);
    for (std::size_t g = 0; g < G; ++g) {
      CMatMap<T> dC(o.grad.data() + g * M * N, ix(M), ix(N));
      CMatMap<T> A(o.input_value(0) + g * M * K, ix(M), ix(K));
      const T* bp = o.input_value(1) + g * K * N;
      if (da) {
        MatMap<T> dA(da + g * M * K, ix(M), ix(K));
        if (transpose_b) {
          dA.noalias() += dC * CMatMap<T>(bp, ix(N), ix(K));
        } else {
          dA.noalias() += dC * CMatMap<T>(bp, ix(K), ix(N)).transpose();
        }
      }
      if (db) {
        if (transpose_b) {
          MatMap<T>(db + g * K * N, ix(N), ix(K)).noalias() += dC.transpose() * A;
        } else {
          MatMap<T>(db + g * K * N, ix(K), ix(N)).noalias() += A.transpose() * dC;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  constexpr const char* op = "linear";
  check_defined(op, x);
  check_defined(op, w);
  expect_rank(op, w.shape(), 2);
  if (x.rank() < 1 || x.shape().back() != w.dim(0)) {
    shape_error(op, shape_string(x.shape()) + " x " + shape_string(w.shape()));
  }
  const std::size_t K = w.dim(0), N = w.dim(1), R = x.numel() / K;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != N)) shape_error(op, "bias must be [N]");
  std::vector<T> out(R * N);
  MatMap<T> Y(out.data(), ix(R), ix(N));
  Y.noalias() = CMatMap<T>(x.values().data(), ix(R), ix(K)) * CMatMap<T>(w.values().data(), ix(K), ix(N));
  if (has_bias) {
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data(), ix(N));
  }
  Shape shape = x.shape();
  shape.back() = N;
  std::vector<Tensor<T>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return tape.record(op, std::move(shape), std::move(out), std::move(inputs),
                     [R, K, N, has_bias](Node<T>& o) {
                       CMatMap<T> dY(o.grad.data(), ix(R), ix(N));
                       if (T* dx = o.input_grad(0)) {
                         MatMap<T>(dx, ix(R), ix(K)).noalias() +=
                             dY * CMatMap<T>(o.input_value(1), ix(K), ix(N)).transpose();
                       }
                       if (T* dw = o.input_grad(1)) {
                         MatMap<T>(dw, ix(K), ix(N)).noalias() +=
                             CMatMap<T>(o.input_value(0), ix(R), ix(K)).transpose() * dY;
                       }
                       if (has_bias) {
                         if (T* db = o.input_grad(2)) {
                           Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db, ix(N)) += dY.colwise().sum();
                         }
                       }
                     });
}

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dParams& p) {
  constexpr const char* op = "conv2d";
  check_defined(op, x);
  check_defined(op, w);
  expect_rank(op, x.shape(), 4);
  expect_rank(op, w.shape(), 4);
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), Cin = x.dim(3);
  const std::size_t KH = w.dim(0), KW = w.dim(1), Cout = w.dim(3);
  if (w.dim(2) != Cin) shape_error(op, "weight Cin " + std::to_string(w.dim(2)) + " vs input " + std::to_string(Cin));
  if (p.stride_h == 0 || p.stride_w == 0) shape_error(op, "stride must be positive");
  if (H + 2 * p.pad_h < KH || W + 2 * p.pad_w < KW) shape_error(op, "kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != Cout)) shape_error(op, "bias must be [Cout]");
  const std::size_t Ho = (H + 2 * p.pad_h - KH) / p.stride_h + 1;
  const std::size_t Wo = (W + 2 * p.pad_w - KW) / p.stride_w + 1;
  const std::size_t rows = B * Ho * Wo, KK = KH * KW * Cin;
  const bool pointwise = KH == 1 && KW == 1 && p.stride_h == 1 && p.stride_w == 1 && p.pad_h == 0 && p.pad_w == 0;

  std::vector<T> cols;
  if (!pointwise) {
    cols.assign(rows * KK, T(0));
    const T* xv = x.values().data();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t ho = 0; ho < Ho; ++ho) {
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          T* dst = cols.data() + ((b * Ho + ho) * Wo + wo) * KK;
          for (std::size_t kh = 0; kh < KH; ++kh) {
            const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(ho * p.stride_h + kh) - static_cast<std::ptrdiff_t>(p.pad_h);
            if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t kw = 0; kw < KW; ++kw) {
              const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(wo * p.stride_w + kw) - static_cast<std::ptrdiff_t>(p.pad_w);
              if (ww < 0 || ww >= static_cast<std::ptrdiff_t>(W)) continue;
              const T* src = xv + ((b * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(ww)) * Cin;
              std::copy_n(src, Cin, dst + (kh * KW + kw) * Cin);
            }
          }
        }
      }
    }
  }
  const T* col_ptr = pointwise ? x.values().data() : cols.data();
  std::vector<T> out(rows * Cout);
  MatMap<T> Y(out.data(), ix(rows), ix(Cout));
  Y.noalias() = CMatMap<T>(col_ptr, ix(rows), ix(KK)) * CMatMap<T>(w.values().data(), ix(KK), ix(Cout));
  if (has_bias) {
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data(), ix(Cout));
  }
  std::vector<Tensor<T>> inputs = {x, w};
  if (has_bias) inputs.push_back(bias);
  return tape.record(
      op, {B, Ho, Wo, Cout}, std::move(out), std::move(inputs),
      [cols = std::move(cols), pointwise, B, H, W, Cin, KH, KW, Cout, Ho, Wo, rows, KK, p,
       has_bias](Node<T>& o) {
        CMatMap<T> dY(o.grad.data(), ix(rows), ix(Cout));
        const T* col_ptr = pointwise ? o.input_value(0) : cols.data();
        if (T* dw = o.input_grad(1)) {
          MatMap<T>(dw, ix(KK), ix(Cout)).noalias() += CMatMap<T>(col_ptr, ix(rows), ix(KK)).transpose() * dY;
        }
        if (has_bias) {
          if (T* db = o.input_grad(2)) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db, ix(Cout)) += dY.colwise().sum();
          }
        }
        T* dx = o.input_grad(0);
        if (!dx) return;
        CMatMap<T> Wm(o.input_value(1), ix(KK), ix(Cout));
        if (pointwise) {
          MatMap<T>(dx, ix(rows), ix(KK)).noalias() += dY * Wm.transpose();
          return;
        }
        RowMat<T> dcols = dY * Wm.transpose();
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t ho = 0; ho < Ho; ++ho) {
            for (std::size_t wo = 0; wo < Wo; ++wo) {
              const T* src = dcols.data() + ((b * Ho + ho) * Wo + wo) * KK;
              for (std::size_t kh = 0; kh < KH; ++kh) {
                const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(ho * p.stride_h + kh) - static_cast<std::ptrdiff_t>(p.pad_h);
                if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(wo * p.stride_w + kw) - static_cast<std::ptrdiff_t>(p.pad_w);
                  if (ww < 0 || ww >= static_cast<std::ptrdiff_t>(W)) continue;
                  T* dst = dx + ((b * H + static_cast<std::size_t>(h)) * W + static_cast<std::size_t>(ww)) * Cin;
                  const T* s = src + (kh * KW + kw) * Cin;
                  for (std::size_t c = 0; c < Cin; ++c) dst[c] += s[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv1d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  check_defined("conv1d", x);
  check_defined("conv1d", w);
  expect_rank("conv1d", x.shape(), 3);
  expect_rank("conv1d", w.shape(), 3);
  const auto x4 = reshape(tape, x, {x.dim(0), x.dim(1), 1, x.dim(2)});
  const auto w4 = reshape(tape, w, {w.dim(0), 1, w.dim(1), w.dim(2)});
  const auto y = conv2d(tape, x4, w4, bias, Conv2dParams{stride, 1, pad, 0});
  return reshape(tape, y, {y.dim(0), y.dim(1), y.dim(3)});
}

template <typename T>
Tensor<T> upsample_nearest(Tape<T>& tape, const Tensor<T>& x, std::size_t fh, std::size_t fw) {
  constexpr const char* op = "upsample_nearest";
  check_defined(op, x);
  expect_rank(op, x.shape(), 4);
  if (fh == 0 || fw == 0) shape_error(op, "factors must be positive");
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t Ho = H * fh, Wo = W * fw;
  std::vector<T> out(B * Ho * Wo * C);
  const T* xv = x.values().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < Ho; ++h) {
      for (std::size_t w = 0; w < Wo; ++w) {
        std::copy_n(xv + ((b * H + h / fh) * W + w / fw) * C, C, out.data() + ((b * Ho + h) * Wo + w) * C);
      }
    }
  }
  return tape.record(op, {B, Ho, Wo, C}, std::move(out), {x}, [B, H, W, C, fh, fw, Ho, Wo](Node<T>& o) {
    T* dx = o.input_grad(0);
    if (!dx) return;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < Ho; ++h) {
        for (std::size_t w = 0; w < Wo; ++w) {
          T* dst = dx + ((b * H + h / fh) * W + w / fw) * C;
          const T* g = o.grad.data() + ((b * Ho + h) * Wo + w) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += g[c];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary(tape, "add", BinaryKind::kAdd, a, b);
}
template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary(tape, "sub", BinaryKind::kSub, a, b);
}
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  return binary(tape, "mul", BinaryKind::kMul, a, b);
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  return unary(tape, "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& x, T value) {
  return unary(tape, "add_scalar", x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  return unary(tape, "relu", x, [](T v) { return v > T(0) ? v : T(0); },
               [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T c = T(0.044715);
  return unary(
      tape, "gelu", x,
      [k, c](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + c * v * v * v))); },
      [k, c](T v, T) {
        const T t = std::tanh(k * (v + c * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
      });
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  return unary(
      tape, "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(Tape<T>& tape, const Tensor<T>& x) {
  return unary(tape, "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> abs(Tape<T>& tape, const Tensor<T>& x) {
  return unary(tape, "abs", x, [](T v) { return std::abs(v); },
               [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(Tape<T>& tape, const Tensor<T>& x) {
  return unary(tape, "square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  constexpr const char* op = "layer_norm";
  check_defined(op, x);
  check_defined(op, gamma);
  check_defined(op, beta);
  const std::size_t C = x.shape().empty() ? 0 : x.shape().back();
  if (C == 0 || gamma.numel() != C || beta.numel() != C) shape_error(op, "gamma/beta must match the last axis");
  const std::size_t R = x.numel() / C;
  const T* xv = x.values().data();
  const T* g = gamma.values().data();
  const T* bt = beta.values().data();
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* row = xv + r * C;
    T mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<T>(C);
    T var = 0;
    for (std::size_t c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(C);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) {
      const T h = (row[c] - mu) * rstd[r];
      xhat[r * C + c] = h;
      out[r * C + c] = h * g[c] + bt[c];
    }
  }
  return tape.record(op, x.shape(), std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd), R, C](Node<T>& o) {
                       T* dx = o.input_grad(0);
                       T* dg = o.input_grad(1);
                       T* db = o.input_grad(2);
                       const T* g = o.input_value(1);
                       std::vector<T> dh(C);
                       for (std::size_t r = 0; r < R; ++r) {
                         const T* dy = o.grad.data() + r * C;
                         const T* h = xhat.data() + r * C;
                         T sum_dh = 0, sum_dh_h = 0;
                         for (std::size_t c = 0; c < C; ++c) {
                           if (dg) dg[c] += dy[c] * h[c];
                           if (db) db[c] += dy[c];
                           dh[c] = dy[c] * g[c];
                           sum_dh += dh[c];
                           sum_dh_h += dh[c] * h[c];
                         }
                         if (!dx) continue;
                         const T inv_c = T(1) / static_cast<T>(C);
                         for (std::size_t c = 0; c < C; ++c) {
                           dx[r * C + c] += rstd[r] * (dh[c] - inv_c * sum_dh - h[c] * inv_c * sum_dh_h);
                         }
                       }
                     });
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x, bool causal) {
  constexpr const char* op = "softmax";
  check_defined(op, x);
  if (x.rank() < 1) shape_error(op, "needs rank >= 1");
  const std::size_t N = x.shape().back(), R = x.numel() / N;
  if (causal && (x.rank() < 2 || x.shape()[x.rank() - 2] != N)) shape_error(op, "causal softmax needs [...,S,S]");
  const T* xv = x.values().data();
  std::vector<T> out(x.numel(), T(0));
  for (std::size_t r = 0; r < R; ++r) {
    const std::size_t valid = causal ? (r % N) + 1 : N;
    const T* row = xv + r * N;
    T* y = out.data() + r * N;
    const T mx = *std::max_element(row, row + valid);
    T s = 0;
    for (std::size_t j = 0; j < valid; ++j) {
      y[j] = std::exp(row[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < valid; ++j) y[j] /= s;
  }
  return tape.record(op, x.shape(), std::move(out), {x}, [R, N](Node<T>& o) {
    T* dx = o.input_grad(0);
    if (!dx) return;
    for (std::size_t r = 0; r < R; ++r) {
      const T* y = o.value.data() + r * N;
      const T* dy = o.grad.data() + r * N;
      T dot = 0;
      for (std::size_t j = 0; j < N; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < N; ++j) dx[r * N + j] += y[j] * (dy[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids) {
  constexpr const char* op = "embedding";
  check_defined(op, table);
  expect_rank(op, table.shape(), 2);
  const std::size_t V = table.dim(0), C = table.dim(1), n = ids.size();
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  std::vector<T> out(n * C);
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      fail(ErrorKind::kIndexOutOfRange, "embedding id " + std::to_string(ids[i]) + " outside [0," + std::to_string(V) + ")");
    }
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * C, C, out.data() + i * C);
  }
  return tape.record(op, {n, C}, std::move(out), {table}, [saved = std::move(saved), C](Node<T>& o) {
    T* dt = o.input_grad(0);
    if (!dt) return;
    for (std::size_t i = 0; i < saved.size(); ++i) {
      T* dst = dt + static_cast<std::size_t>(saved[i]) * C;
      const T* g = o.grad.data() + i * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] += g[c];
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const std::int32_t> targets,
                        std::span<const std::uint8_t> mask, Reduction reduction) {
  constexpr const char* op = "cross_entropy";
  check_defined(op, logits);
  expect_rank(op, logits.shape(), 2);
  const std::size_t N = logits.dim(0), V = logits.dim(1);
  if (targets.size() != N) shape_error(op, "targets length must equal rows");
  if (!mask.empty() && mask.size() != N) shape_error(op, "mask length must equal rows");
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> active(N, 1);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
  std::size_t count = 0;
  for (std::size_t n = 0; n < N; ++n) {
    if (!active[n]) continue;
    if (tgt[n] < 0 || static_cast<std::size_t>(tgt[n]) >= V) {
      fail(ErrorKind::kIndexOutOfRange, "target " + std::to_string(tgt[n]) + " outside [0," + std::to_string(V) + ")");
    }
    ++count;
  }
  const T factor = (reduction == Reduction::kMean && count > 0) ? T(1) / static_cast<T>(count) : T(1);
  // Softmax rows are kept for backward.
  std::vector<T> probs(N * V, T(0));
  T total = 0;
  const T* lv = logits.values().data();
  for (std::size_t n = 0; n < N; ++n) {
    if (!active[n]) continue;
    const T* row = lv + n * V;
    const T mx = *std::max_element(row, row + V);
    T s = 0;
    for (std::size_t v = 0; v < V; ++v) {
      probs[n * V + v] = std::exp(row[v] - mx);
      s += probs[n * V + v];
    }
    for (std::size_t v = 0; v < V; ++v) probs[n * V + v] /= s;
    total += std::log(s) + mx - row[static_cast<std::size_t>(tgt[n])];
  }
  return tape.record(op, {}, {total * factor}, {logits},
                     [probs = std::move(probs), tgt = std::move(tgt), active = std::move(active), factor, N,
                      V](Node<T>& o) {
                       T* dl = o.input_grad(0);
                       if (!dl) return;
                       const T g = o.grad[0] * factor;
                       for (std::size_t n = 0; n < N; ++n) {
                         if (!active[n]) continue;
                         for (std::size_t v = 0; v < V; ++v) dl[n * V + v] += g * probs[n * V + v];
                         dl[n * V + static_cast<std::size_t>(tgt[n])] -= g;
                       }
                     });
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  check_defined("sum", x);
  T s = 0;
  for (T v : x.values()) s += v;
  return tape.record("sum", {}, {s}, {x}, [](Node<T>& o) {
    T* dx = o.input_grad(0);
    if (!dx) return;
    const std::size_t n = o.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) dx[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  check_defined("mean", x);
  const std::size_t n = x.numel();
  if (n == 0) shape_error("mean", "empty tensor");
  T s = 0;
  for (T v : x.values()) s += v;
  const T inv = T(1) / static_cast<T>(n);
  return tape.record("mean", {}, {s * inv}, {x}, [n, inv](Node<T>& o) {
    T* dx = o.input_grad(0);
    if (!dx) return;
    for (std::size_t i = 0; i < n; ++i) dx[i] += o.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> stop_gradient(Tape<T>&, const Tensor<T>& x) {
  check_defined("stop_gradient", x);
  return Tensor<T>::constant(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
}

template <typename T>
Tensor<T> straight_through(Tape<T>& tape, const Tensor<T>& z, const Tensor<T>& q) {
  check_defined("straight_through", z);
  check_defined("straight_through", q);
  if (z.shape() != q.shape()) shape_error("straight_through", shape_string(z.shape()) + " vs " + shape_string(q.shape()));
  return tape.record("straight_through", q.shape(), std::vector<T>(q.values().begin(), q.values().end()), {z},
                     [](Node<T>& o) {
                       T* dz = o.input_grad(0);
                       if (!dz) return;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) dz[i] += o.grad[i];
                     });
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  check_defined("reshape", x);
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  return tape.record("reshape", std::move(shape), std::vector<T>(x.values().begin(), x.values().end()), {x},
                     [](Node<T>& o) {
                       T* dx = o.input_grad(0);
                       if (!dx) return;
                       for (std::size_t i = 0; i < o.grad.size(); ++i) dx[i] += o.grad[i];
                     });
}

template <typename T>
Tensor<T> permute(Tape<T>& tape, const Tensor<T>& x, std::span<const std::size_t> order) {
  constexpr const char* op = "permute";
  check_defined(op, x);
  const std::size_t R = x.rank();
  if (order.size() != R) shape_error(op, "order length must equal rank");
  std::vector<bool> seen(R, false);
  for (auto a : order) {
    if (a >= R || seen[a]) shape_error(op, "order must be a permutation");
    seen[a] = true;
  }
  std::vector<std::size_t> in_stride(R, 1);
  for (std::size_t i = R; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  Shape out_shape(R);
  for (std::size_t i = 0; i < R; ++i) out_shape[i] = x.dim(order[i]);
  // Source offset of every output element.
  std::vector<std::size_t> src(x.numel());
  for (std::size_t idx = 0; idx < src.size(); ++idx) {
    std::size_t rem = idx, off = 0;
    for (std::size_t i = R; i-- > 0;) {
      const std::size_t c = rem % out_shape[i];
      rem /= out_shape[i];
      off += c * in_stride[order[i]];
    }
    src[idx] = off;
  }
  std::vector<T> out(x.numel());
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[src[i]];
  return tape.record(op, std::move(out_shape), std::move(out), {x}, [src = std::move(src)](Node<T>& o) {
    T* dx = o.input_grad(0);
    if (!dx) return;
    for (std::size_t i = 0; i < src.size(); ++i) dx[src[i]] += o.grad[i];
  });
}

template <typename T>
Tensor<T> narrow(Tape<T>& tape, const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  constexpr const char* op = "narrow";
  check_defined(op, x);
  if (axis >= x.rank() || start + length > x.dim(axis)) {
    shape_error(op, "range outside " + shape_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t span_in = x.dim(axis) * inner, span_out = length * inner;
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<T> out(outer * span_out);
  const T* xv = x.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv + o * span_in + start * inner, span_out, out.data() + o * span_out);
  }
  return tape.record(op, std::move(shape), std::move(out), {x},
                     [outer, span_in, span_out, offset = start * inner](Node<T>& o) {
                       T* dx = o.input_grad(0);
                       if (!dx) return;
                       for (std::size_t k = 0; k < outer; ++k) {
                         T* dst = dx + k * span_in + offset;
                         const T* g = o.grad.data() + k * span_out;
                         for (std::size_t i = 0; i < span_out; ++i) dst[i] += g[i];
                       }
                     });
}

template <typename T>
Tensor<T> part_embed(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                     std::span<const ColumnRange> ranges) {
  constexpr const char* op = "part_embed";
  check_defined(op, x);
  check_defined(op, w);
  check_defined(op, bias);
  expect_rank(op, x.shape(), 2);
  expect_rank(op, w.shape(), 2);
  const std::size_t N = x.dim(0), D = x.dim(1), C = w.dim(1), P = ranges.size();
  check_ranges(op, ranges, D);
  if (w.dim(0) != D) shape_error(op, "weight rows must equal feature width");
  if (bias.shape() != Shape{P, C}) shape_error(op, "bias must be [P,C]");
  std::vector<ColumnRange> parts(ranges.begin(), ranges.end());
  std::vector<T> out(N * P * C);
  CMatMap<T> X(x.values().data(), ix(N), ix(D));
  CMatMap<T> Wm(w.values().data(), ix(D), ix(C));
  for (std::size_t p = 0; p < P; ++p) {
    StridedMap<T> Y(out.data() + p * C, ix(N), ix(C), Eigen::OuterStride<>(ix(P * C)));
    Y.noalias() = X.middleCols(ix(parts[p].start), ix(parts[p].width)) *
                  Wm.middleRows(ix(parts[p].start), ix(parts[p].width));
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data() + p * C, ix(C));
  }
  return tape.record(op, {N, P, C}, std::move(out), {x, w, bias}, [parts = std::move(parts), N, D, C, P](Node<T>& o) {
    T* dx = o.input_grad(0);
    T* dw = o.input_grad(1);
    T* db = o.input_grad(2);
    CMatMap<T> X(o.input_value(0), ix(N), ix(D));
    CMatMap<T> Wm(o.input_value(1), ix(D), ix(C));
    for (std::size_t p = 0; p < P; ++p) {
      CStridedMap<T> dY(o.grad.data() + p * C, ix(N), ix(C), Eigen::OuterStride<>(ix(P * C)));
      const Index s = ix(parts[p].start), wdt = ix(parts[p].width);
      if (dx) MatMap<T>(dx, ix(N), ix(D)).middleCols(s, wdt).noalias() += dY * Wm.middleRows(s, wdt).transpose();
      if (dw) MatMap<T>(dw, ix(D), ix(C)).middleRows(s, wdt).noalias() += X.middleCols(s, wdt).transpose() * dY;
      if (db) Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db + p * C, ix(C)) += dY.colwise().sum();
    }
  });
}

template <typename T>
Tensor<T> part_unembed(Tape<T>& tape, const Tensor<T>& h, const Tensor<T>& w, const Tensor<T>& bias,
                       std::span<const ColumnRange> ranges) {
  constexpr const char* op = "part_unembed";
  check_defined(op, h);
  check_defined(op, w);
  check_defined(op, bias);
  expect_rank(op, h.shape(), 3);
  expect_rank(op, w.shape(), 2);
  const std::size_t N = h.dim(0), P = h.dim(1), C = h.dim(2), D = w.dim(0);
  if (ranges.size() != P) shape_error(op, "part count mismatch");
  check_ranges(op, ranges, D);
  if (w.dim(1) != C) shape_error(op, "weight columns must equal channels");
  if (bias.shape() != Shape{D}) shape_error(op, "bias must be [D]");
  std::vector<ColumnRange> parts(ranges.begin(), ranges.end());
  std::vector<T> out(N * D);
  MatMap<T> Y(out.data(), ix(N), ix(D));
  CMatMap<T> Wm(w.values().data(), ix(D), ix(C));
  for (std::size_t p = 0; p < P; ++p) {
    CStridedMap<T> H(h.values().data() + p * C, ix(N), ix(C), Eigen::OuterStride<>(ix(P * C)));
    const Index s = ix(parts[p].start), wdt = ix(parts[p].width);
    Y.middleCols(s, wdt).noalias() = H * Wm.middleRows(s, wdt).transpose();
  }
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.values().data(), ix(D));
  return tape.record(op, {N, D}, std::move(out), {h, w, bias}, [parts = std::move(parts), N, D, C, P](Node<T>& o) {
    T* dh = o.input_grad(0);
    T* dw = o.input_grad(1);
    T* db = o.input_grad(2);
    CMatMap<T> dY(o.grad.data(), ix(N), ix(D));
    CMatMap<T> Wm(o.input_value(1), ix(D), ix(C));
    for (std::size_t p = 0; p < P; ++p) {
      const Index s = ix(parts[p].start), wdt = ix(parts[p].width);
      if (dh) {
        StridedMap<T> dH(dh + p * C, ix(N), ix(C), Eigen::OuterStride<>(ix(P * C)));
        dH.noalias() += dY.middleCols(s, wdt) * Wm.middleRows(s, wdt);
      }
      if (dw) {
        CStridedMap<T> H(o.input_value(0) + p * C, ix(N), ix(C), Eigen::OuterStride<>(ix(P * C)));
        MatMap<T>(dw, ix(D), ix(C)).middleRows(s, wdt).noalias() += dY.middleCols(s, wdt).transpose() * H;
      }
    }
    if (db) Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(db, ix(D)) += dY.colwise().sum();
  });
}

#define MB_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&, bool);                      \
  template Tensor<T> bmm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, bool);                         \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
  template Tensor<T> conv2d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                            const Conv2dParams&);                                                     \
  template Tensor<T> conv1d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                            std::size_t, std::size_t);                                                \
  template Tensor<T> upsample_nearest(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                            \
  template Tensor<T> add_scalar(Tape<T>&, const Tensor<T>&, T);                                       \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                                \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                             \
  template Tensor<T> tanh(Tape<T>&, const Tensor<T>&);                                                \
  template Tensor<T> abs(Tape<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> square(Tape<T>&, const Tensor<T>&);                                              \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&, bool);                                       \
  template Tensor<T> embedding(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>);            \
  template Tensor<T> cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const std::int32_t>,         \
                                   std::span<const std::uint8_t>, Reduction);                         \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                                \
  template Tensor<T> stop_gradient(Tape<T>&, const Tensor<T>&);                                       \
  template Tensor<T> straight_through(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                      \
  template Tensor<T> permute(Tape<T>&, const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> narrow(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t);       \
  template Tensor<T> part_embed(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                std::span<const ColumnRange>);                                        \
  template Tensor<T> part_unembed(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                  std::span<const ColumnRange>);

MB_INSTANTIATE_OPS(float)
MB_INSTANTIATE_OPS(double)

#undef MB_INSTANTIATE_OPS

}  // namespace motionbook::nn
