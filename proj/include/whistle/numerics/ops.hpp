#pragma once

// Differentiable operations over Tape values. Activations are channels-last:
// sequences are [batch, time, channels], and most ops treat a tensor as a
// matrix whose rows are all leading dimensions folded together.

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "whistle/numerics/tape.hpp"

namespace whistle::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
ConstMatMap<T> as_mat(const Tensor<T>& t, std::int64_t rows, std::int64_t cols) {
  return ConstMatMap<T>(t.data(), rows, cols);
}

template <class T>
MatMap<T> as_mat(T* p, std::int64_t rows, std::int64_t cols) {
  return MatMap<T>(p, rows, cols);
}

namespace detail {

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] inline void shape_fail(const std::string& op, const Shape& a) {
  throw ShapeError(op + ": invalid shape " + shape_str(a));
}

inline Shape with_last(Shape s, std::int64_t last) {
  if (s.empty()) s.push_back(last);
  else s.back() = last;
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// a: [..., K], b: [K, N] -> [..., N]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (B.rank() != 2 || A.rank() < 1 || A.cols() != B.dim(0)) detail::shape_fail("matmul", A.shape(), B.shape());
  const auto m = A.rows(), k = A.cols(), n = B.dim(1);
  Tensor<T> out(detail::with_last(A.shape(), n));
  as_mat(out.data(), m, n).noalias() = as_mat(A, m, k) * as_mat(B, k, n);
  return a.tape->record(
      "matmul", std::move(out),
      [a, b, m, k, n](Tape<T>& tp, size_t self) {
        auto dy = as_mat(tp.grad(self), m, n);
        if (T* ga = tp.grad_target(a)) as_mat(ga, m, k).noalias() += dy * as_mat(b.value(), k, n).transpose();
        if (T* gb = tp.grad_target(b)) as_mat(gb, k, n).noalias() += as_mat(a.value(), m, k).transpose() * dy;
      },
      a, b);
}

/// x: [..., K], w: [K, N], bias: [N] -> [..., N]
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
  const auto& X = x.value();
  const auto& W = w.value();
  const auto& Bv = bias.value();
  if (W.rank() != 2 || X.rank() < 1 || X.cols() != W.dim(0)) detail::shape_fail("linear", X.shape(), W.shape());
  if (Bv.rank() != 1 || Bv.dim(0) != W.dim(1)) detail::shape_fail("linear(bias)", W.shape(), Bv.shape());
  const auto m = X.rows(), k = X.cols(), n = W.dim(1);
  Tensor<T> out(detail::with_last(X.shape(), n));
  auto Y = as_mat(out.data(), m, n);
  Y.noalias() = as_mat(X, m, k) * as_mat(W, k, n);
  Y.rowwise() += as_mat(Bv, 1, n).row(0);
  return x.tape->record(
      "linear", std::move(out),
      [x, w, bias, m, k, n](Tape<T>& tp, size_t self) {
        auto dy = as_mat(tp.grad(self), m, n);
        if (T* gx = tp.grad_target(x)) as_mat(gx, m, k).noalias() += dy * as_mat(w.value(), k, n).transpose();
        if (T* gw = tp.grad_target(w)) as_mat(gw, k, n).noalias() += as_mat(x.value(), m, k).transpose() * dy;
        if (T* gb = tp.grad_target(bias)) as_mat(gb, 1, n) += dy.colwise().sum();
      },
      x, w, bias);
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) detail::shape_fail("add", A.shape(), B.shape());
  Tensor<T> out = A;
  for (size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  const size_t n = out.size();
  return a.tape->record(
      "add", std::move(out),
      [a, b, n](Tape<T>& tp, size_t self) {
        const T* dy = tp.grad(self).data();
        if (T* ga = tp.grad_target(a))
          for (size_t i = 0; i < n; ++i) ga[i] += dy[i];
        if (T* gb = tp.grad_target(b))
          for (size_t i = 0; i < n; ++i) gb[i] += dy[i];
      },
      a, b);
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) detail::shape_fail("mul", A.shape(), B.shape());
  Tensor<T> out = A;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  const size_t n = out.size();
  return a.tape->record(
      "mul", std::move(out),
      [a, b, n](Tape<T>& tp, size_t self) {
        const T* dy = tp.grad(self).data();
        if (T* ga = tp.grad_target(a)) {
          const T* bv = b.value().data();
          for (size_t i = 0; i < n; ++i) ga[i] += dy[i] * bv[i];
        }
        if (T* gb = tp.grad_target(b)) {
          const T* av = a.value().data();
          for (size_t i = 0; i < n; ++i) gb[i] += dy[i] * av[i];
        }
      },
      a, b);
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape->record(
      "scale", std::move(out),
      [a, s](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        if (T* ga = tp.grad_target(a))
          for (size_t i = 0; i < dy.size(); ++i) ga[i] += s * dy[i];
      },
      a);
}

template <class T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  return a.tape->record(
      "exp", std::move(out),
      [a](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        const auto& y = tp.value(self);
        if (T* ga = tp.grad_target(a))
          for (size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i] * y[i];
      },
      a);
}

template <class T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return a.tape->record(
      "relu", std::move(out),
      [a](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        const auto& x = a.value();
        if (T* ga = tp.grad_target(a))
          for (size_t i = 0; i < dy.size(); ++i) ga[i] += x[i] > T(0) ? dy[i] : T(0);
      },
      a);
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const auto& X = a.value();
  const auto n = static_cast<Eigen::Index>(X.size());
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  Eigen::Map<const Arr> x(X.data(), n);
  Arr cdf = T(0.5) * (T(1) + (x * inv_sqrt2).erf());
  Tensor<T> out(X.shape());
  Eigen::Map<Arr>(out.data(), n) = x * cdf;
  return a.tape->record(
      "gelu", std::move(out),
      [a, cdf = std::move(cdf), n](Tape<T>& tp, size_t self) {
        constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        if (T* ga = tp.grad_target(a)) {
          Eigen::Map<const Arr> x(a.value().data(), n), dy(tp.grad(self).data(), n);
          Eigen::Map<Arr>(ga, n) += dy * (cdf + x * inv_sqrt2pi * (T(-0.5) * x.square()).exp());
        }
      },
      a);
}

template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  return a.tape->record(
      "sum", Tensor<T>::scalar(s),
      [a](Tape<T>& tp, size_t self) {
        const T dy = tp.grad(self)[0];
        if (T* ga = tp.grad_target(a))
          for (size_t i = 0; i < a.value().size(); ++i) ga[i] += dy;
      },
      a);
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return a.tape->record(
      "reshape", std::move(out),
      [a](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        if (T* ga = tp.grad_target(a))
          for (size_t i = 0; i < dy.size(); ++i) ga[i] += dy[i];
      },
      a);
}

/// [B, L, C] -> [B, C], mean over time.
template <class T>
Var<T> mean_time(Var<T> a) {
  const auto& X = a.value();
  if (X.rank() != 3 || X.dim(1) == 0) detail::shape_fail("mean_time", X.shape());
  const auto B = X.dim(0), L = X.dim(1), C = X.dim(2);
  Tensor<T> out({B, C});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t c = 0; c < C; ++c) out[b * C + c] += X[(b * L + t) * C + c] / T(L);
  return a.tape->record(
      "mean_time", std::move(out),
      [a, B, L, C](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        if (T* ga = tp.grad_target(a))
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t t = 0; t < L; ++t)
              for (std::int64_t c = 0; c < C; ++c) ga[(b * L + t) * C + c] += dy[b * C + c] / T(L);
      },
      a);
}

// ---------------------------------------------------------------------------
// Normalisation and distributions over the last axis

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  const auto& X = x.value();
  const auto n = X.cols(), m = X.rows();
  if (gamma.value().shape() != Shape{n} || beta.value().shape() != Shape{n}) {
    detail::shape_fail("layer_norm", X.shape(), gamma.value().shape());
  }
  Tensor<T> out(X.shape());
  Tensor<T> xhat(X.shape());
  std::vector<T> rstd(static_cast<size_t>(m));
  const T* g = gamma.value().data();
  const T* bt = beta.value().data();
  for (std::int64_t r = 0; r < m; ++r) {
    const T* row = X.data() + r * n;
    T mean = 0;
    for (std::int64_t c = 0; c < n; ++c) mean += row[c];
    mean /= T(n);
    T var = 0;
    for (std::int64_t c = 0; c < n; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(n);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<size_t>(r)] = rs;
    for (std::int64_t c = 0; c < n; ++c) {
      const T xh = (row[c] - mean) * rs;
      xhat[r * n + c] = xh;
      out[r * n + c] = xh * g[c] + bt[c];
    }
  }
  return x.tape->record(
      "layer_norm", std::move(out),
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), m, n](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        const T* g = gamma.value().data();
        if (T* gg = tp.grad_target(gamma))
          for (std::int64_t r = 0; r < m; ++r)
            for (std::int64_t c = 0; c < n; ++c) gg[c] += dy[r * n + c] * xhat[r * n + c];
        if (T* gb = tp.grad_target(beta))
          for (std::int64_t r = 0; r < m; ++r)
            for (std::int64_t c = 0; c < n; ++c) gb[c] += dy[r * n + c];
        if (T* gx = tp.grad_target(x)) {
          for (std::int64_t r = 0; r < m; ++r) {
            T mean_d = 0, mean_dx = 0;
            for (std::int64_t c = 0; c < n; ++c) {
              const T d = dy[r * n + c] * g[c];
              mean_d += d;
              mean_dx += d * xhat[r * n + c];
            }
            mean_d /= T(n);
            mean_dx /= T(n);
            const T rs = rstd[static_cast<size_t>(r)];
            for (std::int64_t c = 0; c < n; ++c) {
              const T d = dy[r * n + c] * g[c];
              gx[r * n + c] += rs * (d - mean_d - xhat[r * n + c] * mean_dx);
            }
          }
        }
      },
      x, gamma, beta);
}

template <class T>
void softmax_rows(const T* in, T* out, std::int64_t m, std::int64_t n) {
  auto X = as_mat(const_cast<T*>(in), m, n);
  auto Y = as_mat(out, m, n);
  for (std::int64_t r = 0; r < m; ++r) {
    const T mx = X.row(r).maxCoeff();
    Y.row(r) = (X.row(r).array() - mx).exp().matrix();
    Y.row(r) /= Y.row(r).sum();
  }
}

template <class T>
void log_softmax_rows(const T* in, T* out, std::int64_t m, std::int64_t n) {
  auto X = as_mat(const_cast<T*>(in), m, n);
  auto Y = as_mat(out, m, n);
  for (std::int64_t r = 0; r < m; ++r) {
    const T mx = X.row(r).maxCoeff();
    const T lse = mx + std::log((X.row(r).array() - mx).exp().sum());
    Y.row(r) = (X.row(r).array() - lse).matrix();
  }
}

template <class T>
Var<T> softmax(Var<T> x) {
  const auto& X = x.value();
  const auto m = X.rows(), n = X.cols();
  if (n == 0) detail::shape_fail("softmax", X.shape());
  Tensor<T> out(X.shape());
  softmax_rows(X.data(), out.data(), m, n);
  return x.tape->record(
      "softmax", std::move(out),
      [x, m, n](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        const auto& y = tp.value(self);
        if (T* gx = tp.grad_target(x)) {
          for (std::int64_t r = 0; r < m; ++r) {
            T dot = 0;
            for (std::int64_t c = 0; c < n; ++c) dot += dy[r * n + c] * y[r * n + c];
            for (std::int64_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (dy[r * n + c] - dot);
          }
        }
      },
      x);
}

template <class T>
Var<T> log_softmax(Var<T> x) {
  const auto& X = x.value();
  const auto m = X.rows(), n = X.cols();
  if (n == 0) detail::shape_fail("log_softmax", X.shape());
  Tensor<T> out(X.shape());
  log_softmax_rows(X.data(), out.data(), m, n);
  return x.tape->record(
      "log_softmax", std::move(out),
      [x, m, n](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        const auto& y = tp.value(self);
        if (T* gx = tp.grad_target(x)) {
          auto dY = as_mat(dy, m, n);
          auto G = as_mat(gx, m, n);
          for (std::int64_t r = 0; r < m; ++r) {
            const T s = dY.row(r).sum();
            G.row(r).array() += dY.row(r).array() - as_mat(y, m, n).row(r).array().exp() * s;
          }
        }
      },
      x);
}

// ---------------------------------------------------------------------------
// Lookup and convolution

/// table: [V, E]; ids index rows. Output shape is `lead` + [E].
template <class T>
Var<T> embedding(Var<T> table, std::vector<int> ids, Shape lead) {
  const auto& W = table.value();
  if (W.rank() != 2 || numel(lead) != static_cast<std::int64_t>(ids.size())) {
    detail::shape_fail("embedding", W.shape(), lead);
  }
  const auto V = W.dim(0), E = W.dim(1);
  Shape out_shape = lead;
  out_shape.push_back(E);
  Tensor<T> out(out_shape);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= V) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table of shape " + shape_str(W.shape()));
    }
    std::copy_n(W.data() + ids[i] * E, E, out.data() + static_cast<std::int64_t>(i) * E);
  }
  return table.tape->record(
      "embedding", std::move(out),
      [table, ids = std::move(ids), E](Tape<T>& tp, size_t self) {
        const auto& dy = tp.grad(self);
        if (T* gw = tp.grad_target(table))
          for (size_t i = 0; i < ids.size(); ++i)
            for (std::int64_t e = 0; e < E; ++e) gw[ids[i] * E + e] += dy[static_cast<std::int64_t>(i) * E + e];
      },
      table);
}

inline std::int64_t conv1d_out_len(std::int64_t l_in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
  return (l_in + 2 * pad - k) / stride + 1;
}

inline std::int64_t conv_transpose1d_out_len(std::int64_t l_in, std::int64_t k, std::int64_t stride,
                                             std::int64_t pad) {
  return (l_in - 1) * stride + k - 2 * pad;
}

/// x: [B, L, Cin], w: [K, Cin, Cout], bias: [Cout]; symmetric zero padding.
template <class T>
Var<T> conv1d(Var<T> x, Var<T> w, Var<T> bias, std::int64_t stride, std::int64_t pad) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 3 || W.rank() != 3 || W.dim(1) != X.dim(2) || bias.value().shape() != Shape{W.dim(2)} ||
      stride < 1 || pad < 0) {
    detail::shape_fail("conv1d", X.shape(), W.shape());
  }
  const auto B = X.dim(0), L = X.dim(1), Cin = X.dim(2), K = W.dim(0), Cout = W.dim(2);
  const auto Lout = conv1d_out_len(L, K, stride, pad);
  if (Lout < 1) detail::shape_fail("conv1d", X.shape(), W.shape());
  Tensor<T> cols({B * Lout, K * Cin});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Lout; ++t)
      for (std::int64_t k = 0; k < K; ++k) {
        const auto src = t * stride - pad + k;
        if (src < 0 || src >= L) continue;
        std::copy_n(X.data() + (b * L + src) * Cin, Cin, cols.data() + (b * Lout + t) * K * Cin + k * Cin);
      }
  Tensor<T> out({B, Lout, Cout});
  auto Y = as_mat(out.data(), B * Lout, Cout);
  Y.noalias() = as_mat(cols, B * Lout, K * Cin) * as_mat(W, K * Cin, Cout);
  Y.rowwise() += as_mat(bias.value(), 1, Cout).row(0);
  return x.tape->record(
      "conv1d", std::move(out),
      [x, w, bias, cols = std::move(cols), B, L, Cin, K, Cout, Lout, stride, pad](Tape<T>& tp, size_t self) {
        auto dy = as_mat(tp.grad(self), B * Lout, Cout);
        if (T* gw = tp.grad_target(w)) as_mat(gw, K * Cin, Cout).noalias() += as_mat(cols, B * Lout, K * Cin).transpose() * dy;
        if (T* gb = tp.grad_target(bias)) as_mat(gb, 1, Cout) += dy.colwise().sum();
        if (T* gx = tp.grad_target(x)) {
          RowMat<T> dcols = dy * as_mat(w.value(), K * Cin, Cout).transpose();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t t = 0; t < Lout; ++t)
              for (std::int64_t k = 0; k < K; ++k) {
                const auto dst = t * stride - pad + k;
                if (dst < 0 || dst >= L) continue;
                const T* src = dcols.data() + (b * Lout + t) * K * Cin + k * Cin;
                T* g = gx + (b * L + dst) * Cin;
                for (std::int64_t c = 0; c < Cin; ++c) g[c] += src[c];
              }
        }
      },
      x, w, bias);
}

/// x: [B, L, Cin], w: [Cin, K, Cout], bias: [Cout].
/// Output position t*stride - pad + k receives x[t] through tap k.
template <class T>
Var<T> conv_transpose1d(Var<T> x, Var<T> w, Var<T> bias, std::int64_t stride, std::int64_t pad) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.rank() != 3 || W.rank() != 3 || W.dim(0) != X.dim(2) || bias.value().shape() != Shape{W.dim(2)} ||
      stride < 1 || pad < 0) {
    detail::shape_fail("conv_transpose1d", X.shape(), W.shape());
  }
  const auto B = X.dim(0), L = X.dim(1), Cin = X.dim(2), K = W.dim(1), Cout = W.dim(2);
  const auto Lout = conv_transpose1d_out_len(L, K, stride, pad);
  if (Lout < 1) detail::shape_fail("conv_transpose1d", X.shape(), W.shape());
  RowMat<T> cols = as_mat(X, B * L, Cin) * as_mat(W, Cin, K * Cout);
  Tensor<T> out({B, Lout, Cout});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t k = 0; k < K; ++k) {
        const auto dst = t * stride - pad + k;
        if (dst < 0 || dst >= Lout) continue;
        const T* src = cols.data() + (b * L + t) * K * Cout + k * Cout;
        T* o = out.data() + (b * Lout + dst) * Cout;
        for (std::int64_t c = 0; c < Cout; ++c) o[c] += src[c];
      }
  as_mat(out.data(), B * Lout, Cout).rowwise() += as_mat(bias.value(), 1, Cout).row(0);
  return x.tape->record(
      "conv_transpose1d", std::move(out),
      [x, w, bias, B, L, Cin, K, Cout, Lout, stride, pad](Tape<T>& tp, size_t self) {
        const auto& dyt = tp.grad(self);
        if (T* gb = tp.grad_target(bias)) as_mat(gb, 1, Cout) += as_mat(dyt, B * Lout, Cout).colwise().sum();
        const bool need_x = tp.requires_grad(x.id), need_w = tp.requires_grad(w.id);
        if (!need_x && !need_w) return;
        RowMat<T> dcols = RowMat<T>::Zero(B * L, K * Cout);
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t t = 0; t < L; ++t)
            for (std::int64_t k = 0; k < K; ++k) {
              const auto src = t * stride - pad + k;
              if (src < 0 || src >= Lout) continue;
              std::copy_n(dyt.data() + (b * Lout + src) * Cout, Cout, dcols.data() + (b * L + t) * K * Cout + k * Cout);
            }
        if (T* gw = tp.grad_target(w)) as_mat(gw, Cin, K * Cout).noalias() += as_mat(x.value(), B * L, Cin).transpose() * dcols;
        if (T* gx = tp.grad_target(x)) as_mat(gx, B * L, Cin).noalias() += dcols * as_mat(w.value(), Cin, K * Cout).transpose();
      },
      x, w, bias);
}

// ---------------------------------------------------------------------------
// Losses

/// Mean of squared differences over all elements.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape() || A.size() == 0) detail::shape_fail("mse", A.shape(), B.shape());
  const auto n = A.size();
  T s = 0;
  for (size_t i = 0; i < n; ++i) s += (A[i] - B[i]) * (A[i] - B[i]);
  return a.tape->record(
      "mse", Tensor<T>::scalar(s / T(n)),
      [a, b, n](Tape<T>& tp, size_t self) {
        const T k = T(2) * tp.grad(self)[0] / T(n);
        const auto& A = a.value();
        const auto& B = b.value();
        if (T* ga = tp.grad_target(a))
          for (size_t i = 0; i < n; ++i) ga[i] += k * (A[i] - B[i]);
        if (T* gb = tp.grad_target(b))
          for (size_t i = 0; i < n; ++i) gb[i] -= k * (A[i] - B[i]);
      },
      a, b);
}

/// Mean token cross-entropy. logits: [..., V]; one target per row; rows whose
/// target equals `ignore_index` contribute nothing.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<int> targets, int ignore_index = -1) {
  const auto& X = logits.value();
  const auto m = X.rows(), V = X.cols();
  if (static_cast<std::int64_t>(targets.size()) != m || V == 0) {
    detail::shape_fail("cross_entropy", X.shape(), Shape{static_cast<std::int64_t>(targets.size())});
  }
  Tensor<T> logp(X.shape());
  log_softmax_rows(X.data(), logp.data(), m, V);
  T total = 0;
  std::int64_t count = 0;
  for (std::int64_t r = 0; r < m; ++r) {
    const int t = targets[static_cast<size_t>(r)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= V) {
      throw Error("cross_entropy: target token " + std::to_string(t) + " outside vocabulary of size " +
                  std::to_string(V));
    }
    total -= logp[r * V + t];
    ++count;
  }
  const T denom = count ? T(count) : T(1);
  return logits.tape->record(
      "cross_entropy", Tensor<T>::scalar(total / denom),
      [logits, targets = std::move(targets), logp = std::move(logp), m, V, denom, ignore_index](Tape<T>& tp,
                                                                                                size_t self) {
        T* g = tp.grad_target(logits);
        if (!g) return;
        const T k = tp.grad(self)[0] / denom;
        for (std::int64_t r = 0; r < m; ++r) {
          const int t = targets[static_cast<size_t>(r)];
          if (t == ignore_index) continue;
          as_mat(g, m, V).row(r).array() += k * as_mat(logp, m, V).row(r).array().exp();
          g[r * V + t] -= k;
        }
      },
      logits);
}

/// KL(N(mu, exp(logvar)) || N(0, I)) summed over elements and averaged over
/// the leading (batch) dimension.
template <class T>
Var<T> kl_diag_gaussian(Var<T> mu, Var<T> logvar) {
  const auto& M = mu.value();
  const auto& LV = logvar.value();
  if (M.shape() != LV.shape()) detail::shape_fail("kl_diag_gaussian", M.shape(), LV.shape());
  const T batch = M.rank() > 0 && M.dim(0) > 0 ? T(M.dim(0)) : T(1);
  T s = 0;
  for (size_t i = 0; i < M.size(); ++i) s += M[i] * M[i] + std::exp(LV[i]) - T(1) - LV[i];
  return mu.tape->record(
      "kl_diag_gaussian", Tensor<T>::scalar(T(0.5) * s / batch),
      [mu, logvar, batch](Tape<T>& tp, size_t self) {
        const T k = tp.grad(self)[0] / batch;
        const auto& M = mu.value();
        const auto& LV = logvar.value();
        if (T* gm = tp.grad_target(mu))
          for (size_t i = 0; i < M.size(); ++i) gm[i] += k * M[i];
        if (T* gl = tp.grad_target(logvar))
          for (size_t i = 0; i < LV.size(); ++i) gl[i] += k * T(0.5) * (std::exp(LV[i]) - T(1));
      },
      mu, logvar);
}

}  // namespace whistle::ops
