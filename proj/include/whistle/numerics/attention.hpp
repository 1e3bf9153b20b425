#pragma once

#include <cmath>
#include <limits>

#include "whistle/numerics/ops.hpp"

namespace whistle::ops {

/// Multi-head scaled dot-product attention over pre-projected inputs.
/// q: [B, Tq, H], k and v: [B, Tk, H]; H splits into `heads` contiguous
/// slices. With `causal`, query i attends to keys 0..i (requires Tq == Tk).
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, bool causal) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  if (Q.rank() != 3 || K.shape() != V.shape() || K.rank() != 3 || K.dim(0) != Q.dim(0) || K.dim(2) != Q.dim(2) ||
      heads < 1 || Q.dim(2) % heads != 0 || (causal && Q.dim(1) != K.dim(1))) {
    detail::shape_fail("attention", Q.shape(), K.shape());
  }
  const auto B = Q.dim(0), Tq = Q.dim(1), Tk = K.dim(1), H = Q.dim(2);
  const auto dh = H / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

  // probs: [B, heads, Tq, Tk]
  Tensor<T> probs({B, heads, Tq, Tk});
  Tensor<T> out({B, Tq, H});
  for (std::int64_t b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      Strided qh(Q.data() + b * Tq * H + h * dh, Tq, dh, Eigen::OuterStride<>(H));
      Strided kh(K.data() + b * Tk * H + h * dh, Tk, dh, Eigen::OuterStride<>(H));
      Strided vh(V.data() + b * Tk * H + h * dh, Tk, dh, Eigen::OuterStride<>(H));
      T* p = probs.data() + (b * heads + h) * Tq * Tk;
      auto P = as_mat(p, Tq, Tk);
      P.noalias() = (qh * kh.transpose()) * scale;
      if (causal) {
        // query i sees keys 0..i; masked weights are exactly zero
        for (std::int64_t i = 0; i < Tq; ++i) {
          softmax_rows(p + i * Tk, p + i * Tk, 1, i + 1);
          std::fill(p + i * Tk + i + 1, p + (i + 1) * Tk, T(0));
        }
      } else {
        softmax_rows(p, p, Tq, Tk);
      }
      StridedMut oh(out.data() + b * Tq * H + h * dh, Tq, dh, Eigen::OuterStride<>(H));
      oh.noalias() = P * vh;
    }
  }
  return q.tape->record(
      "attention", std::move(out),
      [q, k, v, probs = std::move(probs), B, Tq, Tk, H, dh, heads, scale](Tape<T>& tp, size_t self) {
        const auto& dY = tp.grad(self);
        T* gq = tp.grad_target(q);
        T* gk = tp.grad_target(k);
        T* gv = tp.grad_target(v);
        const auto& Q = q.value();
        const auto& K = k.value();
        const auto& V = v.value();
        RowMat<T> dP(Tq, Tk);
        for (std::int64_t b = 0; b < B; ++b) {
          for (int h = 0; h < heads; ++h) {
            const auto off_q = b * Tq * H + h * dh;
            const auto off_k = b * Tk * H + h * dh;
            Strided dy(dY.data() + off_q, Tq, dh, Eigen::OuterStride<>(H));
            Strided qh(Q.data() + off_q, Tq, dh, Eigen::OuterStride<>(H));
            Strided kh(K.data() + off_k, Tk, dh, Eigen::OuterStride<>(H));
            Strided vh(V.data() + off_k, Tk, dh, Eigen::OuterStride<>(H));
            auto P = as_mat(probs, B * heads * Tq, Tk).middleRows((b * heads + h) * Tq, Tq);
            if (gv) {
              StridedMut g(gv + off_k, Tk, dh, Eigen::OuterStride<>(H));
              g.noalias() += P.transpose() * dy;
            }
            if (!gq && !gk) continue;
            dP.noalias() = dy * vh.transpose();
            // softmax backward, row-wise
            for (std::int64_t i = 0; i < Tq; ++i) {
              const T dot = (dP.row(i).array() * P.row(i).array()).sum();
              dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
            }
            if (gq) {
              StridedMut g(gq + off_q, Tq, dh, Eigen::OuterStride<>(H));
              g.noalias() += (dP * kh) * scale;
            }
            if (gk) {
              StridedMut g(gk + off_k, Tk, dh, Eigen::OuterStride<>(H));
              g.noalias() += (dP.transpose() * qh) * scale;
            }
          }
        }
      },
      q, k, v);
}

}  // namespace whistle::ops
