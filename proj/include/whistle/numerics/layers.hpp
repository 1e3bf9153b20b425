#pragma once

// Parameter-owning building blocks shared by the recognizer and the TLE.
// Each `add_*` registers parameters under a prefix; the matching function
// binds them by the same names.

#include <array>
#include <cmath>
#include <map>
#include <string>

#include "whistle/numerics/attention.hpp"
#include "whistle/numerics/ops.hpp"
#include "whistle/numerics/params.hpp"

namespace whistle::layers {

template <class T>
void add_dense(ParamStore<T>& ps, const std::string& p, std::int64_t in, std::int64_t out, Stream& rng,
               double gain = 1.0) {
  ps.add(p + ".w", init::scaled_normal<T>({in, out}, in, rng, gain));
  ps.add(p + ".b", Tensor<T>({out}));
}

template <class T>
Var<T> dense(Binder<T>& b, const std::string& p, Var<T> x) {
  return ops::linear(x, b(p + ".w"), b(p + ".b"));
}

template <class T>
void add_norm(ParamStore<T>& ps, const std::string& p, std::int64_t n) {
  ps.add(p + ".g", Tensor<T>({n}, T(1)));
  ps.add(p + ".b", Tensor<T>({n}));
}

template <class T>
Var<T> norm(Binder<T>& b, const std::string& p, Var<T> x) {
  return ops::layer_norm(x, b(p + ".g"), b(p + ".b"));
}

template <class T>
void add_conv(ParamStore<T>& ps, const std::string& p, std::int64_t k, std::int64_t in, std::int64_t out, Stream& rng) {
  ps.add(p + ".w", init::scaled_normal<T>({k, in, out}, k * in, rng));
  ps.add(p + ".b", Tensor<T>({out}));
}

template <class T>
Var<T> conv(Binder<T>& b, const std::string& p, Var<T> x, std::int64_t stride, std::int64_t pad) {
  return ops::conv1d(x, b(p + ".w"), b(p + ".b"), stride, pad);
}

// Transposed conv weights are [in, k, out]; fan-in counts the taps that can land on one output.
template <class T>
void add_tconv(ParamStore<T>& ps, const std::string& p, std::int64_t k, std::int64_t stride, std::int64_t in,
               std::int64_t out, Stream& rng) {
  ps.add(p + ".w", init::scaled_normal<T>({in, k, out}, in * std::max<std::int64_t>(1, k / stride), rng));
  ps.add(p + ".b", Tensor<T>({out}));
}

template <class T>
Var<T> tconv(Binder<T>& b, const std::string& p, Var<T> x, std::int64_t stride, std::int64_t pad) {
  return ops::conv_transpose1d(x, b(p + ".w"), b(p + ".b"), stride, pad);
}

template <class T>
void add_attention(ParamStore<T>& ps, const std::string& p, std::int64_t h, Stream& rng) {
  for (const char* n : {".q", ".k", ".v", ".o"}) add_dense(ps, p + n, h, h, rng);
}

// Multi-head attention with projections; `kv` supplies keys and values.
template <class T>
Var<T> attend(Binder<T>& b, const std::string& p, Var<T> x, Var<T> kv, int heads, bool causal) {
  return dense(b, p + ".o",
               ops::attention(dense(b, p + ".q", x), dense(b, p + ".k", kv), dense(b, p + ".v", kv), heads, causal));
}

// Attention against precomputed key/value projections.
template <class T>
Var<T> attend_cached(Binder<T>& b, const std::string& p, Var<T> x, Var<T> k, Var<T> v, int heads) {
  return dense(b, p + ".o", ops::attention(dense(b, p + ".q", x), k, v, heads, false));
}

template <class T>
void add_ffn(ParamStore<T>& ps, const std::string& p, std::int64_t h, std::int64_t inner, Stream& rng) {
  add_dense(ps, p + ".in", h, inner, rng);
  add_dense(ps, p + ".out", inner, h, rng);
}

template <class T>
Var<T> ffn(Binder<T>& b, const std::string& p, Var<T> x) {
  return dense(b, p + ".out", ops::gelu(dense(b, p + ".in", x)));
}

/// Fixed sinusoidal table of shape [batch, t, h], identical for every batch index.
/// Tables are memoised per thread since every forward pass asks for the same few shapes.
template <class T>
const Tensor<T>& sinusoid(std::int64_t batch, std::int64_t t, std::int64_t h) {
  thread_local std::map<std::array<std::int64_t, 3>, Tensor<T>> cache;
  auto [it, fresh] = cache.try_emplace({batch, t, h}, Shape{batch, t, h});
  if (fresh) {
    Tensor<T>& out = it->second;
    for (std::int64_t pos = 0; pos < t; ++pos)
      for (std::int64_t i = 0; i < h; ++i) {
        const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(h));
        const T v = static_cast<T>(i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
        for (std::int64_t bi = 0; bi < batch; ++bi) out[static_cast<size_t>((bi * t + pos) * h + i)] = v;
      }
  }
  return it->second;
}

}  // namespace whistle::layers
