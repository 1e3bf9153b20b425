#pragma once

// The set of differentiable ops with a randomised probe for each, used by the
// gradient suite and the `grad-check` command.

#include <functional>
#include <string>
#include <vector>

#include "whistle/numerics/attention.hpp"
#include "whistle/numerics/gradcheck.hpp"
#include "whistle/numerics/ops.hpp"

namespace whistle {

template <class T>
Tensor<T> random_normal(Shape shape, Stream& rng, double sd = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * sd);
  return t;
}

template <class T>
struct OpProbe {
  MultiInputFn<T> fn;
  std::vector<Tensor<T>> inputs;
};

template <class T>
struct OpCatalogEntry {
  std::string name;
  std::function<OpProbe<T>(Stream&)> make;
};

namespace detail {

// Values at least `gap` away from `center`, for ops with a kink or a
// vanishing derivative there.
template <class T>
Tensor<T> away_from(Shape shape, Stream& rng, double center = 0.0, double gap = 0.1) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(center + (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(gap, gap + 1.5));
  return t;
}

template <class T>
OpProbe<T> unary(Tensor<T> x, std::function<Var<T>(Var<T>)> op) {
  return {[op](Tape<T>&, const std::vector<Var<T>>& in) { return op(in[0]); }, {std::move(x)}};
}

}  // namespace detail

template <class T>
std::vector<OpCatalogEntry<T>> op_catalog() {
  auto I = [](Stream& r, std::int64_t lo, std::int64_t hi) { return r.uniform_int(lo, hi); };
  std::vector<OpCatalogEntry<T>> c;

  c.push_back({"matmul", [I](Stream& r) {
                 const auto m = I(r, 1, 5), k = I(r, 1, 6), n = I(r, 1, 5);
                 return OpProbe<T>{[](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::matmul(in[0], in[1]));
                                   },
                                   {random_normal<T>({m, k}, r), random_normal<T>({k, n}, r)}};
               }});
  c.push_back({"linear", [I](Stream& r) {
                 const auto b = I(r, 1, 3), t = I(r, 1, 4), k = I(r, 1, 6), n = I(r, 1, 5);
                 return OpProbe<T>{[](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::linear(in[0], in[1], in[2]));
                                   },
                                   {random_normal<T>({b, t, k}, r), random_normal<T>({k, n}, r),
                                    random_normal<T>({n}, r)}};
               }});
  c.push_back({"add", [I](Stream& r) {
                 const Shape s{I(r, 1, 4), I(r, 1, 5)};
                 return OpProbe<T>{[](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::add(in[0], in[1]));
                                   },
                                   {random_normal<T>(s, r), random_normal<T>(s, r)}};
               }});
  c.push_back({"mul", [I](Stream& r) {
                 const Shape s{I(r, 1, 4), I(r, 1, 5)};
                 return OpProbe<T>{[](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::mul(in[0], in[1]));
                                   },
                                   {random_normal<T>(s, r), random_normal<T>(s, r)}};
               }});
  c.push_back({"scale", [I](Stream& r) {
                 const T s = static_cast<T>(r.uniform(-2, 2));
                 return detail::unary<T>(random_normal<T>({I(r, 1, 4), I(r, 1, 6)}, r),
                                         [s](Var<T> x) { return ops::scale(x, s); });
               }});
  c.push_back({"exp", [I](Stream& r) {
                 return detail::unary<T>(random_normal<T>({I(r, 1, 4), I(r, 1, 6)}, r),
                                         [](Var<T> x) { return ops::exp(x); });
               }});
  c.push_back({"relu", [I](Stream& r) {
                 return detail::unary<T>(detail::away_from<T>({I(r, 1, 4), I(r, 1, 6)}, r),
                                         [](Var<T> x) { return ops::relu(x); });
               }});
  c.push_back({"gelu", [I](Stream& r) {
                 // GELU' vanishes near x = -0.75
                 return detail::unary<T>(detail::away_from<T>({I(r, 1, 4), I(r, 1, 6)}, r, -0.75, 0.3),
                                         [](Var<T> x) { return ops::gelu(x); });
               }});
  c.push_back({"sum", [I](Stream& r) {
                 return OpProbe<T>{[](Tape<T>&, const std::vector<Var<T>>& in) { return ops::sum(in[0]); },
                                   {random_normal<T>({I(r, 1, 4), I(r, 1, 6)}, r)}};
               }});
  c.push_back({"reshape", [I](Stream& r) {
                 const auto a = I(r, 1, 4), b = I(r, 1, 6);
                 return detail::unary<T>(random_normal<T>({a, b}, r),
                                         [a, b](Var<T> x) { return ops::reshape(x, Shape{b, a}); });
               }});
  c.push_back({"mean_time", [I](Stream& r) {
                 return detail::unary<T>(random_normal<T>({I(r, 1, 3), I(r, 1, 5), I(r, 1, 4)}, r),
                                         [](Var<T> x) { return ops::mean_time(x); });
               }});
  c.push_back({"layer_norm", [I](Stream& r) {
                 const auto rows = I(r, 1, 4), n = I(r, 3, 8);
                 return OpProbe<T>{[](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::layer_norm(in[0], in[1], in[2]));
                                   },
                                   {random_normal<T>({rows, n}, r, 2.0), random_normal<T>({n}, r),
                                    random_normal<T>({n}, r)}};
               }});
  c.push_back({"softmax", [I](Stream& r) {
                 return detail::unary<T>(random_normal<T>({I(r, 1, 4), I(r, 2, 7)}, r, 1.5),
                                         [](Var<T> x) { return ops::softmax(x); });
               }});
  c.push_back({"log_softmax", [I](Stream& r) {
                 return detail::unary<T>(random_normal<T>({I(r, 1, 4), I(r, 2, 7)}, r, 1.5),
                                         [](Var<T> x) { return ops::log_softmax(x); });
               }});
  c.push_back({"embedding", [I](Stream& r) {
                 const auto V = I(r, 2, 7), E = I(r, 1, 5), n = I(r, 1, 6);
                 std::vector<int> ids;
                 for (std::int64_t i = 0; i < n; ++i) ids.push_back(static_cast<int>(I(r, 0, V - 1)));
                 return detail::unary<T>(random_normal<T>({V, E}, r),
                                         [ids, n](Var<T> x) { return ops::embedding(x, ids, Shape{n}); });
               }});
  c.push_back({"conv1d", [I](Stream& r) {
                 const auto B = I(r, 1, 2), K = I(r, 1, 4), S = I(r, 1, 3), P = I(r, 0, 2), Cin = I(r, 1, 4),
                            Cout = I(r, 1, 4);
                 const auto L = I(r, std::max<std::int64_t>(1, K - 2 * P), 10);
                 return OpProbe<T>{[S, P](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::conv1d(in[0], in[1], in[2], S, P));
                                   },
                                   {random_normal<T>({B, L, Cin}, r), random_normal<T>({K, Cin, Cout}, r),
                                    random_normal<T>({Cout}, r)}};
               }});
  c.push_back({"conv_transpose1d", [I](Stream& r) {
                 const auto B = I(r, 1, 2), K = I(r, 1, 8), S = I(r, 1, 4), Cin = I(r, 1, 4), Cout = I(r, 1, 4),
                            L = I(r, 1, 6);
                 const auto P = I(r, 0, std::max<std::int64_t>(0, ((L - 1) * S + K - 1) / 2));
                 return OpProbe<T>{[S, P](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::conv_transpose1d(in[0], in[1], in[2], S, P));
                                   },
                                   {random_normal<T>({B, L, Cin}, r), random_normal<T>({Cin, K, Cout}, r),
                                    random_normal<T>({Cout}, r)}};
               }});
  c.push_back({"attention", [I](Stream& r) {
                 const bool causal = r.bernoulli(0.5);
                 const auto B = I(r, 1, 2), heads = I(r, 1, 3), dh = I(r, 1, 3), Tq = I(r, 2, 5);
                 // a single key makes the key gradient identically zero
                 const auto Tk = causal ? Tq : I(r, 2, 5);
                 const auto H = heads * dh;
                 return OpProbe<T>{[heads, causal](Tape<T>&, const std::vector<Var<T>>& in) {
                                     return (ops::attention(in[0], in[1], in[2], static_cast<int>(heads), causal));
                                   },
                                   {random_normal<T>({B, Tq, H}, r), random_normal<T>({B, Tk, H}, r),
                                    random_normal<T>({B, Tk, H}, r)}};
               }});
  c.push_back({"mse", [I](Stream& r) {
                 const Shape s{I(r, 1, 4), I(r, 1, 5)};
                 return OpProbe<T>{[](Tape<T>&, const std::vector<Var<T>>& in) { return ops::mse(in[0], in[1]); },
                                   {random_normal<T>(s, r), random_normal<T>(s, r)}};
               }});
  c.push_back({"cross_entropy", [I](Stream& r) {
                 const auto m = I(r, 1, 5), V = I(r, 2, 7);
                 std::vector<int> t;
                 for (std::int64_t i = 0; i < m; ++i) t.push_back(r.bernoulli(0.2) ? -1 : static_cast<int>(I(r, 0, V - 1)));
                 t[0] = 0;
                 return OpProbe<T>{[t](Tape<T>&, const std::vector<Var<T>>& in) { return ops::cross_entropy(in[0], t); },
                                   {random_normal<T>({m, V}, r)}};
               }});
  c.push_back({"kl_diag_gaussian", [I](Stream& r) {
                 const Shape s{I(r, 1, 3), I(r, 1, 5)};
                 return OpProbe<T>{
                     [](Tape<T>&, const std::vector<Var<T>>& in) { return ops::kl_diag_gaussian(in[0], in[1]); },
                     {random_normal<T>(s, r), random_normal<T>(s, r, 0.7)}};
               }});
  return c;
}

}  // namespace whistle
