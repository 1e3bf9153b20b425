#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "whistle/numerics/params.hpp"

namespace whistle {

struct GradCheckReport {
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  size_t coords = 0;
  std::string worst;  // "input[index]" of the worst coordinate
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool passed(double tol) const { return max_rel_err <= tol; }
};

template <class T>
constexpr double default_fd_delta() {
  return std::is_same_v<T, double> ? 1e-4 : 5e-2;
}

inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-6, std::abs(analytic) + std::abs(numeric));
}

namespace detail {

// Fourth-order central difference: truncation error O(h^4), so the step can
// stay large enough that rounding in f does not dominate.
template <class T, class F>
double central_difference(F&& f_at, double h) {
  return (f_at(-2 * h) - 8 * f_at(-h) + 8 * f_at(h) - f_at(2 * h)) / (12.0 * h);
}

struct GradAccumulator {
  GradCheckReport report;
  double total = 0.0;

  void add(double analytic, double numeric, const std::string& where) {
    if (!std::isfinite(analytic) || !std::isfinite(numeric)) {
      throw NumericError("grad_check: non-finite gradient at " + where);
    }
    const double e = grad_rel_err(analytic, numeric);
    total += e;
    if (report.coords == 0 || e > report.max_rel_err) {
      report.max_rel_err = e;
      report.worst = where;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.coords;
  }

  GradCheckReport finish() {
    report.mean_rel_err = report.coords ? total / static_cast<double>(report.coords) : 0.0;
    return report;
  }
};

// Up to `limit` distinct coordinates of an n-element tensor; all of them when n <= limit.
inline std::vector<size_t> pick_coords(size_t n, size_t limit, Stream& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  if (n <= limit) return idx;
  for (size_t i = 0; i < limit; ++i) std::swap(idx[i], idx[i + static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - i - 1)))]);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <class T>
double reduce(const Tensor<T>& y, const Tensor<T>& w) {
  if (y.shape() != w.shape()) throw ShapeError("grad_check: output shape changed between evaluations");
  double out = 0.0;
  for (size_t i = 0; i < y.size(); ++i) out += static_cast<double>(w[i]) * static_cast<double>(y[i]);
  if (!std::isfinite(out)) throw NumericError("grad_check: non-finite function value");
  return out;
}

template <class T>
double eval_scalar(const Var<T>& v) {
  const double out = static_cast<double>(v.value().item());
  if (!std::isfinite(out)) throw NumericError("grad_check: non-finite function value");
  return out;
}

}  // namespace detail

template <class T>
using MultiInputFn = std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>;

/// Central-difference check of a function of several tensor inputs. A
/// non-scalar output y is reduced to sum(w * y) with fixed random weights w
/// (accumulated in double), so every output coordinate is exercised.
/// `coords_per_input` bounds how many coordinates of each input are probed.
template <class T>
GradCheckReport grad_check(const MultiInputFn<T>& fn, std::vector<Tensor<T>> points,
                           double delta = default_fd_delta<T>(),
                           size_t coords_per_input = std::numeric_limits<size_t>::max(), std::uint64_t seed = 0) {
  Tensor<T> weights;
  std::vector<Tensor<T>> analytic;
  {
    Tape<T> tape;
    std::vector<Var<T>> inputs;
    for (const auto& p : points) inputs.push_back(tape.variable(p));
    Var<T> y = fn(tape, inputs);
    weights = Tensor<T>(y.shape(), T(1));
    if (y.value().size() != 1) {
      Stream w(seed, 0x7765);
      for (auto& v : weights.values()) v = static_cast<T>((w.bernoulli(0.5) ? 1 : -1) * w.uniform(0.5, 1.5));
    }
    detail::reduce(y.value(), weights);
    tape.backward(y, weights);
    for (const auto& in : inputs) analytic.push_back(tape.has_grad(in.id) ? tape.grad(in.id) : Tensor<T>(in.shape()));
  }
  auto eval_at = [&](const std::vector<Tensor<T>>& pts) {
    Tape<T> tape(false);
    std::vector<Var<T>> inputs;
    for (const auto& p : pts) inputs.push_back(tape.constant(p));
    return detail::reduce(fn(tape, inputs).value(), weights);
  };
  Stream rng(seed, 0x6772);
  detail::GradAccumulator acc;
  for (size_t k = 0; k < points.size(); ++k) {
    for (size_t i : detail::pick_coords(points[k].size(), coords_per_input, rng)) {
      const T orig = points[k][i];
      const double fd = detail::central_difference<T>(
          [&](double off) {
            points[k][i] = static_cast<T>(orig + off);
            return eval_at(points);
          },
          delta);
      points[k][i] = orig;
      acc.add(static_cast<double>(analytic[k][i]), fd,
              "input" + std::to_string(k) + "[" + std::to_string(i) + "]");
    }
  }
  return acc.finish();
}

template <class T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& fn, Tensor<T> point,
                           double delta = default_fd_delta<T>()) {
  MultiInputFn<T> multi = [&](Tape<T>& tape, const std::vector<Var<T>>& in) { return fn(tape, in[0]); };
  return grad_check<T>(multi, {std::move(point)}, delta);
}

/// Checks d(loss)/d(params) for a model loss written against a Binder.
/// Probes up to `coords_per_tensor` coordinates of each selected parameter.
template <class T>
GradCheckReport grad_check_params(ParamStore<T> store, const std::function<Var<T>(Binder<T>&)>& loss,
                                  const ParamFilter& which = all_params, double delta = default_fd_delta<T>(),
                                  size_t coords_per_tensor = 4, std::uint64_t seed = 0) {
  GradMap<T> grads;
  {
    Tape<T> tape;
    Binder<T> bind(tape, store, which);
    Var<T> y = loss(bind);
    detail::eval_scalar(y);
    tape.backward(y);
    grads = bind.grads();
  }
  auto eval_now = [&]() {
    Tape<T> tape(false);
    Binder<T> bind(tape, store, which);
    return detail::eval_scalar(loss(bind));
  };
  Stream rng(seed, 0x7061);
  detail::GradAccumulator acc;
  for (auto& [name, grad] : grads) {
    Tensor<T>& p = store.get_mut(name);
    for (size_t i : detail::pick_coords(p.size(), coords_per_tensor, rng)) {
      const T orig = p[i];
      const double fd = detail::central_difference<T>(
          [&](double off) {
            p[i] = static_cast<T>(orig + off);
            return eval_now();
          },
          delta);
      p[i] = orig;
      acc.add(static_cast<double>(grad[i]), fd, name + "[" + std::to_string(i) + "]");
    }
  }
  return acc.finish();
}

}  // namespace whistle
