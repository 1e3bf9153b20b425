#pragma once

#include <functional>
#include <map>
#include <string>

#include "whistle/numerics/rng.hpp"
#include "whistle/numerics/tape.hpp"

namespace whistle {

template <class T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Named parameter tensors. Ordered by name so iteration (and therefore
/// initialisation, serialisation and updates) is deterministic.
template <class T>
class ParamStore {
 public:
  // Adds a parameter; names are unique and shapes fixed from here on.
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    auto [it, inserted] = tensors_.emplace(name, std::move(value));
    if (!inserted) throw Error("param store: duplicate parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("param store: no parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& get_mut(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("param store: no parameter '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Tensor<T>>& tensors() const { return tensors_; }
  std::map<std::string, Tensor<T>>& tensors() { return tensors_; }

  size_t count() const {
    size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : tensors_) out.add(name, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.tensors_.size() != b.tensors_.size()) return false;
    for (const auto& [name, t] : a.tensors_) {
      auto it = b.tensors_.find(name);
      if (it == b.tensors_.end() || !bitwise_equal(t, it->second)) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Tensor<T>> tensors_;
};

using ParamFilter = std::function<bool(const std::string&)>;

inline bool all_params(const std::string&) { return true; }

inline ParamFilter prefix_filter(std::string prefix) {
  return [p = std::move(prefix)](const std::string& name) { return name.rfind(p, 0) == 0; };
}

/// Binds parameters of a store onto a tape on first use. Only parameters
/// accepted by `trainable` are recorded as requiring gradients.
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParamStore<T>& store, ParamFilter trainable = all_params)
      : tape_(&tape), store_(&store), trainable_(std::move(trainable)) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var<T> v = tape_->leaf(store_->get(name), trainable_(name));
    bound_.emplace(name, v);
    return v;
  }

  Tape<T>& tape() { return *tape_; }
  const ParamStore<T>& store() const { return *store_; }

  // Gradients for every trainable parameter, zero where a parameter was not reached.
  GradMap<T> grads() {
    GradMap<T> out;
    for (const auto& [name, t] : store_->tensors()) {
      if (!trainable_(name)) continue;
      auto it = bound_.find(name);
      if (it != bound_.end() && tape_->has_grad(it->second.id)) out.emplace(name, tape_->grad(it->second.id));
      else out.emplace(name, Tensor<T>(t.shape()));
    }
    return out;
  }

 private:
  Tape<T>* tape_;
  const ParamStore<T>* store_;
  ParamFilter trainable_;
  std::map<std::string, Var<T>> bound_;
};

namespace init {

// Zero-mean normal with std 1/sqrt(fan_in).
template <class T>
Tensor<T> scaled_normal(Shape shape, std::int64_t fan_in, Stream& rng, double gain = 1.0) {
  Tensor<T> t(std::move(shape));
  const double sd = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<T>(rng.normal() * sd);
  return t;
}

}  // namespace init

}  // namespace whistle
