#pragma once

#include "tape.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace commformer {

// Ordered, named collection of parameters. Order is stable and defines the
// checkpoint layout.
template <class S>
class ParamSet {
 public:
  int add(std::string name, Mat<S> init) {
    Param<S> p;
    p.name = std::move(name);
    p.value = std::move(init);
    p.zero_grad();
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size()) - 1;
  }

  Param<S>& operator[](int i) { return params_.at(static_cast<std::size_t>(i)); }
  const Param<S>& operator[](int i) const { return params_.at(static_cast<std::size_t>(i)); }

  Param<S>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::vector<Param<S>>& all() { return params_; }
  const std::vector<Param<S>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  // Binds every parameter to the tape, either trainable or frozen.
  std::vector<Var> bind(Tape<S>& tape, bool trainable) {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (auto& p : params_) vars.push_back(trainable ? tape.param(p) : tape.constant_ref(p.value));
    return vars;
  }

  std::vector<Var> bind_frozen(Tape<S>& tape) const {
    std::vector<Var> vars;
    vars.reserve(params_.size());
    for (const auto& p : params_) vars.push_back(tape.constant_ref(p.value));
    return vars;
  }

  // Copies values from another set with identical layout.
  void copy_values_from(const ParamSet& other) {
    if (other.size() != size()) throw std::invalid_argument("ParamSet: layout mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = other.params_[i].value;
  }

  template <class T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<T>());
    return out;
  }

 private:
  std::vector<Param<S>> params_;
};

// FNV-1a over the raw bytes of every value, in order.
template <class S>
std::uint64_t hash_values(const ParamSet<S>& set) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : set.all()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(p.value.size()) * sizeof(S); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

template <class S>
std::uint64_t hash_values(const Mat<S>& m) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(S); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

// Accumulated in double so large float gradients do not overflow the square.
template <class S>
double grad_norm(const ParamSet<S>& set) {
  double sq = 0;
  for (const auto& p : set.all()) sq += p.grad.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

}  // namespace commformer
