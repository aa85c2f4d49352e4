#pragma once

// Minimal reverse-mode differentiation over row-major Eigen matrices.
//
// A Tape records the forward pass as a list of nodes plus backward closures.
// Parameters enter through Tape::param(), which reads the value in place and
// accumulates the gradient straight into Param::grad. Inputs that are not
// trainable enter through Tape::constant() and never receive gradient, which
// lets callers freeze whole parameter groups by registering them as constants.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace commformer {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat<S> value) { return push(std::move(value), false); }

  // Reads `m` without copying; `m` must outlive the tape.
  Var constant_ref(const Mat<S>& m) {
    Node n;
    n.view = &m;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var param(Param<S>& p) {
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
    return external(p.value, &p.grad);
  }

  // Value read in place, gradient accumulated into *sink (sized like value).
  Var external(const Mat<S>& value, Mat<S>* sink) {
    Node n;
    n.view = &value;
    n.sink = sink;
    n.requires_grad = sink != nullptr;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var push(Mat<S> value, bool requires_grad) {
    Node n;
    n.own = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<S>& value(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.view ? *n.view : n.own;
  }

  bool requires_grad(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

  template <class... Vars>
  bool any_requires_grad(Vars... vs) const {
    return (requires_grad(vs) || ...);
  }

  // Gradient buffer of `v`, zero-initialized on first access.
  Mat<S>& grad(Var v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    Mat<S>& g = n.sink ? *n.sink : n.grad;
    const Mat<S>& val = n.view ? *n.view : n.own;
    if (g.rows() != val.rows() || g.cols() != val.cols()) g.setZero(val.rows(), val.cols());
    return g;
  }

  bool has_grad(Var v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.sink != nullptr || n.grad.size() > 0;
  }

  void on_backward(std::function<void()> fn) { backward_.push_back(std::move(fn)); }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and runs the recorded closures in reverse.
  void backward(Var out) {
    const Mat<S>& v = value(out);
    if (v.rows() != 1 || v.cols() != 1) throw std::invalid_argument("backward: output must be scalar");
    if (!requires_grad(out)) return;
    grad(out)(0, 0) += S(1);
    for (auto it = backward_.rbegin(); it != backward_.rend(); ++it) (*it)();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> own;
    const Mat<S>* view = nullptr;
    Mat<S> grad;
    Mat<S>* sink = nullptr;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::vector<std::function<void()>> backward_;
};

}  // namespace commformer
