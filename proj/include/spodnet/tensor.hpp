#pragma once

// Dense float64 tensors recorded on a reverse-mode tape.
//
// A Tape owns every value produced during one forward pass. Tensors are
// lightweight handles (tape pointer + node index). Vectors are column
// matrices and scalars are 1x1 matrices; the only broadcasting allowed is
// scalar-with-tensor.
//
// A Tape and the Tensors it owns must stay on one thread.

#include <deque>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "spodnet/error.hpp"

namespace spodnet::ad {

class Tape;

class Tensor {
 public:
  Tensor() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }

  const Eigen::MatrixXd& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Eigen::Index size() const { return value().size(); }
  bool is_scalar() const { return size() == 1; }
  double item() const;

  /// True for leaves created with requires_grad and for anything computed
  /// from one.
  bool requires_grad() const;
  /// Accumulated gradient of a leaf. Zero-sized until the first backward.
  const Eigen::MatrixXd& grad() const;

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Receives the adjoint of the node's output and pushes contributions to
  /// its inputs through accumulate().
  using Backward = std::function<void(Tape&, const Eigen::MatrixXd&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Eigen::MatrixXd value, bool requires_grad = true);
  Tensor constant(Eigen::MatrixXd value) { return leaf(std::move(value), false); }
  Tensor scalar(double value, bool requires_grad = false);
  Tensor vector(const Eigen::VectorXd& value, bool requires_grad = false);

  /// Appends an operation node. The backward closure is dropped when no input
  /// needs a gradient.
  Tensor record(Eigen::MatrixXd value, bool needs_grad, Backward backward);

  const Eigen::MatrixXd& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  const Eigen::MatrixXd& grad(int id) const { return nodes_[id].grad; }

  /// Adds `contribution` to the adjoint of node `id` (no-op for nodes that
  /// do not need a gradient).
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& contribution) {
    if (!nodes_[id].needs_grad) return;
    if (!touched_[id]) {
      adjoints_[id] = contribution;
      touched_[id] = 1;
    } else {
      adjoints_[id] += contribution;
    }
  }

  /// Zero-initialised mutable adjoint for scatter-style accumulation. Only
  /// valid for nodes that need a gradient.
  Eigen::MatrixXd& adjoint(int id);

  /// Reverse sweep from a scalar loss. Leaf grads accumulate across calls.
  void backward(const Tensor& loss);
  void zero_grad();

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;
    Backward backward;
    bool needs_grad = false;
    bool is_leaf = false;
  };

  Tensor push(Node node);

  // deque: references to values stay valid while the tape grows
  std::deque<Node> nodes_;
  std::vector<Eigen::MatrixXd> adjoints_;
  std::vector<char> touched_;
};

inline const Eigen::MatrixXd& Tensor::value() const { return tape_->value(id_); }
inline bool Tensor::requires_grad() const { return tape_->needs_grad(id_); }
inline const Eigen::MatrixXd& Tensor::grad() const { return tape_->grad(id_); }

// ---- algebra ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product; either side may be a scalar.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
/// Subgradient 0 at the kink.
Tensor abs(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor outer(const Tensor& a, const Tensor& b);
/// zᵀ M z
Tensor quadratic_form(const Tensor& z, const Tensor& m);
Tensor sum(const Tensor& a);
/// Squared Frobenius norm.
Tensor squared_norm(const Tensor& a);
/// sign(x) max(|x| - gamma, 0); gamma same shape as x or scalar, gamma >= 0.
Tensor soft_threshold(const Tensor& x, const Tensor& gamma);
/// Inverse of an SPD matrix (Cholesky), symmetrised.
Tensor spd_inverse(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- block partition at a pivot index ----------------------------------------

/// Column `i` of a square matrix with entry i removed (length p-1).
Tensor column_without(const Tensor& a, Eigen::Index i);
/// Square matrix with row and column `i` removed.
Tensor block_without(const Tensor& a, Eigen::Index i);
/// Single entry as a scalar.
Tensor entry(const Tensor& a, Eigen::Index row, Eigen::Index col);
/// Copy of `a` whose i-th column and row (off the diagonal) are `u` and whose
/// (i, i) entry is `diag`.
Tensor with_column_row(const Tensor& a, Eigen::Index i, const Tensor& u,
                       const Tensor& diag);
/// Inverse of the partition: places a11, a12, a22 around pivot i.
Tensor assemble(const Tensor& a11, const Tensor& a12, const Tensor& a22,
                Eigen::Index i);
/// Column vector built from scalar tensors.
Tensor stack(std::span<const Tensor> scalars);

// ---- gradient checking -----------------------------------------------------

/// A scalar function of a list of parameter tensors, evaluated on `tape`.
using ScalarFn = std::function<Tensor(Tape&, std::span<const Tensor>)>;

/// Loss value and d loss / d param for every parameter.
struct ValueAndGrad {
  double value = 0.0;
  std::vector<Eigen::MatrixXd> grads;
};

ValueAndGrad value_and_grad(const ScalarFn& f,
                            std::span<const Eigen::MatrixXd> params);

/// Max over every parameter entry of
/// |autodiff - central difference| / max(1, |central difference|).
double finite_diff_check(const ScalarFn& f,
                         std::span<const Eigen::MatrixXd> params, double h);

}  // namespace spodnet::ad
