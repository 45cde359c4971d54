#include "spodnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spodnet/linalg.hpp"

namespace spodnet::ad {

using Eigen::Index;
using Eigen::MatrixXd;

// ---- Tape ------------------------------------------------------------------

double Tensor::item() const {
  const auto& v = value();
  if (v.size() != 1) throw DimensionError("item: tensor is not a scalar");
  return v(0, 0);
}

Tensor Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  adjoints_.emplace_back();
  touched_.push_back(0);
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Tape::leaf(MatrixXd value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = requires_grad;
  node.is_leaf = true;
  return push(std::move(node));
}

Tensor Tape::scalar(double value, bool requires_grad) {
  return leaf(MatrixXd::Constant(1, 1, value), requires_grad);
}

Tensor Tape::vector(const Eigen::VectorXd& value, bool requires_grad) {
  return leaf(MatrixXd(value), requires_grad);
}

Tensor Tape::record(MatrixXd value, bool needs_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

MatrixXd& Tape::adjoint(int id) {
  if (!touched_[id]) {
    adjoints_[id].setZero(nodes_[id].value.rows(), nodes_[id].value.cols());
    touched_[id] = 1;
  }
  return adjoints_[id];
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape_ != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.size() != 1) throw ContractError("backward: loss must be a scalar");
  std::fill(touched_.begin(), touched_.end(), 0);
  if (!nodes_[loss.id()].needs_grad) return;
  adjoints_[loss.id()] = MatrixXd::Ones(1, 1);
  touched_[loss.id()] = 1;
  for (int id = loss.id(); id >= 0; --id) {
    if (!touched_[id]) continue;
    Node& node = nodes_[id];
    if (node.is_leaf) {
      if (node.grad.size() == 0) {
        node.grad = adjoints_[id];
      } else {
        node.grad += adjoints_[id];
      }
    } else if (node.backward) {
      node.backward(*this, adjoints_[id]);
    }
  }
  // free the sweep buffers; leaf grads stay
  for (auto& a : adjoints_) a.resize(0, 0);
  std::fill(touched_.begin(), touched_.end(), 0);
}

void Tape::zero_grad() {
  for (auto& node : nodes_) {
    if (node.is_leaf && node.grad.size() != 0) node.grad.setZero();
  }
}

// ---- helpers ---------------------------------------------------------------

namespace {

Tape& same_tape(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) throw ContractError("operation on an empty tensor");
  if (&a.tape() != &b.tape()) throw ContractError("tensors live on different tapes");
  return a.tape();
}

Tape& tape_of(const Tensor& a) {
  if (!a.valid()) throw ContractError("operation on an empty tensor");
  return a.tape();
}

bool any_grad(const Tensor& a) { return a.requires_grad(); }
bool any_grad(const Tensor& a, const Tensor& b) {
  return a.requires_grad() || b.requires_grad();
}

std::string shape_of(const Tensor& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

void require_square(const Tensor& a, const char* op) {
  if (a.rows() != a.cols()) {
    throw DimensionError(std::string(op) + ": expected a square matrix, got " +
                         shape_of(a));
  }
}

void require_pivot(const Tensor& a, Index i, const char* op) {
  if (i < 0 || i >= a.rows()) {
    throw std::out_of_range(std::string(op) + ": pivot out of range");
  }
}

enum class Broadcast { None, LeftScalar, RightScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::None;
  if (a.size() == 1) return Broadcast::LeftScalar;
  if (b.size() == 1) return Broadcast::RightScalar;
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_of(a) +
                       " vs " + shape_of(b));
}

}  // namespace

// ---- algebra ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + shape_of(a) +
                         " * " + shape_of(b) + ")");
  }
  const int ia = a.id(), ib = b.id();
  return tape.record(a.value() * b.value(), any_grad(a, b),
                     [ia, ib](Tape& t, const MatrixXd& g) {
                       if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                       if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                     });
}

namespace {

// shared body of add / sub: out = a + sign * b
Tensor add_signed(const Tensor& a, const Tensor& b, double sign, const char* op) {
  Tape& tape = same_tape(a, b);
  const auto kind = broadcast_kind(a, b, op);
  const int ia = a.id(), ib = b.id();
  MatrixXd out;
  switch (kind) {
    case Broadcast::None: out = a.value() + sign * b.value(); break;
    case Broadcast::LeftScalar:
      out = (sign * b.value()).array() + a.value()(0, 0);
      break;
    case Broadcast::RightScalar:
      out = a.value().array() + sign * b.value()(0, 0);
      break;
  }
  return tape.record(std::move(out), any_grad(a, b),
                     [ia, ib, sign, kind](Tape& t, const MatrixXd& g) {
                       if (kind == Broadcast::LeftScalar) {
                         t.accumulate(ia, MatrixXd::Constant(1, 1, g.sum()));
                       } else {
                         t.accumulate(ia, g);
                       }
                       if (kind == Broadcast::RightScalar) {
                         t.accumulate(ib, MatrixXd::Constant(1, 1, sign * g.sum()));
                       } else {
                         t.accumulate(ib, sign * g);
                       }
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_signed(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_signed(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  const auto kind = broadcast_kind(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  MatrixXd out;
  switch (kind) {
    case Broadcast::None: out = a.value().cwiseProduct(b.value()); break;
    case Broadcast::LeftScalar: out = a.value()(0, 0) * b.value(); break;
    case Broadcast::RightScalar: out = b.value()(0, 0) * a.value(); break;
  }
  return tape.record(
      std::move(out), any_grad(a, b), [ia, ib, kind](Tape& t, const MatrixXd& g) {
        const MatrixXd& va = t.value(ia);
        const MatrixXd& vb = t.value(ib);
        switch (kind) {
          case Broadcast::None:
            if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(vb));
            if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(va));
            break;
          case Broadcast::LeftScalar:
            if (t.needs_grad(ia)) {
              t.accumulate(ia, MatrixXd::Constant(1, 1, g.cwiseProduct(vb).sum()));
            }
            if (t.needs_grad(ib)) t.accumulate(ib, va(0, 0) * g);
            break;
          case Broadcast::RightScalar:
            if (t.needs_grad(ia)) t.accumulate(ia, vb(0, 0) * g);
            if (t.needs_grad(ib)) {
              t.accumulate(ib, MatrixXd::Constant(1, 1, g.cwiseProduct(va).sum()));
            }
            break;
        }
      });
}

Tensor scale(const Tensor& a, double factor) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  return tape.record(factor * a.value(), any_grad(a),
                     [ia, factor](Tape& t, const MatrixXd& g) {
                       t.accumulate(ia, factor * g);
                     });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  return tape.record(a.value().cwiseMax(0.0), any_grad(a),
                     [ia](Tape& t, const MatrixXd& g) {
                       const MatrixXd& x = t.value(ia);
                       t.accumulate(ia, (x.array() > 0.0).select(g, 0.0).matrix());
                     });
}

Tensor abs(const Tensor& a) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  return tape.record(a.value().cwiseAbs(), any_grad(a),
                     [ia](Tape& t, const MatrixXd& g) {
                       const auto x = t.value(ia).array();
                       // sign(x), with 0 at x == 0
                       const auto s = (x > 0.0).cast<double>() - (x < 0.0).cast<double>();
                       t.accumulate(ia, (g.array() * s).matrix());
                     });
}

Tensor sqrt(const Tensor& a) {
  Tape& tape = tape_of(a);
  const bool grad = any_grad(a);
  if ((a.value().array() < 0.0).any() || (grad && (a.value().array() <= 0.0).any())) {
    throw DomainError("sqrt: non-positive input on a differentiated path");
  }
  const int ia = a.id();
  MatrixXd out = a.value().cwiseSqrt();
  return tape.record(out, grad, [ia, out](Tape& t, const MatrixXd& g) {
    t.accumulate(ia, (0.5 * g.array() / out.array()).matrix());
  });
}

Tensor reciprocal(const Tensor& a) {
  Tape& tape = tape_of(a);
  const bool grad = any_grad(a);
  if ((a.value().array() == 0.0).any() || (grad && (a.value().array() <= 0.0).any())) {
    throw DomainError("reciprocal: non-positive input on a differentiated path");
  }
  const int ia = a.id();
  MatrixXd out = a.value().cwiseInverse();
  return tape.record(out, grad, [ia, out](Tape& t, const MatrixXd& g) {
    t.accumulate(ia, (-g.array() * out.array().square()).matrix());
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("dot: shape mismatch " + shape_of(a) + " vs " + shape_of(b));
  }
  const int ia = a.id(), ib = b.id();
  const double v = a.value().cwiseProduct(b.value()).sum();
  return tape.record(MatrixXd::Constant(1, 1, v), any_grad(a, b),
                     [ia, ib](Tape& t, const MatrixXd& g) {
                       const double s = g(0, 0);
                       if (t.needs_grad(ia)) t.accumulate(ia, s * t.value(ib));
                       if (t.needs_grad(ib)) t.accumulate(ib, s * t.value(ia));
                     });
}

Tensor outer(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b);
  if (a.cols() != 1 || b.cols() != 1) throw DimensionError("outer: expected column vectors");
  const int ia = a.id(), ib = b.id();
  return tape.record(a.value() * b.value().transpose(), any_grad(a, b),
                     [ia, ib](Tape& t, const MatrixXd& g) {
                       if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
                       if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
                     });
}

Tensor quadratic_form(const Tensor& z, const Tensor& m) {
  Tape& tape = same_tape(z, m);
  if (z.cols() != 1 || m.rows() != z.rows() || m.cols() != z.rows()) {
    throw DimensionError("quadratic_form: shape mismatch " + shape_of(z) + " vs " +
                         shape_of(m));
  }
  const int iz = z.id(), im = m.id();
  const double v = (z.value().transpose() * m.value() * z.value())(0, 0);
  return tape.record(MatrixXd::Constant(1, 1, v), any_grad(z, m),
                     [iz, im](Tape& t, const MatrixXd& g) {
                       const double s = g(0, 0);
                       const MatrixXd& zv = t.value(iz);
                       const MatrixXd& mv = t.value(im);
                       if (t.needs_grad(iz)) {
                         t.accumulate(iz, s * (mv * zv + mv.transpose() * zv));
                       }
                       if (t.needs_grad(im)) t.accumulate(im, s * zv * zv.transpose());
                     });
}

Tensor sum(const Tensor& a) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return tape.record(MatrixXd::Constant(1, 1, a.value().sum()), any_grad(a),
                     [ia, r, c](Tape& t, const MatrixXd& g) {
                       t.accumulate(ia, MatrixXd::Constant(r, c, g(0, 0)));
                     });
}

Tensor squared_norm(const Tensor& a) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  return tape.record(MatrixXd::Constant(1, 1, a.value().squaredNorm()), any_grad(a),
                     [ia](Tape& t, const MatrixXd& g) {
                       t.accumulate(ia, (2.0 * g(0, 0)) * t.value(ia));
                     });
}

Tensor soft_threshold(const Tensor& x, const Tensor& gamma) {
  Tape& tape = same_tape(x, gamma);
  const bool scalar_gamma = gamma.size() == 1;
  if (!scalar_gamma && (gamma.rows() != x.rows() || gamma.cols() != x.cols())) {
    throw DimensionError("soft_threshold: gamma must be a scalar or match x");
  }
  if ((gamma.value().array() < 0.0).any()) {
    throw DomainError("soft_threshold: negative threshold");
  }
  const MatrixXd thr = scalar_gamma
                           ? MatrixXd::Constant(x.rows(), x.cols(), gamma.value()(0, 0))
                           : gamma.value();
  const auto xv = x.value().array();
  const auto shrunk = (xv.abs() - thr.array()).max(0.0);
  const auto sign = (xv > 0.0).cast<double>() - (xv < 0.0).cast<double>();
  MatrixXd out = (sign * shrunk).matrix();
  const int ix = x.id(), ig = gamma.id();
  return tape.record(std::move(out), any_grad(x, gamma),
                     [ix, ig, thr, scalar_gamma](Tape& t, const MatrixXd& g) {
                       const auto xv = t.value(ix).array();
                       const auto active = (xv.abs() > thr.array()).cast<double>();
                       if (t.needs_grad(ix)) t.accumulate(ix, (g.array() * active).matrix());
                       if (t.needs_grad(ig)) {
                         const auto s = (xv > 0.0).cast<double>() - (xv < 0.0).cast<double>();
                         const MatrixXd dg = -(g.array() * active * s).matrix();
                         if (scalar_gamma) {
                           t.accumulate(ig, MatrixXd::Constant(1, 1, dg.sum()));
                         } else {
                           t.accumulate(ig, dg);
                         }
                       }
                     });
}

Tensor spd_inverse(const Tensor& a) {
  Tape& tape = tape_of(a);
  require_square(a, "spd_inverse");
  MatrixXd inv = spodnet::spd_inverse(a.value());
  const int ia = a.id();
  return tape.record(inv, any_grad(a), [ia, inv](Tape& t, const MatrixXd& g) {
    // d(A^-1) = -A^-1 dA A^-1
    t.accumulate(ia, -(inv.transpose() * g * inv.transpose()));
  });
}

// ---- block partition -------------------------------------------------------

Tensor column_without(const Tensor& a, Index i) {
  Tape& tape = tape_of(a);
  require_square(a, "column_without");
  require_pivot(a, i, "column_without");
  const Index p = a.rows();
  MatrixXd out(p - 1, 1);
  for (Index k = 0; k < p - 1; ++k) out(k, 0) = a.value()(skip_index(k, i), i);
  const int ia = a.id();
  return tape.record(std::move(out), any_grad(a), [ia, i, p](Tape& t, const MatrixXd& g) {
    MatrixXd& adj = t.adjoint(ia);
    for (Index k = 0; k < p - 1; ++k) adj(skip_index(k, i), i) += g(k, 0);
  });
}

Tensor block_without(const Tensor& a, Index i) {
  Tape& tape = tape_of(a);
  require_square(a, "block_without");
  require_pivot(a, i, "block_without");
  const Index p = a.rows();
  const MatrixXd& v = a.value();
  MatrixXd out(p - 1, p - 1);
  // contiguous copies of the four quadrants
  const Index hi = p - 1 - i;
  out.topLeftCorner(i, i) = v.topLeftCorner(i, i);
  out.topRightCorner(i, hi) = v.topRightCorner(i, hi);
  out.bottomLeftCorner(hi, i) = v.bottomLeftCorner(hi, i);
  out.bottomRightCorner(hi, hi) = v.bottomRightCorner(hi, hi);
  const int ia = a.id();
  return tape.record(std::move(out), any_grad(a), [ia, i, hi](Tape& t, const MatrixXd& g) {
    MatrixXd& adj = t.adjoint(ia);
    adj.topLeftCorner(i, i) += g.topLeftCorner(i, i);
    adj.topRightCorner(i, hi) += g.topRightCorner(i, hi);
    adj.bottomLeftCorner(hi, i) += g.bottomLeftCorner(hi, i);
    adj.bottomRightCorner(hi, hi) += g.bottomRightCorner(hi, hi);
  });
}

Tensor entry(const Tensor& a, Index row, Index col) {
  Tape& tape = tape_of(a);
  if (row < 0 || row >= a.rows() || col < 0 || col >= a.cols()) {
    throw std::out_of_range("entry: index out of range");
  }
  const int ia = a.id();
  return tape.record(MatrixXd::Constant(1, 1, a.value()(row, col)), any_grad(a),
                     [ia, row, col](Tape& t, const MatrixXd& g) {
                       t.adjoint(ia)(row, col) += g(0, 0);
                     });
}

Tensor with_column_row(const Tensor& a, Index i, const Tensor& u, const Tensor& diag) {
  Tape& tape = same_tape(a, u);
  same_tape(a, diag);
  require_square(a, "with_column_row");
  require_pivot(a, i, "with_column_row");
  const Index p = a.rows();
  if (u.rows() != p - 1 || u.cols() != 1 || diag.size() != 1) {
    throw DimensionError("with_column_row: expected u of length p-1 and a scalar diagonal");
  }
  MatrixXd out = a.value();
  for (Index k = 0; k < p - 1; ++k) {
    const Index r = skip_index(k, i);
    out(r, i) = u.value()(k, 0);
    out(i, r) = u.value()(k, 0);
  }
  out(i, i) = diag.value()(0, 0);
  const int ia = a.id(), iu = u.id(), id = diag.id();
  const bool grad = a.requires_grad() || u.requires_grad() || diag.requires_grad();
  return tape.record(std::move(out), grad, [ia, iu, id, i, p](Tape& t, const MatrixXd& g) {
    if (t.needs_grad(ia)) {
      MatrixXd ga = g;
      ga.row(i).setZero();
      ga.col(i).setZero();
      t.accumulate(ia, ga);
    }
    if (t.needs_grad(iu)) {
      MatrixXd gu(p - 1, 1);
      for (Index k = 0; k < p - 1; ++k) {
        const Index r = skip_index(k, i);
        gu(k, 0) = g(r, i) + g(i, r);
      }
      t.accumulate(iu, gu);
    }
    if (t.needs_grad(id)) t.accumulate(id, MatrixXd::Constant(1, 1, g(i, i)));
  });
}

Tensor assemble(const Tensor& a11, const Tensor& a12, const Tensor& a22, Index i) {
  Tape& tape = same_tape(a11, a12);
  same_tape(a11, a22);
  const Index p = a11.rows() + 1;
  if (a11.cols() != p - 1 || a12.rows() != p - 1 || a12.cols() != 1 || a22.size() != 1) {
    throw DimensionError("assemble: inconsistent block shapes");
  }
  if (i < 0 || i >= p) throw std::out_of_range("assemble: pivot out of range");
  BlockView<double> view;
  view.pivot = i;
  view.a11 = a11.value();
  view.a12 = a12.value();
  view.a22 = a22.value()(0, 0);
  const int i11 = a11.id(), i12 = a12.id(), i22 = a22.id();
  const bool grad = a11.requires_grad() || a12.requires_grad() || a22.requires_grad();
  return tape.record(embed_block(view), grad, [i11, i12, i22, i, p](Tape& t, const MatrixXd& g) {
    const Index hi = p - 1 - i;
    if (t.needs_grad(i11)) {
      MatrixXd g11(p - 1, p - 1);
      g11.topLeftCorner(i, i) = g.topLeftCorner(i, i);
      g11.topRightCorner(i, hi) = g.topRightCorner(i, hi);
      g11.bottomLeftCorner(hi, i) = g.bottomLeftCorner(hi, i);
      g11.bottomRightCorner(hi, hi) = g.bottomRightCorner(hi, hi);
      t.accumulate(i11, g11);
    }
    if (t.needs_grad(i12)) {
      MatrixXd g12(p - 1, 1);
      for (Index k = 0; k < p - 1; ++k) {
        const Index r = skip_index(k, i);
        g12(k, 0) = g(r, i) + g(i, r);
      }
      t.accumulate(i12, g12);
    }
    if (t.needs_grad(i22)) t.accumulate(i22, MatrixXd::Constant(1, 1, g(i, i)));
  });
}

Tensor stack(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw DimensionError("stack: no inputs");
  Tape& tape = tape_of(scalars.front());
  const Index n = static_cast<Index>(scalars.size());
  MatrixXd out(n, 1);
  std::vector<int> ids;
  ids.reserve(scalars.size());
  bool grad = false;
  for (Index k = 0; k < n; ++k) {
    const Tensor& s = scalars[k];
    same_tape(scalars.front(), s);
    if (s.size() != 1) throw DimensionError("stack: inputs must be scalars");
    out(k, 0) = s.value()(0, 0);
    ids.push_back(s.id());
    grad = grad || s.requires_grad();
  }
  return tape.record(std::move(out), grad, [ids](Tape& t, const MatrixXd& g) {
    for (std::size_t k = 0; k < ids.size(); ++k) {
      t.accumulate(ids[k], MatrixXd::Constant(1, 1, g(static_cast<Index>(k), 0)));
    }
  });
}

// ---- gradient checking -----------------------------------------------------

ValueAndGrad value_and_grad(const ScalarFn& f, std::span<const MatrixXd> params) {
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p, true));
  const Tensor loss = f(tape, leaves);
  tape.backward(loss);
  ValueAndGrad out;
  out.value = loss.item();
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const auto& g = leaves[k].grad();
    out.grads.push_back(g.size() ? g : MatrixXd::Zero(params[k].rows(), params[k].cols()));
  }
  return out;
}

double finite_diff_check(const ScalarFn& f, std::span<const MatrixXd> params, double h) {
  if (!(h > 0.0)) throw DomainError("finite_diff_check: step must be positive");
  const ValueAndGrad analytic = value_and_grad(f, params);
  std::vector<MatrixXd> work(params.begin(), params.end());
  const auto eval = [&]() {
    Tape tape;
    std::vector<Tensor> leaves;
    leaves.reserve(work.size());
    for (const auto& p : work) leaves.push_back(tape.constant(p));
    return f(tape, leaves).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (Index e = 0; e < work[k].size(); ++e) {
      const double saved = work[k](e);
      work[k](e) = saved + h;
      const double up = eval();
      work[k](e) = saved - h;
      const double down = eval();
      work[k](e) = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic.grads[k](e) - numeric) /
                         std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace spodnet::ad
