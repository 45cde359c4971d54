#pragma once

// Dense symmetric / SPD helpers used outside the differentiated path.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "spodnet/error.hpp"

namespace spodnet {

template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using DenseVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Maps an index of the (p-1)-partition back to the full index space.
inline Eigen::Index skip_index(Eigen::Index k, Eigen::Index pivot) {
  return k < pivot ? k : k + 1;
}

template <typename Derived>
typename Derived::Scalar asymmetry(const Eigen::MatrixBase<Derived>& a) {
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

/// Throws unless `a` is square and max|A - Aᵀ| <= 1e-12 max|A|.
template <typename Derived>
void require_symmetric(const Eigen::MatrixBase<Derived>& a,
                       const char* what = "matrix") {
  if (a.rows() != a.cols()) {
    throw DimensionError(std::string(what) + " is not square");
  }
  if (a.size() == 0) return;
  const auto scale = a.cwiseAbs().maxCoeff();
  if (asymmetry(a) > 1e-12 * scale) {
    throw DomainError(std::string(what) + " is not symmetric");
  }
}

template <typename Derived>
DenseMatrix<typename Derived::Scalar> symmetrize(
    const Eigen::MatrixBase<Derived>& a) {
  return (a + a.transpose()) / typename Derived::Scalar(2);
}

namespace detail {

// Returns the failing pivot, or -1 on success.
template <typename Derived, typename Scalar>
Eigen::Index cholesky_into(const Eigen::MatrixBase<Derived>& a,
                           DenseMatrix<Scalar>& l) {
  const Eigen::Index n = a.rows();
  l.setZero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    Scalar d = a(j, j);
    if (j > 0) d -= l.row(j).head(j).squaredNorm();
    if (!(d > Scalar(0))) return j;
    const Scalar ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      Scalar s = a(i, j);
      if (j > 0) s -= l.row(i).head(j).dot(l.row(j).head(j));
      l(i, j) = s / ljj;
    }
  }
  return -1;
}

}  // namespace detail

/// Lower factor L with a = L Lᵀ. Strict positivity on every pivot; throws
/// NotPositiveDefinite carrying the failing pivot.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> cholesky(
    const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  if (a.rows() != a.cols()) throw DimensionError("cholesky: matrix is not square");
  DenseMatrix<Scalar> l;
  const auto pivot = detail::cholesky_into(a, l);
  if (pivot >= 0) throw NotPositiveDefinite(pivot);
  return l;
}

/// Strict PD test (Cholesky succeeds).
template <typename Derived>
bool is_positive_definite(const Eigen::MatrixBase<Derived>& a) {
  if (a.rows() != a.cols()) return false;
  DenseMatrix<typename Derived::Scalar> l;
  return detail::cholesky_into(a, l) < 0;
}

/// Inverse through the Cholesky factor, symmetrised.
template <typename Derived>
DenseMatrix<typename Derived::Scalar> spd_inverse(
    const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  const DenseMatrix<Scalar> l = cholesky(a);
  DenseMatrix<Scalar> linv = DenseMatrix<Scalar>::Identity(a.rows(), a.cols());
  l.template triangularView<Eigen::Lower>().solveInPlace(linv);
  const DenseMatrix<Scalar> inv = linv.transpose() * linv;
  return symmetrize(inv);
}

/// log det via 2 Σ log L_ii.
template <typename Derived>
typename Derived::Scalar log_det_spd(const Eigen::MatrixBase<Derived>& a) {
  const auto l = cholesky(a);
  return typename Derived::Scalar(2) * l.diagonal().array().log().sum();
}

/// Partition of a symmetric matrix around pivot i: a11 drops row and column
/// i, a12 is column i without entry i, a22 = a(i, i).
template <typename Scalar>
struct BlockView {
  Eigen::Index pivot = 0;
  DenseMatrix<Scalar> a11;
  DenseVector<Scalar> a12;
  Scalar a22{};
};

template <typename Derived>
BlockView<typename Derived::Scalar> extract_block(
    const Eigen::MatrixBase<Derived>& a, Eigen::Index i) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index p = a.rows();
  if (a.cols() != p) throw DimensionError("extract_block: matrix is not square");
  if (i < 0 || i >= p) throw std::out_of_range("extract_block: pivot out of range");
  BlockView<Scalar> view;
  view.pivot = i;
  view.a11.resize(p - 1, p - 1);
  view.a12.resize(p - 1);
  for (Eigen::Index c = 0; c < p - 1; ++c) {
    const auto sc = skip_index(c, i);
    view.a12(c) = a(sc, i);
    for (Eigen::Index r = 0; r < p - 1; ++r) view.a11(r, c) = a(skip_index(r, i), sc);
  }
  view.a22 = a(i, i);
  return view;
}

template <typename Scalar>
DenseMatrix<Scalar> embed_block(const BlockView<Scalar>& view) {
  const Eigen::Index p = view.a11.rows() + 1;
  const Eigen::Index i = view.pivot;
  if (view.a11.cols() != p - 1 || view.a12.size() != p - 1) {
    throw DimensionError("embed_block: inconsistent block sizes");
  }
  if (i < 0 || i >= p) throw std::out_of_range("embed_block: pivot out of range");
  DenseMatrix<Scalar> a(p, p);
  for (Eigen::Index c = 0; c < p - 1; ++c) {
    const auto sc = skip_index(c, i);
    a(sc, i) = view.a12(c);
    a(i, sc) = view.a12(c);
    for (Eigen::Index r = 0; r < p - 1; ++r) a(skip_index(r, i), sc) = view.a11(r, c);
  }
  a(i, i) = view.a22;
  return a;
}

struct SpectrumSummary {
  double min_eig = 0.0;
  double max_eig = 0.0;
  double cond = 0.0;
};

/// Ascending eigenvalues of a symmetric matrix.
template <typename Derived>
DenseVector<typename Derived::Scalar> symmetric_eigenvalues(
    const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  Eigen::SelfAdjointEigenSolver<DenseMatrix<Scalar>> solver(
      a.eval(), Eigen::EigenvaluesOnly);
  return solver.eigenvalues();
}

/// Extreme eigenvalues and λ_max / λ_min. Diagnostic only.
template <typename Derived>
SpectrumSummary eig_diagnostics(const Eigen::MatrixBase<Derived>& a) {
  const auto ev = symmetric_eigenvalues(a);
  SpectrumSummary out;
  out.min_eig = static_cast<double>(ev(0));
  out.max_eig = static_cast<double>(ev(ev.size() - 1));
  out.cond = out.min_eig > 0.0 ? out.max_eig / out.min_eig
                              : std::numeric_limits<double>::infinity();
  return out;
}

}  // namespace spodnet
