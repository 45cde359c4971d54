#pragma once

// The SpodNet layer: sequential column-row updates of an SPD matrix Θ whose
// diagonal entry is repaired through the Schur complement, while W = Θ⁻¹ is
// carried along in O(p²) per column.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "spodnet/linalg.hpp"
#include "spodnet/tensor.hpp"

namespace spodnet {

/// Quadratic forms at or below this value skip the ζ rescaling.
inline constexpr double kStabilizerGuard = 1e-12;

// ---- value-level building blocks ------------------------------------------

/// [Θ₁₁]⁻¹ = W₁₁ - w₁₂ w₁₂ᵀ / w₂₂ from the partition of W at the same pivot.
template <typename Scalar>
DenseMatrix<Scalar> theta11_inverse(const BlockView<Scalar>& w) {
  if (!(w.a22 > Scalar(0))) {
    throw SpdViolation("theta11_inverse: w22 is not positive");
  }
  return w.a11 - (w.a12 * w.a12.transpose()) / w.a22;
}

/// Θ⁺: column i replaced by u and θ₂₂⁺ = v + uᵀ[Θ₁₁]⁻¹u. The Schur
/// complement of the result at i is exactly v.
template <typename Scalar>
DenseMatrix<Scalar> assemble_theta_plus(const BlockView<Scalar>& theta,
                                        const DenseVector<Scalar>& u, Scalar v,
                                        const DenseMatrix<Scalar>& theta11_inv) {
  if (!(v > Scalar(0))) throw ContractError("assemble_theta_plus: v must be positive");
  if (u.size() != theta.a12.size() || theta11_inv.rows() != u.size()) {
    throw DimensionError("assemble_theta_plus: block sizes differ");
  }
  BlockView<Scalar> next = theta;
  next.a12 = u;
  next.a22 = v + u.dot(theta11_inv * u);
  return embed_block(next);
}

/// W⁺ = (Θ⁺)⁻¹ by the block inversion formula: one mat-vec and one outer
/// product.
template <typename Scalar>
DenseMatrix<Scalar> assemble_w_plus(const DenseMatrix<Scalar>& theta11_inv,
                                    const DenseVector<Scalar>& u, Scalar v,
                                    Eigen::Index pivot) {
  if (!(v > Scalar(0))) throw ContractError("assemble_w_plus: v must be positive");
  if (theta11_inv.rows() != u.size()) throw DimensionError("assemble_w_plus: size mismatch");
  const DenseVector<Scalar> mu = theta11_inv * u;
  BlockView<Scalar> w;
  w.pivot = pivot;
  w.a11 = theta11_inv + (mu * mu.transpose()) / v;
  w.a12 = -mu / v;
  w.a22 = Scalar(1) / v;
  return embed_block(w);
}

/// z √ζ / √(zᵀ[Θ₁₁]⁻¹z), or z unchanged when the form is <= kStabilizerGuard.
template <typename Scalar>
DenseVector<Scalar> stabilize_preactivation(const DenseVector<Scalar>& z,
                                            const DenseMatrix<Scalar>& theta11_inv,
                                            Scalar zeta) {
  const Scalar q = z.dot(theta11_inv * z);
  if (!(q > Scalar(kStabilizerGuard))) return z;
  return z * (std::sqrt(zeta) / std::sqrt(q));
}

/// The two nonzero eigenvalues of the rank-2 perturbation Θ⁺ - Θ.
struct Rank2Eigs {
  double plus = 0.0;
  double minus = 0.0;
  double op_norm() const { return std::max(std::abs(plus), std::abs(minus)); }
};

Rank2Eigs rank2_delta_eigs(const Eigen::VectorXd& col_diff, double diag_diff);

struct BauerFikeReport {
  bool holds = true;
  double max_shift = 0.0;      // max_k |λ_k(Θ) - λ_k(Θ⁺)|
  double max_violation = 0.0;  // max(0, max_shift - ‖Δ‖_op)
};

/// Checks |λ_k(before) - λ_k(after)| <= ‖Δ‖_op for every k (slack 1e-8).
BauerFikeReport bauer_fike_check(const Eigen::MatrixXd& before,
                                 const Eigen::MatrixXd& after, double delta_op_norm);

// ---- layer on the tape ---------------------------------------------------------

/// How W's column-by-column recursion appears on the tape.
///
/// Detached: W is tracked as plain values; quantities read from it
/// ([Θ₁₁]⁻¹ and w₁₂) enter the tape through ops whose adjoints use
/// d(Θ⁻¹) = -Θ⁻¹ dΘ Θ⁻¹ against the current Θ, so gradients stay exact at
/// O(p²) tape memory per column.
/// Full: every W update is recorded with tape primitives.
enum class TapeMode { Detached, Full };

struct LayerConfig {
  double zeta = 1.0;
  bool stabilize = true;
  int num_layers = 1;
  std::vector<Eigen::Index> column_order;  // empty: natural order 0..p-1
  TapeMode tape_mode = TapeMode::Detached;

  void validate(Eigen::Index p) const;
};

struct SpdState {
  ad::Tensor theta;
  ad::Tensor w;              // populated in TapeMode::Full only
  Eigen::MatrixXd w_value;   // always W = Θ⁻¹ for the current theta
  Eigen::Index p() const { return theta.rows(); }
};

/// Everything f and g may look at while column `pivot` is being updated.
class ColumnContext {
 public:
  ColumnContext(const SpdState& state, const Eigen::MatrixXd& s, Eigen::Index pivot,
                const LayerConfig& cfg);

  Eigen::Index pivot() const { return pivot_; }
  const ad::Tensor& theta12() const { return theta12_; }
  const ad::Tensor& theta22() const { return theta22_; }
  const ad::Tensor& w12() const { return w12_; }
  const ad::Tensor& s12() const { return s12_; }
  const ad::Tensor& s22() const { return s22_; }
  const Eigen::MatrixXd& theta11_inv() const { return theta11_inv_; }
  const LayerConfig& config() const { return *cfg_; }

  /// zᵀ[Θ₁₁]⁻¹z on the tape.
  ad::Tensor schur_quadratic(const ad::Tensor& z) const;
  /// ζ-rescaling of a preactivation; identity when stabilisation is off or
  /// the guard fires.
  ad::Tensor stabilize(const ad::Tensor& z) const;

  /// W⁺ after assigning (u, v) to this column, on the tape (Full mode).
  ad::Tensor w_plus(const ad::Tensor& u, const ad::Tensor& v) const;

 private:
  const SpdState* state_;
  const LayerConfig* cfg_;
  Eigen::Index pivot_;
  ad::Tensor theta12_, theta22_, w12_, s12_, s22_;
  ad::Tensor theta11_inv_tensor_;  // Full mode
  Eigen::MatrixXd theta11_inv_;
};

struct UpdateFns {
  /// New off-diagonal column u (length p-1).
  std::function<ad::Tensor(const ColumnContext&)> f;
  /// Strictly positive Schur target v, given the Schur term uᵀ[Θ₁₁]⁻¹u.
  std::function<ad::Tensor(const ColumnContext&, const ad::Tensor& quad)> g;
};

/// Snapshot emitted after every column update (diagnostic mode).
struct ColumnUpdate {
  int layer = 0;
  Eigen::Index pivot = 0;
  Eigen::MatrixXd theta_before;
  Eigen::MatrixXd theta_after;
  Eigen::MatrixXd w_after;
};
using UpdateObserver = std::function<void(const ColumnUpdate&)>;

/// Θ_in = (S + I)⁻¹, W_in = S + I.
SpdState initial_state(ad::Tape& tape, const Eigen::MatrixXd& s, const LayerConfig& cfg);

/// One pass over all columns in cfg.column_order.
SpdState spodnet_layer(SpdState state, const Eigen::MatrixXd& s, const UpdateFns& fns,
                       const LayerConfig& cfg, int layer_index = 0,
                       const UpdateObserver& observer = {});

/// K layers starting from (S + I)⁻¹, with W resynchronised by a dense
/// inverse between layers.
SpdState spodnet_forward(ad::Tape& tape, const Eigen::MatrixXd& s, const UpdateFns& fns,
                         const LayerConfig& cfg, const UpdateObserver& observer = {});

}  // namespace spodnet
