#include "spodnet/layer.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace spodnet {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

Rank2Eigs rank2_delta_eigs(const VectorXd& col_diff, double diag_diff) {
  const double disc = std::sqrt(diag_diff * diag_diff + 4.0 * col_diff.squaredNorm());
  return {(diag_diff + disc) / 2.0, (diag_diff - disc) / 2.0};
}

BauerFikeReport bauer_fike_check(const MatrixXd& before, const MatrixXd& after,
                                 double delta_op_norm) {
  require_symmetric(before, "bauer_fike_check: before");
  require_symmetric(after, "bauer_fike_check: after");
  // both ascending, so index k pairs the k-th largest of each
  const VectorXd a = symmetric_eigenvalues(before);
  const VectorXd b = symmetric_eigenvalues(after);
  BauerFikeReport report;
  report.max_shift = (a - b).cwiseAbs().maxCoeff();
  report.max_violation = std::max(0.0, report.max_shift - delta_op_norm);
  report.holds = report.max_shift <= delta_op_norm + 1e-8;
  return report;
}

void LayerConfig::validate(Index p) const {
  if (!(zeta > 0.0)) throw ConfigError("zeta must be > 0");
  if (num_layers < 1) throw ConfigError("number of layers must be >= 1");
  if (!column_order.empty()) {
    if (static_cast<Index>(column_order.size()) != p) {
      throw ConfigError("column order must list every column exactly once");
    }
    std::vector<Index> sorted = column_order;
    std::sort(sorted.begin(), sorted.end());
    for (Index k = 0; k < p; ++k) {
      if (sorted[k] != k) throw ConfigError("column order is not a permutation");
    }
  }
}

namespace {

// Column i (without entry i) of Θ⁻¹, read from the tracked W. Adjoint:
// dL/dΘ = -(W ĝ) w_iᵀ, ĝ = g scattered to the full index set.
ad::Tensor inverse_column(const ad::Tensor& theta, const MatrixXd& w, Index i) {
  const Index p = w.rows();
  MatrixXd out(p - 1, 1);
  for (Index k = 0; k < p - 1; ++k) out(k, 0) = w(skip_index(k, i), i);
  if (!theta.requires_grad()) return theta.tape().record(std::move(out), false, {});
  const int it = theta.id();
  return theta.tape().record(
      std::move(out), true, [it, w, i, p](ad::Tape& t, const MatrixXd& g) {
        VectorXd full = VectorXd::Zero(p);
        for (Index k = 0; k < p - 1; ++k) full(skip_index(k, i)) = g(k, 0);
        const VectorXd wg = w * full;
        t.adjoint(it).noalias() -= wg * w.col(i).transpose();
      });
}

// zᵀ M z with M = [Θ₁₁]⁻¹ read from W. Adjoint w.r.t. Θ₁₁ is
// -g (Mz)(Mz)ᵀ, scattered around the pivot.
ad::Tensor inverse_block_quadratic(const ad::Tensor& theta, const MatrixXd& m, Index i,
                                   const ad::Tensor& z) {
  const VectorXd mz = m * z.value().col(0);
  const double q = z.value().col(0).dot(mz);
  const int it = theta.id(), iz = z.id();
  const Index p = m.rows() + 1;
  const bool grad = theta.requires_grad() || z.requires_grad();
  return theta.tape().record(
      MatrixXd::Constant(1, 1, q), grad, [it, iz, mz, i, p](ad::Tape& t, const MatrixXd& g) {
        const double s = g(0, 0);
        if (t.needs_grad(iz)) t.accumulate(iz, (2.0 * s) * mz);
        if (t.needs_grad(it)) {
          MatrixXd& adj = t.adjoint(it);
          const Index hi = p - 1 - i;
          const auto top = mz.head(i);
          const auto bottom = mz.tail(hi);
          adj.topLeftCorner(i, i).noalias() -= s * top * top.transpose();
          adj.topRightCorner(i, hi).noalias() -= s * top * bottom.transpose();
          adj.bottomLeftCorner(hi, i).noalias() -= s * bottom * top.transpose();
          adj.bottomRightCorner(hi, hi).noalias() -= s * bottom * bottom.transpose();
        }
      });
}

MatrixXd theta11_inverse_at(const MatrixXd& w, Index i) {
  return theta11_inverse(extract_block(w, i));
}

}  // namespace

ColumnContext::ColumnContext(const SpdState& state, const MatrixXd& s, Index pivot,
                             const LayerConfig& cfg)
    : state_(&state), cfg_(&cfg), pivot_(pivot) {
  ad::Tape& tape = state.theta.tape();
  theta12_ = ad::column_without(state.theta, pivot);
  theta22_ = ad::entry(state.theta, pivot, pivot);
  const BlockView<double> s_view = extract_block(s, pivot);
  s12_ = tape.vector(s_view.a12);
  s22_ = tape.scalar(s_view.a22);
  if (cfg.tape_mode == TapeMode::Full) {
    w12_ = ad::column_without(state.w, pivot);
    const ad::Tensor w11 = ad::block_without(state.w, pivot);
    const ad::Tensor w22 = ad::entry(state.w, pivot, pivot);
    if (!(w22.item() > 0.0)) throw SpdViolation("w22 is not positive at column " + std::to_string(pivot));
    theta11_inv_tensor_ = w11 - ad::outer(w12_, w12_) * ad::reciprocal(w22);
    theta11_inv_ = theta11_inv_tensor_.value();
  } else {
    theta11_inv_ = theta11_inverse_at(state.w_value, pivot);
    w12_ = inverse_column(state.theta, state.w_value, pivot);
  }
}

ad::Tensor ColumnContext::schur_quadratic(const ad::Tensor& z) const {
  if (z.rows() != theta11_inv_.rows() || z.cols() != 1) {
    throw DimensionError("schur_quadratic: vector length must be p-1");
  }
  if (cfg_->tape_mode == TapeMode::Full) return ad::quadratic_form(z, theta11_inv_tensor_);
  return inverse_block_quadratic(state_->theta, theta11_inv_, pivot_, z);
}

ad::Tensor ColumnContext::stabilize(const ad::Tensor& z) const {
  if (!cfg_->stabilize) return z;
  const ad::Tensor q = schur_quadratic(z);
  if (!(q.item() > kStabilizerGuard)) return z;
  const ad::Tensor factor = std::sqrt(cfg_->zeta) * ad::reciprocal(ad::sqrt(q));
  return z * factor;
}

ad::Tensor ColumnContext::w_plus(const ad::Tensor& u, const ad::Tensor& v) const {
  const ad::Tensor mu = ad::matmul(theta11_inv_tensor_, u);
  const ad::Tensor vinv = ad::reciprocal(v);
  const ad::Tensor w11 = theta11_inv_tensor_ + ad::outer(mu, mu) * vinv;
  const ad::Tensor w12 = -(mu * vinv);
  return ad::assemble(w11, w12, vinv, pivot_);
}

SpdState initial_state(ad::Tape& tape, const MatrixXd& s, const LayerConfig& cfg) {
  require_symmetric(s, "empirical covariance");
  const Index p = s.rows();
  if (p < 2) throw DimensionError("SpodNet needs p >= 2");
  cfg.validate(p);
  const MatrixXd w_in = s + MatrixXd::Identity(p, p);
  SpdState state;
  state.theta = tape.constant(spd_inverse(w_in));
  state.w_value = w_in;
  if (cfg.tape_mode == TapeMode::Full) state.w = tape.constant(w_in);
  return state;
}

SpdState spodnet_layer(SpdState state, const MatrixXd& s, const UpdateFns& fns,
                       const LayerConfig& cfg, int layer_index,
                       const UpdateObserver& observer) {
  const Index p = state.p();
  cfg.validate(p);
  if (s.rows() != p || s.cols() != p) throw DimensionError("spodnet_layer: S and Θ sizes differ");
  std::vector<Index> order = cfg.column_order;
  if (order.empty()) {
    order.resize(p);
    std::iota(order.begin(), order.end(), Index{0});
  }
  for (const Index i : order) {
    const ColumnContext ctx(state, s, i, cfg);
    const ad::Tensor u = fns.f(ctx);
    if (u.rows() != p - 1 || u.cols() != 1) {
      throw DimensionError("column update must have length p-1");
    }
    const ad::Tensor quad = ctx.schur_quadratic(u);
    const ad::Tensor v = fns.g(ctx, quad);
    if (v.size() != 1) throw DimensionError("diagonal update must be a scalar");
    if (!(v.item() > 0.0)) {
      throw SpdViolation("Schur complement target is not positive at column " +
                         std::to_string(i));
    }
    MatrixXd theta_before;
    if (observer) theta_before = state.theta.value();

    SpdState next;
    next.theta = ad::with_column_row(state.theta, i, u, v + quad);
    if (cfg.tape_mode == TapeMode::Full) {
      next.w = ctx.w_plus(u, v);
      next.w_value = next.w.value();
    } else {
      next.w_value = assemble_w_plus<double>(ctx.theta11_inv(), u.value().col(0),
                                             v.item(), i);
    }
    state = std::move(next);

    if (observer) {
      observer(ColumnUpdate{layer_index, i, std::move(theta_before), state.theta.value(),
                            state.w_value});
    }
  }
  return state;
}

SpdState spodnet_forward(ad::Tape& tape, const MatrixXd& s, const UpdateFns& fns,
                         const LayerConfig& cfg, const UpdateObserver& observer) {
  SpdState state = initial_state(tape, s, cfg);
  for (int layer = 0; layer < cfg.num_layers; ++layer) {
    if (layer > 0) {
      // drift control between layers
      if (cfg.tape_mode == TapeMode::Full) {
        state.w = ad::spd_inverse(state.theta);
        state.w_value = state.w.value();
      } else {
        state.w_value = spd_inverse(state.theta.value());
      }
    }
    state = spodnet_layer(std::move(state), s, fns, cfg, layer, observer);
  }
  return state;
}

}  // namespace spodnet
