#include "spodnet/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "spodnet/layer.hpp"

namespace spodnet {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void GlassoConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!(tol > 0.0)) throw ConfigError("tol must be > 0");
  if (max_sweeps < 1) throw ConfigError("max_sweeps must be >= 1");
  if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  if (!(gamma > 0.0)) throw ConfigError("gamma must be > 0");
}

namespace {

double offdiag_l1(const MatrixXd& a) {
  return a.cwiseAbs().sum() - a.diagonal().cwiseAbs().sum();
}

VectorXd soft_threshold(const VectorXd& x, double t) {
  VectorXd out(x.size());
  for (Index k = 0; k < x.size(); ++k) {
    const double shrunk = std::max(std::abs(x(k)) - t, 0.0);
    out(k) = x(k) > 0.0 ? shrunk : (x(k) < 0.0 ? -shrunk : 0.0);
  }
  return out;
}

void require_psd(const MatrixXd& s) {
  require_symmetric(s, "empirical covariance");
  const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  if (symmetric_eigenvalues(s).minCoeff() < -1e-10 * scale) {
    throw DomainError("empirical covariance is not positive semidefinite");
  }
  if ((s.diagonal().array() <= 0.0).any()) {
    throw DomainError("empirical covariance has a zero variance");
  }
}

// Smooth part of the column objective for fixed Θ₁₁ and fixed Schur target:
// ½(-log(θ₂₂ - xᵀMx)) + s₁₂ᵀx. +inf outside the PD region.
double column_smooth(const VectorXd& x, const MatrixXd& m, double theta22, const VectorXd& s12) {
  const double c = theta22 - x.dot(m * x);
  if (!(c > 0.0)) return std::numeric_limits<double>::infinity();
  return -0.5 * std::log(c) + s12.dot(x);
}

}  // namespace

double glasso_objective(const MatrixXd& theta, const MatrixXd& s, double lambda) {
  if (theta.rows() != s.rows() || theta.cols() != s.cols()) {
    throw DimensionError("glasso_objective: shapes differ");
  }
  return -log_det_spd(theta) + theta.cwiseProduct(s).sum() + lambda * offdiag_l1(theta);
}

VectorXd block_gista_step(const BlockView<double>& theta, const VectorXd& s12,
                          const VectorXd& w12, double gamma, double lambda) {
  if (!(gamma > 0.0)) throw DomainError("block_gista_step: gamma must be > 0");
  const VectorXd step = theta.a12 - gamma * (s12 - w12);
  return soft_threshold(step, gamma * lambda);
}

GlassoResult glasso_solve(const MatrixXd& s, const GlassoConfig& cfg, const MatrixXd* init) {
  cfg.validate();
  require_psd(s);
  const Index p = s.rows();
  GlassoResult res;
  MatrixXd theta = init ? *init : spd_inverse(MatrixXd(s + MatrixXd::Identity(p, p)));
  if (init && (init->rows() != p || !is_positive_definite(*init))) {
    throw DomainError("glasso_solve: initial estimate is not SPD of matching size");
  }
  MatrixXd w = spd_inverse(theta);
  std::vector<double> gamma(p, cfg.gamma);
  double obj = glasso_objective(theta, s, cfg.lambda);
  res.objective.push_back(obj);

  for (int sweep = 0; sweep < cfg.max_sweeps; ++sweep) {
    for (Index i = 0; i < p; ++i) {
      BlockView<double> tv = extract_block(theta, i);
      const BlockView<double> sv = extract_block(s, i);
      const MatrixXd m = theta11_inverse(extract_block(w, i));
      VectorXd x = tv.a12;

      for (int it = 0; it < cfg.inner_steps; ++it) {
        // w₁₂ of the current iterate: -Mx / (θ₂₂ - xᵀMx)
        const VectorXd mx = m * x;
        const double c = tv.a22 - x.dot(mx);
        const VectorXd w12 = -mx / c;
        const VectorXd grad = sv.a12 - w12;
        const double f0 = column_smooth(x, m, tv.a22, sv.a12);
        const double g0 = cfg.lambda * x.lpNorm<1>();
        tv.a12 = x;
        double step = cfg.backtracking ? std::min(2.0 * gamma[i], 1e6) : cfg.gamma;
        VectorXd next;
        for (int tries = 0;; ++tries) {
          next = block_gista_step(tv, sv.a12, w12, step, cfg.lambda);
          const VectorXd d = next - x;
          const double f1 = column_smooth(next, m, tv.a22, sv.a12);
          const bool sufficient = f1 <= f0 + grad.dot(d) + d.squaredNorm() / (2.0 * step);
          const bool descent = f1 + cfg.lambda * next.lpNorm<1>() <= f0 + g0;
          if (!cfg.backtracking && std::isfinite(f1)) break;
          if (std::isfinite(f1) && sufficient && descent) break;
          if (tries > 60) {
            next = x;
            break;
          }
          step *= 0.5;
        }
        gamma[i] = step;
        x = next;
      }

      // exact minimiser in θ₂₂: Schur complement equal to 1/s₂₂
      const double v = 1.0 / sv.a22;
      tv.a12 = x;
      theta = assemble_theta_plus<double>(tv, x, v, m);
      w = assemble_w_plus<double>(m, x, v, i);
    }
    w = spd_inverse(theta);
    const double next_obj = glasso_objective(theta, s, cfg.lambda);
    res.objective.push_back(next_obj);
    res.sweeps = sweep + 1;
    const bool done = obj - next_obj < cfg.tol;
    obj = next_obj;
    if (done) break;
  }
  res.theta = theta;
  return res;
}

double kkt_residual(const MatrixXd& theta, const MatrixXd& s, double lambda) {
  const MatrixXd w = spd_inverse(theta);
  const Index p = theta.rows();
  double worst = 0.0;
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < p; ++j) {
      const double g = s(i, j) - w(i, j);
      double r;
      if (i == j) {
        r = std::abs(g);
      } else if (theta(i, j) == 0.0) {
        r = std::max(0.0, std::abs(g) - lambda);
      } else {
        r = std::abs(g + lambda * (theta(i, j) > 0.0 ? 1.0 : -1.0));
      }
      worst = std::max(worst, r);
    }
  }
  return worst;
}

std::vector<double> default_lambda_grid(const MatrixXd& s, int count) {
  if (count < 1) throw ConfigError("lambda grid needs at least one value");
  const double top = (s - MatrixXd(s.diagonal().asDiagonal())).cwiseAbs().maxCoeff();
  const double scale = top > 0.0 ? top : 1.0;
  std::vector<double> grid;
  for (int k = 0; k < count; ++k) {
    const double e = count == 1 ? 0.0 : -2.0 + 2.0 * k / (count - 1);
    grid.push_back(scale * std::pow(10.0, e));
  }
  return grid;
}

MatrixXd empirical_covariance(const MatrixXd& x) {
  if (x.rows() < 1) throw DimensionError("empirical_covariance: no samples");
  return symmetrize(MatrixXd(x.transpose() * x / static_cast<double>(x.rows())));
}

GlassoCvResult glasso_cv(const MatrixXd& samples, std::vector<double> lambda_grid, int folds,
                         GlassoConfig base) {
  const Index n = samples.rows();
  if (folds < 2) throw ConfigError("glasso_cv needs at least 2 folds");
  if (n < 2 * folds) throw ConfigError("glasso_cv: every fold needs at least 2 samples");
  const MatrixXd s_all = empirical_covariance(samples);
  if (lambda_grid.empty()) lambda_grid = default_lambda_grid(s_all);

  GlassoCvResult res;
  res.scores.assign(lambda_grid.size(), 0.0);
  for (int f = 0; f < folds; ++f) {
    const Index lo = n * f / folds, hi = n * (f + 1) / folds;
    MatrixXd train(n - (hi - lo), samples.cols());
    train << samples.topRows(lo), samples.bottomRows(n - hi);
    const MatrixXd s_train = empirical_covariance(train);
    const MatrixXd s_hold = empirical_covariance(samples.middleRows(lo, hi - lo));
    // warm start from the sparsest end of the grid downwards
    MatrixXd warm;
    for (std::size_t k = lambda_grid.size(); k-- > 0;) {
      GlassoConfig cfg = base;
      cfg.lambda = lambda_grid[k];
      const GlassoResult r = glasso_solve(s_train, cfg, warm.size() ? &warm : nullptr);
      warm = r.theta;
      res.scores[k] += (-log_det_spd(r.theta) + r.theta.cwiseProduct(s_hold).sum()) / folds;
    }
  }
  std::size_t best = 0;
  for (std::size_t k = 1; k < lambda_grid.size(); ++k) {
    const bool larger = lambda_grid[k] > lambda_grid[best];
    if (res.scores[k] < res.scores[best] || (res.scores[k] == res.scores[best] && larger)) best = k;
  }
  res.lambda = lambda_grid[best];
  GlassoConfig cfg = base;
  cfg.lambda = res.lambda;
  res.theta = glasso_solve(s_all, cfg).theta;
  return res;
}

namespace {

ShrinkageResult shrink(const MatrixXd& s, double rho) {
  const Index p = s.rows();
  const double mu = s.trace() / static_cast<double>(p);
  ShrinkageResult r;
  r.shrinkage = rho;
  r.covariance = (1.0 - rho) * s + rho * mu * MatrixXd::Identity(p, p);
  r.precision = spd_inverse(r.covariance);
  return r;
}

}  // namespace

ShrinkageResult ledoit_wolf(const MatrixXd& samples) {
  const Index n = samples.rows(), p = samples.cols();
  const MatrixXd s = empirical_covariance(samples);
  if (n < 2) return shrink(s, 1.0);
  const double mu = s.trace() / static_cast<double>(p);
  const double s_frob2 = s.squaredNorm();
  double fourth = 0.0;
  for (Index k = 0; k < n; ++k) {
    const double sq = samples.row(k).squaredNorm();
    fourth += sq * sq;
  }
  const double nd = static_cast<double>(n), pd = static_cast<double>(p);
  const double delta = (s - mu * MatrixXd::Identity(p, p)).squaredNorm() / pd;
  double beta = (fourth / nd - s_frob2) / (pd * nd);
  beta = std::min(beta, delta);
  const double rho = beta <= 0.0 ? 0.0 : beta / delta;
  return shrink(s, std::clamp(rho, 0.0, 1.0));
}

ShrinkageResult oas(const MatrixXd& s, Index n) {
  require_symmetric(s, "empirical covariance");
  if (n < 1) throw DomainError("oas needs at least 1 sample");
  const double pd = static_cast<double>(s.rows()), nd = static_cast<double>(n);
  const double tr = s.trace();
  const double tr2 = s.squaredNorm();  // tr(S²) for symmetric S
  const double num = (1.0 - 2.0 / pd) * tr2 + tr * tr;
  const double den = (nd + 1.0 - 2.0 / pd) * (tr2 - tr * tr / pd);
  const double rho = den <= 0.0 ? 1.0 : std::clamp(num / den, 0.0, 1.0);
  return shrink(s, rho);
}

ShrinkageResult oas(const MatrixXd& samples) {
  return oas(empirical_covariance(samples), samples.rows());
}

}  // namespace spodnet
