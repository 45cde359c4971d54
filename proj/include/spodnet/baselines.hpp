#pragma once

// Model-based precision estimators: graphical lasso by proximal block
// coordinate descent, its cross-validated wrapper, and the Ledoit-Wolf / OAS
// shrinkage estimators (inverted).

#include <vector>

#include <Eigen/Dense>

#include "spodnet/linalg.hpp"

namespace spodnet {

struct GlassoConfig {
  double lambda = 0.1;
  int max_sweeps = 5000;
  double tol = 1e-12;       // stop when one sweep lowers the objective by less
  int inner_steps = 1;      // prox-gradient steps per column
  bool backtracking = true; // false: fixed step `gamma`
  double gamma = 1.0;

  void validate() const;
};

/// -logdet Θ + <S, Θ> + λ Σ_{i≠j} |Θ_ij|.
double glasso_objective(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& s, double lambda);

/// ST_{γλ}(θ₁₂ - γ (s₁₂ - w₁₂)).
Eigen::VectorXd block_gista_step(const BlockView<double>& theta, const Eigen::VectorXd& s12,
                                 const Eigen::VectorXd& w12, double gamma, double lambda);

struct GlassoResult {
  Eigen::MatrixXd theta;
  int sweeps = 0;
  std::vector<double> objective;  // after each sweep, initial value first
};

/// Starts from (S + I)⁻¹ unless `init` is given.
GlassoResult glasso_solve(const Eigen::MatrixXd& s, const GlassoConfig& cfg,
                          const Eigen::MatrixXd* init = nullptr);

/// Largest violation of the stationarity conditions at Θ (exact zeros are
/// treated as off-support).
double kkt_residual(const Eigen::MatrixXd& theta, const Eigen::MatrixXd& s, double lambda);

/// `count` values log-spaced over [0.01, 1] · max_{i≠j} |S_ij|, ascending.
std::vector<double> default_lambda_grid(const Eigen::MatrixXd& s, int count = 10);

/// XᵀX / n for centred samples (rows of x).
Eigen::MatrixXd empirical_covariance(const Eigen::MatrixXd& x);

struct GlassoCvResult {
  double lambda = 0.0;
  Eigen::MatrixXd theta;
  std::vector<double> scores;  // mean held-out NLL per grid value
};

/// K-fold CV on contiguous folds scoring -logdet Θ + <S_holdout, Θ>; ties go
/// to the larger λ; refit on all rows.
GlassoCvResult glasso_cv(const Eigen::MatrixXd& samples, std::vector<double> lambda_grid = {},
                         int folds = 5, GlassoConfig base = {});

struct ShrinkageResult {
  double shrinkage = 0.0;
  Eigen::MatrixXd covariance;
  Eigen::MatrixXd precision;
};

ShrinkageResult ledoit_wolf(const Eigen::MatrixXd& samples);
ShrinkageResult oas(const Eigen::MatrixXd& samples);
/// OAS needs only S and n.
ShrinkageResult oas(const Eigen::MatrixXd& s, Eigen::Index n);

}  // namespace spodnet
