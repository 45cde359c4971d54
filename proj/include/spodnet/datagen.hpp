#pragma once

// Synthetic sparse precision matrices, Gaussian sampling and the on-disk
// dataset format.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "spodnet/random.hpp"

namespace spodnet {

inline constexpr std::string_view kDatasetFormat = "SPODNET-DS-1";

struct GenConfig {
  Eigen::Index p = 20;
  Eigen::Index n = 100;
  Eigen::Index num = 10;
  double alpha = 0.95;
  double diag_boost = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DatasetEntry {
  Eigen::MatrixXd theta_true;
  Eigen::MatrixXd s;
  std::optional<Eigen::MatrixXd> samples;  // n x p, kept on request
};

struct Dataset {
  GenConfig config;
  std::vector<DatasetEntry> entries;

  bool has_samples() const;
};

/// P(LᵀL)Pᵀ + diag_boost·I with L unit-lower (diagonal -1) and strictly lower
/// entries zero w.p. alpha, else -U[0.1, 0.9].
Eigen::MatrixXd make_sparse_spd(Eigen::Index p, double alpha, double diag_boost, Rng& rng);

/// n draws of N(0, Θ⁻¹), one per row.
Eigen::MatrixXd sample_gaussian(const Eigen::MatrixXd& theta, Eigen::Index n, Rng& rng);

/// (1/n) Σ x xᵀ of `n` draws from N(0, Θ⁻¹).
Eigen::MatrixXd sample_covariance(const Eigen::MatrixXd& theta, Eigen::Index n, Rng& rng);

/// Entry i uses child_rng(seed, i).
Dataset build_dataset(const GenConfig& cfg, bool keep_samples = false);

void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace spodnet
