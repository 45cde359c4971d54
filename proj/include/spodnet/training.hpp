#pragma once

// Training loop (MSE + ADAM) and evaluation metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

#include "spodnet/datagen.hpp"
#include "spodnet/layer.hpp"
#include "spodnet/models.hpp"
#include "spodnet/tensor.hpp"

namespace spodnet {

inline constexpr double kSupportTol = 1e-8;

// ---- metrics ----------------------------------------------------------------------

/// ‖pred - truth‖²_F on the tape.
ad::Tensor mse_loss(const ad::Tensor& pred, const Eigen::MatrixXd& truth);

/// ‖pred - truth‖²_F / ‖truth‖²_F.
double relative_error(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth);
/// Mean relative error over the pairs.
double nmse(const std::vector<Eigen::MatrixXd>& preds, const std::vector<Eigen::MatrixXd>& truths);

/// F1 of the off-diagonal supports {|x| > zero_tol}; 1 when both are empty.
double f1_support(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth,
                  double zero_tol = kSupportTol);

/// Fraction of off-diagonal entries with |x| > zero_tol.
double density(const Eigen::MatrixXd& m, double zero_tol = kSupportTol);

/// Fraction of off-diagonal entries that are exactly zero.
double exact_zero_fraction(const Eigen::MatrixXd& m);

struct SampleMetrics {
  double nmse = 0.0;
  double f1 = 0.0;
  double min_eig = 0.0;
  double cond = 0.0;
  double density = 0.0;
  bool spd = false;  // strict Cholesky succeeds
};

struct Evaluation {
  std::vector<SampleMetrics> samples;
  double nmse = 0.0;
  double f1 = 0.0;
  double min_eig = 0.0;   // min over samples
  double max_cond = 0.0;
  double mean_density = 0.0;
  bool all_spd = true;
};

Evaluation evaluate_estimates(const std::vector<Eigen::MatrixXd>& preds,
                              const std::vector<Eigen::MatrixXd>& truths);

/// Runs `params` on every entry of `ds` (in parallel when threads > 1).
std::vector<Eigen::MatrixXd> predict_all(const ModelParams& params, const Dataset& ds,
                                         const LayerConfig& layer, int threads = 1);

// ---- optimisation ---------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-2;
  int batch_size = 10;
  int epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct AdamState {
  std::vector<Eigen::MatrixXd> m, v;
  long step = 0;
};

/// One ADAM update in place; moments are created on first use.
void adam_step(std::vector<Eigen::MatrixXd>& params, const std::vector<Eigen::MatrixXd>& grads,
               AdamState& state, const TrainConfig& cfg);

struct MetricsRow {
  int epoch = 0;
  double train_mse = 0.0;
  double test_nmse = 0.0;
  double test_f1 = 0.0;
  double min_eig = 0.0;
  double max_cond = 0.0;
  double mean_density = 0.0;
};

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);

struct BatchResult {
  double loss = 0.0;                    // mean over the batch
  std::vector<Eigen::MatrixXd> grads;   // mean over the batch, named() order
};

/// Mean MSE and its gradient over entries `indices` of `ds`. Per-sample tapes
/// run concurrently; the reduction follows `indices` order.
BatchResult batch_gradient(const ModelParams& params, const Dataset& ds,
                           const std::vector<std::size_t>& indices, const LayerConfig& layer,
                           int threads = 1);

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> history;
};

using EpochCallback = std::function<void(const MetricsRow&, const ModelParams&)>;

/// Shuffled mini-batch ADAM; one MetricsRow on the full test set per epoch.
/// SpdViolation from a forward pass is rethrown naming the sample index.
TrainResult train(ModelParams params, const Dataset& train_ds, const Dataset& test_ds,
                  const LayerConfig& layer, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// ---- spectral diagnostics ----------------------------------------------------------

struct SpectralRow {
  double min_eig = 0.0;
  double max_diag = 0.0;
  double cond = 0.0;
};

std::vector<SpectralRow> spectral_trace(const std::vector<Eigen::MatrixXd>& snapshots);

/// Calls fn(i) for i in [0, n) on up to `threads` workers; the first
/// exception (lowest index) is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace spodnet
