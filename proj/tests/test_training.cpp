#include <gtest/gtest.h>

#include <atomic>
#include <numeric>
#include <sstream>

#include "oracles.hpp"
#include "spodnet/training.hpp"

using namespace spodnet;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

Dataset small_dataset(Index p, Index n, Index num, std::uint64_t seed) {
  GenConfig g;
  g.p = p;
  g.n = n;
  g.num = num;
  g.alpha = 0.8;
  g.seed = seed;
  return build_dataset(g);
}

// Largest |autodiff - central difference| / max(1, |fd|) of the batch loss.
double batch_fd_error(const ModelParams& params, const Dataset& ds, const LayerConfig& layer) {
  std::vector<std::size_t> idx(ds.entries.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const BatchResult base = batch_gradient(params, ds, idx, layer);
  const double h = 1e-6;
  double worst = 0.0;
  const std::vector<MatrixXd> values = params.values();
  for (std::size_t k = 0; k < values.size(); ++k) {
    for (Index e = 0; e < values[k].size(); ++e) {
      std::vector<MatrixXd> probe = values;
      ModelParams m = params;
      probe[k](e) = values[k](e) + h;
      m.assign(probe);
      const double up = batch_gradient(m, ds, idx, layer).loss;
      probe[k](e) = values[k](e) - h;
      m.assign(probe);
      const double down = batch_gradient(m, ds, idx, layer).loss;
      const double fd = (up - down) / (2.0 * h);
      worst = std::max(worst, std::abs(base.grads[k](e) - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace

TEST(Metrics, MseExamplesAndGradient) {
  std::mt19937_64 rng(41);
  const MatrixXd truth = oracle::random_spd(2, rng);
  ad::Tape t;
  EXPECT_EQ(mse_loss(t.constant(truth), truth).item(), 0.0);
  const ad::Tensor pred = t.leaf(MatrixXd(truth + MatrixXd::Identity(2, 2)));
  const ad::Tensor loss = mse_loss(pred, truth);
  EXPECT_NEAR(loss.item(), 2.0, 1e-14);
  t.backward(loss);
  EXPECT_LE((pred.grad() - 2.0 * MatrixXd::Identity(2, 2)).norm(), 1e-14);
}

TEST(Metrics, NmseExamples) {
  std::mt19937_64 rng(42);
  const std::vector<MatrixXd> truths = {oracle::random_spd(3, rng), oracle::random_spd(3, rng)};
  EXPECT_EQ(nmse(truths, truths), 0.0);
  EXPECT_DOUBLE_EQ(nmse({MatrixXd::Zero(3, 3), MatrixXd::Zero(3, 3)}, truths), 1.0);
  EXPECT_DOUBLE_EQ(nmse({2 * truths[0], 2 * truths[1]}, truths), 1.0);
  EXPECT_THROW(nmse({truths[0]}, truths), DimensionError);
}

TEST(Metrics, F1Examples) {
  MatrixXd truth = MatrixXd::Identity(3, 3);
  truth(0, 1) = truth(1, 0) = 0.4;
  MatrixXd pred = truth;
  EXPECT_EQ(f1_support(pred, truth), 1.0);
  pred(0, 2) = pred(2, 0) = -0.1;
  EXPECT_NEAR(f1_support(pred, truth), 2.0 / 3.0, 1e-15);
  EXPECT_EQ(f1_support(MatrixXd::Identity(3, 3), truth), 0.0);
  EXPECT_EQ(f1_support(MatrixXd::Identity(3, 3), MatrixXd::Identity(3, 3)), 1.0);
  // entries below the tolerance count as zeros
  pred = truth;
  pred(1, 2) = pred(2, 1) = 1e-9;
  EXPECT_EQ(f1_support(pred, truth), 1.0);
}

TEST(Metrics, DensityAndExactZeros) {
  MatrixXd m = MatrixXd::Identity(3, 3);
  m(0, 1) = m(1, 0) = 0.5;
  m(0, 2) = m(2, 0) = 1e-9;
  EXPECT_NEAR(density(m), 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(exact_zero_fraction(m), 2.0 / 6.0, 1e-15);
  EXPECT_EQ(exact_zero_fraction(MatrixXd::Identity(4, 4)), 1.0);
}

TEST(Metrics, EvaluateAggregates) {
  std::mt19937_64 rng(43);
  const std::vector<MatrixXd> truths = {oracle::random_spd(4, rng), oracle::random_spd(4, rng)};
  const std::vector<MatrixXd> preds = {truths[0], 0.5 * truths[1]};
  const Evaluation ev = evaluate_estimates(preds, truths);
  ASSERT_EQ(ev.samples.size(), 2u);
  EXPECT_NEAR(ev.nmse, 0.125, 1e-14);
  EXPECT_TRUE(ev.all_spd);
  EXPECT_NEAR(ev.min_eig, std::min(oracle::jacobi_eigenvalues(preds[0])(0),
                                   oracle::jacobi_eigenvalues(preds[1])(0)), 1e-12);
  MatrixXd bad = MatrixXd::Identity(4, 4);
  bad(3, 3) = -1.0;
  EXPECT_FALSE(evaluate_estimates({bad}, {truths[0]}).all_spd);
}

TEST(Adam, FirstStepAndZeroGradient) {
  TrainConfig cfg;
  cfg.lr = 0.01;
  std::vector<MatrixXd> params = {(MatrixXd(1, 3) << 1.0, 2.0, 3.0).finished()};
  const std::vector<MatrixXd> grads = {(MatrixXd(1, 3) << 0.5, -4.0, 0.0).finished()};
  AdamState st;
  adam_step(params, grads, st, cfg);
  EXPECT_NEAR(params[0](0), 1.0 - 0.01, 1e-8);
  EXPECT_NEAR(params[0](1), 2.0 + 0.01, 1e-8);
  EXPECT_EQ(params[0](2), 3.0);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, QuadraticBowl) {
  TrainConfig cfg;
  cfg.lr = 0.1;
  std::vector<MatrixXd> theta = {MatrixXd::Constant(1, 1, 1.0)};
  AdamState st;
  for (int k = 0; k < 200; ++k) adam_step(theta, {theta[0]}, st, cfg);
  EXPECT_LT(std::abs(theta[0](0)), 1e-2);
}

class LossGradient : public ::testing::TestWithParam<std::tuple<Variant, TapeMode>> {};

TEST_P(LossGradient, MatchesCentralDifferences) {
  const auto [variant, mode] = GetParam();
  const Dataset ds = small_dataset(5, 20, 2, 44);
  LayerConfig layer;
  layer.tape_mode = mode;
  EXPECT_LE(batch_fd_error(init_params(variant, 5, 3), ds, layer), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(AllModels, LossGradient,
                         ::testing::Combine(::testing::Values(Variant::Ubg, Variant::Pnp, Variant::E2e),
                                            ::testing::Values(TapeMode::Detached, TapeMode::Full)));

TEST(Train, ZeroLearningRateFreezesEverything) {
  const Dataset tr = small_dataset(5, 30, 6, 45), te = small_dataset(5, 30, 3, 46);
  const ModelParams init = init_params(Variant::Ubg, 5, 1);
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  const TrainResult r = train(init, tr, te, {}, cfg);
  EXPECT_EQ(r.params.values(), init.values());
  ASSERT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.history[0].test_nmse, r.history[2].test_nmse);
  EXPECT_EQ(r.history[0].train_mse, r.history[2].train_mse);
}

TEST(Train, SmokeRunImprovesAndIsDeterministic) {
  const Dataset tr = small_dataset(10, 50, 20, 47), te = small_dataset(10, 50, 5, 48);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 5;
  cfg.seed = 2;
  int calls = 0;
  const TrainResult a = train(init_params(Variant::Ubg, 10, 0), tr, te, {}, cfg,
                              [&](const MetricsRow&, const ModelParams&) { ++calls; });
  EXPECT_EQ(calls, 5);
  EXPECT_LE(a.history.back().train_mse, a.history.front().train_mse);
  for (const auto& row : a.history) EXPECT_GT(row.min_eig, 0.0);
  cfg.threads = 3;
  const TrainResult b = train(init_params(Variant::Ubg, 10, 0), tr, te, {}, cfg);
  EXPECT_EQ(a.params.values(), b.params.values());
  EXPECT_EQ(a.history.back().test_nmse, b.history.back().test_nmse);
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg;
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  const Dataset tr = small_dataset(5, 10, 2, 1);
  EXPECT_THROW(train(init_params(Variant::Ubg, 6, 0), tr, tr, {}, {}), DimensionError);
}

TEST(Train, MetricsCsvHeader) {
  std::ostringstream out;
  write_metrics_csv(out, {MetricsRow{1, 2.0, 0.5, 0.25, 0.1, 10.0, 0.2}});
  std::istringstream in(out.str());
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "epoch,train_mse,test_nmse,test_f1,min_eig,max_cond,mean_density");
  EXPECT_EQ(row.substr(0, 2), "1,");
}

TEST(Spectral, IdentityTraceAndPositiveMinEig) {
  const auto rows = spectral_trace({MatrixXd::Identity(3, 3), MatrixXd::Identity(3, 3)});
  for (const auto& r : rows) {
    EXPECT_NEAR(r.min_eig, 1.0, 1e-15);
    EXPECT_EQ(r.max_diag, 1.0);
    EXPECT_NEAR(r.cond, 1.0, 1e-15);
  }
  const Dataset ds = small_dataset(6, 30, 1, 49);
  std::vector<MatrixXd> snaps;
  predict(init_params(Variant::Ubg, 6, 0), ds.entries[0].s, {},
          [&](const ColumnUpdate& up) { snaps.push_back(up.theta_after); });
  ASSERT_EQ(snaps.size(), 6u);
  for (const auto& r : spectral_trace(snaps)) EXPECT_GT(r.min_eig, 0.0);
}

TEST(Parallel, RunsEveryIndexAndRethrowsLowest) {
  std::vector<std::atomic<int>> hits(50);
  parallel_for(50, 4, [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  try {
    parallel_for(20, 4, [](std::size_t i) {
      if (i == 7 || i == 13) throw std::runtime_error(std::to_string(i));
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "7");
  }
}
