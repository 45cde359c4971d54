#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "oracles.hpp"
#include "spodnet/linalg.hpp"
#include "spodnet/tensor.hpp"

using namespace spodnet;
using ad::Tape;
using ad::Tensor;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Weighted sum of a tensor so every output entry carries a distinct adjoint.
Tensor reduce(Tape& t, const Tensor& x, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  return ad::sum(x * t.constant(oracle::random_matrix(x.rows(), x.cols(), rng)));
}

// Compares autodiff gradients of f with central differences computed
// entry-by-entry from plain forward evaluations.
void expect_gradients(const ad::ScalarFn& f, const std::vector<MatrixXd>& params,
                      double tol = 1e-6) {
  const ad::ValueAndGrad vg = ad::value_and_grad(f, params);
  ASSERT_EQ(vg.grads.size(), params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto eval_k = [&](const MatrixXd& x) {
      std::vector<MatrixXd> probe = params;
      probe[k] = x;
      Tape t;
      std::vector<Tensor> leaves;
      for (const auto& p : probe) leaves.push_back(t.leaf(p, false));
      return f(t, leaves).item();
    };
    const MatrixXd fd = oracle::central_gradient(eval_k, params[k]);
    ASSERT_EQ(vg.grads[k].rows(), fd.rows());
    for (Eigen::Index i = 0; i < fd.size(); ++i) {
      EXPECT_NEAR(vg.grads[k](i), fd(i), tol * std::max(1.0, std::abs(fd(i))))
          << "param " << k << " entry " << i;
    }
  }
}

class TensorGrad : public ::testing::Test {
 protected:
  std::mt19937_64 rng{2024};
  MatrixXd mat(int r, int c) { return oracle::random_matrix(r, c, rng); }
};

}  // namespace

TEST_F(TensorGrad, Matmul) {
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::matmul(p[0], p[1])); },
                   {mat(3, 4), mat(4, 2)});
}

TEST_F(TensorGrad, AddSubWithScalarBroadcast) {
  expect_gradients([](Tape& t, auto p) { return reduce(t, p[0] + p[1] - p[2]); },
                   {mat(3, 3), mat(3, 3), mat(1, 1)});
  expect_gradients([](Tape& t, auto p) { return reduce(t, p[2] - p[0]); }, {mat(2, 3), mat(1, 1), mat(1, 1)});
}

TEST_F(TensorGrad, ElementwiseAndScalarProduct) {
  expect_gradients([](Tape& t, auto p) { return reduce(t, p[0] * p[1]); }, {mat(3, 2), mat(3, 2)});
  expect_gradients([](Tape& t, auto p) { return reduce(t, p[1] * p[0]); }, {mat(3, 2), mat(1, 1)});
  expect_gradients([](Tape& t, auto p) { return reduce(t, 2.5 * -p[0]); }, {mat(2, 2)});
}

TEST_F(TensorGrad, ReluAndAbsAwayFromKink) {
  MatrixXd x = mat(4, 3);
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    if (std::abs(x(k)) < 0.1) x(k) = 0.5;
  }
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::relu(p[0])); }, {x});
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::abs(p[0])); }, {x});
}

TEST_F(TensorGrad, SqrtAndReciprocal) {
  const MatrixXd x = mat(3, 2).cwiseAbs().array() + 0.5;
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::sqrt(p[0])); }, {x});
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::reciprocal(p[0])); }, {x});
}

TEST_F(TensorGrad, Reductions) {
  expect_gradients([](Tape&, auto p) { return ad::dot(p[0], p[1]); }, {mat(5, 1), mat(5, 1)});
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::outer(p[0], p[1])); }, {mat(4, 1), mat(3, 1)});
  expect_gradients([](Tape&, auto p) { return ad::quadratic_form(p[0], p[1]); }, {mat(4, 1), mat(4, 4)});
  expect_gradients([](Tape&, auto p) { return ad::squared_norm(p[0]); }, {mat(3, 3)});
  expect_gradients([](Tape&, auto p) { return ad::sum(p[0]); }, {mat(3, 2)});
}

TEST_F(TensorGrad, SoftThresholdVectorAndScalarThreshold) {
  const MatrixXd x = (VectorXd(5) << 1.5, -0.2, 0.9, -2.0, 0.05).finished();
  const MatrixXd gv = (VectorXd(5) << 0.3, 0.5, 0.4, 0.1, 0.6).finished();
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::soft_threshold(p[0], p[1])); }, {x, gv});
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::soft_threshold(p[0], p[1])); },
                   {x, MatrixXd::Constant(1, 1, 0.35)});
}

TEST_F(TensorGrad, SpdInverseAlongSymmetricDirections) {
  std::mt19937_64 r(5);
  const MatrixXd a = oracle::random_spd(4, r);
  const MatrixXd weights = mat(4, 4);
  auto loss = [&](const MatrixXd& x) {
    return oracle::gauss_jordan_inverse(x).cwiseProduct(weights).sum();
  };
  Tape t;
  const Tensor x = t.leaf(a);
  t.backward(ad::sum(ad::spd_inverse(x) * t.constant(weights)));
  const double h = 1e-6;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j <= i; ++j) {
      MatrixXd e = MatrixXd::Zero(4, 4);
      e(i, j) = e(j, i) = 1.0;
      const double fd = (loss(a + h * e) - loss(a - h * e)) / (2.0 * h);
      const double ad_dir = x.grad().cwiseProduct(e).sum();
      EXPECT_NEAR(ad_dir, fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_F(TensorGrad, PartitionOps) {
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::column_without(p[0], 2)); }, {mat(4, 4)});
  expect_gradients([](Tape& t, auto p) { return reduce(t, ad::block_without(p[0], 1)); }, {mat(4, 4)});
  expect_gradients([](Tape&, auto p) { return ad::entry(p[0], 2, 1); }, {mat(3, 3)});
  expect_gradients(
      [](Tape& t, auto p) { return reduce(t, ad::with_column_row(p[0], 1, p[1], p[2])); },
      {mat(4, 4), mat(3, 1), mat(1, 1)});
  expect_gradients(
      [](Tape& t, auto p) { return reduce(t, ad::assemble(p[0], p[1], p[2], 0)); },
      {mat(3, 3), mat(3, 1), mat(1, 1)});
  expect_gradients(
      [](Tape& t, auto p) {
        const Tensor parts[] = {p[0], p[1], p[0]};
        return reduce(t, ad::stack(parts));
      },
      {mat(1, 1), mat(1, 1)});
}

TEST(Tensor, SoftThresholdExamples) {
  Tape t;
  const Tensor x = t.vector((VectorXd(3) << 3.0, -0.5, 1.0).finished());
  const VectorXd out = ad::soft_threshold(x, t.scalar(1.0)).value().col(0);
  EXPECT_EQ(out(0), 2.0);
  EXPECT_EQ(out(1), 0.0);
  EXPECT_EQ(out(2), 0.0);  // exact zero at |x| == threshold
  EXPECT_THROW(ad::soft_threshold(x, t.scalar(-0.1)), DomainError);
}

TEST(Tensor, AbsHasZeroSubgradientAtKink) {
  Tape t;
  const Tensor x = t.leaf(MatrixXd::Zero(2, 1));
  t.backward(ad::sum(ad::abs(x)));
  EXPECT_EQ(x.grad().norm(), 0.0);
}

TEST(Tensor, BackwardRequiresScalarLoss) {
  Tape t;
  const Tensor x = t.leaf(MatrixXd::Ones(2, 2));
  EXPECT_THROW(t.backward(x * x), ContractError);
}

TEST(Tensor, RepeatedBackwardAccumulatesLeafGradients) {
  Tape t;
  const Tensor x = t.leaf(MatrixXd::Constant(1, 1, 3.0));
  const Tensor y = x * x;
  t.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 6.0);
  t.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 12.0);
  t.zero_grad();
  t.backward(y);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 6.0);
}

TEST(Tensor, ConstantsDoNotNeedGradients) {
  Tape t;
  const Tensor c = t.constant(MatrixXd::Ones(2, 2));
  const Tensor x = t.leaf(MatrixXd::Ones(2, 2));
  EXPECT_FALSE((c * c).requires_grad());
  EXPECT_TRUE((c * x).requires_grad());
}

TEST(Tensor, DomainAndShapeErrors) {
  Tape t;
  const Tensor neg = t.leaf(MatrixXd::Constant(1, 1, -1.0));
  EXPECT_THROW(ad::sqrt(neg), DomainError);
  EXPECT_THROW(ad::reciprocal(t.leaf(MatrixXd::Zero(1, 1))), DomainError);
  EXPECT_THROW(ad::matmul(t.leaf(MatrixXd::Ones(2, 3)), t.leaf(MatrixXd::Ones(2, 3))), DimensionError);
  EXPECT_THROW(t.leaf(MatrixXd::Ones(2, 3)) + t.leaf(MatrixXd::Ones(3, 2)), DimensionError);
  Tape other;
  EXPECT_ANY_THROW(t.leaf(MatrixXd::Ones(1, 1)) + other.leaf(MatrixXd::Ones(1, 1)));
}

TEST(Tensor, FiniteDiffCheckAgreesAndValidatesStep) {
  std::mt19937_64 rng(3);
  const std::vector<MatrixXd> params = {oracle::random_spd(3, rng), oracle::random_matrix(3, 1, rng)};
  const ad::ScalarFn f = [](Tape&, std::span<const Tensor> p) {
    return ad::quadratic_form(p[1], p[0]);
  };
  EXPECT_LE(ad::finite_diff_check(f, params, 1e-6), 1e-6);
  EXPECT_THROW(ad::finite_diff_check(f, params, 0.0), DomainError);
}

TEST(Tensor, SpdInverseValueMatchesGaussJordan) {
  std::mt19937_64 rng(11);
  const MatrixXd a = oracle::random_spd(6, rng, 0.1, 10.0);
  Tape t;
  const MatrixXd inv = ad::spd_inverse(t.constant(a)).value();
  EXPECT_LE((inv - oracle::gauss_jordan_inverse(a)).norm() / inv.norm(), 1e-12);
}
