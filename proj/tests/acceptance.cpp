// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fail.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "spodnet/baselines.hpp"
#include "spodnet/datagen.hpp"
#include "spodnet/layer.hpp"
#include "spodnet/models.hpp"
#include "spodnet/training.hpp"

using namespace spodnet;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Dataset make_data(Index p, Index n, Index num, double alpha, std::uint64_t seed, bool samples = false) {
  GenConfig g;
  g.p = p;
  g.n = n;
  g.num = num;
  g.alpha = alpha;
  g.seed = seed;
  return build_dataset(g, samples);
}

std::vector<MatrixXd> truths_of(const Dataset& ds) {
  std::vector<MatrixXd> out;
  for (const auto& e : ds.entries) out.push_back(e.theta_true);
  return out;
}

double row_sum_norm(const MatrixXd& m) { return m.cwiseAbs().rowwise().sum().maxCoeff(); }

// Shared p=20, n=100 UBG run used by criteria 5, 8 and 9.
struct SparseRun {
  Dataset train, test;
  ModelParams init, trained;
  std::vector<MetricsRow> history;
};

const SparseRun& sparse_run() {
  static const SparseRun run = [] {
    SparseRun r;
    r.train = make_data(20, 100, 1000, 0.95, 1001);
    r.test = make_data(20, 100, 100, 0.95, 2002, true);
    r.init = init_params(Variant::Ubg, 20, 0);
    TrainConfig cfg;
    cfg.lr = 1e-2;
    cfg.batch_size = 10;
    cfg.epochs = 100;
    const TrainResult tr = train(r.init, r.train, r.test, {}, cfg);
    r.trained = tr.params;
    r.history = tr.history;
    return r;
  }();
  return run;
}

// ---- property suite --------------------------------------------------------------

Outcome spd_preservation() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> log_u(-3.0, 3.0), log_v(-6.0, 0.0), log_eig(-2.0, 2.0);
  long failures = 0, total = 0;
  for (const Index p : {3, 8, 20, 50}) {
    for (int k = 0; k < 2500; ++k) {
      const MatrixXd theta = oracle::random_spd(p, rng, std::pow(10.0, -std::abs(log_eig(rng))),
                                                std::pow(10.0, std::abs(log_eig(rng))));
      const Index i = static_cast<Index>(rng() % static_cast<std::uint64_t>(p));
      const auto view = extract_block(theta, i);
      const MatrixXd m = oracle::gauss_jordan_inverse(view.a11);
      VectorXd u = oracle::random_vector(p - 1, rng);
      u *= std::pow(10.0, log_u(rng)) / u.norm();
      const double v = std::pow(10.0, log_v(rng));
      const MatrixXd next = assemble_theta_plus<double>(view, u, v, m);
      failures += !oracle::cholesky_ok(next);
      ++total;
    }
  }
  const double secs = seconds_since(t0);
  return {failures == 0 && secs < 60.0,
          fmt("%ld/%ld failures, %.1fs", failures, total, secs)};
}

Outcome inverse_maintenance() {
  const Dataset ds = make_data(50, 100, 100, 0.95, 77);
  const ModelParams params = init_params(Variant::Ubg, 50, 3);
  long failures = 0, checks = 0;
  double worst = 0.0;
  for (const auto& e : ds.entries) {
    predict(params, e.s, {}, [&](const ColumnUpdate& up) {
      const double cond = eig_diagnostics(up.theta_after).cond;
      const double err = row_sum_norm(up.theta_after * up.w_after - MatrixXd::Identity(50, 50));
      worst = std::max(worst, err / cond);
      failures += !(err <= 1e-8 * cond);
      ++checks;
    });
  }
  return {failures == 0 && checks == 100 * 50,
          fmt("%ld/%ld failures over 100 passes, max err/cond %.2e", failures, checks, worst)};
}

Outcome theta11_formula() {
  std::mt19937_64 rng(3);
  double worst = 0.0;
  int count = 0;
  for (const Index p : {5, 20, 50}) {
    for (int k = 0; k < 334; ++k) {
      const MatrixXd theta = oracle::random_spd(p, rng, 0.1, 10.0);
      const Index i = static_cast<Index>(rng() % static_cast<std::uint64_t>(p));
      const MatrixXd w = oracle::gauss_jordan_inverse(theta);
      const MatrixXd ref = oracle::gauss_jordan_inverse(extract_block(theta, i).a11);
      const MatrixXd got = theta11_inverse(extract_block(w, i));
      worst = std::max(worst, (got - ref).norm() / ref.norm());
      ++count;
    }
  }
  return {worst <= 1e-9 && count >= 1000, fmt("%d instances, max rel err %.2e", count, worst)};
}

Outcome gradient_correctness() {
  const Dataset ds = make_data(6, 20, 2, 0.8, 4);
  double worst = 0.0;
  std::string per;
  for (Variant v : {Variant::Ubg, Variant::Pnp, Variant::E2e}) {
    const ModelParams params = init_params(v, 6, 11);
    for (TapeMode mode : {TapeMode::Detached, TapeMode::Full}) {
      LayerConfig layer;
      layer.tape_mode = mode;
      const ad::ScalarFn loss = [&](ad::Tape& t, std::span<const ad::Tensor> leaves) {
        const BoundModel model(params, leaves);
        ad::Tensor total;
        for (const auto& e : ds.entries) {
          const SpdState out = spodnet_forward(t, e.s, model.update_fns(), layer);
          const ad::Tensor l = mse_loss(out.theta, e.theta_true);
          total = total.valid() ? total + l : l;
        }
        return total;
      };
      const double err = ad::finite_diff_check(loss, params.values(), 1e-6);
      worst = std::max(worst, err);
      per += fmt(" %s/%s=%.1e", std::string(to_string(v)).c_str(),
                 mode == TapeMode::Detached ? "detached" : "full", err);
    }
  }
  return {worst <= 1e-5, "max rel err" + per};
}

Outcome rank2_and_bauer_fike() {
  std::mt19937_64 rng(5);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Index p = 2 + k % 12;
    const Index i = static_cast<Index>(rng() % static_cast<std::uint64_t>(p));
    BlockView<double> b = extract_block(MatrixXd::Zero(p, p), i);
    b.a12 = oracle::random_vector(p - 1, rng, std::pow(10.0, k % 5 - 2));
    b.a22 = oracle::random_vector(1, rng, 3.0)(0);
    const VectorXd ev = oracle::jacobi_eigenvalues(embed_block(b));
    const Rank2Eigs r = rank2_delta_eigs(b.a12, b.a22);
    worst = std::max({worst, std::abs(r.plus - ev(p - 1)), std::abs(r.minus - ev(0))});
  }
  const SparseRun& run = sparse_run();
  long updates = 0, violations = 0;
  for (const ModelParams* params : {&run.init, &run.trained}) {
    for (const Dataset* ds : {&run.train, &run.test}) {
      for (std::size_t k = 0; k < ds->entries.size(); k += ds == &run.train ? 10 : 1) {
        predict(*params, ds->entries[k].s, {}, [&](const ColumnUpdate& up) {
          const MatrixXd d = up.theta_after - up.theta_before;
          VectorXd col(d.rows() - 1);
          for (Index r = 0; r < col.size(); ++r) col(r) = d(skip_index(r, up.pivot), up.pivot);
          const double op = rank2_delta_eigs(col, d(up.pivot, up.pivot)).op_norm();
          violations += !bauer_fike_check(up.theta_before, up.theta_after, op).holds;
          ++updates;
        });
      }
    }
  }
  return {worst <= 1e-10 && violations == 0,
          fmt("rank-2 max err %.1e over 1000; Bauer-Fike %ld violations in %ld updates", worst,
              violations, updates)};
}

Outcome stabilizer() {
  // (a) the scaled preactivation has Θ₁₁⁻¹-quadratic form ζ
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Index q = 2 + k % 30;
    const MatrixXd m = oracle::random_spd(q, rng, 1e-2, 1e2);
    const VectorXd z = oracle::random_vector(q, rng, std::pow(10.0, k % 7 - 3));
    const double zeta = std::pow(10.0, (k % 5) - 2.0);
    if (z.dot(m * z) <= kStabilizerGuard) continue;
    const VectorXd s = stabilize_preactivation<double>(z, m, zeta);
    worst = std::max(worst, std::abs(s.dot(m * s) - zeta));
  }
  const Dataset probe = make_data(8, 40, 3, 0.8, 60);
  const ModelParams small = init_params(Variant::Ubg, 8, 1);
  LayerConfig lc;
  lc.zeta = 0.4;
  for (const auto& e : probe.entries) {
    ad::Tape t;
    const BoundModel bm(t, small, false);
    UpdateFns fns = bm.update_fns();
    const auto inner = fns.f;
    fns.f = [&](const ColumnContext& ctx) {
      const ad::Tensor z = gista_gradient_step(ctx.theta12(), ctx.s12(), ctx.w12(), bm.gamma_net()(ctx.theta12()));
      if (ctx.schur_quadratic(z).item() > kStabilizerGuard) {
        worst = std::max(worst, std::abs(ctx.schur_quadratic(ctx.stabilize(z)).item() - lc.zeta));
      }
      return inner(ctx);
    };
    spodnet_forward(t, e.s, fns, lc);
  }

  // (b) conditioning over a p=30 run with ζ=1; (c) blow-up without the rescaling
  const Dataset tr = make_data(30, 100, 200, 0.95, 3001);
  const Dataset te = make_data(30, 100, 50, 0.95, 3002);
  TrainConfig cfg;
  cfg.epochs = 30;
  LayerConfig on;
  const TrainResult stab = train(init_params(Variant::Ubg, 30, 0), tr, te, on, cfg);
  double cmax = 0.0, cmin = 1e300;
  for (const auto& row : stab.history) {
    cmax = std::max(cmax, row.max_cond);
    cmin = std::min(cmin, row.max_cond);
  }
  const double ratio = cmax / cmin;

  // Per-update spectra on the test set at initialisation and after every
  // epoch. Readings are kept only while the largest eigenvalue is <= 1e8, so
  // eigensolver roundoff on overflowing matrices cannot pass for a decay.
  LayerConfig off;
  off.stabilize = false;
  int blowups = 0;
  double lowest = 1e300;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    double low = 1e300;
    auto audit = [&](const ModelParams& params) {
      for (const auto& e : te.entries) {
        try {
          predict(params, e.s, off, [&](const ColumnUpdate& up) {
            if (!up.theta_after.allFinite()) return;
            const SpectrumSummary s = eig_diagnostics(up.theta_after);
            if (s.max_eig <= 1e8) low = std::min(low, s.min_eig);
          });
        } catch (const std::exception&) {
          // the pass broke down after the readings already taken
        }
      }
    };
    const ModelParams init = init_params(Variant::Ubg, 30, seed);
    audit(init);
    cfg.seed = seed;
    try {
      train(init, tr, te, off, cfg, [&](const MetricsRow&, const ModelParams& p) { audit(p); });
    } catch (const std::exception&) {
      // training cannot continue once a forward pass overflows
    }
    lowest = std::min(lowest, low);
    blowups += low < 1e-6;
  }
  return {worst <= 1e-10 && ratio <= 1e3 && blowups >= 1,
          fmt("quad err %.1e; cond ratio %.2f (zeta=1); unstabilised min eig %.2e, %d/5 seeds below 1e-6",
              worst, ratio, lowest, blowups)};
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(7);
  double step_err = 0.0;
  for (int k = 0; k < 500; ++k) {
    const Index p = 3 + k % 12;
    const MatrixXd theta = oracle::random_spd(p, rng);
    const MatrixXd w = oracle::gauss_jordan_inverse(theta);
    const MatrixXd s = oracle::random_spd(p, rng);
    const Index i = k % p;
    const auto view = extract_block(theta, i);
    const VectorXd s12 = extract_block(s, i).a12, w12 = extract_block(w, i).a12;
    const double gamma = 0.05 + (k % 17) * 0.1, lambda = 0.01 + (k % 13) * 0.05;
    ad::Tape t;
    const ColumnInputs in{t.vector(view.a12), t.vector(s12), t.vector(w12), {}};
    const VectorXd u = f_ubg(in, [&](const ad::Tensor&) { return t.scalar(gamma); },
                             [&](const ad::Tensor&) { return t.scalar(gamma * lambda); })
                           .value();
    step_err = std::max(step_err, (u - block_gista_step(view, s12, w12, gamma, lambda)).cwiseAbs().maxCoeff());
  }
  double mle_err = 0.0, kkt = 0.0;
  for (const Index p : {5, 10}) {
    const MatrixXd x = oracle::random_matrix(4 * p, p, rng);
    const MatrixXd s = x.transpose() * x / static_cast<double>(4 * p);
    GlassoConfig cfg;
    cfg.lambda = 0.0;
    const MatrixXd inv = oracle::gauss_jordan_inverse(s);
    mle_err = std::max(mle_err, (glasso_solve(s, cfg).theta - inv).norm() / inv.norm());
    for (const double lambda : {0.05, 0.1, 0.5}) {
      cfg.lambda = lambda;
      kkt = std::max(kkt, oracle::kkt_violation(glasso_solve(s, cfg).theta, s, lambda));
    }
  }
  return {step_err <= 1e-12 && mle_err <= 1e-4 && kkt <= 1e-6,
          fmt("step err %.1e; lambda=0 rel err %.1e; max KKT %.1e", step_err, mle_err, kkt)};
}

Outcome sparsity_and_spd() {
  const SparseRun& run = sparse_run();
  const auto preds = predict_all(run.trained, run.test, {});
  int bad = 0;
  double least = 1.0;
  for (const auto& m : preds) {
    const double z = exact_zero_fraction(m);
    least = std::min(least, z);
    bad += !(z >= 0.01 && oracle::cholesky_ok(m));
  }
  return {bad == 0, fmt("%d/%zu outputs fail; min exact-zero fraction %.3f", bad, preds.size(), least)};
}

// ---- desk-scale reproductions ------------------------------------------------------

Outcome sparse_ordering() {
  const auto t0 = Clock::now();
  const SparseRun& run = sparse_run();
  const auto truths = truths_of(run.test);
  const double ubg = nmse(predict_all(run.trained, run.test, {}), truths);
  const double ubg_f1 = evaluate_estimates(predict_all(run.trained, run.test, {}), truths).f1;
  std::vector<MatrixXd> lw, oa, cv;
  for (const auto& e : run.test.entries) {
    lw.push_back(ledoit_wolf(*e.samples).precision);
    oa.push_back(oas(*e.samples).precision);
    cv.push_back(glasso_cv(*e.samples).theta);
  }
  const double lw_n = nmse(lw, truths), oas_n = nmse(oa, truths);
  const double cv_f1 = evaluate_estimates(cv, truths).f1;
  return {ubg < lw_n && ubg < oas_n && ubg_f1 >= cv_f1 - 0.05,
          fmt("UBG nmse %.4f vs LW %.4f, OAS %.4f; UBG F1 %.3f vs GLasso-CV F1 %.3f (%.0fs)", ubg, lw_n,
              oas_n, ubg_f1, cv_f1, seconds_since(t0))};
}

Outcome moderate_sample_f1() {
  const Dataset tr = make_data(20, 500, 1000, 0.95, 4001);
  const Dataset te = make_data(20, 500, 100, 0.95, 4002);
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 200;
  cfg.batch_size = 5;
  const TrainResult r = train(init_params(Variant::Ubg, 20, 0), tr, te, {}, cfg);
  const Evaluation ev = evaluate_estimates(predict_all(r.params, te, {}), truths_of(te));
  return {ev.f1 >= 0.70, fmt("UBG F1 %.3f, nmse %.4f", ev.f1, ev.nmse)};
}

Outcome weakly_sparse_shrinkage() {
  const Dataset te = make_data(100, 100, 20, 0.7, 5001, true);
  std::vector<MatrixXd> lw, oa;
  for (const auto& e : te.entries) {
    lw.push_back(ledoit_wolf(*e.samples).precision);
    oa.push_back(oas(e.s, 100).precision);
  }
  const auto truths = truths_of(te);
  const double lw_n = nmse(lw, truths), oas_n = nmse(oa, truths);
  return {lw_n >= 0.75 && oas_n >= 0.75, fmt("LW nmse %.3f, OAS nmse %.3f", lw_n, oas_n)};
}

Outcome large_sample_floor() {
  const Dataset tr = make_data(20, 5000, 1000, 0.95, 6001);
  const Dataset te = make_data(20, 5000, 100, 0.95, 6002);
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.epochs = 100;
  // best of three UBG initialisations
  double best = 1e300;
  std::string detail = "UBG nmse by init seed:";
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    cfg.seed = seed;
    const TrainResult r = train(init_params(Variant::Ubg, 20, seed), tr, te, {}, cfg);
    const double err = nmse(predict_all(r.params, te, {}), truths_of(te));
    best = std::min(best, err);
    detail += fmt(" %.4f", err);
  }
  return {best <= 0.05, detail + fmt("; best %.4f", best)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"1 SPD preservation", spd_preservation},
      {"2 inverse maintenance", inverse_maintenance},
      {"3 theta11 inverse formula", theta11_formula},
      {"4 gradient correctness", gradient_correctness},
      {"5 rank-2 eigenvalues and Bauer-Fike audit", rank2_and_bauer_fike},
      {"6 stabilizer", stabilizer},
      {"7 oracle equivalence", oracle_equivalence},
      {"8 exact sparsity with SPD", sparsity_and_spd},
      {"9 strongly sparse ordering (n=100)", sparse_ordering},
      {"10 support recovery at n=500", moderate_sample_f1},
      {"11 shrinkage at p=100 weakly sparse", weakly_sparse_shrinkage},
      {"12 large-sample floor (n=5000)", large_sample_floor},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << name << "  [" << o.detail << "]" << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
