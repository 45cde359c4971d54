#include "spodnet/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <ostream>
#include <thread>

namespace spodnet {

using Eigen::Index;
using Eigen::MatrixXd;

// ---- metrics ----------------------------------------------------------------------

ad::Tensor mse_loss(const ad::Tensor& pred, const MatrixXd& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw DimensionError("mse_loss: prediction and truth shapes differ");
  }
  return ad::squared_norm(pred - pred.tape().constant(truth));
}

double relative_error(const MatrixXd& pred, const MatrixXd& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw DimensionError("relative_error: shapes differ");
  }
  const double denom = truth.squaredNorm();
  if (!(denom > 0.0)) throw DomainError("relative_error: truth has zero norm");
  return (pred - truth).squaredNorm() / denom;
}

double nmse(const std::vector<MatrixXd>& preds, const std::vector<MatrixXd>& truths) {
  if (preds.empty() || preds.size() != truths.size()) {
    throw DimensionError("nmse: need equally many non-zero predictions and truths");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < preds.size(); ++k) total += relative_error(preds[k], truths[k]);
  return total / static_cast<double>(preds.size());
}

double f1_support(const MatrixXd& pred, const MatrixXd& truth, double zero_tol) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) {
    throw DimensionError("f1_support: shapes differ");
  }
  long tp = 0, fp = 0, fn = 0;
  for (Index i = 0; i < pred.rows(); ++i) {
    for (Index j = 0; j < pred.cols(); ++j) {
      if (i == j) continue;
      const bool p = std::abs(pred(i, j)) > zero_tol;
      const bool t = std::abs(truth(i, j)) > zero_tol;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
  }
  if (tp + fp + fn == 0) return 1.0;
  return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
}

double density(const MatrixXd& m, double zero_tol) {
  const Index p = m.rows();
  if (p < 2) return 0.0;
  long nz = 0;
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < m.cols(); ++j) nz += i != j && std::abs(m(i, j)) > zero_tol;
  }
  return nz / static_cast<double>(p * (p - 1));
}

double exact_zero_fraction(const MatrixXd& m) {
  const Index p = m.rows();
  if (p < 2) return 0.0;
  long zeros = 0;
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < m.cols(); ++j) zeros += i != j && m(i, j) == 0.0;
  }
  return zeros / static_cast<double>(p * (p - 1));
}

Evaluation evaluate_estimates(const std::vector<MatrixXd>& preds,
                              const std::vector<MatrixXd>& truths) {
  if (preds.empty() || preds.size() != truths.size()) {
    throw DimensionError("evaluate_estimates: need equally many predictions and truths");
  }
  Evaluation ev;
  ev.min_eig = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < preds.size(); ++k) {
    SampleMetrics s;
    s.nmse = relative_error(preds[k], truths[k]);
    s.f1 = f1_support(preds[k], truths[k]);
    const SpectrumSummary spec = eig_diagnostics(symmetrize(preds[k]));
    s.min_eig = spec.min_eig;
    s.cond = spec.cond;
    s.density = density(preds[k]);
    s.spd = is_positive_definite(preds[k]);
    ev.nmse += s.nmse;
    ev.f1 += s.f1;
    ev.mean_density += s.density;
    ev.min_eig = std::min(ev.min_eig, s.min_eig);
    ev.max_cond = std::max(ev.max_cond, s.cond);
    ev.all_spd = ev.all_spd && s.spd;
    ev.samples.push_back(s);
  }
  const double n = static_cast<double>(preds.size());
  ev.nmse /= n;
  ev.f1 /= n;
  ev.mean_density /= n;
  return ev;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::vector<MatrixXd> predict_all(const ModelParams& params, const Dataset& ds,
                                  const LayerConfig& layer, int threads) {
  std::vector<MatrixXd> out(ds.entries.size());
  parallel_for(out.size(), threads, [&](std::size_t k) {
    try {
      out[k] = predict(params, ds.entries[k].s, layer);
    } catch (const SpdViolation& e) {
      throw SpdViolation("sample " + std::to_string(k) + ": " + e.what());
    }
  });
  return out;
}

// ---- optimisation ---------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (threads < 1) throw ConfigError("threads must be >= 1");
}

void adam_step(std::vector<MatrixXd>& params, const std::vector<MatrixXd>& grads,
               AdamState& state, const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: gradient count differs");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(MatrixXd::Zero(p.rows(), p.cols()));
      state.v.push_back(MatrixXd::Zero(p.rows(), p.cols()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto g = grads[k].array();
    state.m[k] = (cfg.beta1 * state.m[k].array() + (1.0 - cfg.beta1) * g).matrix();
    state.v[k] = (cfg.beta2 * state.v[k].array() + (1.0 - cfg.beta2) * g.square()).matrix();
    const auto m_hat = state.m[k].array() / c1;
    const auto v_hat = state.v[k].array() / c2;
    params[k].array() -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
  }
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "epoch,train_mse,test_nmse,test_f1,min_eig,max_cond,mean_density\n";
  const auto old = out.precision(17);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.train_mse << ',' << r.test_nmse << ',' << r.test_f1 << ','
        << r.min_eig << ',' << r.max_cond << ',' << r.mean_density << '\n';
  }
  out.precision(old);
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_metrics_csv(out, rows);
}

BatchResult batch_gradient(const ModelParams& params, const Dataset& ds,
                           const std::vector<std::size_t>& indices, const LayerConfig& layer,
                           int threads) {
  if (indices.empty()) throw DimensionError("batch_gradient: empty batch");
  struct Slot {
    double loss = 0.0;
    std::vector<MatrixXd> grads;
  };
  std::vector<Slot> slots(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t k) {
    const std::size_t idx = indices[k];
    const DatasetEntry& e = ds.entries.at(idx);
    try {
      ad::Tape tape;
      const BoundModel model(tape, params, true);
      const SpdState out = spodnet_forward(tape, e.s, model.update_fns(), layer);
      const ad::Tensor loss = mse_loss(out.theta, e.theta_true);
      tape.backward(loss);
      slots[k].loss = loss.item();
      for (const auto& leaf : model.leaves()) slots[k].grads.push_back(leaf.grad());
    } catch (const SpdViolation& err) {
      throw SpdViolation("training sample " + std::to_string(idx) + ": " + err.what());
    }
  });
  BatchResult res;
  const double inv = 1.0 / static_cast<double>(indices.size());
  res.grads = std::move(slots[0].grads);
  res.loss = slots[0].loss;
  for (std::size_t k = 1; k < slots.size(); ++k) {
    res.loss += slots[k].loss;
    for (std::size_t j = 0; j < res.grads.size(); ++j) res.grads[j] += slots[k].grads[j];
  }
  res.loss *= inv;
  for (auto& g : res.grads) g *= inv;
  return res;
}

TrainResult train(ModelParams params, const Dataset& train_ds, const Dataset& test_ds,
                  const LayerConfig& layer, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_ds.entries.empty() || test_ds.entries.empty()) {
    throw ConfigError("training and test sets must be non-empty");
  }
  if (train_ds.config.p != params.p || test_ds.config.p != params.p) {
    throw DimensionError("dataset dimension does not match the model");
  }
  layer.validate(params.p);

  TrainResult result;
  AdamState adam;
  Rng rng = make_rng(cfg.seed);
  std::vector<std::size_t> order(train_ds.entries.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::vector<std::size_t> batch(order.begin() + start, order.begin() + stop);
      BatchResult br = batch_gradient(params, train_ds, batch, layer, cfg.threads);
      total += br.loss * static_cast<double>(batch.size());
      std::vector<MatrixXd> values = params.values();
      adam_step(values, br.grads, adam, cfg);
      params.assign(values);
    }
    MetricsRow row;
    row.epoch = epoch;
    row.train_mse = total / static_cast<double>(order.size());
    const std::vector<MatrixXd> preds = predict_all(params, test_ds, layer, cfg.threads);
    std::vector<MatrixXd> truths;
    for (const auto& e : test_ds.entries) truths.push_back(e.theta_true);
    const Evaluation ev = evaluate_estimates(preds, truths);
    row.test_nmse = ev.nmse;
    row.test_f1 = ev.f1;
    row.min_eig = ev.min_eig;
    row.max_cond = ev.max_cond;
    row.mean_density = ev.mean_density;
    result.history.push_back(row);
    if (on_epoch) on_epoch(row, params);
  }
  result.params = std::move(params);
  return result;
}

std::vector<SpectralRow> spectral_trace(const std::vector<MatrixXd>& snapshots) {
  std::vector<SpectralRow> rows;
  rows.reserve(snapshots.size());
  for (const auto& m : snapshots) {
    const SpectrumSummary s = eig_diagnostics(symmetrize(m));
    rows.push_back({s.min_eig, m.diagonal().maxCoeff(), s.cond});
  }
  return rows;
}

}  // namespace spodnet
