#include "spodnet/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "spodnet/baselines.hpp"
#include "spodnet/datagen.hpp"
#include "spodnet/layer.hpp"
#include "spodnet/models.hpp"
#include "spodnet/training.hpp"

namespace spodnet {

namespace fs = std::filesystem;
using Eigen::Index;
using Eigen::MatrixXd;
using nlohmann::json;

namespace {

// JSON config files: {"epochs": 10, "lr": 0.01, ...}, optionally nested under
// the subcommand name. Flags given on the command line take precedence.
std::string config_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.empty()) return args;
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  if (j.contains(args[0]) && j[args[0]].is_object()) j = j[args[0]];

  auto given = [&](const std::string& flag) {
    for (const auto& a : args) {
      if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
    }
    return false;
  };
  std::vector<std::string> out = args;
  for (const auto& [key, v] : j.items()) {
    const std::string flag = "--" + key;
    if (v.is_object() || key == "config" || given(flag)) continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) out.push_back(flag);
    } else if (v.is_array()) {
      out.push_back(flag);
      for (const auto& e : v) out.push_back(config_scalar(e));
    } else {
      out.push_back(flag);
      out.push_back(config_scalar(v));
    }
  }
  return out;
}

int default_threads() { return std::max(1, static_cast<int>(std::thread::hardware_concurrency())); }

TapeMode parse_tape_mode(const std::string& s) {
  if (s == "detached") return TapeMode::Detached;
  if (s == "full") return TapeMode::Full;
  throw ConfigError("--tape-mode must be 'detached' or 'full'");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::vector<MatrixXd> truths_of(const Dataset& ds) {
  std::vector<MatrixXd> t;
  for (const auto& e : ds.entries) t.push_back(e.theta_true);
  return t;
}

json evaluation_json(const std::string& method, const Evaluation& ev) {
  json j;
  j["method"] = method;
  j["num_samples"] = ev.samples.size();
  j["nmse"] = ev.nmse;
  j["f1"] = ev.f1;
  j["min_eig"] = ev.min_eig;
  j["max_cond"] = ev.max_cond;
  j["mean_density"] = ev.mean_density;
  j["all_spd"] = ev.all_spd;
  json rows = json::array();
  for (std::size_t k = 0; k < ev.samples.size(); ++k) {
    const SampleMetrics& s = ev.samples[k];
    rows.push_back({{"sample_id", k},
                    {"nmse", s.nmse},
                    {"f1", s.f1},
                    {"min_eig", s.min_eig},
                    {"cond", s.cond},
                    {"density", s.density},
                    {"spd", s.spd}});
  }
  j["samples"] = std::move(rows);
  return j;
}

Dataset load_nonempty(const std::string& path) {
  Dataset ds = load_dataset(path);
  if (ds.entries.empty()) throw ConfigError(path + " holds no entries");
  return ds;
}

// ---- subcommands ----------------------------------------------------------------

struct GenArgs {
  GenConfig cfg;
  std::string out;
  bool keep_samples = false;
};

void cmd_gen_data(const GenArgs& a, std::ostream& out) {
  const Dataset ds = build_dataset(a.cfg, a.keep_samples);
  save_dataset(ds, a.out);
  double dens = 0.0;
  for (const auto& e : ds.entries) dens += density(e.theta_true);
  dens /= static_cast<double>(ds.entries.size());
  out << "wrote " << a.out << ": p=" << a.cfg.p << " n=" << a.cfg.n << " num=" << a.cfg.num
      << " alpha=" << a.cfg.alpha << " mean_density=" << dens << '\n';
}

struct TrainArgs {
  std::string model = "ubg";
  std::string train, test, out;
  TrainConfig cfg;
  LayerConfig layer;
  std::string tape_mode = "detached";
  bool no_stabilize = false;
  bool quiet = false;
};

void cmd_train(TrainArgs a, std::ostream& out) {
  a.cfg.epochs = std::max(a.cfg.epochs, 0);
  a.layer.stabilize = !a.no_stabilize;
  a.layer.tape_mode = parse_tape_mode(a.tape_mode);
  const Variant variant = parse_variant(a.model);
  const Dataset train_ds = load_nonempty(a.train);
  const Dataset test_ds = load_nonempty(a.test);
  if (train_ds.config.p != test_ds.config.p) throw ConfigError("training and test sets differ in p");
  const Index p = train_ds.config.p;
  a.layer.validate(p);

  int epoch_seen = 0;
  TrainResult res;
  try {
    res = train(init_params(variant, p, a.cfg.seed), train_ds, test_ds, a.layer, a.cfg,
                [&](const MetricsRow& r, const ModelParams&) {
                  epoch_seen = r.epoch;
                  if (!a.quiet) {
                    out << "epoch " << r.epoch << " train_mse=" << r.train_mse
                        << " test_nmse=" << r.test_nmse << " test_f1=" << r.test_f1
                        << " min_eig=" << r.min_eig << '\n';
                  }
                });
  } catch (const SpdViolation& e) {
    throw SpdViolation("epoch " + std::to_string(epoch_seen + 1) + ", " + e.what());
  }
  if (a.cfg.epochs == 0) res.params = init_params(variant, p, a.cfg.seed);

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  save_checkpoint(Checkpoint{res.params, a.cfg.seed, a.layer}, dir / "checkpoint.json");
  write_metrics_csv(dir / "metrics.csv", res.history);
  out << "wrote " << (dir / "checkpoint.json").string() << " and "
      << (dir / "metrics.csv").string() << '\n';
}

struct EvalArgs {
  std::string checkpoint, data, out;
  int threads = default_threads();
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Dataset ds = load_nonempty(a.data);
  if (ds.config.p != ckpt.params.p) {
    throw ConfigError("checkpoint is for p=" + std::to_string(ckpt.params.p) + " but the data has p=" +
                      std::to_string(ds.config.p));
  }
  const auto preds = predict_all(ckpt.params, ds, ckpt.layer, a.threads);
  const Evaluation ev = evaluate_estimates(preds, truths_of(ds));
  write_text(a.out, evaluation_json(std::string(to_string(ckpt.params.variant)), ev).dump(1) + "\n");
  out << to_string(ckpt.params.variant) << ": nmse=" << ev.nmse << " f1=" << ev.f1
      << " all_spd=" << (ev.all_spd ? "true" : "false") << '\n';
}

struct BaselineArgs {
  std::string method, data, out;
  GlassoConfig glasso;
  int folds = 5;
  int threads = default_threads();
};

void cmd_baseline(const BaselineArgs& a, std::ostream& out) {
  const Dataset ds = load_nonempty(a.data);
  const bool needs_samples = a.method == "glasso-cv" || a.method == "lw";
  if (needs_samples && !ds.has_samples()) {
    throw ConfigError("--method " + a.method +
                      " needs raw samples; regenerate the dataset with `gen-data --keep-samples`");
  }
  std::vector<MatrixXd> preds(ds.entries.size());
  parallel_for(preds.size(), a.threads, [&](std::size_t k) {
    const DatasetEntry& e = ds.entries[k];
    if (a.method == "glasso") {
      preds[k] = glasso_solve(e.s, a.glasso).theta;
    } else if (a.method == "glasso-cv") {
      preds[k] = glasso_cv(*e.samples, {}, a.folds, a.glasso).theta;
    } else if (a.method == "lw") {
      preds[k] = ledoit_wolf(*e.samples).precision;
    } else {
      preds[k] = oas(e.s, ds.config.n).precision;
    }
  });
  const Evaluation ev = evaluate_estimates(preds, truths_of(ds));
  write_text(a.out, evaluation_json(a.method, ev).dump(1) + "\n");
  out << a.method << ": nmse=" << ev.nmse << " f1=" << ev.f1
      << " all_spd=" << (ev.all_spd ? "true" : "false") << '\n';
}

struct DiagnoseArgs {
  std::string checkpoint, data, out, report;
  std::optional<double> zeta;
  bool no_stabilize = false;
  int max_samples = 0;
};

// Returns the number of Bauer–Fike violations.
long cmd_diagnose(const DiagnoseArgs& a, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  const Dataset ds = load_nonempty(a.data);
  if (ds.config.p != ckpt.params.p) throw ConfigError("checkpoint and data differ in p");
  LayerConfig layer = ckpt.layer;
  if (a.zeta) layer.zeta = *a.zeta;
  if (a.no_stabilize) layer.stabilize = false;
  layer.validate(ckpt.params.p);

  std::ostringstream csv;
  csv.precision(17);
  csv << "sample,layer,column,update,min_eig,max_diag,cond,delta_norm,max_shift,bauer_fike_ok\n";
  long updates = 0, violations = 0;
  double worst = 0.0;
  std::size_t count = ds.entries.size();
  if (a.max_samples > 0) count = std::min<std::size_t>(count, a.max_samples);
  for (std::size_t k = 0; k < count; ++k) {
    long index = 0;
    predict(ckpt.params, ds.entries[k].s, layer, [&](const ColumnUpdate& up) {
      const Index i = up.pivot;
      const MatrixXd delta = up.theta_after - up.theta_before;
      Eigen::VectorXd col(delta.rows() - 1);
      for (Index r = 0; r < col.size(); ++r) col(r) = delta(skip_index(r, i), i);
      const Rank2Eigs eig = rank2_delta_eigs(col, delta(i, i));
      const BauerFikeReport bf = bauer_fike_check(up.theta_before, up.theta_after, eig.op_norm());
      const SpectralRow row = spectral_trace({up.theta_after}).front();
      csv << k << ',' << up.layer << ',' << i << ',' << index++ << ',' << row.min_eig << ','
          << row.max_diag << ',' << row.cond << ',' << eig.op_norm() << ',' << bf.max_shift << ','
          << (bf.holds ? 1 : 0) << '\n';
      ++updates;
      violations += !bf.holds;
      worst = std::max(worst, bf.max_violation);
    });
  }
  write_text(a.out, csv.str());
  if (!a.report.empty()) {
    json r{{"samples", count},
           {"updates", updates},
           {"bauer_fike_violations", violations},
           {"max_violation", worst},
           {"zeta", layer.zeta},
           {"stabilize", layer.stabilize}};
    write_text(a.report, r.dump(1) + "\n");
  }
  out << "updates=" << updates << " bauer_fike_violations=" << violations << '\n';
  return violations;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("SpodNet: learned SPD column-row updates for sparse precision estimation",
               "spodnet");
  app.require_subcommand(1);
  std::string config_path;

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic (Θ_true, S) dataset");
  g->add_option("--config", config_path, "JSON file with flag values");
  g->add_option("--p", gen.cfg.p, "Dimension")->check(CLI::Range(Index{2}, Index{100000}));
  g->add_option("--n", gen.cfg.n, "Samples per matrix")->check(CLI::PositiveNumber);
  g->add_option("--num", gen.cfg.num, "Number of matrices")->check(CLI::PositiveNumber);
  g->add_option("--alpha", gen.cfg.alpha, "Zero probability in the factor")->check(CLI::Range(0.0, 1.0));
  g->add_option("--diag-boost", gen.cfg.diag_boost, "Diagonal shift")->check(CLI::NonNegativeNumber);
  g->add_option("--seed", gen.cfg.seed, "Seed");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_flag("--keep-samples", gen.keep_samples, "Store the raw n x p samples");

  TrainArgs tr;
  tr.cfg.threads = default_threads();
  auto* t = app.add_subcommand("train", "Train a UBG, PNP or E2E model");
  t->add_option("--config", config_path, "JSON file with flag values");
  t->add_option("--model", tr.model, "ubg | pnp | e2e")
      ->check(CLI::IsMember({"ubg", "pnp", "e2e"}, CLI::ignore_case));
  t->add_option("--train", tr.train, "Training dataset")->required();
  t->add_option("--test", tr.test, "Test dataset")->required();
  t->add_option("--epochs", tr.cfg.epochs, "Epochs")->check(CLI::NonNegativeNumber);
  t->add_option("--lr", tr.cfg.lr, "ADAM learning rate")->check(CLI::NonNegativeNumber);
  t->add_option("--batch-size", tr.cfg.batch_size, "Batch size")->check(CLI::PositiveNumber);
  t->add_option("--zeta", tr.layer.zeta, "Stabiliser target")->check(CLI::PositiveNumber);
  t->add_option("--seed", tr.cfg.seed, "Seed for initialisation and shuffling");
  t->add_option("--layers", tr.layer.num_layers, "Number of SpodNet layers")->check(CLI::PositiveNumber);
  t->add_option("--tape-mode", tr.tape_mode, "detached | full")
      ->check(CLI::IsMember({"detached", "full"}));
  t->add_flag("--no-stabilize", tr.no_stabilize, "Disable the ζ rescaling");
  t->add_option("--threads", tr.cfg.threads, "Worker threads")->check(CLI::PositiveNumber);
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_flag("--quiet", tr.quiet, "No per-epoch lines");
  tr.cfg.epochs = 100;

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  e->add_option("--config", config_path, "JSON file with flag values");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint JSON")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--out", ev.out, "Metrics JSON")->required();
  e->add_option("--threads", ev.threads, "Worker threads")->check(CLI::PositiveNumber);

  BaselineArgs bl;
  auto* b = app.add_subcommand("baseline", "Score a model-based estimator on a dataset");
  b->add_option("--config", config_path, "JSON file with flag values");
  b->add_option("--method", bl.method, "glasso | glasso-cv | lw | oas")
      ->required()
      ->check(CLI::IsMember({"glasso", "glasso-cv", "lw", "oas"}));
  b->add_option("--data", bl.data, "Dataset directory")->required();
  b->add_option("--out", bl.out, "Metrics JSON")->required();
  b->add_option("--lambda", bl.glasso.lambda, "GLasso penalty")->check(CLI::NonNegativeNumber);
  b->add_option("--max-sweeps", bl.glasso.max_sweeps, "GLasso sweep limit")->check(CLI::PositiveNumber);
  b->add_option("--tol", bl.glasso.tol, "GLasso objective tolerance")->check(CLI::PositiveNumber);
  b->add_option("--folds", bl.folds, "Cross-validation folds")->check(CLI::Range(2, 1000));
  b->add_option("--threads", bl.threads, "Worker threads")->check(CLI::PositiveNumber);

  DiagnoseArgs dg;
  auto* d = app.add_subcommand("diagnose", "Spectral trace and Bauer-Fike audit of every update");
  d->add_option("--config", config_path, "JSON file with flag values");
  d->add_option("--checkpoint", dg.checkpoint, "Checkpoint JSON")->required();
  d->add_option("--data", dg.data, "Dataset directory")->required();
  d->add_option("--out", dg.out, "Trace CSV")->required();
  d->add_option("--report", dg.report, "Audit summary JSON");
  d->add_option("--zeta", dg.zeta, "Override the stabiliser target")->check(CLI::PositiveNumber);
  d->add_flag("--no-stabilize", dg.no_stabilize, "Disable the ζ rescaling");
  d->add_option("--max-samples", dg.max_samples, "Only the first k entries")->check(CLI::NonNegativeNumber);

  std::vector<std::string> expanded;
  try {
    expanded = expand_config(args);
  } catch (const IoError& x) {
    err << "error: " << x.what() << '\n';
    return kExitIo;
  } catch (const ConfigError& x) {
    err << "error: " << x.what() << '\n';
    return kExitUsage;
  }
  std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*g) cmd_gen_data(gen, out);
    if (*t) cmd_train(tr, out);
    if (*e) cmd_eval(ev, out);
    if (*b) cmd_baseline(bl, out);
    if (*d && cmd_diagnose(dg, out) > 0) return kExitNumerical;
  } catch (const IoError& x) {
    err << "error: " << x.what() << '\n';
    return kExitIo;
  } catch (const SpdViolation& x) {
    err << "error: " << x.what() << '\n';
    return kExitNumerical;
  } catch (const NotPositiveDefinite& x) {
    err << "error: " << x.what() << '\n';
    return kExitNumerical;
  } catch (const std::invalid_argument& x) {  // ConfigError, DimensionError
    err << "error: " << x.what() << '\n';
    return kExitUsage;
  } catch (const std::domain_error& x) {
    err << "error: " << x.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& x) {
    err << "error: " << x.what() << '\n';
    return kExitIo;
  }
  return kExitOk;
}

}  // namespace spodnet
