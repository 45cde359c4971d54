#include "spodnet/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "spodnet/linalg.hpp"

namespace spodnet {

using Eigen::Index;
using Eigen::MatrixXd;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "dataset blobs assume little-endian");

void GenConfig::validate() const {
  if (p < 2) throw ConfigError("p must be >= 2");
  if (n < 1) throw ConfigError("n must be >= 1");
  if (num < 1) throw ConfigError("number of matrices must be >= 1");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(diag_boost >= 0.0)) throw ConfigError("diag_boost must be >= 0");
}

bool Dataset::has_samples() const {
  return !entries.empty() && std::all_of(entries.begin(), entries.end(),
                                         [](const DatasetEntry& e) { return e.samples.has_value(); });
}

MatrixXd make_sparse_spd(Index p, double alpha, double diag_boost, Rng& rng) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> magnitude(0.1, 0.9);
  MatrixXd l = -MatrixXd::Identity(p, p);
  for (Index i = 1; i < p; ++i) {
    for (Index j = 0; j < i; ++j) {
      if (unit(rng) >= alpha) l(i, j) = -magnitude(rng);
    }
  }
  std::vector<Index> perm(p);
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const MatrixXd core = l.transpose() * l;
  MatrixXd theta(p, p);
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < p; ++j) theta(i, j) = core(perm[i], perm[j]);
  }
  theta.diagonal().array() += diag_boost;
  return theta;
}

MatrixXd sample_gaussian(const MatrixXd& theta, Index n, Rng& rng) {
  const MatrixXd l = cholesky(theta);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd z(theta.rows(), n);
  for (Index k = 0; k < n; ++k) {
    for (Index j = 0; j < z.rows(); ++j) z(j, k) = normal(rng);
  }
  // x = L⁻ᵀ z has covariance (L Lᵀ)⁻¹
  const MatrixXd x = l.transpose().triangularView<Eigen::Upper>().solve(z);
  return x.transpose();
}

MatrixXd sample_covariance(const MatrixXd& theta, Index n, Rng& rng) {
  const MatrixXd x = sample_gaussian(theta, n, rng);
  return symmetrize(MatrixXd(x.transpose() * x / static_cast<double>(n)));
}

Dataset build_dataset(const GenConfig& cfg, bool keep_samples) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.entries.resize(static_cast<std::size_t>(cfg.num));
  for (Index i = 0; i < cfg.num; ++i) {
    Rng rng = child_rng(cfg.seed, static_cast<std::uint64_t>(i));
    DatasetEntry& e = ds.entries[static_cast<std::size_t>(i)];
    e.theta_true = make_sparse_spd(cfg.p, cfg.alpha, cfg.diag_boost, rng);
    const MatrixXd x = sample_gaussian(e.theta_true, cfg.n, rng);
    e.s = symmetrize(MatrixXd(x.transpose() * x / static_cast<double>(cfg.n)));
    if (keep_samples) e.samples = x;
  }
  return ds;
}

// ---- persistence ---------------------------------------------------------------

namespace {

std::string entry_name(const char* stem, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06zu.bin", stem, i);
  return buf;
}

void write_rows(std::ofstream& out, const MatrixXd& m) {
  // row-major, little-endian float64
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
}

MatrixXd read_rows(std::ifstream& in, Index rows, Index cols, const fs::path& path) {
  MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      double v;
      if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
        throw IoError(path.string() + " is truncated");
      }
      m(r, c) = v;
    }
  }
  return m;
}

void write_blob(const fs::path& path, const std::vector<const MatrixXd*>& parts) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const MatrixXd* m : parts) write_rows(out, *m);
  if (!out) throw IoError("failed writing " + path.string());
}

void expect_end(std::ifstream& in, const fs::path& path) {
  if (in.peek() != std::ifstream::traits_type::eof()) {
    throw IoError(path.string() + " has trailing bytes");
  }
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
  ds.config.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const bool samples = ds.has_samples();
  nlohmann::json meta;
  meta["format"] = kDatasetFormat;
  meta["p"] = ds.config.p;
  meta["n"] = ds.config.n;
  meta["num"] = static_cast<Index>(ds.entries.size());
  meta["alpha"] = ds.config.alpha;
  meta["diag_boost"] = ds.config.diag_boost;
  meta["seed"] = ds.config.seed;
  meta["keep_samples"] = samples;
  {
    std::ofstream out(dir / "meta.json", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
    out << meta.dump(1) << '\n';
  }
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    const DatasetEntry& e = ds.entries[i];
    if (e.theta_true.rows() != ds.config.p || e.s.rows() != ds.config.p) {
      throw DimensionError("dataset entry " + std::to_string(i) + " has the wrong size");
    }
    write_blob(dir / entry_name("entry", i), {&e.theta_true, &e.s});
    if (samples) write_blob(dir / entry_name("samples", i), {&*e.samples});
  }
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  std::ifstream meta_in(meta_path, std::ios::binary);
  if (!meta_in) throw IoError("cannot read " + meta_path.string());
  std::stringstream text;
  text << meta_in.rdbuf();
  Dataset ds;
  bool samples = false;
  try {
    const auto meta = nlohmann::json::parse(text.str());
    if (meta.at("format").get<std::string>() != kDatasetFormat) {
      throw IoError(meta_path.string() + ": unsupported dataset format '" +
                    meta.at("format").get<std::string>() + "'");
    }
    ds.config.p = meta.at("p").get<Index>();
    ds.config.n = meta.at("n").get<Index>();
    ds.config.num = meta.at("num").get<Index>();
    ds.config.alpha = meta.at("alpha").get<double>();
    ds.config.diag_boost = meta.at("diag_boost").get<double>();
    ds.config.seed = meta.at("seed").get<std::uint64_t>();
    samples = meta.value("keep_samples", false);
    if (ds.config.num < 0) throw ConfigError("negative entry count");
    GenConfig check = ds.config;
    check.num = std::max<Index>(check.num, 1);  // an empty dataset is readable
    check.validate();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(meta_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(meta_path.string() + ": " + e.what());
  }
  const Index p = ds.config.p;
  ds.entries.resize(static_cast<std::size_t>(ds.config.num));
  for (std::size_t i = 0; i < ds.entries.size(); ++i) {
    const fs::path path = dir / entry_name("entry", i);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    ds.entries[i].theta_true = read_rows(in, p, p, path);
    ds.entries[i].s = read_rows(in, p, p, path);
    expect_end(in, path);
    if (samples) {
      const fs::path spath = dir / entry_name("samples", i);
      std::ifstream sin(spath, std::ios::binary);
      if (!sin) throw IoError("cannot read " + spath.string());
      ds.entries[i].samples = read_rows(sin, ds.config.n, p, spath);
      expect_end(sin, spath);
    }
  }
  return ds;
}

}  // namespace spodnet
