#include "spodnet/models.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "spodnet/random.hpp"

namespace spodnet {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Ubg: return "ubg";
    case Variant::Pnp: return "pnp";
    case Variant::E2e: return "e2e";
  }
  return "?";
}

Variant parse_variant(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "ubg") return Variant::Ubg;
  if (lower == "pnp") return Variant::Pnp;
  if (lower == "e2e") return Variant::E2e;
  throw ConfigError("unknown model variant '" + std::string(name) + "'");
}

MlpSpec Mlp::spec() const {
  MlpSpec s;
  s.output = output;
  if (layers.empty()) return s;
  s.widths.push_back(layers.front().weight.cols());
  for (const auto& l : layers) s.widths.push_back(l.weight.rows());
  return s;
}

Mlp make_mlp(const MlpSpec& spec) {
  Mlp mlp;
  mlp.output = spec.output;
  for (std::size_t k = 0; k + 1 < spec.widths.size(); ++k) {
    Linear l;
    l.weight = MatrixXd::Zero(spec.widths[k + 1], spec.widths[k]);
    l.bias = VectorXd::Zero(spec.widths[k + 1]);
    mlp.layers.push_back(std::move(l));
  }
  return mlp;
}

MlpSpec gamma_net_spec(Index p) { return {{p - 1, p / 2, 1}, OutputActivation::Abs}; }
MlpSpec lambda_net_spec(Index p) { return {{p - 1, 5, p - 1}, OutputActivation::Abs}; }
MlpSpec psi_net_spec(Index p) { return {{p - 1, 2 * p, p - 1}, OutputActivation::Identity}; }
MlpSpec phi_net_spec(Index p) { return {{p - 1, 10 * p, p - 1}, OutputActivation::Identity}; }
MlpSpec g_net_spec() { return {{3, 3, 3, 1}, OutputActivation::Abs}; }

namespace {

const char* denoiser_name(Variant v) { return v == Variant::Pnp ? "psi_net" : "phi_net"; }

template <typename Fn>
void for_each_net(ModelParams& m, Fn&& fn) {
  if (!m.gamma_net.empty()) fn("gamma_net", m.gamma_net);
  fn("lambda_net", m.lambda_net);
  if (!m.denoiser.empty()) fn(denoiser_name(m.variant), m.denoiser);
  fn("g_net", m.g_net);
}

}  // namespace

std::vector<ParamRef> ModelParams::named() {
  std::vector<ParamRef> out;
  for_each_net(*this, [&](const char* net, Mlp& mlp) {
    for (std::size_t k = 0; k < mlp.layers.size(); ++k) {
      auto& l = mlp.layers[k];
      const std::string prefix = std::string(net) + "." + std::to_string(k);
      out.push_back({prefix + ".weight", l.weight.data(), l.weight.rows(), l.weight.cols()});
      out.push_back({prefix + ".bias", l.bias.data(), l.bias.size(), 1});
    }
  });
  return out;
}

std::vector<MatrixXd> ModelParams::values() const {
  std::vector<MatrixXd> out;
  for (const auto& ref : const_cast<ModelParams*>(this)->named()) out.emplace_back(ref.map());
  return out;
}

void ModelParams::assign(const std::vector<MatrixXd>& values) {
  auto refs = named();
  if (refs.size() != values.size()) throw DimensionError("assign: parameter count differs");
  for (std::size_t k = 0; k < refs.size(); ++k) {
    if (values[k].rows() != refs[k].rows || values[k].cols() != refs[k].cols) {
      throw DimensionError("assign: shape of " + refs[k].name + " differs");
    }
    refs[k].map() = values[k];
  }
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& ref : const_cast<ModelParams*>(this)->named()) {
    n += static_cast<std::size_t>(ref.rows * ref.cols);
  }
  return n;
}

ModelParams make_model(Variant variant, Index p) {
  if (p < 2) throw ConfigError("model dimension p must be >= 2");
  ModelParams m;
  m.variant = variant;
  m.p = p;
  m.lambda_scale = variant == Variant::Ubg ? 1.0 : 0.1;
  if (variant != Variant::E2e) m.gamma_net = make_mlp(gamma_net_spec(p));
  m.lambda_net = make_mlp(lambda_net_spec(p));
  if (variant == Variant::Pnp) m.denoiser = make_mlp(psi_net_spec(p));
  if (variant == Variant::E2e) m.denoiser = make_mlp(phi_net_spec(p));
  m.g_net = make_mlp(g_net_spec());
  return m;
}

ModelParams init_params(Variant variant, Index p, std::uint64_t seed) {
  ModelParams m = make_model(variant, p);
  Rng rng = make_rng(seed);
  double bound = 1.0;
  for (const auto& ref : m.named()) {
    // a bias shares the fan-in of the weight block just before it
    if (ref.name.ends_with(".weight")) bound = 1.0 / std::sqrt(static_cast<double>(ref.cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto w = ref.map();
    for (Index k = 0; k < w.size(); ++k) w(k) = dist(rng);
  }
  return m;
}

// ---- tape evaluation ---------------------------------------------------------

BoundMlp::BoundMlp(ad::Tape& tape, const Mlp& mlp, bool requires_grad,
                   std::vector<ad::Tensor>& leaves)
    : output_(mlp.output) {
  for (const auto& l : mlp.layers) {
    ad::Tensor w = tape.leaf(l.weight, requires_grad);
    ad::Tensor b = tape.leaf(MatrixXd(l.bias), requires_grad);
    leaves.push_back(w);
    leaves.push_back(b);
    layers_.emplace_back(w, b);
  }
}

BoundMlp::BoundMlp(const Mlp& mlp, std::span<const ad::Tensor> leaves, std::size_t& cursor)
    : output_(mlp.output) {
  for (const auto& l : mlp.layers) {
    if (cursor + 2 > leaves.size()) throw DimensionError("BoundMlp: too few parameter tensors");
    const ad::Tensor& w = leaves[cursor];
    const ad::Tensor& b = leaves[cursor + 1];
    if (w.rows() != l.weight.rows() || w.cols() != l.weight.cols() || b.rows() != l.bias.size() ||
        b.cols() != 1) {
      throw DimensionError("BoundMlp: parameter tensor shape differs from the architecture");
    }
    layers_.emplace_back(w, b);
    cursor += 2;
  }
}

ad::Tensor BoundMlp::preactivation(const ad::Tensor& x) const {
  if (layers_.empty()) throw ContractError("evaluating an empty MLP");
  ad::Tensor h = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    if (k > 0) h = ad::relu(h);
    h = ad::matmul(layers_[k].first, h) + layers_[k].second;
  }
  return h;
}

ad::Tensor BoundMlp::operator()(const ad::Tensor& x) const {
  ad::Tensor z = preactivation(x);
  return output_ == OutputActivation::Abs ? ad::abs(z) : z;
}

ColumnInputs column_inputs(const ColumnContext& ctx) {
  ColumnInputs in{ctx.theta12(), ctx.s12(), ctx.w12(), {}};
  if (ctx.config().stabilize) {
    in.stabilize = [&ctx](const ad::Tensor& z) { return ctx.stabilize(z); };
  }
  return in;
}

ad::Tensor gista_gradient_step(const ad::Tensor& theta12, const ad::Tensor& s12,
                               const ad::Tensor& w12, const ad::Tensor& gamma) {
  return theta12 - gamma * (s12 - w12);
}

namespace {

ad::Tensor maybe_stabilize(const ColumnInputs& in, const ad::Tensor& z) {
  return in.stabilize ? in.stabilize(z) : z;
}

}  // namespace

ad::Tensor f_ubg(const ColumnInputs& in, const TensorMap& gamma_net,
                 const TensorMap& lambda_net) {
  const ad::Tensor gamma = gamma_net(in.theta12);
  const ad::Tensor step = gista_gradient_step(in.theta12, in.s12, in.w12, gamma);
  const ad::Tensor lambda = lambda_net(step);
  return ad::soft_threshold(maybe_stabilize(in, step), lambda);
}

ad::Tensor f_pnp(const ColumnInputs& in, const TensorMap& gamma_net,
                 const TensorMap& psi_preactivation, const TensorMap& lambda_net) {
  const ad::Tensor gamma = gamma_net(in.theta12);
  const ad::Tensor step = gista_gradient_step(in.theta12, in.s12, in.w12, gamma);
  const ad::Tensor z = psi_preactivation(step);
  const ad::Tensor lambda = lambda_net(step);
  return ad::soft_threshold(maybe_stabilize(in, z), lambda);
}

ad::Tensor f_e2e(const ColumnInputs& in, const TensorMap& phi_preactivation,
                 const TensorMap& lambda_net) {
  const ad::Tensor z = phi_preactivation(in.theta12);
  const ad::Tensor lambda = lambda_net(in.theta12);
  return ad::soft_threshold(maybe_stabilize(in, z), lambda);
}

ad::Tensor g_eval(const ad::Tensor& theta22, const ad::Tensor& s22, const ad::Tensor& quad,
                  const TensorMap& g_net) {
  const ad::Tensor features[] = {theta22, s22, quad};
  const ad::Tensor out = g_net(ad::stack(features));
  return out + theta22.tape().scalar(kDiagonalFloor);
}

BoundModel::BoundModel(ad::Tape& tape, const ModelParams& params, bool requires_grad)
    : variant_(params.variant), lambda_scale_(params.lambda_scale) {
  if (!params.gamma_net.empty()) gamma_net_ = BoundMlp(tape, params.gamma_net, requires_grad, leaves_);
  lambda_net_ = BoundMlp(tape, params.lambda_net, requires_grad, leaves_);
  if (!params.denoiser.empty()) denoiser_ = BoundMlp(tape, params.denoiser, requires_grad, leaves_);
  g_net_ = BoundMlp(tape, params.g_net, requires_grad, leaves_);
}

BoundModel::BoundModel(const ModelParams& params, std::span<const ad::Tensor> leaves)
    : variant_(params.variant), lambda_scale_(params.lambda_scale), leaves_(leaves.begin(), leaves.end()) {
  std::size_t cursor = 0;
  if (!params.gamma_net.empty()) gamma_net_ = BoundMlp(params.gamma_net, leaves, cursor);
  lambda_net_ = BoundMlp(params.lambda_net, leaves, cursor);
  if (!params.denoiser.empty()) denoiser_ = BoundMlp(params.denoiser, leaves, cursor);
  g_net_ = BoundMlp(params.g_net, leaves, cursor);
  if (cursor != leaves.size()) throw DimensionError("BoundModel: too many parameter tensors");
}

UpdateFns BoundModel::update_fns() const {
  UpdateFns fns;
  const TensorMap lambda = [this](const ad::Tensor& x) {
    const ad::Tensor l = lambda_net_(x);
    return lambda_scale_ == 1.0 ? l : ad::scale(l, lambda_scale_);
  };
  const TensorMap gamma = [this](const ad::Tensor& x) { return gamma_net_(x); };
  const TensorMap denoise = [this](const ad::Tensor& x) { return denoiser_.preactivation(x); };
  switch (variant_) {
    case Variant::Ubg:
      fns.f = [=](const ColumnContext& ctx) { return f_ubg(column_inputs(ctx), gamma, lambda); };
      break;
    case Variant::Pnp:
      fns.f = [=](const ColumnContext& ctx) {
        return f_pnp(column_inputs(ctx), gamma, denoise, lambda);
      };
      break;
    case Variant::E2e:
      fns.f = [=](const ColumnContext& ctx) { return f_e2e(column_inputs(ctx), denoise, lambda); };
      break;
  }
  fns.g = [this](const ColumnContext& ctx, const ad::Tensor& quad) {
    return g_eval(ctx.theta22(), ctx.s22(), quad,
                  [this](const ad::Tensor& x) { return g_net_(x); });
  };
  return fns;
}

MatrixXd predict(const ModelParams& params, const MatrixXd& s, const LayerConfig& cfg,
                 const UpdateObserver& observer) {
  if (s.rows() != params.p) throw DimensionError("predict: S does not match the model dimension");
  ad::Tape tape;
  const BoundModel model(tape, params, false);
  const SpdState out = spodnet_forward(tape, s, model.update_fns(), cfg, observer);
  return out.theta.value();
}

}  // namespace spodnet
