#pragma once

// Learned column and diagonal updates for sparse precision estimation:
// UBG (unrolled block graphical ISTA), PNP (plug-and-play denoiser) and E2E
// (direct column map), all sharing the positive diagonal network g.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "spodnet/layer.hpp"
#include "spodnet/tensor.hpp"

namespace spodnet {

enum class Variant { Ubg, Pnp, E2e };

std::string_view to_string(Variant v);
/// Accepts "ubg", "pnp", "e2e" (case-insensitive).
Variant parse_variant(std::string_view name);

enum class OutputActivation { Identity, Abs };

/// Floor added to g so the Schur target is strictly positive.
inline constexpr double kDiagonalFloor = 1e-8;

/// Layer widths (input first) of an MLP with ReLU hidden layers.
struct MlpSpec {
  std::vector<Eigen::Index> widths;
  OutputActivation output = OutputActivation::Identity;
};

struct Linear {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
};

struct Mlp {
  std::vector<Linear> layers;
  OutputActivation output = OutputActivation::Identity;

  bool empty() const { return layers.empty(); }
  MlpSpec spec() const;
};

/// Zero-initialised network of the given shape.
Mlp make_mlp(const MlpSpec& spec);

// Architectures; p is the matrix dimension.
MlpSpec gamma_net_spec(Eigen::Index p);   // p-1 -> floor(p/2) -> 1, abs
MlpSpec lambda_net_spec(Eigen::Index p);  // p-1 -> 5 -> p-1, abs
MlpSpec psi_net_spec(Eigen::Index p);     // p-1 -> 2p -> p-1
MlpSpec phi_net_spec(Eigen::Index p);     // p-1 -> 10p -> p-1
MlpSpec g_net_spec();                     // 3 -> 3 -> 3 -> 1, abs

/// Mutable view of one named parameter block.
struct ParamRef {
  std::string name;
  double* data;
  Eigen::Index rows;
  Eigen::Index cols;

  Eigen::Map<Eigen::MatrixXd> map() const { return {data, rows, cols}; }
};

struct ModelParams {
  Variant variant = Variant::Ubg;
  Eigen::Index p = 0;
  double lambda_scale = 1.0;  // 1 for UBG, 0.1 for PNP and E2E
  Mlp gamma_net;              // UBG, PNP
  Mlp lambda_net;
  Mlp denoiser;               // Ψ for PNP, Φ for E2E, empty for UBG
  Mlp g_net;

  /// Every parameter block in a fixed order ("gamma_net.0.weight", ...).
  std::vector<ParamRef> named();
  std::vector<Eigen::MatrixXd> values() const;
  void assign(const std::vector<Eigen::MatrixXd>& values);
  std::size_t count() const;  // scalar parameter count
};

/// Zero-weight model with the architecture of `variant`.
ModelParams make_model(Variant variant, Eigen::Index p);

/// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), seeded.
ModelParams init_params(Variant variant, Eigen::Index p, std::uint64_t seed);

// ---- tape evaluation -------------------------------------------------------

using TensorMap = std::function<ad::Tensor(const ad::Tensor&)>;

/// MLP whose weights live on a tape.
class BoundMlp {
 public:
  BoundMlp() = default;
  BoundMlp(ad::Tape& tape, const Mlp& mlp, bool requires_grad,
           std::vector<ad::Tensor>& leaves);
  /// Uses leaves[cursor...] as weight/bias pairs and advances the cursor.
  BoundMlp(const Mlp& mlp, std::span<const ad::Tensor> leaves, std::size_t& cursor);

  /// Output of the last linear map, before the output activation.
  ad::Tensor preactivation(const ad::Tensor& x) const;
  ad::Tensor operator()(const ad::Tensor& x) const;

 private:
  std::vector<std::pair<ad::Tensor, ad::Tensor>> layers_;
  OutputActivation output_ = OutputActivation::Identity;
};

/// Features of the column being updated.
struct ColumnInputs {
  ad::Tensor theta12;
  ad::Tensor s12;
  ad::Tensor w12;
  TensorMap stabilize;  // empty: no ζ rescaling
};

ColumnInputs column_inputs(const ColumnContext& ctx);

/// θ₁₂ - γ (s₁₂ - w₁₂)
ad::Tensor gista_gradient_step(const ad::Tensor& theta12, const ad::Tensor& s12,
                               const ad::Tensor& w12, const ad::Tensor& gamma);

/// ST_{λ⁺}(θ₁₂ - γ⁺(s₁₂ - w₁₂)), γ⁺ = gamma_net(θ₁₂), λ⁺ = lambda_net(step);
/// the step is ζ-rescaled before thresholding.
ad::Tensor f_ubg(const ColumnInputs& in, const TensorMap& gamma_net,
                 const TensorMap& lambda_net);

/// Ψ(step) with Ψ's last linear output ζ-rescaled and soft-thresholded by
/// lambda_net(step).
ad::Tensor f_pnp(const ColumnInputs& in, const TensorMap& gamma_net,
                 const TensorMap& psi_preactivation, const TensorMap& lambda_net);

/// Φ(θ₁₂), ζ-rescaled and soft-thresholded by lambda_net(θ₁₂).
ad::Tensor f_e2e(const ColumnInputs& in, const TensorMap& phi_preactivation,
                 const TensorMap& lambda_net);

/// v = g_net([θ₂₂, s₂₂, quad]) + kDiagonalFloor (g_net ends with |.|).
ad::Tensor g_eval(const ad::Tensor& theta22, const ad::Tensor& s22, const ad::Tensor& quad,
                  const TensorMap& g_net);

/// ModelParams placed on a tape, exposing the update functions.
class BoundModel {
 public:
  BoundModel(ad::Tape& tape, const ModelParams& params, bool requires_grad);
  /// Binds existing tensors, one per ModelParams::named() block, in that order.
  BoundModel(const ModelParams& params, std::span<const ad::Tensor> leaves);

  UpdateFns update_fns() const;
  /// Leaves in ModelParams::named() order.
  const std::vector<ad::Tensor>& leaves() const { return leaves_; }

  const BoundMlp& gamma_net() const { return gamma_net_; }
  const BoundMlp& lambda_net() const { return lambda_net_; }
  const BoundMlp& denoiser() const { return denoiser_; }
  const BoundMlp& g_net() const { return g_net_; }
  double lambda_scale() const { return lambda_scale_; }
  Variant variant() const { return variant_; }

 private:
  Variant variant_;
  double lambda_scale_;
  std::vector<ad::Tensor> leaves_;
  BoundMlp gamma_net_, lambda_net_, denoiser_, g_net_;
};

/// Θ_out of a trained model on one covariance, no gradient tracking.
Eigen::MatrixXd predict(const ModelParams& params, const Eigen::MatrixXd& s,
                        const LayerConfig& cfg, const UpdateObserver& observer = {});

// ---- checkpoints -------------------------------------------------------------

inline constexpr std::string_view kCheckpointFormat = "SPODNET-CKPT-1";

struct Checkpoint {
  ModelParams params;
  std::uint64_t seed = 0;
  LayerConfig layer;
};

/// JSON text: header fields plus one {name, shape, values} record per
/// parameter block. Doubles are written in shortest round-trip form.
std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace spodnet
