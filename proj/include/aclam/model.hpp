#pragma once

// Latent action model: inverse dynamics encoder, vector-quantized bottleneck,
// image and proprioceptive forward dynamics decoders, and every loss term of
// the training objective.
//
// All batched quantities are 2-D [batch x features]. Images are flattened
// H*W*3 rows; states are 2-wide rows.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aclam/tensor.hpp"

namespace aclam::lam {

using ad::Graph;
using ad::Tensor;

enum class Placement { kPostVq, kPreVq };
enum class AcForm { kFdm, kIdmNoSg, kIdmSgZik, kIdmSgSum };
enum class IdmVariant { kNoSg, kSgZik, kSgSum };

std::string to_string(Placement p);
std::string to_string(AcForm f);
/// Throws std::invalid_argument on unknown names. Accepts "post"/"post_vq", "pre"/"pre_vq".
Placement parse_placement(const std::string& s);
/// Accepts "fdm", "idm-no-sg", "idm-sg-zik", "idm-sg-sum" (underscores also accepted).
AcForm parse_ac_form(const std::string& s);

struct ModelConfig {
  int image_h = 32;
  int image_w = 32;
  std::vector<int> idm_hidden{256, 256};
  std::vector<int> fdm_hidden{256, 256};
  std::vector<int> proprio_hidden{64};
  int codebook_size = 32;
  int code_dim = 8;
  int n_tokens = 2;
  /// Quantizer forward returns z_pre unchanged. A differentiable surrogate whose
  /// exact gradient equals the straight-through estimate; used for gradient checks.
  bool vq_identity = false;

  int image_dim() const { return image_h * image_w * 3; }
  int latent_dim() const { return n_tokens * code_dim; }
};

struct LossWeights {
  double lambda_ac = 1.0;
  double beta_commit = 0.25;
  double w_codebook = 1.0;
  double w_proprio = 1.0;
  /// Apply the composition term to the proprioceptive decoder as well.
  bool ac_proprio = true;

  void validate() const;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
};

/// tanh hidden layers, linear output.
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Tensor<T> forward(Graph<T>& g, const Tensor<T>& x) const;
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Mlp<T> idm;
  Tensor<T> codebook;  // [K x code_dim]
  Mlp<T> fdm_img;
  Mlp<T> fdm_proprio;

  /// Weights and biases uniform in +-1/sqrt(fan_in); codebook uniform in [-0.5, 0.5].
  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);

  /// Every learnable array with a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> named() const;
  void zero_grad();
  /// Deep copy with independent storage.
  ModelParams clone() const;
  template <typename U>
  ModelParams<U> cast() const;
};

/// Quantized latent for a batch of pairs.
template <typename T>
struct LatentBatch {
  Tensor<T> z_pre;                   // [B x L]
  std::vector<std::size_t> indices;  // B * n_tokens codebook rows, token-major within a sample
  Tensor<T> codes;                   // [B x L], gathered codebook rows (gradient reaches the codebook)
  Tensor<T> z;                       // [B x L], value == codes, gradient passes straight to z_pre

  /// Latent at the requested placement.
  const Tensor<T>& at(Placement p) const { return p == Placement::kPostVq ? z : z_pre; }
};

template <typename T>
struct PairBatch {
  Tensor<T> o_i, o_j;  // [B x image_dim]
  Tensor<T> s_i, s_j;  // [B x 2]
  std::size_t size() const { return o_i.dim(0); }
};

template <typename T>
struct TripleBatch {
  Tensor<T> o_i, o_j, o_k;
  Tensor<T> s_i, s_j, s_k;
  std::size_t size() const { return o_i.dim(0); }
};

template <typename T>
Tensor<T> idm_forward(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& o_i,
                      const Tensor<T>& o_j);

/// Nearest codebook row per token slice (Euclidean, ties to the lowest index).
template <typename T>
LatentBatch<T> vq_quantize(Graph<T>& g, const Tensor<T>& z_pre, const Tensor<T>& codebook,
                           int n_tokens, bool identity = false);

/// idm_forward followed by vq_quantize.
template <typename T>
LatentBatch<T> encode(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& o_i,
                      const Tensor<T>& o_j);

/// Predicted next image, squashed to [0, 1] by a logistic sigmoid.
template <typename T>
Tensor<T> fdm_img(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& o_i,
                  const Tensor<T>& z);

template <typename T>
Tensor<T> fdm_proprio(Graph<T>& g, const ModelParams<T>& params, const Tensor<T>& s_i,
                      const Tensor<T>& z);

template <typename T>
struct RecLoss {
  Tensor<T> image;    // mse(o_j, F(o_i, z))
  Tensor<T> proprio;  // mse(s_j, P(s_i, z))
  Tensor<T> total;    // image + w_proprio * proprio
};

template <typename T>
RecLoss<T> loss_rec(Graph<T>& g, const ModelParams<T>& params, const PairBatch<T>& batch,
                    const LatentBatch<T>& latent, const LossWeights& w);

/// w_codebook * |sg(z_pre) - code|^2 + beta * |z_pre - sg(code)|^2, squared norms per
/// token slice averaged over tokens and batch.
template <typename T>
Tensor<T> loss_vq(Graph<T>& g, const LatentBatch<T>& latent, int code_dim, const LossWeights& w);

/// Decode o_k from o_i with the summed latents z_ij + z_jk (and the proprio analogue).
template <typename T>
Tensor<T> loss_ac_fdm(Graph<T>& g, const ModelParams<T>& params, const TripleBatch<T>& batch,
                      const Tensor<T>& z_ij, const Tensor<T>& z_jk, const LossWeights& w);

/// Batch mean of |z_ik - z_ij - z_jk|^2 with the requested stop-gradient placement.
template <typename T>
Tensor<T> loss_ac_idm(Graph<T>& g, const Tensor<T>& z_ik, const Tensor<T>& z_ij,
                      const Tensor<T>& z_jk, IdmVariant variant);

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  double rec = 0;      // image reconstruction
  double proprio = 0;  // proprio reconstruction (unweighted)
  double vq = 0;       // weighted codebook + commitment
  double ac = 0;       // composition term (unweighted by lambda)
  double mean_z_norm = 0;
  /// Codebook rows selected by the pair batch.
  std::vector<std::size_t> pair_indices;
  /// Pre-quantization pair latents, for dead-code reseeding.
  std::vector<T> pair_z_pre;
};

/// rec + w_proprio * proprio + vq + lambda_ac * ac.
/// With lambda_ac == 0 the triple batch is not evaluated at all.
template <typename T>
LossBreakdown<T> total_loss(Graph<T>& g, const ModelParams<T>& params, const PairBatch<T>& pairs,
                            const TripleBatch<T>& triples, const LossWeights& w, AcForm form,
                            Placement placement);

/// Inference-only latents for a batch of image pairs, [B x L].
template <typename T>
Tensor<T> latent(const ModelParams<T>& params, const Tensor<T>& o_i, const Tensor<T>& o_j,
                 Placement placement);

}  // namespace aclam::lam
