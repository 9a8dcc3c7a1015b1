#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ssg/rng.h"
#include "ssg/swap.h"
#include "ssg/tensor.h"

namespace ssg {

struct ModelConfig {
  size_t image_side = 16;
  size_t patch_side = 4;
  size_t channels = 64;
  size_t blocks = 4;
  size_t heads = 4;
  double mlp_ratio = 4.0;
  size_t num_classes = 3;
  double cond_dropout_prob = 0.1;

  size_t grid_side() const { return image_side / patch_side; }
  size_t tokens() const { return grid_side() * grid_side(); }
  size_t patch_dim() const { return patch_side * patch_side; }
  size_t head_dim() const { return channels / heads; }
  size_t hidden() const;

  // Throws ConfigError naming the offending field.
  void Validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Class label, or the null condition (the extra embedding row).
struct Condition {
  std::optional<size_t> class_id;

  static Condition Null() { return {}; }
  static Condition Class(size_t id) { return {id}; }
  bool is_null() const { return !class_id.has_value(); }
  bool operator==(const Condition&) const = default;
};

// Perturbation applied inside one forward pass. Swaps run on the residual
// stream at the start of every block and/or on the attention and MLP branch
// outputs right before their residual additions; spatial first, then
// channel, each with its own ratio. `identity_attention` replaces every
// attention-weight matrix with the identity (used by a baseline).
struct PerturbSpec {
  bool active = false;
  double spatial_r = 0.0;
  double channel_r = 0.0;
  SwapPolicy policy = SwapPolicy::kDissimilar;
  bool at_block_input = true;
  bool at_pre_residual = true;
  bool identity_attention = false;
};

struct BlockParameters {
  std::vector<double> ln1_gain, ln1_bias;  // D
  std::vector<double> qkv_weight;          // D x 3D
  std::vector<double> qkv_bias;            // 3D
  std::vector<double> attn_out_weight;     // D x D
  std::vector<double> attn_out_bias;       // D
  std::vector<double> ln2_gain, ln2_bias;  // D
  std::vector<double> mlp_in_weight;       // D x hidden
  std::vector<double> mlp_in_bias;         // hidden
  std::vector<double> mlp_out_weight;      // hidden x D
  std::vector<double> mlp_out_bias;        // D
};

template <typename Values>
struct TensorSlot {
  std::string name;
  std::vector<size_t> shape;
  Values* values;
};
using ParamSlot = TensorSlot<std::vector<double>>;
using ConstParamSlot = TensorSlot<const std::vector<double>>;

// All weights of the denoiser. Gradients use the same type.
struct ModelParameters {
  std::vector<double> patch_weight;  // P x D
  std::vector<double> patch_bias;    // D
  std::vector<double> pos_embed;     // T x D
  std::vector<double> time_w1;       // D x D
  std::vector<double> time_b1;       // D
  std::vector<double> time_w2;       // D x D
  std::vector<double> time_b2;       // D
  std::vector<double> class_embed;   // (num_classes + 1) x D, last row = null
  std::vector<BlockParameters> blocks;
  std::vector<double> final_ln_gain, final_ln_bias;  // D
  std::vector<double> head_weight;                   // D x P
  std::vector<double> head_bias;                     // P

  static ModelParameters Zeros(const ModelConfig& cfg);
  static ModelParameters Initialize(const ModelConfig& cfg, RngStream& rng);

  // Every tensor in declared (checkpoint) order.
  std::vector<ParamSlot> Tensors();
  std::vector<ConstParamSlot> Tensors() const;
  size_t ParameterCount() const;

  bool operator==(const ModelParameters& other) const;
};

// Activations retained by a training forward pass.
struct ForwardCache {
  struct Block {
    std::vector<double> h_in, ln1_out, ln1_mean, ln1_rstd, qkv, probs, attn_cat;
    std::vector<double> h_mid, ln2_out, ln2_mean, ln2_rstd, mlp_act;
    std::vector<double> mlp_dgelu;  // GELU derivative at the MLP pre-activation
  };
  size_t batch = 0;
  bool valid = false;
  std::vector<size_t> timesteps;
  std::vector<Condition> conditions;
  std::vector<double> tokens_in;  // B x T x P
  std::vector<double> time_sin;   // B x D
  std::vector<double> time_pre;   // B x D
  std::vector<double> time_act;   // B x D
  std::vector<Block> blocks;
  std::vector<double> h_out, lnf_out, lnf_mean, lnf_rstd;
};

// Sinusoidal embedding (sin half then cos half) of length d, before the MLP.
std::vector<double> TimestepEmbedding(size_t t, size_t d);

// Raster-order non-overlapping patches. `image` is side x side row-major.
TokenTensor Patchify(std::span<const double> image, const ModelConfig& cfg);
// All images of a B x side x side buffer.
TokenTensor PatchifyBatch(std::span<const double> images, size_t count,
                          const ModelConfig& cfg);
std::vector<double> Unpatchify(const TokenTensor& tokens, size_t b,
                               const ModelConfig& cfg);
std::vector<double> UnpatchifyBatch(const TokenTensor& tokens,
                                    const ModelConfig& cfg);

// Per-instance arguments of a batched forward pass. All spans have length
// x.batch(); rng[b] drives the Random swap policy of instance b only.
struct BatchInputs {
  std::span<const size_t> timesteps;
  std::span<const Condition> conditions;
  std::span<const PerturbSpec> perturb;
  std::span<const RngStream> rng;
};

// The general entry point. Each instance is computed independently with
// identically shaped kernels, so an instance's output does not depend on
// what else is in the batch.
TokenTensor ForwardBatch(const ModelParameters& params, const ModelConfig& cfg,
                         const TokenTensor& x, const BatchInputs& inputs,
                         ForwardCache* cache = nullptr);

// Same network with the perturbation hooks compiled out.
TokenTensor ForwardWithoutHooks(const ModelParameters& params,
                                const ModelConfig& cfg, const TokenTensor& x,
                                std::span<const size_t> timesteps,
                                std::span<const Condition> conditions,
                                ForwardCache* cache = nullptr);

// epsilon prediction for x_t (B x T x patch_dim) at one timestep and one
// condition. Instance b uses rng.Derive(b).
TokenTensor Forward(const ModelParameters& params, const ModelConfig& cfg,
                    const TokenTensor& x_t, size_t t, const Condition& cond,
                    const PerturbSpec& perturb, const RngStream& rng);

// (eps_ori, eps_pert) from one batch holding the clean and perturbed copies.
std::pair<TokenTensor, TokenTensor> ForwardTwoBranch(
    const ModelParameters& params, const ModelConfig& cfg,
    const TokenTensor& x_t, size_t t, const Condition& cond,
    const PerturbSpec& perturb, const RngStream& rng);

// Parameter gradients of sum(grad_out * eps) for the pass recorded in
// `cache`. Throws std::logic_error if the cache is missing.
ModelParameters Backward(const ModelParameters& params, const ModelConfig& cfg,
                         const TokenTensor& grad_out, const ForwardCache& cache);

}  // namespace ssg
