#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "ssg/denoiser.h"
#include "ssg/rng.h"
#include "ssg/tensor.h"

namespace ssg {

// Discrete variance-preserving schedule. Index t in [0, train_steps); the
// pseudo-index kCleanStep (-1) denotes the data end, alpha_bar = 1.
struct NoiseSchedule {
  static constexpr long kCleanStep = -1;

  size_t train_steps = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;          // sqrt(1 - alpha_bar)
  std::vector<double> lambda_weight;  // per-step loss weights

  // Linearly spaced betas. Throws ConfigError for invalid arguments.
  static NoiseSchedule Linear(size_t train_steps = 1000, double beta_start = 1e-4,
                              double beta_end = 0.02);

  // alpha_bar at t, with AlphaBar(kCleanStep) == 1. Throws ShapeError when
  // t is out of range.
  double AlphaBar(long t) const;
  // sqrt((1 - alpha_bar) / alpha_bar): noise level of the rescaled process.
  double KarrasSigma(long t) const;
};

enum class SamplerKind { kDdim, kEulerDiscrete };

std::string_view ToString(SamplerKind kind);
SamplerKind ParseSamplerKind(std::string_view text);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::kDdim;
  size_t num_inference_steps = 50;
  double eta = 0.0;

  void Validate(const NoiseSchedule& schedule) const;
};

// Evenly spaced training steps, largest first, always starting at
// train_steps - 1: t_i = train_steps - 1 - floor(i * train_steps / n).
std::vector<size_t> InferenceTimesteps(const NoiseSchedule& schedule, size_t n);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
TokenTensor AddNoise(const NoiseSchedule& schedule, const TokenTensor& x0,
                     long t, const TokenTensor& eps);

// One DDIM update between cumulative alphas. With eta > 0 the fresh noise
// for instance b comes from rng[b]; with eta == 0 no draws are made and
// `rng` may be empty.
TokenTensor DdimStepAlphas(const TokenTensor& x_t, const TokenTensor& eps_hat,
                           double alpha_bar_from, double alpha_bar_to,
                           double eta, std::span<RngStream> rng);
TokenTensor DdimStep(const TokenTensor& x_t, const TokenTensor& eps_hat,
                     long t_from, long t_to, const NoiseSchedule& schedule,
                     double eta, std::span<RngStream> rng);

// Denoised estimate x - sigma * eps_hat in the rescaled (x / sqrt(alpha_bar))
// coordinates.
TokenTensor EulerDenoised(const TokenTensor& x, const TokenTensor& eps_hat,
                          double sigma);
// First-order step x + (sigma_to - sigma_from) * d, where for an epsilon
// predictor d = (x - denoised) / sigma_from reduces to eps_hat exactly.
TokenTensor EulerStep(const TokenTensor& x, const TokenTensor& eps_hat,
                      double sigma_from, double sigma_to);

// Standard-normal tensor; instance b draws only from rng[b].
TokenTensor DrawNoise(size_t batch, size_t tokens, size_t channels,
                      std::span<RngStream> rng);

// Called once per inference step with the model-space input x_t (VP
// scaling), the training timestep and the step index.
using EpsilonFn =
    std::function<TokenTensor(const TokenTensor& x_t, size_t t, size_t step)>;

// Runs the configured sampler from `noise` (standard normal) down to the
// data end. Returns the final sample in data space.
TokenTensor RunSampler(const NoiseSchedule& schedule, const SamplerConfig& sampler,
                       const TokenTensor& noise, const EpsilonFn& epsilon,
                       std::span<RngStream> rng);

// One draw of the denoising score-matching objective.
struct DsmBatch {
  TokenTensor x_t;
  TokenTensor eps;
  std::vector<size_t> timesteps;
  std::vector<Condition> conditions;
};

// Per instance, in order: t uniform over training steps, a dropout coin
// (label replaced by the null condition with probability cond_dropout_prob),
// then the noise tensor.
DsmBatch DrawDsmBatch(const NoiseSchedule& schedule, const TokenTensor& x0,
                      std::span<const Condition> labels,
                      double cond_dropout_prob, RngStream& rng);

struct DsmLossValue {
  double loss = 0.0;
  TokenTensor grad;  // d loss / d prediction
};

// mean_b lambda(t_b) * || pred_b - eps_b ||^2 and its gradient.
DsmLossValue DsmLossFromPrediction(const TokenTensor& prediction,
                                   const DsmBatch& batch,
                                   const NoiseSchedule& schedule);

struct DsmLossResult {
  double loss = 0.0;
  ModelParameters grads;
};

// Loss and parameter gradients for one minibatch. With the epsilon
// parametrization the score is s = -eps / sigma_t, so this objective is the
// score-matching loss reweighted by sigma_t^2.
DsmLossResult DsmLoss(const ModelParameters& params, const ModelConfig& cfg,
                      const NoiseSchedule& schedule, const TokenTensor& x0,
                      std::span<const Condition> labels, RngStream& rng);

}  // namespace ssg
