#include "ssg/diffusion.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "ssg/errors.h"

namespace ssg {
namespace {

void RequireSameShape(const TokenTensor& a, const TokenTensor& b, const char* op) {
  if (!a.SameShape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

NoiseSchedule NoiseSchedule::Linear(size_t train_steps, double beta_start,
                                    double beta_end) {
  if (train_steps < 2) throw ConfigError("schedule.train_steps: must be >= 2");
  if (!(beta_start > 0.0 && beta_start < 1.0)) {
    throw ConfigError("schedule.beta_start: must lie in (0, 1)");
  }
  if (!(beta_end >= beta_start && beta_end < 1.0)) {
    throw ConfigError("schedule.beta_end: must lie in [beta_start, 1)");
  }
  NoiseSchedule s;
  s.train_steps = train_steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(train_steps);
  s.alpha.resize(train_steps);
  s.alpha_bar.resize(train_steps);
  s.sigma.resize(train_steps);
  s.lambda_weight.assign(train_steps, 1.0);
  double running = 1.0;
  for (size_t t = 0; t < train_steps; ++t) {
    const double frac = static_cast<double>(t) / static_cast<double>(train_steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
    s.sigma[t] = std::sqrt(1.0 - running);
  }
  return s;
}

double NoiseSchedule::AlphaBar(long t) const {
  if (t == kCleanStep) return 1.0;
  if (t < 0 || static_cast<size_t>(t) >= train_steps) {
    throw ShapeError("schedule index " + std::to_string(t) + " outside [0, " +
                     std::to_string(train_steps) + ")");
  }
  return alpha_bar[static_cast<size_t>(t)];
}

double NoiseSchedule::KarrasSigma(long t) const {
  const double ab = AlphaBar(t);
  return std::sqrt((1.0 - ab) / ab);
}

std::string_view ToString(SamplerKind kind) {
  return kind == SamplerKind::kDdim ? "ddim" : "euler";
}

SamplerKind ParseSamplerKind(std::string_view text) {
  if (text == "ddim") return SamplerKind::kDdim;
  if (text == "euler") return SamplerKind::kEulerDiscrete;
  throw ConfigError("unknown sampler '" + std::string(text) + "' (expected ddim|euler)");
}

void SamplerConfig::Validate(const NoiseSchedule& schedule) const {
  if (num_inference_steps < 1 || num_inference_steps > schedule.train_steps) {
    throw ConfigError("sampler.steps: must lie in [1, schedule.train_steps]");
  }
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("sampler.eta: must lie in [0, 1]");
}

std::vector<size_t> InferenceTimesteps(const NoiseSchedule& schedule, size_t n) {
  if (n < 1 || n > schedule.train_steps) {
    throw ConfigError("inference steps must lie in [1, train_steps]");
  }
  std::vector<size_t> steps(n);
  for (size_t i = 0; i < n; ++i) {
    steps[i] = schedule.train_steps - 1 - (i * schedule.train_steps) / n;
  }
  return steps;
}

TokenTensor AddNoise(const NoiseSchedule& schedule, const TokenTensor& x0, long t,
                     const TokenTensor& eps) {
  RequireSameShape(x0, eps, "AddNoise");
  if (t < 0) throw ShapeError("AddNoise: timestep must be >= 0");
  const double ab = schedule.AlphaBar(t);
  const double signal = std::sqrt(ab);
  const double noise = std::sqrt(1.0 - ab);
  TokenTensor out(x0.batch(), x0.tokens(), x0.channels());
  auto dst = out.mutable_data();
  auto a = x0.data();
  auto e = eps.data();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = signal * a[i] + noise * e[i];
  CheckFinite(dst, "AddNoise output");
  return out;
}

TokenTensor DdimStepAlphas(const TokenTensor& x_t, const TokenTensor& eps_hat,
                           double alpha_bar_from, double alpha_bar_to, double eta,
                           std::span<RngStream> rng) {
  RequireSameShape(x_t, eps_hat, "DdimStep");
  const double sigma_from = std::sqrt(1.0 - alpha_bar_from);
  const double sqrt_from = std::sqrt(alpha_bar_from);
  const double sqrt_to = std::sqrt(alpha_bar_to);
  double noise_std = 0.0;
  if (eta > 0.0) {
    const double variance = (1.0 - alpha_bar_to) / (1.0 - alpha_bar_from) *
                            (1.0 - alpha_bar_from / alpha_bar_to);
    noise_std = eta * std::sqrt(std::max(variance, 0.0));
    if (rng.size() != x_t.batch()) {
      throw ShapeError("DdimStep: eta > 0 needs one rng stream per instance");
    }
  }
  const double direction = std::sqrt(std::max(1.0 - alpha_bar_to - noise_std * noise_std, 0.0));
  TokenTensor out(x_t.batch(), x_t.tokens(), x_t.channels());
  const size_t per = x_t.instance_size();
  auto x = x_t.data();
  auto e = eps_hat.data();
  auto dst = out.mutable_data();
  for (size_t b = 0; b < x_t.batch(); ++b) {
    for (size_t i = b * per; i < (b + 1) * per; ++i) {
      const double x0_hat = (x[i] - sigma_from * e[i]) / sqrt_from;
      dst[i] = sqrt_to * x0_hat + direction * e[i];
      if (noise_std > 0.0) dst[i] += noise_std * rng[b].Normal();
    }
  }
  CheckFinite(dst, "DdimStep output");
  return out;
}

TokenTensor DdimStep(const TokenTensor& x_t, const TokenTensor& eps_hat, long t_from,
                     long t_to, const NoiseSchedule& schedule, double eta,
                     std::span<RngStream> rng) {
  if (t_from < 0) throw ShapeError("DdimStep: t_from must be a training step");
  if (t_to >= t_from) throw ShapeError("DdimStep: t_to must be < t_from");
  return DdimStepAlphas(x_t, eps_hat, schedule.AlphaBar(t_from), schedule.AlphaBar(t_to),
                        eta, rng);
}

TokenTensor EulerDenoised(const TokenTensor& x, const TokenTensor& eps_hat, double sigma) {
  RequireSameShape(x, eps_hat, "EulerDenoised");
  TokenTensor out(x.batch(), x.tokens(), x.channels());
  auto dst = out.mutable_data();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = x.data()[i] - sigma * eps_hat.data()[i];
  return out;
}

TokenTensor EulerStep(const TokenTensor& x, const TokenTensor& eps_hat, double sigma_from,
                      double sigma_to) {
  RequireSameShape(x, eps_hat, "EulerStep");
  if (!(sigma_from > 0.0)) throw ShapeError("EulerStep: sigma_from must be > 0");
  if (!(sigma_to >= 0.0 && sigma_to <= sigma_from)) {
    throw ShapeError("EulerStep: need 0 <= sigma_to <= sigma_from");
  }
  const double dt = sigma_to - sigma_from;
  TokenTensor out(x.batch(), x.tokens(), x.channels());
  auto dst = out.mutable_data();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = x.data()[i] + dt * eps_hat.data()[i];
  CheckFinite(dst, "EulerStep output");
  return out;
}

TokenTensor DrawNoise(size_t batch, size_t tokens, size_t channels,
                      std::span<RngStream> rng) {
  if (rng.size() != batch) throw ShapeError("DrawNoise: one rng stream per instance");
  TokenTensor out(batch, tokens, channels);
  for (size_t b = 0; b < batch; ++b) {
    for (double& v : out.instance(b)) v = rng[b].Normal();
  }
  return out;
}

TokenTensor RunSampler(const NoiseSchedule& schedule, const SamplerConfig& sampler,
                       const TokenTensor& noise, const EpsilonFn& epsilon,
                       std::span<RngStream> rng) {
  sampler.Validate(schedule);
  const std::vector<size_t> steps = InferenceTimesteps(schedule, sampler.num_inference_steps);
  auto next_step = [&](size_t i) {
    return i + 1 < steps.size() ? static_cast<long>(steps[i + 1]) : NoiseSchedule::kCleanStep;
  };

  if (sampler.kind == SamplerKind::kDdim) {
    TokenTensor x = noise;
    for (size_t i = 0; i < steps.size(); ++i) {
      const TokenTensor eps = epsilon(x, steps[i], i);
      x = DdimStep(x, eps, static_cast<long>(steps[i]), next_step(i), schedule,
                   sampler.eta, rng);
    }
    return x;
  }

  // Euler in sigma space: x_sigma = x_vp / sqrt(alpha_bar), sigma^2 + 1 = 1 / alpha_bar.
  const double sigma_max = schedule.KarrasSigma(static_cast<long>(steps.front()));
  TokenTensor x = noise;
  const double init_scale = std::sqrt(sigma_max * sigma_max + 1.0);
  for (double& v : x.mutable_data()) v *= init_scale;
  for (size_t i = 0; i < steps.size(); ++i) {
    const double sigma = schedule.KarrasSigma(static_cast<long>(steps[i]));
    const double sigma_next = schedule.KarrasSigma(next_step(i));
    const double in_scale = 1.0 / std::sqrt(sigma * sigma + 1.0);
    TokenTensor model_in = x;
    for (double& v : model_in.mutable_data()) v *= in_scale;
    const TokenTensor eps = epsilon(model_in, steps[i], i);
    x = EulerStep(x, eps, sigma, sigma_next);
  }
  return x;
}

DsmBatch DrawDsmBatch(const NoiseSchedule& schedule, const TokenTensor& x0,
                      std::span<const Condition> labels, double cond_dropout_prob,
                      RngStream& rng) {
  if (labels.size() != x0.batch()) throw ShapeError("DrawDsmBatch: one label per instance");
  DsmBatch batch;
  batch.eps = TokenTensor(x0.batch(), x0.tokens(), x0.channels());
  batch.timesteps.resize(x0.batch());
  batch.conditions.resize(x0.batch());
  for (size_t b = 0; b < x0.batch(); ++b) {
    batch.timesteps[b] = rng.UniformIndex(schedule.train_steps);
    const bool drop = rng.Uniform() < cond_dropout_prob;
    batch.conditions[b] = drop ? Condition::Null() : labels[b];
    for (double& v : batch.eps.instance(b)) v = rng.Normal();
  }
  batch.x_t = TokenTensor(x0.batch(), x0.tokens(), x0.channels());
  for (size_t b = 0; b < x0.batch(); ++b) {
    const double ab = schedule.AlphaBar(static_cast<long>(batch.timesteps[b]));
    const double signal = std::sqrt(ab);
    const double noise = std::sqrt(1.0 - ab);
    auto dst = batch.x_t.instance(b);
    auto src = x0.instance(b);
    auto e = batch.eps.instance(b);
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = signal * src[i] + noise * e[i];
  }
  return batch;
}

DsmLossValue DsmLossFromPrediction(const TokenTensor& prediction, const DsmBatch& batch,
                                   const NoiseSchedule& schedule) {
  RequireSameShape(prediction, batch.eps, "DsmLoss");
  const size_t n = prediction.batch();
  DsmLossValue out;
  out.grad = TokenTensor(n, prediction.tokens(), prediction.channels());
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (size_t b = 0; b < n; ++b) {
    const double weight = schedule.lambda_weight[batch.timesteps[b]];
    auto p = prediction.instance(b);
    auto e = batch.eps.instance(b);
    auto g = out.grad.instance(b);
    double sq = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
      const double diff = p[i] - e[i];
      sq += diff * diff;
      g[i] = 2.0 * weight * diff * inv_n;
    }
    total += weight * sq;
  }
  out.loss = total * inv_n;
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite training loss");
  return out;
}

DsmLossResult DsmLoss(const ModelParameters& params, const ModelConfig& cfg,
                      const NoiseSchedule& schedule, const TokenTensor& x0,
                      std::span<const Condition> labels, RngStream& rng) {
  const DsmBatch batch = DrawDsmBatch(schedule, x0, labels, cfg.cond_dropout_prob, rng);
  thread_local ForwardCache cache;
  const TokenTensor pred =
      ForwardWithoutHooks(params, cfg, batch.x_t, batch.timesteps, batch.conditions, &cache);
  DsmLossValue value = DsmLossFromPrediction(pred, batch, schedule);
  return {value.loss, Backward(params, cfg, value.grad, cache)};
}

}  // namespace ssg
