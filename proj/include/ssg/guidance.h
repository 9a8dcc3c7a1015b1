#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "ssg/denoiser.h"
#include "ssg/rng.h"
#include "ssg/swap.h"
#include "ssg/tensor.h"

namespace ssg {

// kInputNoise and kAttnIdentity are simplified stand-ins for input-blur and
// attention-perturbation guidance; they exist for directional comparison.
enum class GuidanceMethod { kNone, kCfg, kSsg, kInputNoise, kAttnIdentity };

std::string_view ToString(GuidanceMethod method);
GuidanceMethod ParseGuidanceMethod(std::string_view text);

struct GuidanceSpec {
  GuidanceMethod method = GuidanceMethod::kNone;
  double omega = 0.0;
  // Extra classifier-free term on top of SSG; 0 disables it.
  double omega_cfg = 0.0;
  double spatial_r = 0.0;
  double channel_r = 0.0;
  SwapPolicy policy = SwapPolicy::kDissimilar;
  bool at_block_input = true;
  bool at_pre_residual = true;
  double input_noise_sigma = 0.0;

  // Throws ConfigError naming the offending field.
  void Validate() const;
  // The perturbation of the degraded branch (inactive unless SSG).
  PerturbSpec SwapPerturbation() const;
};

// eps_ori + omega * (eps_ori - eps_pert)
TokenTensor GuidedEpsilon(const TokenTensor& eps_ori, const TokenTensor& eps_pert,
                          double omega);
// eps_cond + omega * (eps_cond - eps_uncond)
TokenTensor CfgEpsilon(const TokenTensor& eps_cond, const TokenTensor& eps_uncond,
                       double omega);

// Per instance and token: mean over channels of |omega * (eps_ori - eps_pert)|.
// Returns a B x T matrix.
Matrix GuidanceMagnitude(const TokenTensor& eps_ori, const TokenTensor& eps_pert,
                         double omega);

struct GuidanceRecord {
  size_t step = 0;      // inference step index
  size_t timestep = 0;  // training timestep
  size_t instance = 0;
  double mean_magnitude = 0.0;
  std::vector<double> map;  // one value per token
};

struct GuidanceTrace {
  std::vector<GuidanceRecord> records;

  // One JSON object per line:
  // {"step":0,"timestep":999,"instance":0,"mean":0.01,"map":[...]}
  void WriteJsonLines(std::ostream& out) const;
  static GuidanceTrace ReadJsonLines(std::istream& in);
};

struct GuidedPrediction {
  TokenTensor eps;  // the guided prediction used by the sampler
  // B x T guidance-magnitude map of the guidance delta (all zeros for kNone).
  Matrix magnitude;
};

// Dispatches on spec.method. All branches of one call run as a single
// batched forward pass. Instance b of every branch draws from rng.Derive(b).
// Throws ConfigError when CFG is requested for a null condition.
GuidedPrediction PredictGuided(const ModelParameters& params, const ModelConfig& cfg,
                               const GuidanceSpec& spec, const TokenTensor& x_t,
                               size_t t, std::span<const Condition> conditions,
                               const RngStream& rng);

}  // namespace ssg
