#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ssg/denoiser.h"
#include "ssg/diffusion.h"
#include "ssg/guidance.h"
#include "ssg/rng.h"
#include "ssg/tensor.h"

namespace ssg {

struct SampleResult {
  TokenTensor tokens;          // final sample, B x T x patch_dim
  std::vector<double> images;  // B x side x side, row-major
  GuidanceTrace trace;         // empty unless requested
};

// Guided sampling of conditions.size() images. Instance b takes its initial
// noise from rng.Derive(0).Derive(b) and its stochastic-sampler noise from
// rng.Derive(2).Derive(b); step s hands rng.Derive(1).Derive(s) to the
// guided forward. An instance's output depends only on its own index,
// condition and the seed, not on the batch it was sampled with.
SampleResult Sample(const ModelParameters& params, const ModelConfig& cfg,
                    const NoiseSchedule& schedule, const SamplerConfig& sampler,
                    const GuidanceSpec& guidance,
                    std::span<const Condition> conditions, const RngStream& rng,
                    bool record_trace = false);

}  // namespace ssg
