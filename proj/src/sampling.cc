#include "ssg/sampling.h"

#include <numeric>

#include "ssg/errors.h"

namespace ssg {

SampleResult Sample(const ModelParameters& params, const ModelConfig& cfg,
                    const NoiseSchedule& schedule, const SamplerConfig& sampler,
                    const GuidanceSpec& guidance,
                    std::span<const Condition> conditions, const RngStream& rng,
                    bool record_trace) {
  if (conditions.empty()) throw ConfigError("sample: no instances requested");
  guidance.Validate();
  const size_t batch = conditions.size();

  std::vector<RngStream> noise_rng;
  std::vector<RngStream> step_rng;
  noise_rng.reserve(batch);
  step_rng.reserve(batch);
  const RngStream noise_root = rng.Derive(0);
  const RngStream eta_root = rng.Derive(2);
  for (size_t b = 0; b < batch; ++b) {
    noise_rng.push_back(noise_root.Derive(b));
    step_rng.push_back(eta_root.Derive(b));
  }
  const TokenTensor noise = DrawNoise(batch, cfg.tokens(), cfg.patch_dim(), noise_rng);

  SampleResult result;
  const RngStream guide_root = rng.Derive(1);
  auto epsilon = [&](const TokenTensor& x_t, size_t t, size_t step) {
    GuidedPrediction p =
        PredictGuided(params, cfg, guidance, x_t, t, conditions, guide_root.Derive(step));
    if (record_trace) {
      const size_t tokens = p.magnitude.cols();
      for (size_t b = 0; b < batch; ++b) {
        GuidanceRecord r;
        r.step = step;
        r.timestep = t;
        r.instance = b;
        auto row = p.magnitude.row(b);
        r.map.assign(row.begin(), row.end());
        r.mean_magnitude = std::accumulate(row.begin(), row.end(), 0.0) /
                           static_cast<double>(tokens);
        result.trace.records.push_back(std::move(r));
      }
    }
    return std::move(p.eps);
  };
  result.tokens = RunSampler(schedule, sampler, noise, epsilon, step_rng);
  CheckFinite(result.tokens.data(), "sample");
  result.images = UnpatchifyBatch(result.tokens, cfg);
  return result;
}

}  // namespace ssg
