#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ssg/dataset.h"
#include "ssg/denoiser.h"
#include "ssg/diffusion.h"
#include "ssg/guidance.h"

namespace ssg {

struct ScheduleConfig {
  size_t train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  NoiseSchedule Build() const { return NoiseSchedule::Linear(train_steps, beta_start, beta_end); }
  bool operator==(const ScheduleConfig&) const = default;
};

struct TrainConfig {
  size_t steps = 15000;
  size_t batch = 32;
  double learning_rate = 2e-3;
  uint64_t seed = 0;
};

enum class EvalCondition { kCycle, kNull };

struct EvalConfig {
  size_t samples = 256;
  // cycle: instance i gets class i % num_classes; null: unconditional.
  EvalCondition condition = EvalCondition::kCycle;
  size_t projections = 128;
};

struct AblateConfig {
  // CFG scale of the combined SSG+CFG row.
  double omega_cfg = 1.0;
};

struct AnalyzeConfig {
  size_t samples = 8;
};

struct SweepConfig {
  std::string axis = "omega";  // omega | ratio
  std::vector<double> values = {0.0, 0.5, 1.0, 2.0, 4.0};
};

struct RunConfig {
  ModelConfig model;
  ScheduleConfig schedule;
  SamplerConfig sampler;
  GuidanceSpec guidance;
  DatasetSpec dataset;
  TrainConfig train;
  EvalConfig eval;
  SweepConfig sweep;
  AblateConfig ablate;
  AnalyzeConfig analyze;
  uint64_t seed = 0;
  std::string out = "runs/default";
  // Empty means <out>/model.ckpt.
  std::string checkpoint;

  // Throws ConfigError with the offending key path.
  void Validate() const;
  std::string CheckpointPath() const;
};

// Flat "section.key = value" lines; '#' starts a comment. Unknown keys and
// malformed values raise ConfigError naming `source`, the line and the key.
RunConfig ParseConfig(std::string_view text, std::string_view source = "<string>");
RunConfig LoadConfig(const std::string& path);
// Every key in a stable order; ParseConfig(ToText(c)) reproduces c.
std::string ToText(const RunConfig& config);

// Assigns one key; used for command-line overrides.
void SetConfigValue(RunConfig& config, std::string_view key, std::string_view value);

}  // namespace ssg
