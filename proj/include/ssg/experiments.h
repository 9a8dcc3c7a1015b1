#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ssg/checkpoint.h"
#include "ssg/config.h"
#include "ssg/metrics.h"
#include "ssg/sampling.h"

namespace ssg {

inline constexpr const char* kMetricsHeader =
    "run_id,method,omega,spatial_r,channel_r,policy,seed,frechet,sliced_w2,diversity";

struct MetricsRow {
  std::string run_id;
  std::string method;  // guidance method, "ssg+cfg" for the combined path
  double omega = 0.0;
  double spatial_r = 0.0;
  double channel_r = 0.0;
  std::string policy;
  uint64_t seed = 0;
  double frechet = 0.0;
  double sliced_w2 = 0.0;
  double diversity = 0.0;
};

std::string FormatMetricsRow(const MetricsRow& row);
std::vector<MetricsRow> ReadMetricsCsv(std::istream& in);

// A trained model plus the held-out reference set it is scored against.
struct EvalContext {
  RunConfig config;
  Checkpoint checkpoint;
  NoiseSchedule schedule;
  SampleSet reference;
};

// Loads the checkpoint named by the config. Throws ConfigError when the
// model or schedule section disagrees with the checkpoint.
EvalContext LoadEvalContext(const RunConfig& config);
EvalContext MakeEvalContext(const RunConfig& config, Checkpoint checkpoint);

// The per-instance conditions of an evaluation run.
std::vector<Condition> EvalConditions(const RunConfig& config, size_t count);

struct EvalResult {
  MetricsRow row;
  SampleResult samples;
};

// Samples config.eval.samples images with `spec` from `seed` and scores them.
EvalResult Evaluate(const EvalContext& ctx, const GuidanceSpec& spec, uint64_t seed,
                    const std::string& run_id);

// Subcommands. Each writes into config.out and returns its metrics rows.
struct TrainSummary {
  size_t steps = 0;
  double first_loss = 0.0;
  double last_loss = 0.0;
};
TrainSummary CmdTrain(const RunConfig& config, std::ostream& log);
std::vector<MetricsRow> CmdSample(const RunConfig& config, std::ostream& log);
std::vector<MetricsRow> CmdSweep(const RunConfig& config, std::ostream& log);
std::vector<MetricsRow> CmdAblate(const RunConfig& config, std::ostream& log);
void CmdAnalyze(const RunConfig& config, std::ostream& log);

// The spec for one ablation row.
struct AblationRow {
  std::string run_id;
  GuidanceSpec spec;
};
std::vector<AblationRow> AblationGrid(const RunConfig& config);

}  // namespace ssg
