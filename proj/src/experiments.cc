#include "ssg/experiments.h"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "ssg/errors.h"
#include "ssg/image_io.h"
#include "ssg/train.h"

namespace ssg {
namespace {

namespace fs = std::filesystem;

std::string Num(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string MethodLabel(const GuidanceSpec& spec) {
  if (spec.method == GuidanceMethod::kSsg && spec.omega_cfg > 0.0) return "ssg+cfg";
  return std::string(ToString(spec.method));
}

void EnsureDir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::ofstream OpenOut(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

void WriteText(const std::string& path, const std::string& text) {
  std::ofstream out = OpenOut(path);
  out << text;
  if (!out) throw IoError("write failed for '" + path + "'");
}

void WriteRows(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::string text = std::string(kMetricsHeader) + "\n";
  for (const MetricsRow& r : rows) text += FormatMetricsRow(r) + "\n";
  WriteText(path, text);
}

SampleSet ImagesAsSet(const std::vector<double>& images, size_t side) {
  const size_t dim = side * side;
  return SampleSet(images.size() / dim, dim, images);
}

void LogRow(std::ostream& log, const MetricsRow& r) {
  log << r.run_id << ": frechet=" << r.frechet << " sliced_w2=" << r.sliced_w2
      << " diversity=" << r.diversity << std::endl;
}

}  // namespace

std::string FormatMetricsRow(const MetricsRow& r) {
  return r.run_id + "," + r.method + "," + Num(r.omega) + "," + Num(r.spatial_r) + "," +
         Num(r.channel_r) + "," + r.policy + "," + std::to_string(r.seed) + "," +
         Num(r.frechet) + "," + Num(r.sliced_w2) + "," + Num(r.diversity);
}

std::vector<MetricsRow> ReadMetricsCsv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw IoError("metrics CSV: unexpected header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 10) throw IoError("metrics CSV: expected 10 columns in '" + line + "'");
    auto num = [&](const std::string& s) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw IoError("metrics CSV: bad number '" + s + "'");
      }
      return v;
    };
    MetricsRow r;
    r.run_id = f[0];
    r.method = f[1];
    r.omega = num(f[2]);
    r.spatial_r = num(f[3]);
    r.channel_r = num(f[4]);
    r.policy = f[5];
    r.seed = std::stoull(f[6]);
    r.frechet = num(f[7]);
    r.sliced_w2 = num(f[8]);
    r.diversity = num(f[9]);
    rows.push_back(std::move(r));
  }
  return rows;
}

EvalContext MakeEvalContext(const RunConfig& config, Checkpoint checkpoint) {
  config.Validate();
  if (!(checkpoint.model == config.model)) {
    throw ConfigError("model: config does not match the checkpoint's model section");
  }
  if (!(checkpoint.schedule == config.schedule)) {
    throw ConfigError("schedule: config does not match the checkpoint's schedule section");
  }
  EvalContext ctx;
  ctx.config = config;
  ctx.checkpoint = std::move(checkpoint);
  ctx.schedule = config.schedule.Build();
  const LabeledImages heldout = GenerateDataset(config.dataset, config.train.seed, true);
  ctx.reference = ImagesAsSet(heldout.pixels, heldout.side);
  return ctx;
}

EvalContext LoadEvalContext(const RunConfig& config) {
  return MakeEvalContext(config, LoadCheckpoint(config.CheckpointPath()));
}

std::vector<Condition> EvalConditions(const RunConfig& config, size_t count) {
  std::vector<Condition> out(count);
  if (config.eval.condition == EvalCondition::kCycle) {
    for (size_t i = 0; i < count; ++i) out[i] = Condition::Class(i % config.model.num_classes);
  }
  return out;
}

EvalResult Evaluate(const EvalContext& ctx, const GuidanceSpec& spec, uint64_t seed,
                    const std::string& run_id) {
  const RunConfig& c = ctx.config;
  const std::vector<Condition> conds = EvalConditions(c, c.eval.samples);
  EvalResult out;
  out.samples = Sample(ctx.checkpoint.params, c.model, ctx.schedule, c.sampler, spec, conds,
                       RngStream::ForPurpose(seed, "sample"));
  const SampleSet generated = ImagesAsSet(out.samples.images, c.model.image_side);

  MetricsRow& r = out.row;
  r.run_id = run_id;
  r.method = MethodLabel(spec);
  r.omega = spec.omega;
  r.spatial_r = spec.spatial_r;
  r.channel_r = spec.channel_r;
  r.policy = std::string(ToString(spec.policy));
  r.seed = seed;
  r.frechet = FrechetDistance(FitGaussian(generated), FitGaussian(ctx.reference));
  RngStream proj = RngStream::ForPurpose(seed, "metrics-projections");
  r.sliced_w2 = SlicedWasserstein2(generated, ctx.reference, c.eval.projections, proj);
  r.diversity = PairwiseDiversity(generated);
  return out;
}

TrainSummary CmdTrain(const RunConfig& config, std::ostream& log) {
  config.Validate();
  EnsureDir(config.out);
  std::ofstream loss_csv = OpenOut(config.out + "/loss.csv");
  const size_t every = std::max<size_t>(1, config.train.steps / 20);
  TrainResult result = Train(config, &loss_csv, [&](size_t step, double loss) {
    if (step % every == 0 || step + 1 == config.train.steps) {
      log << "step " << step << " loss " << loss << std::endl;
    }
  });
  if (!loss_csv) throw IoError("write failed for '" + config.out + "/loss.csv'");
  SaveCheckpoint(config.CheckpointPath(), result.checkpoint);
  WriteText(config.out + "/config.txt", ToText(config));
  log << "wrote " << config.CheckpointPath() << std::endl;
  TrainSummary s;
  s.steps = result.losses.size();
  if (!result.losses.empty()) {
    s.first_loss = result.losses.front();
    s.last_loss = result.losses.back();
  }
  return s;
}

std::vector<MetricsRow> CmdSample(const RunConfig& config, std::ostream& log) {
  const EvalContext ctx = LoadEvalContext(config);
  EnsureDir(config.out);
  EvalResult r = Evaluate(ctx, config.guidance, config.seed, "sample");
  const size_t side = config.model.image_side;
  WritePpm(config.out + "/samples.ppm",
           TileImages(r.samples.images, r.samples.tokens.batch(), side, 16));
  WriteRows(config.out + "/metrics.csv", {r.row});
  LogRow(log, r.row);
  return {r.row};
}

std::vector<MetricsRow> CmdSweep(const RunConfig& config, std::ostream& log) {
  if (config.sweep.values.empty()) throw ConfigError("sweep.values: empty value list");
  const EvalContext ctx = LoadEvalContext(config);
  EnsureDir(config.out);
  std::vector<MetricsRow> rows;
  for (double v : config.sweep.values) {
    GuidanceSpec spec = config.guidance;
    if (config.sweep.axis == "omega") {
      spec.omega = v;
    } else {
      spec.spatial_r = v;
      spec.channel_r = v;
    }
    spec.Validate();
    EvalResult r = Evaluate(ctx, spec, config.seed, "sweep-" + config.sweep.axis + "-" + Num(v));
    LogRow(log, r.row);
    rows.push_back(r.row);
  }
  WriteRows(config.out + "/sweep.csv", rows);
  return rows;
}

std::vector<AblationRow> AblationGrid(const RunConfig& config) {
  std::vector<AblationRow> grid;
  GuidanceSpec base = config.guidance;
  base.method = GuidanceMethod::kSsg;
  base.omega_cfg = 0.0;
  for (SwapPolicy policy : {SwapPolicy::kDissimilar, SwapPolicy::kSimilar, SwapPolicy::kRandom}) {
    const std::string p(ToString(policy));
    GuidanceSpec s = base;
    s.policy = policy;
    GuidanceSpec spatial = s;
    spatial.channel_r = 0.0;
    GuidanceSpec channel = s;
    channel.spatial_r = 0.0;
    grid.push_back({"ablate-" + p + "-spatial", spatial});
    grid.push_back({"ablate-" + p + "-channel", channel});
    grid.push_back({"ablate-" + p + "-both", s});
  }
  GuidanceSpec combined = base;
  combined.omega_cfg = config.ablate.omega_cfg;
  grid.push_back({"ablate-ssg+cfg", combined});
  return grid;
}

std::vector<MetricsRow> CmdAblate(const RunConfig& config, std::ostream& log) {
  const EvalContext ctx = LoadEvalContext(config);
  EnsureDir(config.out);
  std::vector<MetricsRow> rows;
  for (const AblationRow& a : AblationGrid(config)) {
    if (a.spec.omega_cfg > 0.0 && config.eval.condition == EvalCondition::kNull) {
      log << a.run_id << ": skipped (needs class conditions)" << std::endl;
      continue;
    }
    EvalResult r = Evaluate(ctx, a.spec, config.seed, a.run_id);
    LogRow(log, r.row);
    rows.push_back(r.row);
  }
  WriteRows(config.out + "/ablate.csv", rows);
  return rows;
}

void CmdAnalyze(const RunConfig& config, std::ostream& log) {
  const EvalContext ctx = LoadEvalContext(config);
  const std::string maps_dir = config.out + "/maps";
  EnsureDir(maps_dir);
  const std::vector<Condition> conds = EvalConditions(config, config.analyze.samples);
  const SampleResult s = Sample(ctx.checkpoint.params, config.model, ctx.schedule,
                                config.sampler, config.guidance, conds,
                                RngStream::ForPurpose(config.seed, "sample"), true);
  {
    std::ofstream out = OpenOut(config.out + "/trace.jsonl");
    s.trace.WriteJsonLines(out);
    if (!out) throw IoError("write failed for trace file");
  }
  WritePpm(config.out + "/analyze_samples.ppm",
           TileImages(s.images, s.tokens.batch(), config.model.image_side, 8));

  // One map per inference step: the instance-averaged magnitude, all maps
  // on a common scale so brightness is comparable across timesteps.
  const size_t grid = config.model.grid_side();
  const size_t tokens = config.model.tokens();
  std::vector<std::vector<double>> per_step;
  std::vector<size_t> timesteps;
  for (const GuidanceRecord& r : s.trace.records) {
    if (r.step >= per_step.size()) {
      per_step.resize(r.step + 1, std::vector<double>(tokens, 0.0));
      timesteps.resize(r.step + 1, 0);
    }
    timesteps[r.step] = r.timestep;
    for (size_t t = 0; t < tokens; ++t) {
      per_step[r.step][t] += r.map[t] / static_cast<double>(config.analyze.samples);
    }
  }
  double scale = 0.0;
  for (const auto& m : per_step) {
    for (double v : m) scale = std::max(scale, v);
  }
  std::ofstream summary = OpenOut(config.out + "/trace_summary.csv");
  summary << "step,timestep,mean_magnitude\n";
  for (size_t step = 0; step < per_step.size(); ++step) {
    char name[64];
    std::snprintf(name, sizeof(name), "/step_%03zu_t%04zu.ppm", step, timesteps[step]);
    WritePpm(maps_dir + name, MagnitudeImage(per_step[step], grid, grid, scale));
    double mean = 0.0;
    for (double v : per_step[step]) mean += v;
    summary << step << ',' << timesteps[step] << ',' << Num(mean / static_cast<double>(tokens))
            << '\n';
  }
  if (!summary) throw IoError("write failed for trace summary");
  log << "wrote " << per_step.size() << " magnitude maps to " << maps_dir << std::endl;
}

}  // namespace ssg
