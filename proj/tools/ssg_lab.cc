#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ssg/checkpoint.h"
#include "ssg/config.h"
#include "ssg/errors.h"
#include "ssg/experiments.h"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct Overrides {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  std::optional<double> omega;
  std::optional<double> ratio;
  std::optional<std::string> policy;
  std::optional<std::string> method;
  std::optional<size_t> steps;
  std::optional<std::string> axis;
  std::optional<std::string> values;
  std::vector<std::string> sets;
};

void AddCommon(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_path, "Run configuration file")->required();
  cmd->add_option("--seed", o.seed, "Seed (train: train.seed; otherwise sampling seed)");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint path (default <out>/model.ckpt)");
  cmd->add_option("--set", o.sets, "Extra key=value override, repeatable");
}

void AddGuidance(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--omega", o.omega, "Guidance scale");
  cmd->add_option("--ratio", o.ratio, "Swap ratio for both axes");
  cmd->add_option("--policy", o.policy, "dissimilar|similar|random");
  cmd->add_option("--method", o.method, "none|cfg|ssg|input_noise|attn_identity");
  cmd->add_option("--steps", o.steps, "Sampler steps");
}

ssg::RunConfig Resolve(const Overrides& o, bool training) {
  ssg::RunConfig c = ssg::LoadConfig(o.config_path);
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ssg::ConfigError("--set: expected key=value, got '" + kv + "'");
    ssg::SetConfigValue(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) (training ? c.train.seed : c.seed) = *o.seed;
  if (o.out) c.out = *o.out;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.omega) c.guidance.omega = *o.omega;
  if (o.ratio) {
    c.guidance.spatial_r = *o.ratio;
    c.guidance.channel_r = *o.ratio;
  }
  if (o.policy) ssg::SetConfigValue(c, "guidance.policy", *o.policy);
  if (o.method) ssg::SetConfigValue(c, "guidance.method", *o.method);
  if (o.steps) (training ? c.train.steps : c.sampler.num_inference_steps) = *o.steps;
  if (o.axis) ssg::SetConfigValue(c, "sweep.axis", *o.axis);
  if (o.values) ssg::SetConfigValue(c, "sweep.values", *o.values);
  c.Validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-swap guidance diffusion lab"};
  app.require_subcommand(1);
  Overrides o;

  CLI::App* train = app.add_subcommand("train", "Train the denoiser");
  AddCommon(train, o);
  train->add_option("--steps", o.steps, "Training steps");

  CLI::App* sample = app.add_subcommand("sample", "Sample images and score them");
  AddCommon(sample, o);
  AddGuidance(sample, o);

  CLI::App* sweep = app.add_subcommand("sweep", "One metrics row per guidance value");
  AddCommon(sweep, o);
  AddGuidance(sweep, o);
  sweep->add_option("--axis", o.axis, "omega|ratio");
  sweep->add_option("--values", o.values, "Comma-separated values");

  CLI::App* ablate = app.add_subcommand("ablate", "Policy and axis ablation grid");
  AddCommon(ablate, o);
  AddGuidance(ablate, o);

  CLI::App* analyze = app.add_subcommand("analyze", "Guidance-magnitude traces and maps");
  AddCommon(analyze, o);
  AddGuidance(analyze, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (train->parsed()) {
      const ssg::TrainSummary s = ssg::CmdTrain(Resolve(o, true), std::cerr);
      std::cout << "trained " << s.steps << " steps, loss " << s.first_loss << " -> "
                << s.last_loss << "\n";
      return 0;
    }
    const ssg::RunConfig config = Resolve(o, false);
    std::vector<ssg::MetricsRow> rows;
    if (sample->parsed()) rows = ssg::CmdSample(config, std::cerr);
    if (sweep->parsed()) rows = ssg::CmdSweep(config, std::cerr);
    if (ablate->parsed()) rows = ssg::CmdAblate(config, std::cerr);
    if (analyze->parsed()) ssg::CmdAnalyze(config, std::cerr);
    if (!rows.empty()) {
      std::cout << ssg::kMetricsHeader << "\n";
      for (const auto& r : rows) std::cout << ssg::FormatMetricsRow(r) << "\n";
    }
    return 0;
  } catch (const ssg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ssg::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ssg::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ssg::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ssg::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
}
