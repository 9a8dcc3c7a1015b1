#include "ssg/config.h"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "ssg/errors.h"

namespace ssg {
namespace {

std::string_view Trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double ParseDouble(std::string_view key, std::string_view text) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(std::string(key) + ": expected a number, got '" + std::string(text) + "'");
  }
  return v;
}

uint64_t ParseUnsigned(std::string_view key, std::string_view text) {
  uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" +
                      std::string(text) + "'");
  }
  return v;
}

bool ParseBool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(std::string(key) + ": expected true|false, got '" + std::string(text) + "'");
}

std::string FormatDouble(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::vector<double> ParseList(std::string_view key, std::string_view text) {
  std::vector<double> out;
  while (!text.empty()) {
    const auto comma = text.find(',');
    const std::string_view item = Trim(text.substr(0, comma));
    if (item.empty()) throw ConfigError(std::string(key) + ": empty list element");
    out.push_back(ParseDouble(key, item));
    if (comma == std::string_view::npos) break;
    text.remove_prefix(comma + 1);
  }
  return out;
}

struct Field {
  std::string_view key;
  std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field SizeField(std::string_view key, Member member) {
  return {key,
          [member](RunConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = static_cast<size_t>(ParseUnsigned(k, v));
          },
          [member](const RunConfig& c) {
            return std::to_string(std::invoke(member, const_cast<RunConfig&>(c)));
          }};
}

template <typename Member>
Field U64Field(std::string_view key, Member member) {
  return {key,
          [member](RunConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = ParseUnsigned(k, v);
          },
          [member](const RunConfig& c) {
            return std::to_string(std::invoke(member, const_cast<RunConfig&>(c)));
          }};
}

template <typename Member>
Field DoubleField(std::string_view key, Member member) {
  return {key,
          [member](RunConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = ParseDouble(k, v);
          },
          [member](const RunConfig& c) {
            return FormatDouble(std::invoke(member, const_cast<RunConfig&>(c)));
          }};
}

template <typename Member>
Field BoolField(std::string_view key, Member member) {
  return {key,
          [member](RunConfig& c, std::string_view k, std::string_view v) {
            std::invoke(member, c) = ParseBool(k, v);
          },
          [member](const RunConfig& c) {
            return std::string(std::invoke(member, const_cast<RunConfig&>(c)) ? "true" : "false");
          }};
}

// Rethrows parse errors of enum fields with the key prefixed.
template <typename Fn>
auto WithKey(std::string_view key, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

const std::vector<Field>& Fields() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f;
    f.push_back(U64Field("seed", [](RunConfig& c) -> uint64_t& { return c.seed; }));
    f.push_back({"out",
                 [](RunConfig& c, std::string_view, std::string_view v) { c.out = v; },
                 [](const RunConfig& c) { return c.out; }});
    f.push_back({"checkpoint",
                 [](RunConfig& c, std::string_view, std::string_view v) { c.checkpoint = v; },
                 [](const RunConfig& c) { return c.checkpoint; }});

    f.push_back(SizeField("model.image_side", [](RunConfig& c) -> size_t& { return c.model.image_side; }));
    f.push_back(SizeField("model.patch_side", [](RunConfig& c) -> size_t& { return c.model.patch_side; }));
    f.push_back(SizeField("model.channels", [](RunConfig& c) -> size_t& { return c.model.channels; }));
    f.push_back(SizeField("model.blocks", [](RunConfig& c) -> size_t& { return c.model.blocks; }));
    f.push_back(SizeField("model.heads", [](RunConfig& c) -> size_t& { return c.model.heads; }));
    f.push_back(DoubleField("model.mlp_ratio", [](RunConfig& c) -> double& { return c.model.mlp_ratio; }));
    f.push_back(SizeField("model.num_classes", [](RunConfig& c) -> size_t& { return c.model.num_classes; }));
    f.push_back(DoubleField("model.cond_dropout_prob",
                            [](RunConfig& c) -> double& { return c.model.cond_dropout_prob; }));

    f.push_back(SizeField("schedule.train_steps", [](RunConfig& c) -> size_t& { return c.schedule.train_steps; }));
    f.push_back(DoubleField("schedule.beta_start", [](RunConfig& c) -> double& { return c.schedule.beta_start; }));
    f.push_back(DoubleField("schedule.beta_end", [](RunConfig& c) -> double& { return c.schedule.beta_end; }));

    f.push_back({"sampler.kind",
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   c.sampler.kind = WithKey(k, [&] { return ParseSamplerKind(v); });
                 },
                 [](const RunConfig& c) { return std::string(ToString(c.sampler.kind)); }});
    f.push_back(SizeField("sampler.steps", [](RunConfig& c) -> size_t& { return c.sampler.num_inference_steps; }));
    f.push_back(DoubleField("sampler.eta", [](RunConfig& c) -> double& { return c.sampler.eta; }));

    f.push_back({"guidance.method",
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   c.guidance.method = WithKey(k, [&] { return ParseGuidanceMethod(v); });
                 },
                 [](const RunConfig& c) { return std::string(ToString(c.guidance.method)); }});
    f.push_back(DoubleField("guidance.omega", [](RunConfig& c) -> double& { return c.guidance.omega; }));
    f.push_back(DoubleField("guidance.omega_cfg", [](RunConfig& c) -> double& { return c.guidance.omega_cfg; }));
    f.push_back(DoubleField("guidance.spatial_r", [](RunConfig& c) -> double& { return c.guidance.spatial_r; }));
    f.push_back(DoubleField("guidance.channel_r", [](RunConfig& c) -> double& { return c.guidance.channel_r; }));
    f.push_back({"guidance.policy",
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   c.guidance.policy = WithKey(k, [&] { return ParseSwapPolicy(v); });
                 },
                 [](const RunConfig& c) { return std::string(ToString(c.guidance.policy)); }});
    f.push_back(BoolField("guidance.at_block_input", [](RunConfig& c) -> bool& { return c.guidance.at_block_input; }));
    f.push_back(BoolField("guidance.at_pre_residual", [](RunConfig& c) -> bool& { return c.guidance.at_pre_residual; }));
    f.push_back(DoubleField("guidance.input_noise_sigma",
                            [](RunConfig& c) -> double& { return c.guidance.input_noise_sigma; }));

    f.push_back(SizeField("dataset.image_side", [](RunConfig& c) -> size_t& { return c.dataset.image_side; }));
    f.push_back(SizeField("dataset.samples_per_class",
                          [](RunConfig& c) -> size_t& { return c.dataset.samples_per_class; }));
    f.push_back(SizeField("dataset.heldout_per_class",
                          [](RunConfig& c) -> size_t& { return c.dataset.heldout_per_class; }));
    f.push_back(DoubleField("dataset.size_min", [](RunConfig& c) -> double& { return c.dataset.size_min; }));
    f.push_back(DoubleField("dataset.size_max", [](RunConfig& c) -> double& { return c.dataset.size_max; }));
    f.push_back(DoubleField("dataset.jitter", [](RunConfig& c) -> double& { return c.dataset.jitter; }));
    f.push_back(SizeField("dataset.supersample", [](RunConfig& c) -> size_t& { return c.dataset.supersample; }));

    f.push_back(SizeField("train.steps", [](RunConfig& c) -> size_t& { return c.train.steps; }));
    f.push_back(SizeField("train.batch", [](RunConfig& c) -> size_t& { return c.train.batch; }));
    f.push_back(DoubleField("train.learning_rate", [](RunConfig& c) -> double& { return c.train.learning_rate; }));
    f.push_back(U64Field("train.seed", [](RunConfig& c) -> uint64_t& { return c.train.seed; }));

    f.push_back(SizeField("eval.samples", [](RunConfig& c) -> size_t& { return c.eval.samples; }));
    f.push_back({"eval.condition",
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   if (v == "cycle") {
                     c.eval.condition = EvalCondition::kCycle;
                   } else if (v == "null") {
                     c.eval.condition = EvalCondition::kNull;
                   } else {
                     throw ConfigError(std::string(k) + ": expected cycle|null, got '" +
                                       std::string(v) + "'");
                   }
                 },
                 [](const RunConfig& c) {
                   return std::string(c.eval.condition == EvalCondition::kCycle ? "cycle" : "null");
                 }});
    f.push_back(SizeField("eval.projections", [](RunConfig& c) -> size_t& { return c.eval.projections; }));

    f.push_back({"sweep.axis",
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   if (v != "omega" && v != "ratio") {
                     throw ConfigError(std::string(k) + ": expected omega|ratio, got '" +
                                       std::string(v) + "'");
                   }
                   c.sweep.axis = v;
                 },
                 [](const RunConfig& c) { return c.sweep.axis; }});
    f.push_back({"sweep.values",
                 [](RunConfig& c, std::string_view k, std::string_view v) {
                   c.sweep.values = ParseList(k, v);
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (size_t i = 0; i < c.sweep.values.size(); ++i) {
                     if (i) s += ",";
                     s += FormatDouble(c.sweep.values[i]);
                   }
                   return s;
                 }});
    f.push_back(DoubleField("ablate.omega_cfg", [](RunConfig& c) -> double& { return c.ablate.omega_cfg; }));
    f.push_back(SizeField("analyze.samples", [](RunConfig& c) -> size_t& { return c.analyze.samples; }));
    return f;
  }();
  return fields;
}

}  // namespace

void SetConfigValue(RunConfig& config, std::string_view key, std::string_view value) {
  for (const Field& f : Fields()) {
    if (f.key == key) {
      f.set(config, key, value);
      return;
    }
  }
  throw ConfigError("unknown key '" + std::string(key) + "'");
}

void RunConfig::Validate() const {
  model.Validate();
  const NoiseSchedule built = schedule.Build();
  sampler.Validate(built);
  guidance.Validate();
  dataset.Validate();
  if (dataset.image_side != model.image_side) {
    throw ConfigError("dataset.image_side: must equal model.image_side");
  }
  if (model.num_classes != kShapeClassCount) {
    throw ConfigError("model.num_classes: the shapes dataset has 3 classes");
  }
  if (train.batch == 0) throw ConfigError("train.batch: must be >= 1");
  if (!(train.learning_rate > 0.0) || !std::isfinite(train.learning_rate)) {
    throw ConfigError("train.learning_rate: must be finite and > 0");
  }
  if (eval.samples < 2) throw ConfigError("eval.samples: must be >= 2");
  if (!(ablate.omega_cfg >= 0.0)) throw ConfigError("ablate.omega_cfg: must be >= 0");
  if (analyze.samples == 0) throw ConfigError("analyze.samples: must be >= 1");
  if (eval.projections == 0) throw ConfigError("eval.projections: must be >= 1");
  if (out.empty()) throw ConfigError("out: must not be empty");
}

std::string RunConfig::CheckpointPath() const {
  return checkpoint.empty() ? out + "/model.ckpt" : checkpoint;
}

RunConfig ParseConfig(std::string_view text, std::string_view source) {
  RunConfig config;
  size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = Trim(line);
    if (line.empty()) continue;
    const std::string where = std::string(source) + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(where + "expected 'key = value', got '" + std::string(line) + "'");
    }
    const std::string_view key = Trim(line.substr(0, eq));
    const std::string_view value = Trim(line.substr(eq + 1));
    try {
      SetConfigValue(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

RunConfig LoadConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return ParseConfig(buf.str(), path);
}

std::string ToText(const RunConfig& config) {
  std::string out;
  for (const Field& f : Fields()) {
    out += std::string(f.key) + " = " + f.get(config) + "\n";
  }
  return out;
}

}  // namespace ssg
