#include "ssg/guidance.h"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include "json.hpp"
#include "ssg/errors.h"

namespace ssg {
namespace {

void RequireSameShape(const TokenTensor& a, const TokenTensor& b, const char* op) {
  if (!a.SameShape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

TokenTensor Extrapolate(const TokenTensor& anchor, const TokenTensor& reference,
                        double omega, const char* op) {
  RequireSameShape(anchor, reference, op);
  if (omega == 0.0) return anchor;
  TokenTensor out(anchor.batch(), anchor.tokens(), anchor.channels());
  auto a = anchor.data();
  auto r = reference.data();
  auto dst = out.mutable_data();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = a[i] + omega * (a[i] - r[i]);
  CheckFinite(dst, op);
  return out;
}

// Stacks `copies` branches of x along the batch axis.
TokenTensor Stack(const TokenTensor& x, size_t copies) {
  TokenTensor out = x;
  for (size_t k = 1; k < copies; ++k) out = TokenTensor::Concat(out, x);
  return out;
}

}  // namespace

std::string_view ToString(GuidanceMethod method) {
  switch (method) {
    case GuidanceMethod::kNone: return "none";
    case GuidanceMethod::kCfg: return "cfg";
    case GuidanceMethod::kSsg: return "ssg";
    case GuidanceMethod::kInputNoise: return "input_noise";
    case GuidanceMethod::kAttnIdentity: return "attn_identity";
  }
  return "?";
}

GuidanceMethod ParseGuidanceMethod(std::string_view text) {
  if (text == "none") return GuidanceMethod::kNone;
  if (text == "cfg") return GuidanceMethod::kCfg;
  if (text == "ssg") return GuidanceMethod::kSsg;
  if (text == "input_noise") return GuidanceMethod::kInputNoise;
  if (text == "attn_identity") return GuidanceMethod::kAttnIdentity;
  throw ConfigError("unknown guidance method '" + std::string(text) +
                    "' (expected none|cfg|ssg|input_noise|attn_identity)");
}

void GuidanceSpec::Validate() const {
  auto fail = [](const char* field, const char* why) {
    throw ConfigError(std::string("guidance.") + field + ": " + why);
  };
  if (!(omega >= 0.0) || !std::isfinite(omega)) fail("omega", "must be finite and >= 0");
  if (!(omega_cfg >= 0.0) || !std::isfinite(omega_cfg)) {
    fail("omega_cfg", "must be finite and >= 0");
  }
  if (!(spatial_r >= 0.0 && spatial_r <= 1.0)) fail("spatial_r", "must lie in [0, 1]");
  if (!(channel_r >= 0.0 && channel_r <= 1.0)) fail("channel_r", "must lie in [0, 1]");
  if (!(input_noise_sigma >= 0.0) || !std::isfinite(input_noise_sigma)) {
    fail("input_noise_sigma", "must be finite and >= 0");
  }
  if (omega_cfg > 0.0 && method != GuidanceMethod::kSsg) {
    fail("omega_cfg", "only combines with method=ssg (use method=cfg for plain CFG)");
  }
}

PerturbSpec GuidanceSpec::SwapPerturbation() const {
  PerturbSpec p;
  if (method != GuidanceMethod::kSsg) return p;
  p.active = true;
  p.spatial_r = spatial_r;
  p.channel_r = channel_r;
  p.policy = policy;
  p.at_block_input = at_block_input;
  p.at_pre_residual = at_pre_residual;
  return p;
}

TokenTensor GuidedEpsilon(const TokenTensor& eps_ori, const TokenTensor& eps_pert,
                          double omega) {
  return Extrapolate(eps_ori, eps_pert, omega, "GuidedEpsilon");
}

TokenTensor CfgEpsilon(const TokenTensor& eps_cond, const TokenTensor& eps_uncond,
                       double omega) {
  return Extrapolate(eps_cond, eps_uncond, omega, "CfgEpsilon");
}

Matrix GuidanceMagnitude(const TokenTensor& eps_ori, const TokenTensor& eps_pert,
                         double omega) {
  RequireSameShape(eps_ori, eps_pert, "GuidanceMagnitude");
  Matrix out(eps_ori.batch(), eps_ori.tokens());
  const double inv_c = 1.0 / static_cast<double>(eps_ori.channels());
  for (size_t b = 0; b < eps_ori.batch(); ++b) {
    for (size_t t = 0; t < eps_ori.tokens(); ++t) {
      double sum = 0.0;
      for (size_t c = 0; c < eps_ori.channels(); ++c) {
        sum += std::abs(omega * (eps_ori(b, t, c) - eps_pert(b, t, c)));
      }
      out(b, t) = sum * inv_c;
    }
  }
  return out;
}

void GuidanceTrace::WriteJsonLines(std::ostream& out) const {
  for (const GuidanceRecord& r : records) {
    nlohmann::json line = {{"step", r.step},
                           {"timestep", r.timestep},
                           {"instance", r.instance},
                           {"mean", r.mean_magnitude},
                           {"map", r.map}};
    out << line.dump() << '\n';
  }
}

GuidanceTrace GuidanceTrace::ReadJsonLines(std::istream& in) {
  GuidanceTrace trace;
  std::string line;
  size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GuidanceRecord r;
      r.step = j.at("step").get<size_t>();
      r.timestep = j.at("timestep").get<size_t>();
      r.instance = j.at("instance").get<size_t>();
      r.mean_magnitude = j.at("mean").get<double>();
      r.map = j.at("map").get<std::vector<double>>();
      trace.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("trace line " + std::to_string(number) + ": " + e.what());
    }
  }
  return trace;
}

GuidedPrediction PredictGuided(const ModelParameters& params, const ModelConfig& cfg,
                               const GuidanceSpec& spec, const TokenTensor& x_t,
                               size_t t, std::span<const Condition> conditions,
                               const RngStream& rng) {
  spec.Validate();
  const size_t batch = x_t.batch();
  if (conditions.size() != batch) {
    throw ShapeError("PredictGuided: one condition per instance");
  }
  const bool with_cfg = spec.method == GuidanceMethod::kCfg ||
                        (spec.method == GuidanceMethod::kSsg && spec.omega_cfg > 0.0);
  if (with_cfg) {
    for (const Condition& c : conditions) {
      if (c.is_null()) {
        throw ConfigError("guidance.method: classifier-free guidance needs a class "
                          "condition; the run is unconditional");
      }
    }
  }

  // Branch layout along the batch axis: [clean | degraded | unconditional].
  size_t branches = 1;
  TokenTensor degraded_input = x_t;
  PerturbSpec degraded;
  switch (spec.method) {
    case GuidanceMethod::kNone:
      break;
    case GuidanceMethod::kCfg:
      branches = 2;
      break;
    case GuidanceMethod::kSsg:
      branches = spec.omega_cfg > 0.0 ? 3 : 2;
      degraded = spec.SwapPerturbation();
      break;
    case GuidanceMethod::kInputNoise:
      branches = 2;
      for (size_t b = 0; b < batch; ++b) {
        RngStream noise = rng.Derive(b).Derive(0x6e6f697365ull);
        for (double& v : degraded_input.instance(b)) {
          v += spec.input_noise_sigma * noise.Normal();
        }
      }
      break;
    case GuidanceMethod::kAttnIdentity:
      branches = 2;
      degraded.active = true;
      degraded.identity_attention = true;
      break;
  }

  TokenTensor stacked = x_t;
  std::vector<size_t> ts(branches * batch, t);
  std::vector<Condition> conds(branches * batch);
  std::vector<PerturbSpec> specs(branches * batch);
  std::vector<RngStream> streams;
  streams.reserve(branches * batch);
  for (size_t k = 0; k < branches; ++k) {
    for (size_t b = 0; b < batch; ++b) {
      streams.push_back(rng.Derive(b));
      conds[k * batch + b] = conditions[b];
    }
  }
  if (spec.method == GuidanceMethod::kCfg) {
    stacked = Stack(x_t, 2);
    for (size_t b = 0; b < batch; ++b) conds[batch + b] = Condition::Null();
  } else if (branches >= 2) {
    stacked = TokenTensor::Concat(x_t, degraded_input);
    for (size_t b = 0; b < batch; ++b) specs[batch + b] = degraded;
    if (branches == 3) {
      stacked = TokenTensor::Concat(stacked, x_t);
      for (size_t b = 0; b < batch; ++b) conds[2 * batch + b] = Condition::Null();
    }
  }

  const TokenTensor eps = ForwardBatch(params, cfg, stacked, {ts, conds, specs, streams});
  GuidedPrediction out;
  if (branches == 1) {
    out.eps = eps;
    out.magnitude = Matrix(batch, x_t.tokens());
    return out;
  }
  const TokenTensor first = eps.Slice(0, batch);
  const TokenTensor second = eps.Slice(batch, batch);
  if (spec.method == GuidanceMethod::kCfg) {
    out.eps = CfgEpsilon(first, second, spec.omega);
  } else {
    out.eps = GuidedEpsilon(first, second, spec.omega);
  }
  out.magnitude = GuidanceMagnitude(first, second, spec.omega);
  if (branches == 3) {
    const TokenTensor uncond = eps.Slice(2 * batch, batch);
    auto dst = out.eps.mutable_data();
    auto c = first.data();
    auto u = uncond.data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += spec.omega_cfg * (c[i] - u[i]);
    CheckFinite(dst, "combined guidance");
  }
  return out;
}

}  // namespace ssg
