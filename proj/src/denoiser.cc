#include "ssg/denoiser.h"

#include <cmath>
#include <stdexcept>
#include <string>

#include "eigen_util.h"
#include "ssg/errors.h"

namespace ssg {
namespace {

constexpr double kLayerNormEps = 1e-5;

using Strided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using MutableStrided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;

// y[rows x out] = x[rows x in] * w[in x out] + bias
void Linear(const double* x, size_t rows, size_t in, const std::vector<double>& w,
            const std::vector<double>& bias, size_t out, double* y) {
  RowMap dst(y, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out));
  dst.noalias() = ConstRowMap(x, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(in)) *
                  ConstRowMap(w.data(), static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
  dst.rowwise() += ConstVecMap(bias.data(), static_cast<Eigen::Index>(out)).transpose();
}

// grad_w += x^T * dy, grad_b += column sums of dy, dx = dy * w^T (if dx).
void LinearBackward(const double* x, size_t rows, size_t in,
                    const std::vector<double>& w, const double* dy, size_t out,
                    std::vector<double>& grad_w, std::vector<double>& grad_b,
                    double* dx) {
  const auto r = static_cast<Eigen::Index>(rows);
  const auto i = static_cast<Eigen::Index>(in);
  const auto o = static_cast<Eigen::Index>(out);
  ConstRowMap xm(x, r, i);
  ConstRowMap dym(dy, r, o);
  RowMap(grad_w.data(), i, o).noalias() += xm.transpose() * dym;
  // Plain loop: Eigen's column reduction order depends on buffer alignment.
  for (size_t row = 0; row < rows; ++row) {
    for (size_t c = 0; c < out; ++c) grad_b[c] += dy[row * out + c];
  }
  if (dx != nullptr) {
    RowMap(dx, r, i).noalias() = dym * ConstRowMap(w.data(), i, o).transpose();
  }
}

void LayerNormRows(const double* x, size_t rows, size_t d,
                   const std::vector<double>& gain,
                   const std::vector<double>& bias, double* y, double* mean,
                   double* rstd) {
  for (size_t r = 0; r < rows; ++r) {
    kernels::LayerNormRow({x + r * d, d}, gain, bias, kLayerNormEps,
                          {y + r * d, d}, mean ? mean + r : nullptr,
                          rstd ? rstd + r : nullptr);
  }
}

// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)),
// dxhat = dy * gain; accumulates gain/bias gradients.
void LayerNormBackward(const double* x, size_t rows, size_t d,
                       const double* mean, const double* rstd,
                       const std::vector<double>& gain, const double* dy,
                       std::vector<double>& grad_gain,
                       std::vector<double>& grad_bias, double* dx) {
  std::vector<double> xhat(d), dxhat(d);
  for (size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * d;
    const double* dyr = dy + r * d;
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (size_t c = 0; c < d; ++c) {
      xhat[c] = (xr[c] - mean[r]) * rstd[r];
      dxhat[c] = dyr[c] * gain[c];
      grad_gain[c] += dyr[c] * xhat[c];
      grad_bias[c] += dyr[c];
      sum_dxhat += dxhat[c];
      sum_dxhat_xhat += dxhat[c] * xhat[c];
    }
    const double inv_d = 1.0 / static_cast<double>(d);
    for (size_t c = 0; c < d; ++c) {
      dx[r * d + c] = rstd[r] * (dxhat[c] - sum_dxhat * inv_d -
                                 xhat[c] * sum_dxhat_xhat * inv_d);
    }
  }
}

std::vector<double> Randn(size_t n, double stddev, RngStream& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.Normal() * stddev;
  return v;
}

// Conditioning vector (timestep MLP + class row) for one instance.
void ConditionVector(const ModelParameters& p, const ModelConfig& cfg, size_t t,
                     const Condition& cond, double* sin_out, double* pre_out,
                     double* act_out, double* cond_out) {
  const size_t d = cfg.channels;
  const std::vector<double> emb = TimestepEmbedding(t, d);
  std::copy(emb.begin(), emb.end(), sin_out);
  Linear(emb.data(), 1, d, p.time_w1, p.time_b1, d, pre_out);
  for (size_t c = 0; c < d; ++c) act_out[c] = kernels::Gelu(pre_out[c]);
  Linear(act_out, 1, d, p.time_w2, p.time_b2, d, cond_out);
  const size_t row = cond.is_null() ? cfg.num_classes : *cond.class_id;
  if (row > cfg.num_classes) {
    throw ShapeError("Condition: class id " + std::to_string(row) +
                     " out of range for " + std::to_string(cfg.num_classes) +
                     " classes");
  }
  const double* class_row = p.class_embed.data() + row * d;
  for (size_t c = 0; c < d; ++c) cond_out[c] += class_row[c];
}

void SwapSite(std::span<double> instance, size_t tokens, size_t channels,
              const PerturbSpec& perturb, RngStream& rng) {
  if (perturb.spatial_r > 0.0) {
    const SwapPlan plan = PlanForInstance(instance, tokens, channels, SwapAxis::kSpatial,
                                          perturb.spatial_r, perturb.policy, rng);
    ApplySwapInPlace(instance, tokens, channels, plan);
  }
  if (perturb.channel_r > 0.0) {
    const SwapPlan plan = PlanForInstance(instance, tokens, channels, SwapAxis::kChannel,
                                          perturb.channel_r, perturb.policy, rng);
    ApplySwapInPlace(instance, tokens, channels, plan);
  }
}

// Multi-head self-attention core for one instance: qkv (T x 3D) -> cat (T x D).
// probs receives H x T x T softmax weights when non-null.
void Attention(const double* qkv, size_t tokens, size_t d, size_t heads,
               bool identity, double* probs, double* cat) {
  const size_t hd = d / heads;
  const auto t = static_cast<Eigen::Index>(tokens);
  const auto h = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> qkv_stride(static_cast<Eigen::Index>(3 * d));
  const Eigen::OuterStride<> cat_stride(static_cast<Eigen::Index>(d));
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  RowMatrix scores(t, t);
  for (size_t head = 0; head < heads; ++head) {
    Strided q(qkv + head * hd, t, h, qkv_stride);
    Strided k(qkv + d + head * hd, t, h, qkv_stride);
    Strided v(qkv + 2 * d + head * hd, t, h, qkv_stride);
    MutableStrided out(cat + head * hd, t, h, cat_stride);
    if (identity) {
      out = v;
      if (probs != nullptr) {
        RowMap(probs + head * tokens * tokens, t, t).setIdentity();
      }
      continue;
    }
    scores.noalias() = q * k.transpose();
    scores *= scale;
    for (Eigen::Index r = 0; r < t; ++r) {
      kernels::SoftmaxInPlace({scores.data() + r * t, tokens});
    }
    out.noalias() = scores * v;
    if (probs != nullptr) {
      RowMap(probs + head * tokens * tokens, t, t) = scores;
    }
  }
}

void RequireFinite(std::span<const double> values, const std::string& where) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError("non-finite activation in " + where);
  }
}

template <bool kHooks>
TokenTensor ForwardImpl(const ModelParameters& p, const ModelConfig& cfg,
                        const TokenTensor& x, const BatchInputs& in,
                        ForwardCache* cache) {
  const size_t batch = x.batch();
  const size_t tokens = cfg.tokens();
  const size_t d = cfg.channels;
  const size_t pd = cfg.patch_dim();
  const size_t hidden = cfg.hidden();
  const size_t heads = cfg.heads;
  if (x.tokens() != tokens || x.channels() != pd) {
    throw ShapeError("Forward: expected tokens " + std::to_string(tokens) + " x " +
                     std::to_string(pd) + ", got " + std::to_string(x.tokens()) +
                     " x " + std::to_string(x.channels()));
  }
  if (in.timesteps.size() != batch || in.conditions.size() != batch ||
      (kHooks && (in.perturb.size() != batch || in.rng.size() != batch))) {
    throw ShapeError("Forward: per-instance inputs must match the batch size");
  }
  if (p.blocks.size() != cfg.blocks) throw ShapeError("Forward: block count mismatch");

  const size_t td = tokens * d;
  std::vector<RngStream> rng;
  bool any_active = false;
  if constexpr (kHooks) {
    rng.assign(in.rng.begin(), in.rng.end());
    for (const PerturbSpec& s : in.perturb) any_active = any_active || s.active;
  }

  // Scratch, or cache storage when recording. Buffers are resized in place,
  // so a reused cache costs no reallocation.
  thread_local ForwardCache scratch;
  ForwardCache& c = cache != nullptr ? *cache : scratch;
  const bool record = cache != nullptr;
  c.valid = false;
  c.batch = batch;
  c.timesteps.assign(in.timesteps.begin(), in.timesteps.end());
  c.conditions.assign(in.conditions.begin(), in.conditions.end());
  c.tokens_in.assign(x.data().begin(), x.data().end());
  c.time_sin.resize(batch * d);
  c.time_pre.resize(batch * d);
  c.time_act.resize(batch * d);
  std::vector<double> cond(batch * d);

  // Embedding: patches -> D, plus position and conditioning.
  std::vector<double> h(batch * td);
  for (size_t b = 0; b < batch; ++b) {
    ConditionVector(p, cfg, in.timesteps[b], in.conditions[b], &c.time_sin[b * d],
                    &c.time_pre[b * d], &c.time_act[b * d], &cond[b * d]);
    double* hb = h.data() + b * td;
    Linear(x.data().data() + b * tokens * pd, tokens, pd, p.patch_weight, p.patch_bias,
           d, hb);
    for (size_t t = 0; t < tokens; ++t) {
      for (size_t ch = 0; ch < d; ++ch) {
        hb[t * d + ch] += p.pos_embed[t * d + ch] + cond[b * d + ch];
      }
    }
  }

  // Per-block buffers. When not recording they are reused across blocks.
  const size_t blocks_to_keep = record ? cfg.blocks : 1;
  c.blocks.resize(blocks_to_keep);
  for (auto& blk : c.blocks) {
    blk.h_in.resize(batch * td);
    blk.ln1_out.resize(batch * td);
    blk.ln1_mean.resize(batch * tokens);
    blk.ln1_rstd.resize(batch * tokens);
    blk.qkv.resize(batch * tokens * 3 * d);
    blk.probs.resize(record ? batch * heads * tokens * tokens : 0);
    blk.attn_cat.resize(batch * td);
    blk.h_mid.resize(batch * td);
    blk.ln2_out.resize(batch * td);
    blk.ln2_mean.resize(batch * tokens);
    blk.ln2_rstd.resize(batch * tokens);
    blk.mlp_dgelu.resize(batch * tokens * hidden);
    blk.mlp_act.resize(batch * tokens * hidden);
  }
  std::vector<double> branch(td);
  std::vector<double> mlp_out(td);

  for (size_t k = 0; k < cfg.blocks; ++k) {
    const BlockParameters& bp = p.blocks[k];
    ForwardCache::Block& blk = c.blocks[record ? k : 0];
    for (size_t b = 0; b < batch; ++b) {
      const PerturbSpec* perturb = nullptr;
      if constexpr (kHooks) {
        if (in.perturb[b].active) perturb = &in.perturb[b];
      }
      std::span<double> hb(h.data() + b * td, td);
      if (perturb != nullptr && perturb->at_block_input) {
        SwapSite(hb, tokens, d, *perturb, rng[b]);
      }
      std::copy(hb.begin(), hb.end(), blk.h_in.begin() + static_cast<std::ptrdiff_t>(b * td));

      // Attention branch.
      double* ln1 = &blk.ln1_out[b * td];
      LayerNormRows(hb.data(), tokens, d, bp.ln1_gain, bp.ln1_bias, ln1,
                    &blk.ln1_mean[b * tokens], &blk.ln1_rstd[b * tokens]);
      double* qkv = &blk.qkv[b * tokens * 3 * d];
      Linear(ln1, tokens, d, bp.qkv_weight, bp.qkv_bias, 3 * d, qkv);
      const bool identity = perturb != nullptr && perturb->identity_attention;
      double* cat = &blk.attn_cat[b * td];
      Attention(qkv, tokens, d, heads, identity,
                record ? &blk.probs[b * heads * tokens * tokens] : nullptr, cat);
      Linear(cat, tokens, d, bp.attn_out_weight, bp.attn_out_bias, d, branch.data());
      if (perturb != nullptr && perturb->at_pre_residual) {
        SwapSite(branch, tokens, d, *perturb, rng[b]);
      }
      for (size_t i = 0; i < td; ++i) hb[i] += branch[i];
      std::copy(hb.begin(), hb.end(), blk.h_mid.begin() + static_cast<std::ptrdiff_t>(b * td));

      // MLP branch.
      double* ln2 = &blk.ln2_out[b * td];
      LayerNormRows(hb.data(), tokens, d, bp.ln2_gain, bp.ln2_bias, ln2,
                    &blk.ln2_mean[b * tokens], &blk.ln2_rstd[b * tokens]);
      // The pre-activation is overwritten by the GELU derivative when recording.
      double* pre = &blk.mlp_dgelu[b * tokens * hidden];
      double* act = &blk.mlp_act[b * tokens * hidden];
      Linear(ln2, tokens, d, bp.mlp_in_weight, bp.mlp_in_bias, hidden, pre);
      if (record) {
        for (size_t i = 0; i < tokens * hidden; ++i) kernels::GeluWithGrad(pre[i], &act[i], &pre[i]);
      } else {
        for (size_t i = 0; i < tokens * hidden; ++i) act[i] = kernels::Gelu(pre[i]);
      }
      Linear(act, tokens, hidden, bp.mlp_out_weight, bp.mlp_out_bias, d, mlp_out.data());
      if (perturb != nullptr && perturb->at_pre_residual) {
        SwapSite(mlp_out, tokens, d, *perturb, rng[b]);
      }
      for (size_t i = 0; i < td; ++i) hb[i] += mlp_out[i];
    }
    RequireFinite(h, "block " + std::to_string(k));
  }

  c.h_out = h;
  c.lnf_out.resize(batch * td);
  c.lnf_mean.resize(batch * tokens);
  c.lnf_rstd.resize(batch * tokens);
  TokenTensor eps(batch, tokens, pd);
  for (size_t b = 0; b < batch; ++b) {
    double* lnf = &c.lnf_out[b * td];
    LayerNormRows(&h[b * td], tokens, d, p.final_ln_gain, p.final_ln_bias, lnf,
                  &c.lnf_mean[b * tokens], &c.lnf_rstd[b * tokens]);
    Linear(lnf, tokens, d, p.head_weight, p.head_bias, pd,
           eps.mutable_data().data() + b * tokens * pd);
  }
  RequireFinite(eps.data(), "output head");
  c.valid = record && !any_active;
  return eps;
}

}  // namespace

size_t ModelConfig::hidden() const {
  return static_cast<size_t>(std::llround(mlp_ratio * static_cast<double>(channels)));
}

void ModelConfig::Validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
  };
  if (patch_side == 0) fail("patch_side", "must be >= 1");
  if (image_side == 0 || image_side % patch_side != 0) {
    fail("image_side", "must be a positive multiple of patch_side");
  }
  if (tokens() < 2) fail("image_side", "token count must be >= 2");
  if (heads == 0) fail("heads", "must be >= 1");
  if (channels == 0 || channels % heads != 0) fail("channels", "must be divisible by heads");
  if (channels % 2 != 0) fail("channels", "must be even (sinusoidal embedding)");
  if (channels < 2) fail("channels", "must be >= 2");
  if (blocks == 0) fail("blocks", "must be >= 1");
  if (!(mlp_ratio > 0.0) || hidden() == 0) fail("mlp_ratio", "must be > 0");
  if (num_classes == 0) fail("num_classes", "must be >= 1");
  if (!(cond_dropout_prob >= 0.0 && cond_dropout_prob <= 1.0)) {
    fail("cond_dropout_prob", "must lie in [0, 1]");
  }
}

ModelParameters ModelParameters::Zeros(const ModelConfig& cfg) {
  const size_t d = cfg.channels;
  const size_t pd = cfg.patch_dim();
  const size_t hid = cfg.hidden();
  ModelParameters p;
  p.patch_weight.assign(pd * d, 0.0);
  p.patch_bias.assign(d, 0.0);
  p.pos_embed.assign(cfg.tokens() * d, 0.0);
  p.time_w1.assign(d * d, 0.0);
  p.time_b1.assign(d, 0.0);
  p.time_w2.assign(d * d, 0.0);
  p.time_b2.assign(d, 0.0);
  p.class_embed.assign((cfg.num_classes + 1) * d, 0.0);
  p.blocks.resize(cfg.blocks);
  for (BlockParameters& b : p.blocks) {
    b.ln1_gain.assign(d, 0.0);
    b.ln1_bias.assign(d, 0.0);
    b.qkv_weight.assign(d * 3 * d, 0.0);
    b.qkv_bias.assign(3 * d, 0.0);
    b.attn_out_weight.assign(d * d, 0.0);
    b.attn_out_bias.assign(d, 0.0);
    b.ln2_gain.assign(d, 0.0);
    b.ln2_bias.assign(d, 0.0);
    b.mlp_in_weight.assign(d * hid, 0.0);
    b.mlp_in_bias.assign(hid, 0.0);
    b.mlp_out_weight.assign(hid * d, 0.0);
    b.mlp_out_bias.assign(d, 0.0);
  }
  p.final_ln_gain.assign(d, 0.0);
  p.final_ln_bias.assign(d, 0.0);
  p.head_weight.assign(d * pd, 0.0);
  p.head_bias.assign(pd, 0.0);
  return p;
}

ModelParameters ModelParameters::Initialize(const ModelConfig& cfg, RngStream& rng) {
  cfg.Validate();
  const size_t d = cfg.channels;
  const size_t pd = cfg.patch_dim();
  const size_t hid = cfg.hidden();
  auto fan_in = [](size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  // Residual branch outputs start small so the stream is near identity.
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.blocks));
  ModelParameters p = Zeros(cfg);
  p.patch_weight = Randn(pd * d, fan_in(pd), rng);
  p.pos_embed = Randn(cfg.tokens() * d, 0.1, rng);
  p.time_w1 = Randn(d * d, fan_in(d), rng);
  p.time_w2 = Randn(d * d, fan_in(d), rng);
  p.class_embed = Randn((cfg.num_classes + 1) * d, 0.1, rng);
  for (BlockParameters& b : p.blocks) {
    b.ln1_gain.assign(d, 1.0);
    b.qkv_weight = Randn(d * 3 * d, fan_in(d), rng);
    b.attn_out_weight = Randn(d * d, fan_in(d) * residual_scale, rng);
    b.ln2_gain.assign(d, 1.0);
    b.mlp_in_weight = Randn(d * hid, fan_in(d), rng);
    b.mlp_out_weight = Randn(hid * d, fan_in(hid) * residual_scale, rng);
  }
  p.final_ln_gain.assign(d, 1.0);
  p.head_weight = Randn(d * pd, 0.1 * fan_in(d), rng);
  return p;
}

template <typename Self, typename Slot>
static std::vector<Slot> CollectTensors(Self& p, const ModelConfig* cfg_unused) {
  (void)cfg_unused;
  const size_t d = p.patch_bias.size();
  const size_t pd = p.head_bias.size();
  std::vector<Slot> out;
  auto add = [&](std::string name, std::vector<size_t> shape, auto& values) {
    out.push_back(Slot{std::move(name), std::move(shape), &values});
  };
  add("patch_weight", {pd, d}, p.patch_weight);
  add("patch_bias", {d}, p.patch_bias);
  add("pos_embed", {d == 0 ? 0 : p.pos_embed.size() / d, d}, p.pos_embed);
  add("time_w1", {d, d}, p.time_w1);
  add("time_b1", {d}, p.time_b1);
  add("time_w2", {d, d}, p.time_w2);
  add("time_b2", {d}, p.time_b2);
  add("class_embed", {d == 0 ? 0 : p.class_embed.size() / d, d}, p.class_embed);
  for (size_t k = 0; k < p.blocks.size(); ++k) {
    auto& b = p.blocks[k];
    const std::string prefix = "blocks." + std::to_string(k) + ".";
    const size_t hid = b.mlp_in_bias.size();
    add(prefix + "ln1_gain", {d}, b.ln1_gain);
    add(prefix + "ln1_bias", {d}, b.ln1_bias);
    add(prefix + "qkv_weight", {d, 3 * d}, b.qkv_weight);
    add(prefix + "qkv_bias", {3 * d}, b.qkv_bias);
    add(prefix + "attn_out_weight", {d, d}, b.attn_out_weight);
    add(prefix + "attn_out_bias", {d}, b.attn_out_bias);
    add(prefix + "ln2_gain", {d}, b.ln2_gain);
    add(prefix + "ln2_bias", {d}, b.ln2_bias);
    add(prefix + "mlp_in_weight", {d, hid}, b.mlp_in_weight);
    add(prefix + "mlp_in_bias", {hid}, b.mlp_in_bias);
    add(prefix + "mlp_out_weight", {hid, d}, b.mlp_out_weight);
    add(prefix + "mlp_out_bias", {d}, b.mlp_out_bias);
  }
  add("final_ln_gain", {d}, p.final_ln_gain);
  add("final_ln_bias", {d}, p.final_ln_bias);
  add("head_weight", {d, pd}, p.head_weight);
  add("head_bias", {pd}, p.head_bias);
  return out;
}

std::vector<ParamSlot> ModelParameters::Tensors() {
  return CollectTensors<ModelParameters, ParamSlot>(*this, nullptr);
}

std::vector<ConstParamSlot> ModelParameters::Tensors() const {
  return CollectTensors<const ModelParameters, ConstParamSlot>(*this, nullptr);
}

size_t ModelParameters::ParameterCount() const {
  size_t n = 0;
  for (const auto& slot : Tensors()) n += slot.values->size();
  return n;
}

bool ModelParameters::operator==(const ModelParameters& other) const {
  const auto a = Tensors();
  const auto b = other.Tensors();
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape != b[i].shape || *a[i].values != *b[i].values) return false;
  }
  return true;
}

std::vector<double> TimestepEmbedding(size_t t, size_t d) {
  const size_t half = d / 2;
  std::vector<double> emb(d, 0.0);
  const double log_base = std::log(10000.0) / static_cast<double>(half);
  for (size_t i = 0; i < half; ++i) {
    const double angle = static_cast<double>(t) * std::exp(-static_cast<double>(i) * log_base);
    emb[i] = std::sin(angle);
    emb[half + i] = std::cos(angle);
  }
  return emb;
}

TokenTensor Patchify(std::span<const double> image, const ModelConfig& cfg) {
  return PatchifyBatch(image, 1, cfg);
}

TokenTensor PatchifyBatch(std::span<const double> images, size_t count,
                          const ModelConfig& cfg) {
  const size_t side = cfg.image_side;
  const size_t ps = cfg.patch_side;
  const size_t grid = cfg.grid_side();
  if (count == 0 || images.size() != count * side * side) {
    throw ShapeError("Patchify: expected " + std::to_string(count) + " images of " +
                     std::to_string(side) + "x" + std::to_string(side));
  }
  TokenTensor out(count, cfg.tokens(), cfg.patch_dim());
  for (size_t b = 0; b < count; ++b) {
    const double* img = images.data() + b * side * side;
    for (size_t gy = 0; gy < grid; ++gy) {
      for (size_t gx = 0; gx < grid; ++gx) {
        const size_t token = gy * grid + gx;
        for (size_t py = 0; py < ps; ++py) {
          for (size_t px = 0; px < ps; ++px) {
            out(b, token, py * ps + px) = img[(gy * ps + py) * side + gx * ps + px];
          }
        }
      }
    }
  }
  return out;
}

std::vector<double> Unpatchify(const TokenTensor& tokens, size_t b,
                               const ModelConfig& cfg) {
  const size_t side = cfg.image_side;
  const size_t ps = cfg.patch_side;
  const size_t grid = cfg.grid_side();
  if (tokens.tokens() != cfg.tokens() || tokens.channels() != cfg.patch_dim() ||
      b >= tokens.batch()) {
    throw ShapeError("Unpatchify: tensor shape does not match the model config");
  }
  std::vector<double> img(side * side);
  for (size_t gy = 0; gy < grid; ++gy) {
    for (size_t gx = 0; gx < grid; ++gx) {
      const size_t token = gy * grid + gx;
      for (size_t py = 0; py < ps; ++py) {
        for (size_t px = 0; px < ps; ++px) {
          img[(gy * ps + py) * side + gx * ps + px] = tokens(b, token, py * ps + px);
        }
      }
    }
  }
  return img;
}

std::vector<double> UnpatchifyBatch(const TokenTensor& tokens, const ModelConfig& cfg) {
  std::vector<double> out;
  out.reserve(tokens.size());
  for (size_t b = 0; b < tokens.batch(); ++b) {
    const auto img = Unpatchify(tokens, b, cfg);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

TokenTensor ForwardBatch(const ModelParameters& params, const ModelConfig& cfg,
                         const TokenTensor& x, const BatchInputs& inputs,
                         ForwardCache* cache) {
  return ForwardImpl<true>(params, cfg, x, inputs, cache);
}

TokenTensor ForwardWithoutHooks(const ModelParameters& params,
                                const ModelConfig& cfg, const TokenTensor& x,
                                std::span<const size_t> timesteps,
                                std::span<const Condition> conditions,
                                ForwardCache* cache) {
  BatchInputs inputs{timesteps, conditions, {}, {}};
  return ForwardImpl<false>(params, cfg, x, inputs, cache);
}

TokenTensor Forward(const ModelParameters& params, const ModelConfig& cfg,
                    const TokenTensor& x_t, size_t t, const Condition& cond,
                    const PerturbSpec& perturb, const RngStream& rng) {
  const size_t batch = x_t.batch();
  std::vector<size_t> ts(batch, t);
  std::vector<Condition> conds(batch, cond);
  std::vector<PerturbSpec> specs(batch, perturb);
  std::vector<RngStream> streams;
  streams.reserve(batch);
  for (size_t b = 0; b < batch; ++b) streams.push_back(rng.Derive(b));
  return ForwardBatch(params, cfg, x_t, {ts, conds, specs, streams});
}

std::pair<TokenTensor, TokenTensor> ForwardTwoBranch(
    const ModelParameters& params, const ModelConfig& cfg,
    const TokenTensor& x_t, size_t t, const Condition& cond,
    const PerturbSpec& perturb, const RngStream& rng) {
  const size_t batch = x_t.batch();
  const TokenTensor both = TokenTensor::Concat(x_t, x_t);
  std::vector<size_t> ts(2 * batch, t);
  std::vector<Condition> conds(2 * batch, cond);
  std::vector<PerturbSpec> specs(2 * batch);
  std::vector<RngStream> streams;
  streams.reserve(2 * batch);
  for (size_t half = 0; half < 2; ++half) {
    for (size_t b = 0; b < batch; ++b) streams.push_back(rng.Derive(b));
  }
  for (size_t b = 0; b < batch; ++b) specs[batch + b] = perturb;
  const TokenTensor eps = ForwardBatch(params, cfg, both, {ts, conds, specs, streams});
  return {eps.Slice(0, batch), eps.Slice(batch, batch)};
}

ModelParameters Backward(const ModelParameters& p, const ModelConfig& cfg,
                         const TokenTensor& grad_out, const ForwardCache& c) {
  if (!c.valid) {
    throw std::logic_error("Backward: no cached clean forward pass");
  }
  const size_t batch = c.batch;
  const size_t tokens = cfg.tokens();
  const size_t d = cfg.channels;
  const size_t pd = cfg.patch_dim();
  const size_t hidden = cfg.hidden();
  const size_t heads = cfg.heads;
  const size_t hd = cfg.head_dim();
  const size_t td = tokens * d;
  const size_t rows = batch * tokens;
  if (grad_out.batch() != batch || grad_out.tokens() != tokens ||
      grad_out.channels() != pd) {
    throw ShapeError("Backward: gradient shape does not match the cached pass");
  }

  ModelParameters g = ModelParameters::Zeros(cfg);
  std::vector<double> dh(batch * td);
  std::vector<double> dtmp(batch * td);

  // Output head and final norm.
  LinearBackward(c.lnf_out.data(), rows, d, p.head_weight, grad_out.data().data(), pd,
                 g.head_weight, g.head_bias, dtmp.data());
  LayerNormBackward(c.h_out.data(), rows, d, c.lnf_mean.data(), c.lnf_rstd.data(),
                    p.final_ln_gain, dtmp.data(), g.final_ln_gain, g.final_ln_bias,
                    dh.data());

  std::vector<double> d_act(rows * hidden);
  std::vector<double> d_cat(batch * td);
  std::vector<double> d_qkv(rows * 3 * d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto t_i = static_cast<Eigen::Index>(tokens);
  const auto hd_i = static_cast<Eigen::Index>(hd);
  RowMatrix dprobs(t_i, t_i);
  RowMatrix dscores(t_i, t_i);

  for (size_t kk = cfg.blocks; kk-- > 0;) {
    const BlockParameters& bp = p.blocks[kk];
    BlockParameters& gb = g.blocks[kk];
    const ForwardCache::Block& blk = c.blocks[kk];

    // MLP branch: h_out = h_mid + mlp(LN2(h_mid)).
    LinearBackward(blk.mlp_act.data(), rows, hidden, bp.mlp_out_weight, dh.data(), d,
                   gb.mlp_out_weight, gb.mlp_out_bias, d_act.data());
    for (size_t i = 0; i < rows * hidden; ++i) d_act[i] *= blk.mlp_dgelu[i];
    LinearBackward(blk.ln2_out.data(), rows, d, bp.mlp_in_weight, d_act.data(), hidden,
                   gb.mlp_in_weight, gb.mlp_in_bias, dtmp.data());
    std::vector<double> dln(batch * td);
    LayerNormBackward(blk.h_mid.data(), rows, d, blk.ln2_mean.data(), blk.ln2_rstd.data(),
                      bp.ln2_gain, dtmp.data(), gb.ln2_gain, gb.ln2_bias, dln.data());
    for (size_t i = 0; i < dh.size(); ++i) dh[i] += dln[i];

    // Attention branch: h_mid = h_in + Wo(attn(LN1(h_in))).
    LinearBackward(blk.attn_cat.data(), rows, d, bp.attn_out_weight, dh.data(), d,
                   gb.attn_out_weight, gb.attn_out_bias, d_cat.data());
    const Eigen::OuterStride<> qkv_stride(static_cast<Eigen::Index>(3 * d));
    const Eigen::OuterStride<> cat_stride(static_cast<Eigen::Index>(d));
    for (size_t b = 0; b < batch; ++b) {
      const double* qkv = &blk.qkv[b * tokens * 3 * d];
      double* dqkv = &d_qkv[b * tokens * 3 * d];
      for (size_t head = 0; head < heads; ++head) {
        Strided q(qkv + head * hd, t_i, hd_i, qkv_stride);
        Strided k(qkv + d + head * hd, t_i, hd_i, qkv_stride);
        Strided v(qkv + 2 * d + head * hd, t_i, hd_i, qkv_stride);
        Strided dout(&d_cat[b * td] + head * hd, t_i, hd_i, cat_stride);
        ConstRowMap probs(&blk.probs[(b * heads + head) * tokens * tokens], t_i, t_i);
        MutableStrided dq(dqkv + head * hd, t_i, hd_i, qkv_stride);
        MutableStrided dk(dqkv + d + head * hd, t_i, hd_i, qkv_stride);
        MutableStrided dv(dqkv + 2 * d + head * hd, t_i, hd_i, qkv_stride);
        dprobs.noalias() = dout * v.transpose();
        dv.noalias() = probs.transpose() * dout;
        for (Eigen::Index r = 0; r < t_i; ++r) {
          double dot = 0.0;
          for (Eigen::Index s = 0; s < t_i; ++s) dot += dprobs(r, s) * probs(r, s);
          for (Eigen::Index s = 0; s < t_i; ++s) {
            dscores(r, s) = probs(r, s) * (dprobs(r, s) - dot) * scale;
          }
        }
        dq.noalias() = dscores * k;
        dk.noalias() = dscores.transpose() * q;
      }
    }
    LinearBackward(blk.ln1_out.data(), rows, d, bp.qkv_weight, d_qkv.data(), 3 * d,
                   gb.qkv_weight, gb.qkv_bias, dtmp.data());
    LayerNormBackward(blk.h_in.data(), rows, d, blk.ln1_mean.data(), blk.ln1_rstd.data(),
                      bp.ln1_gain, dtmp.data(), gb.ln1_gain, gb.ln1_bias, dln.data());
    for (size_t i = 0; i < dh.size(); ++i) dh[i] += dln[i];
  }

  // Embedding: h0 = patches * Wp + bp + pos + cond.
  LinearBackward(c.tokens_in.data(), rows, pd, p.patch_weight, dh.data(), d,
                 g.patch_weight, g.patch_bias, nullptr);
  std::vector<double> dcond(batch * d, 0.0);
  for (size_t b = 0; b < batch; ++b) {
    for (size_t t = 0; t < tokens; ++t) {
      for (size_t ch = 0; ch < d; ++ch) {
        const double v = dh[b * td + t * d + ch];
        g.pos_embed[t * d + ch] += v;
        dcond[b * d + ch] += v;
      }
    }
  }
  std::vector<double> dtime_act(d);
  for (size_t b = 0; b < batch; ++b) {
    const Condition& cond = c.conditions[b];
    const size_t row = cond.is_null() ? cfg.num_classes : *cond.class_id;
    for (size_t ch = 0; ch < d; ++ch) g.class_embed[row * d + ch] += dcond[b * d + ch];
    LinearBackward(&c.time_act[b * d], 1, d, p.time_w2, &dcond[b * d], d, g.time_w2,
                   g.time_b2, dtime_act.data());
    for (size_t ch = 0; ch < d; ++ch) dtime_act[ch] *= kernels::GeluGrad(c.time_pre[b * d + ch]);
    LinearBackward(&c.time_sin[b * d], 1, d, p.time_w1, dtime_act.data(), d, g.time_w1,
                   g.time_b1, nullptr);
  }
  return g;
}

}  // namespace ssg
