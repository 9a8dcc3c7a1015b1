#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "oracles.h"
#include "ssg/denoiser.h"
#include "ssg/errors.h"

namespace ssg {
namespace {

// T=4 tokens of 2x2 patches, D=8, two heads, one block.
ModelConfig TinyConfig() {
  ModelConfig cfg;
  cfg.image_side = 4;
  cfg.patch_side = 2;
  cfg.channels = 8;
  cfg.blocks = 1;
  cfg.heads = 2;
  cfg.mlp_ratio = 2.0;
  cfg.num_classes = 3;
  return cfg;
}

// Every tensor random, including gains and biases, so no term hides behind
// a zero or a one.
ModelParameters RandomParams(const ModelConfig& cfg, uint64_t seed, double scale = 0.4) {
  ModelParameters p = ModelParameters::Zeros(cfg);
  RngStream rng(seed, 77);
  for (ParamSlot slot : p.Tensors()) {
    for (double& v : *slot.values) v = scale * rng.Normal();
  }
  for (BlockParameters& b : p.blocks) {
    for (double& g : b.ln1_gain) g += 1.0;
    for (double& g : b.ln2_gain) g += 1.0;
  }
  for (double& g : p.final_ln_gain) g += 1.0;
  return p;
}

// ---- Hand-rolled reference forward, plain loops over one instance. ----

using Rows = std::vector<std::vector<double>>;

Rows Affine(const Rows& x, const std::vector<double>& w, const std::vector<double>& bias,
            size_t out) {
  Rows y(x.size(), std::vector<double>(out));
  const size_t in = x.empty() ? 0 : x[0].size();
  for (size_t r = 0; r < x.size(); ++r)
    for (size_t o = 0; o < out; ++o) {
      double s = bias[o];
      for (size_t i = 0; i < in; ++i) s += x[r][i] * w[i * out + o];
      y[r][o] = s;
    }
  return y;
}

Rows Norm(const Rows& x, const std::vector<double>& gain, const std::vector<double>& bias) {
  Rows y = x;
  for (size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mean = 0.0;
    for (double v : x[r]) mean += v / n;
    double var = 0.0;
    for (double v : x[r]) var += (v - mean) * (v - mean) / n;
    for (size_t c = 0; c < x[r].size(); ++c) {
      y[r][c] = (x[r][c] - mean) / std::sqrt(var + 1e-5) * gain[c] + bias[c];
    }
  }
  return y;
}

double RefGelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::vector<double> ReferenceForward(const ModelParameters& p, const ModelConfig& cfg,
                                     const std::vector<double>& image, size_t t,
                                     const Condition& cond) {
  const size_t side = cfg.image_side, ps = cfg.patch_side, g = side / ps;
  const size_t T = g * g, P = ps * ps, D = cfg.channels, H = cfg.heads, hd = D / H;
  Rows patches(T, std::vector<double>(P));
  for (size_t gy = 0; gy < g; ++gy)
    for (size_t gx = 0; gx < g; ++gx)
      for (size_t py = 0; py < ps; ++py)
        for (size_t px = 0; px < ps; ++px)
          patches[gy * g + gx][py * ps + px] = image[(gy * ps + py) * side + gx * ps + px];

  std::vector<double> sinus(D);
  for (size_t i = 0; i < D / 2; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(D / 2));
    sinus[i] = std::sin(static_cast<double>(t) * freq);
    sinus[D / 2 + i] = std::cos(static_cast<double>(t) * freq);
  }
  Rows te = Affine({sinus}, p.time_w1, p.time_b1, D);
  for (double& v : te[0]) v = RefGelu(v);
  te = Affine(te, p.time_w2, p.time_b2, D);
  const size_t row = cond.is_null() ? cfg.num_classes : *cond.class_id;

  Rows h = Affine(patches, p.patch_weight, p.patch_bias, D);
  for (size_t i = 0; i < T; ++i)
    for (size_t c = 0; c < D; ++c) h[i][c] += p.pos_embed[i * D + c] + te[0][c] + p.class_embed[row * D + c];

  for (const BlockParameters& b : p.blocks) {
    const Rows qkv = Affine(Norm(h, b.ln1_gain, b.ln1_bias), b.qkv_weight, b.qkv_bias, 3 * D);
    Rows cat(T, std::vector<double>(D, 0.0));
    for (size_t head = 0; head < H; ++head) {
      for (size_t i = 0; i < T; ++i) {
        std::vector<double> s(T);
        for (size_t j = 0; j < T; ++j) {
          double dot = 0.0;
          for (size_t k = 0; k < hd; ++k) dot += qkv[i][head * hd + k] * qkv[j][D + head * hd + k];
          s[j] = dot / std::sqrt(static_cast<double>(hd));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0.0;
        for (double& v : s) z += (v = std::exp(v - mx));
        for (size_t j = 0; j < T; ++j)
          for (size_t k = 0; k < hd; ++k) cat[i][head * hd + k] += s[j] / z * qkv[j][2 * D + head * hd + k];
      }
    }
    const Rows attn = Affine(cat, b.attn_out_weight, b.attn_out_bias, D);
    for (size_t i = 0; i < T; ++i)
      for (size_t c = 0; c < D; ++c) h[i][c] += attn[i][c];
    Rows mid = Affine(Norm(h, b.ln2_gain, b.ln2_bias), b.mlp_in_weight, b.mlp_in_bias, cfg.hidden());
    for (auto& r : mid)
      for (double& v : r) v = RefGelu(v);
    const Rows mlp = Affine(mid, b.mlp_out_weight, b.mlp_out_bias, D);
    for (size_t i = 0; i < T; ++i)
      for (size_t c = 0; c < D; ++c) h[i][c] += mlp[i][c];
  }
  const Rows out = Affine(Norm(h, p.final_ln_gain, p.final_ln_bias), p.head_weight, p.head_bias, P);
  std::vector<double> flat;
  for (const auto& r : out) flat.insert(flat.end(), r.begin(), r.end());
  return flat;
}

// ---- Helpers. ----

TokenTensor RandomInput(const ModelConfig& cfg, size_t batch, uint64_t seed) {
  RngStream rng(seed, 5);
  return oracle::RandomTensor(batch, cfg.tokens(), cfg.patch_dim(), rng);
}

double ScalarLoss(const ModelParameters& p, const ModelConfig& cfg, const TokenTensor& x,
                  const std::vector<size_t>& ts, const std::vector<Condition>& conds,
                  const TokenTensor& g) {
  const TokenTensor eps = ForwardWithoutHooks(p, cfg, x, ts, conds);
  double s = 0.0;
  for (size_t i = 0; i < eps.size(); ++i) s += eps.data()[i] * g.data()[i];
  return s;
}

PerturbSpec ActiveSwap(double r, SwapPolicy policy = SwapPolicy::kDissimilar) {
  PerturbSpec s;
  s.active = true;
  s.spatial_r = r;
  s.channel_r = r;
  s.policy = policy;
  return s;
}

// ---- Config, embedding, patching. ----

TEST(ModelConfigTest, Validation) {
  ModelConfig cfg;
  EXPECT_NO_THROW(cfg.Validate());
  cfg.patch_side = 5;
  EXPECT_THROW(cfg.Validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.heads = 3;
  EXPECT_THROW(cfg.Validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.patch_side = 16;  // a single token
  EXPECT_THROW(cfg.Validate(), ConfigError);
  EXPECT_EQ(ModelConfig{}.tokens(), 16u);
  EXPECT_EQ(ModelConfig{}.patch_dim(), 16u);
}

TEST(TimestepEmbeddingTest, ZeroIsSinZeroCosOne) {
  const std::vector<double> e = TimestepEmbedding(0, 8);
  for (size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(e[i], 0.0);
    EXPECT_EQ(e[4 + i], 1.0);
  }
}

TEST(TimestepEmbeddingTest, DeterministicBoundedAndDistinct) {
  EXPECT_EQ(TimestepEmbedding(123, 64), TimestepEmbedding(123, 64));
  const auto a = TimestepEmbedding(1, 64), b = TimestepEmbedding(2, 64);
  double dist = 0.0;
  for (size_t i = 0; i < 64; ++i) dist += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_GT(dist, 0.0);
  for (size_t t : {0u, 17u, 999u}) {
    for (double v : TimestepEmbedding(t, 64)) {
      EXPECT_LE(std::abs(v), 1.0);
    }
  }
}

TEST(PatchifyTest, ShapesAndRoundTrip) {
  const ModelConfig cfg;
  RngStream rng(3, 0);
  std::vector<double> img(256);
  for (double& v : img) v = rng.Normal();
  const TokenTensor tok = Patchify(img, cfg);
  EXPECT_EQ(tok.batch(), 1u);
  EXPECT_EQ(tok.tokens(), 16u);
  EXPECT_EQ(tok.channels(), 16u);
  EXPECT_EQ(Unpatchify(tok, 0, cfg), img);
  // Raster order: token 1 is the second patch of the first patch row.
  EXPECT_EQ(tok(0, 1, 0), img[4]);
  EXPECT_EQ(tok(0, 4, 0), img[4 * 16]);
  EXPECT_EQ(tok(0, 5, 5), img[(4 + 1) * 16 + 4 + 1]);
}

TEST(PatchifyTest, ConstantImageGivesEqualTokens) {
  const ModelConfig cfg;
  const TokenTensor tok = Patchify(std::vector<double>(256, 0.25), cfg);
  for (double v : tok.data()) EXPECT_EQ(v, 0.25);
}

TEST(PatchifyTest, BatchRoundTripAndErrors) {
  const ModelConfig cfg;
  RngStream rng(4, 0);
  std::vector<double> imgs(3 * 256);
  for (double& v : imgs) v = rng.Uniform();
  const TokenTensor tok = PatchifyBatch(imgs, 3, cfg);
  EXPECT_EQ(tok.batch(), 3u);
  EXPECT_EQ(UnpatchifyBatch(tok, cfg), imgs);
  EXPECT_THROW(Patchify(std::vector<double>(255), cfg), ShapeError);
  EXPECT_THROW(Unpatchify(TokenTensor(1, 15, 16), 0, cfg), ShapeError);
}

// ---- Forward. ----

TEST(ForwardTest, MatchesHandRolledReference) {
  const ModelConfig cfg = TinyConfig();
  const ModelParameters p = RandomParams(cfg, 1);
  RngStream rng(9, 0);
  for (int trial = 0; trial < 6; ++trial) {
    std::vector<double> img(16);
    for (double& v : img) v = rng.Normal();
    const size_t t = rng.UniformIndex(1000);
    const Condition cond = trial % 4 == 3 ? Condition::Null() : Condition::Class(trial % 3);
    const TokenTensor eps = Forward(p, cfg, Patchify(img, cfg), t, cond, PerturbSpec{}, rng);
    const std::vector<double> ref = ReferenceForward(p, cfg, img, t, cond);
    ASSERT_EQ(eps.size(), ref.size());
    for (size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(eps.data()[i], ref[i], 1e-10) << "trial " << trial << " index " << i;
    }
  }
}

TEST(ForwardTest, MatchesReferenceWithTwoBlocks) {
  ModelConfig cfg = TinyConfig();
  cfg.blocks = 2;
  const ModelParameters p = RandomParams(cfg, 2, 0.3);
  std::vector<double> img(16);
  RngStream rng(10, 0);
  for (double& v : img) v = rng.Normal();
  const TokenTensor eps = Forward(p, cfg, Patchify(img, cfg), 412, Condition::Class(2),
                                  PerturbSpec{}, rng);
  const std::vector<double> ref = ReferenceForward(p, cfg, img, 412, Condition::Class(2));
  for (size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(eps.data()[i], ref[i], 1e-10);
}

TEST(ForwardTest, InactiveAndZeroRatioAreBitExactNoOps) {
  const ModelConfig cfg;
  RngStream init(11, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, init);
  const TokenTensor x = RandomInput(cfg, 3, 12);
  const std::vector<size_t> ts(3, 500);
  const std::vector<Condition> conds(3, Condition::Class(1));
  const TokenTensor clean = ForwardWithoutHooks(p, cfg, x, ts, conds);
  const RngStream rng(13, 0);
  EXPECT_EQ(Forward(p, cfg, x, 500, Condition::Class(1), PerturbSpec{}, rng), clean);
  for (SwapPolicy policy : {SwapPolicy::kDissimilar, SwapPolicy::kSimilar, SwapPolicy::kRandom}) {
    EXPECT_EQ(Forward(p, cfg, x, 500, Condition::Class(1), ActiveSwap(0.0, policy), rng), clean);
  }
  // Neither site enabled is also a no-op.
  PerturbSpec off = ActiveSwap(0.5);
  off.at_block_input = false;
  off.at_pre_residual = false;
  EXPECT_EQ(Forward(p, cfg, x, 500, Condition::Class(1), off, rng), clean);
}

TEST(ForwardTest, ActiveSwapChangesOutput) {
  const ModelConfig cfg;
  RngStream init(14, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, init);
  const TokenTensor x = RandomInput(cfg, 2, 15);
  const RngStream rng(16, 0);
  const TokenTensor clean = Forward(p, cfg, x, 300, Condition::Class(0), PerturbSpec{}, rng);
  for (bool block_input : {true, false}) {
    PerturbSpec s = ActiveSwap(0.5);
    s.at_block_input = block_input;
    s.at_pre_residual = !block_input;
    EXPECT_NE(Forward(p, cfg, x, 300, Condition::Class(0), s, rng), clean);
  }
  PerturbSpec ident;
  ident.active = true;
  ident.identity_attention = true;
  EXPECT_NE(Forward(p, cfg, x, 300, Condition::Class(0), ident, rng), clean);
}

TEST(ForwardTest, DeterministicAndBatchIndependent) {
  const ModelConfig cfg;
  RngStream init(17, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, init);
  const TokenTensor x = RandomInput(cfg, 4, 18);
  const std::vector<size_t> ts = {10, 200, 999, 0};
  const std::vector<Condition> conds = {Condition::Class(0), Condition::Null(),
                                        Condition::Class(2), Condition::Class(1)};
  std::vector<PerturbSpec> specs = {ActiveSwap(0.5, SwapPolicy::kRandom), PerturbSpec{},
                                    ActiveSwap(0.25), ActiveSwap(1.0, SwapPolicy::kSimilar)};
  const RngStream root(19, 0);
  std::vector<RngStream> streams;
  for (size_t b = 0; b < 4; ++b) streams.push_back(root.Derive(b));
  const TokenTensor all = ForwardBatch(p, cfg, x, {ts, conds, specs, streams});
  EXPECT_EQ(ForwardBatch(p, cfg, x, {ts, conds, specs, streams}), all);
  for (size_t b = 0; b < 4; ++b) {
    const TokenTensor single = ForwardBatch(
        p, cfg, x.Slice(b, 1),
        {std::span(&ts[b], 1), std::span(&conds[b], 1), std::span(&specs[b], 1),
         std::span(&streams[b], 1)});
    EXPECT_EQ(single, all.Slice(b, 1)) << "instance " << b;
  }
}

TEST(ForwardTest, ConditionsMatter) {
  const ModelConfig cfg;
  RngStream init(20, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, init);
  const TokenTensor x = RandomInput(cfg, 1, 21);
  const RngStream rng(22, 0);
  const TokenTensor a = Forward(p, cfg, x, 100, Condition::Class(0), PerturbSpec{}, rng);
  EXPECT_NE(a, Forward(p, cfg, x, 100, Condition::Class(1), PerturbSpec{}, rng));
  EXPECT_NE(a, Forward(p, cfg, x, 100, Condition::Null(), PerturbSpec{}, rng));
  EXPECT_NE(a, Forward(p, cfg, x, 101, Condition::Class(0), PerturbSpec{}, rng));
  EXPECT_THROW(Forward(p, cfg, x, 100, Condition::Class(4), PerturbSpec{}, rng), ShapeError);
}

TEST(ForwardTest, ShapeErrors) {
  const ModelConfig cfg;
  RngStream init(23, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, init);
  const RngStream rng(0, 0);
  EXPECT_THROW(Forward(p, cfg, TokenTensor(1, 15, 16), 1, Condition::Null(), {}, rng), ShapeError);
  EXPECT_THROW(Forward(p, cfg, TokenTensor(1, 16, 9), 1, Condition::Null(), {}, rng), ShapeError);
}

TEST(ForwardTest, NonFiniteNamesBlock) {
  const ModelConfig cfg = TinyConfig();
  ModelParameters p = RandomParams(cfg, 24);
  p.blocks[0].mlp_out_bias[3] = std::numeric_limits<double>::infinity();
  const RngStream rng(0, 0);
  try {
    Forward(p, cfg, RandomInput(cfg, 1, 25), 5, Condition::Null(), {}, rng);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("block 0"), std::string::npos) << e.what();
  }
}

TEST(ForwardTest, PermutationEquivariantWithoutPositions) {
  const ModelConfig cfg;
  RngStream init(26, 0);
  ModelParameters p = ModelParameters::Initialize(cfg, init);
  std::fill(p.pos_embed.begin(), p.pos_embed.end(), 0.0);
  const TokenTensor x = RandomInput(cfg, 1, 27);
  std::vector<size_t> perm(cfg.tokens());
  std::iota(perm.begin(), perm.end(), 0);
  RngStream shuffle(28, 0);
  for (size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[shuffle.UniformIndex(i + 1)]);
  TokenTensor xp(1, cfg.tokens(), cfg.patch_dim());
  for (size_t t = 0; t < cfg.tokens(); ++t)
    for (size_t c = 0; c < cfg.patch_dim(); ++c) xp(0, t, c) = x(0, perm[t], c);
  const RngStream rng(0, 0);
  const TokenTensor y = Forward(p, cfg, x, 321, Condition::Class(1), {}, rng);
  const TokenTensor yp = Forward(p, cfg, xp, 321, Condition::Class(1), {}, rng);
  for (size_t t = 0; t < cfg.tokens(); ++t)
    for (size_t c = 0; c < cfg.patch_dim(); ++c) EXPECT_NEAR(yp(0, t, c), y(0, perm[t], c), 1e-12);
}

TEST(ForwardTwoBranchTest, ZeroRatioHalvesIdentical) {
  const ModelConfig cfg;
  RngStream init(29, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, init);
  const TokenTensor x = RandomInput(cfg, 2, 30);
  const auto [ori, pert] = ForwardTwoBranch(p, cfg, x, 700, Condition::Class(2), ActiveSwap(0.0),
                                            RngStream(31, 0));
  EXPECT_EQ(ori.batch(), 2u);
  EXPECT_EQ(pert.batch(), 2u);
  EXPECT_EQ(ori, pert);
}

TEST(ForwardTwoBranchTest, EqualsSeparateCalls) {
  const ModelConfig cfg;
  RngStream init(32, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, init);
  const TokenTensor x = RandomInput(cfg, 2, 33);
  const RngStream rng(34, 0);
  for (SwapPolicy policy : {SwapPolicy::kDissimilar, SwapPolicy::kRandom}) {
    const PerturbSpec s = ActiveSwap(0.5, policy);
    const auto [ori, pert] = ForwardTwoBranch(p, cfg, x, 650, Condition::Class(0), s, rng);
    EXPECT_EQ(ori, Forward(p, cfg, x, 650, Condition::Class(0), PerturbSpec{}, rng));
    EXPECT_EQ(pert, Forward(p, cfg, x, 650, Condition::Class(0), s, rng));
    EXPECT_NE(ori, pert);
  }
}

// ---- Backward. ----

TEST(BackwardTest, MissingCacheThrows) {
  const ModelConfig cfg = TinyConfig();
  const ModelParameters p = RandomParams(cfg, 35);
  EXPECT_THROW(Backward(p, cfg, TokenTensor(1, 4, 4), ForwardCache{}), std::logic_error);
  // A perturbed pass does not leave a usable cache.
  ForwardCache cache;
  const std::vector<size_t> ts = {3};
  const std::vector<Condition> conds = {Condition::Null()};
  const std::vector<PerturbSpec> specs = {ActiveSwap(0.5)};
  const std::vector<RngStream> streams = {RngStream(1, 0)};
  ForwardBatch(p, cfg, RandomInput(cfg, 1, 36), {ts, conds, specs, streams}, &cache);
  EXPECT_THROW(Backward(p, cfg, TokenTensor(1, 4, 4), cache), std::logic_error);
}

TEST(BackwardTest, ZeroUpstreamGivesZeroGradient) {
  const ModelConfig cfg = TinyConfig();
  const ModelParameters p = RandomParams(cfg, 37);
  const TokenTensor x = RandomInput(cfg, 2, 38);
  ForwardCache cache;
  const std::vector<size_t> ts = {4, 900};
  const std::vector<Condition> conds = {Condition::Class(1), Condition::Null()};
  ForwardWithoutHooks(p, cfg, x, ts, conds, &cache);
  EXPECT_EQ(Backward(p, cfg, TokenTensor(2, 4, 4), cache), ModelParameters::Zeros(cfg));
}

TEST(BackwardTest, FiniteDifferenceEveryTensor) {
  const ModelConfig cfg = TinyConfig();
  ModelParameters p = RandomParams(cfg, 39);
  const TokenTensor x = RandomInput(cfg, 2, 40);
  RngStream rng(41, 0);
  const TokenTensor g = oracle::RandomTensor(2, 4, 4, rng);
  const std::vector<size_t> ts = {37, 811};
  const std::vector<Condition> conds = {Condition::Class(2), Condition::Null()};
  ForwardCache cache;
  ForwardWithoutHooks(p, cfg, x, ts, conds, &cache);
  ModelParameters grad = Backward(p, cfg, g, cache);

  const double h = 1e-5;
  auto slots = p.Tensors();
  auto gslots = grad.Tensors();
  ASSERT_EQ(slots.size(), gslots.size());
  for (size_t s = 0; s < slots.size(); ++s) {
    std::vector<double>& values = *slots[s].values;
    const size_t probes = std::min<size_t>(10, values.size());
    for (size_t k = 0; k < probes; ++k) {
      const size_t i = rng.UniformIndex(values.size());
      const double saved = values[i];
      values[i] = saved + h;
      const double up = ScalarLoss(p, cfg, x, ts, conds, g);
      values[i] = saved - h;
      const double down = ScalarLoss(p, cfg, x, ts, conds, g);
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = (*gslots[s].values)[i];
      // Key biases have an exact zero gradient (softmax shift invariance),
      // so the denominator carries a small floor.
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-4});
      EXPECT_LT(std::abs(numeric - analytic) / denom, 1e-4)
          << slots[s].name << "[" << i << "] numeric " << numeric << " analytic " << analytic;
    }
  }
}

TEST(BackwardTest, DuplicatedBatchDoublesGradient) {
  const ModelConfig cfg = TinyConfig();
  const ModelParameters p = RandomParams(cfg, 42);
  const TokenTensor x = RandomInput(cfg, 1, 43);
  RngStream rng(44, 0);
  const TokenTensor g = oracle::RandomTensor(1, 4, 4, rng);
  ForwardCache cache;
  const std::vector<size_t> t1 = {250}, t2 = {250, 250};
  const std::vector<Condition> c1 = {Condition::Class(0)}, c2(2, Condition::Class(0));
  ForwardWithoutHooks(p, cfg, x, t1, c1, &cache);
  const ModelParameters single = Backward(p, cfg, g, cache);
  ForwardWithoutHooks(p, cfg, TokenTensor::Concat(x, x), t2, c2, &cache);
  const ModelParameters twice = Backward(p, cfg, TokenTensor::Concat(g, g), cache);
  auto a = single.Tensors();
  auto b = twice.Tensors();
  for (size_t s = 0; s < a.size(); ++s) {
    for (size_t i = 0; i < a[s].values->size(); ++i) {
      const double want = 2.0 * (*a[s].values)[i];
      EXPECT_NEAR((*b[s].values)[i], want, 1e-12 * std::max(1.0, std::abs(want))) << a[s].name;
    }
  }
}

TEST(BackwardTest, IndependentOfBufferPlacement) {
  // Fresh copies land at different heap alignments; results must not move.
  ModelConfig cfg = TinyConfig();
  cfg.channels = 16;
  const ModelParameters p0 = RandomParams(cfg, 46, 0.2);
  const TokenTensor x0 = RandomInput(cfg, 3, 47);
  const std::vector<size_t> ts = {1, 400, 950};
  const std::vector<Condition> conds(3, Condition::Class(1));
  std::vector<std::vector<char>> padding;
  ModelParameters first;
  TokenTensor first_eps;
  for (int trial = 0; trial < 16; ++trial) {
    padding.emplace_back(static_cast<size_t>(8 * (trial + 1)));
    const ModelParameters p = p0;
    const TokenTensor x = x0;
    ForwardCache cache;
    const TokenTensor eps = ForwardWithoutHooks(p, cfg, x, ts, conds, &cache);
    const ModelParameters g = Backward(p, cfg, eps, cache);
    if (trial == 0) {
      first = g;
      first_eps = eps;
      continue;
    }
    EXPECT_EQ(eps, first_eps);
    EXPECT_TRUE(g == first) << "trial " << trial;
  }
}

TEST(ParametersTest, TensorOrderAndCount) {
  const ModelConfig cfg;
  RngStream rng(45, 0);
  const ModelParameters p = ModelParameters::Initialize(cfg, rng);
  const auto slots = p.Tensors();
  size_t total = 0;
  for (const auto& s : slots) {
    size_t n = 1;
    for (size_t d : s.shape) n *= d;
    EXPECT_EQ(n, s.values->size()) << s.name;
    total += n;
  }
  EXPECT_EQ(total, p.ParameterCount());
  EXPECT_EQ(slots.front().name, "patch_weight");
  for (const auto& s : slots) {
    for (double v : *s.values) ASSERT_TRUE(std::isfinite(v));
  }
  RngStream again(45, 0);
  EXPECT_TRUE(ModelParameters::Initialize(cfg, again) == p);
}

}  // namespace
}  // namespace ssg
