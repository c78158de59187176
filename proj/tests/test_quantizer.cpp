#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rcmp/int_gemm.hpp"
#include "rcmp/pruner.hpp"
#include "rcmp/quantizer.hpp"

using namespace rcmp;

namespace {

std::vector<Tensor<float>> calibration_batches(const ModelConfig& c, std::uint64_t seed, int count = 4) {
  std::vector<Tensor<float>> out;
  for (int i = 0; i < count; ++i) out.push_back(fixture::batch(c, 8, seed + static_cast<std::uint64_t>(i)));
  return out;
}

float tensor_min(const Tensor<float>& t) { return *std::min_element(t.values().begin(), t.values().end()); }
float tensor_max(const Tensor<float>& t) { return *std::max_element(t.values().begin(), t.values().end()); }

}  // namespace

// ---------------------------------------------------------------------------
// Scalar mapping

TEST(QuantParams, ByteRangeIsIdentity) {
  const auto p = choose_quant_params(0.0, 255.0);
  EXPECT_EQ(p.scale, 1.0f);
  EXPECT_EQ(p.zero_point, 0);
  for (int k = 0; k <= 255; ++k) {
    EXPECT_EQ(quantize_value(k, p), k);
    EXPECT_EQ(dequantize_value(k, p), static_cast<float>(k));
  }
}

TEST(QuantParams, RoundsHalfToEvenAndClamps) {
  const auto p = choose_quant_params(0.0, 255.0);
  EXPECT_EQ(quantize_value(2.5, p), 2);
  EXPECT_EQ(quantize_value(3.5, p), 4);
  EXPECT_EQ(quantize_value(-7.0, p), 0);
  EXPECT_EQ(quantize_value(1e6, p), 255);
}

TEST(QuantParams, ConstantRangeRoundTripsExactly) {
  for (double c : {-3.25, 0.0, 1.0, 42.5}) {
    const auto p = choose_quant_params(c, c);
    EXPECT_EQ(p.scale, 1.0f);
    EXPECT_EQ(p.zero_point, p.qmin);
    EXPECT_EQ(fake_quantize(static_cast<float>(c), p), static_cast<float>(c)) << c;
  }
}

TEST(QuantParams, InvalidArgumentsRejected) {
  EXPECT_THROW(choose_quant_params(1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(choose_quant_params(0.0, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(choose_quant_params(0.0, 1.0, 9), std::invalid_argument);
}

TEST(QuantParams, RoundTripWithinHalfStep) {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    double lo = rng.uniform(-10, 10), hi = rng.uniform(-10, 10);
    if (lo > hi) std::swap(lo, hi);
    const auto p = choose_quant_params(lo, hi);
    for (int i = 0; i < 200; ++i) {
      const auto x = static_cast<float>(rng.uniform(lo, hi));
      EXPECT_LE(std::abs(x - fake_quantize(x, p)), p.scale / 2 + 1e-6) << lo << " " << hi << " " << x;
    }
  }
}

TEST(QuantParams, ZeroIsExact) {
  Rng rng(2);
  for (int trial = 0; trial < 500; ++trial) {
    double lo = rng.uniform(-5, 5), hi = rng.uniform(-5, 5);
    if (lo > hi) std::swap(lo, hi);
    const auto p = choose_quant_params(lo, hi);
    if (lo == hi) continue;
    EXPECT_EQ(fake_quantize(0.0f, p), 0.0f);
    EXPECT_GE(p.zero_point, p.qmin);
    EXPECT_LE(p.zero_point, p.qmax);
  }
}

TEST(QuantParams, QuantizationIsMonotone) {
  const auto p = choose_quant_params(-1.7, 3.1);
  int prev = p.qmin;
  for (int i = 0; i <= 100000; ++i) {
    const double x = -2.0 + 6.0 * i / 100000.0;
    const int q = quantize_value(x, p);
    EXPECT_GE(q, prev);
    prev = q;
  }
  EXPECT_EQ(prev, p.qmax);
}

TEST(QuantParams, LowerBitWidths) {
  for (int bits = 2; bits <= 8; ++bits) {
    const auto p = choose_quant_params(-1.0, 1.0, bits);
    EXPECT_EQ(p.qmax, (1 << bits) - 1);
    EXPECT_EQ(quantize_value(5.0, p), p.qmax);
  }
}

TEST(QuantizeTensor, UsesObservedRange) {
  const auto x = oracle::random_tensor<float>(Shape{4, 5}, 3, -2, 7);
  const auto q = quantize_tensor(x);
  const auto back = dequantize(q.values, q.params);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(x[i] - back[i]), q.params.scale / 2 + 1e-6);
  EXPECT_EQ(*std::max_element(q.values.values().begin(), q.values.values().end()), 255);
}

// ---------------------------------------------------------------------------
// Integer GEMM

TEST(IntGemm, MatchesScalarReference) {
  Rng rng(4);
  for (std::int64_t m : {1, 3, 4, 5, 9}) {
    for (std::int64_t n : {1, 2, 3, 17}) {
      for (std::int64_t k : {1, 15, 16, 40}) {
        const auto kp = padded_depth(k);
        std::vector<std::int16_t> a(static_cast<std::size_t>(m * kp), 0), b(static_cast<std::size_t>(n * kp), 0);
        for (std::int64_t r = 0; r < m; ++r)
          for (std::int64_t c = 0; c < k; ++c) a[static_cast<std::size_t>(r * kp + c)] = static_cast<std::int16_t>(static_cast<int>(rng.below(511)) - 255);
        for (std::int64_t r = 0; r < n; ++r)
          for (std::int64_t c = 0; c < k; ++c) b[static_cast<std::size_t>(r * kp + c)] = static_cast<std::int16_t>(static_cast<int>(rng.below(511)) - 255);
        std::vector<std::int32_t> fast(static_cast<std::size_t>(m * n)), ref(fast.size());
        int_gemm_nt(a.data(), b.data(), m, n, kp, fast.data());
        int_gemm_nt_scalar(a.data(), b.data(), m, n, kp, ref.data());
        EXPECT_EQ(fast, ref) << m << "x" << n << "x" << k;
      }
    }
  }
}

TEST(IntGemm, ExtremeOperandsDoNotOverflowPairSums) {
  const std::int64_t kp = 64;
  std::vector<std::int16_t> a(kp, -255), b(kp, -255);
  std::int32_t out = 0;
  int_gemm_nt(a.data(), b.data(), 1, 1, kp, &out);
  EXPECT_EQ(out, 255 * 255 * 64);
}

TEST(AccumulatorBound, EveryFullPresetLayerFitsInInt32) {
  for (const auto& l : weight_layers(describe(resnet18_full(6)))) {
    const std::int64_t fan_in = l.kind == LayerKind::linear ? l.in_channels : l.in_channels * l.kernel * l.kernel;
    EXPECT_EQ(accumulator_bound(l), 255LL * 255LL * fan_in) << l.name;
    EXPECT_LE(accumulator_bound(l), std::numeric_limits<std::int32_t>::max()) << l.name;
  }
}

// ---------------------------------------------------------------------------
// Calibration

TEST(Calibration, SingleBatchRangesMatchDirectComputation) {
  const auto m = fixture::tiny_model(5);
  const auto b = fixture::batch(m.config, 6, 6);
  const auto s = calibrate(m, {b});
  EXPECT_EQ(s.batches, 1u);
  EXPECT_EQ(s.sites, observation_sites(m.arch));
  EXPECT_EQ(s.ranges.at("input").min, tensor_min(b));
  EXPECT_EQ(s.ranges.at("input").max, tensor_max(b));
  const auto logits = oracle::forward(m, b);
  EXPECT_NEAR(s.ranges.at("fc").min, tensor_min(logits), 1e-5);
  EXPECT_NEAR(s.ranges.at("fc").max, tensor_max(logits), 1e-5);
  // Post-ReLU sites are never negative.
  for (const auto& site : s.sites)
    if (site != "input" && site != "fc") {
      EXPECT_GE(s.ranges.at(site).min, 0.0f) << site;
    }
}

TEST(Calibration, MergeIsBatchConcatenation) {
  const auto m = fixture::tiny_model(7);
  const auto bs = calibration_batches(m.config, 10, 3);
  const auto all = calibrate(m, bs);
  const auto a = calibrate(m, {bs[0]}), b = calibrate(m, {bs[1]}), c = calibrate(m, {bs[2]});
  const auto left = a.merged(b).merged(c), right = a.merged(b.merged(c));
  EXPECT_EQ(left.ranges, all.ranges);
  EXPECT_EQ(right.ranges, all.ranges);
  EXPECT_EQ(left.batches, 3u);
  EXPECT_EQ(CalibrationStats{}.merged(a).ranges, a.ranges);
  EXPECT_EQ(a.merged(CalibrationStats{}).ranges, a.ranges);
}

TEST(Calibration, BatchOrderDoesNotMatter) {
  const auto m = fixture::tiny_model(8);
  auto bs = calibration_batches(m.config, 20, 3);
  const auto s1 = calibrate(m, bs);
  std::reverse(bs.begin(), bs.end());
  EXPECT_EQ(calibrate(m, bs).ranges, s1.ranges);
  EXPECT_THROW(calibrate(m, {}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Folding

TEST(Fold, IdentityBatchNormLeavesWeights) {
  auto m = build(fixture::tiny_config(), 9);
  for (const auto& bn : m.arch.batchnorms()) m.buffers.at(bn + ".running_var").fill(static_cast<float>(1.0 - ops::kBatchNormEps));
  const auto f = fold_batchnorm(m);
  for (const auto& [name, l] : f.layers) {
    const auto& w = m.param(name + ".weight");
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(l.weight[i], w[i], 1e-6 * std::abs(w[i]) + 1e-9) << name;
    if (name == "fc") continue;
    for (auto v : l.bias.values()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Fold, PerChannelFormula) {
  const auto m = fixture::tiny_model(10);
  const auto f = fold_conv_bn(m, m.arch.blocks[0].conv1, m.arch.blocks[0].bn1);
  const auto& w = m.param("layer1.0.conv1.weight");
  const auto per = w.size() / 6;
  for (std::size_t o = 0; o < 6; ++o) {
    const double g = m.param("layer1.0.bn1.weight")[o], b = m.param("layer1.0.bn1.bias")[o];
    const double mu = m.buffer("layer1.0.bn1.running_mean")[o], var = m.buffer("layer1.0.bn1.running_var")[o];
    const double s = g / std::sqrt(var + 1e-5);
    EXPECT_NEAR(f.bias[o], b - mu * s, 1e-6);
    for (std::size_t k = 0; k < per; ++k) EXPECT_NEAR(f.weight[o * per + k], w[o * per + k] * s, 1e-6);
  }
}

TEST(Fold, FoldedForwardMatchesModel) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto m = fixture::tiny_model(seed + 11);
    const auto x = fixture::batch(m.config, 3, seed);
    const auto a = forward(m, x), b = folded_forward(fold_batchnorm(m), x);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-4 * (1 + std::abs(a[i])));
  }
}

// ---------------------------------------------------------------------------
// Quantized execution

class QuantModes : public ::testing::TestWithParam<ActivationSites> {};

TEST_P(QuantModes, IntegerAgreesWithSimulated) {
  const auto m = fixture::tiny_model(12);
  const auto qm = quantize_model(m, calibrate(m, calibration_batches(m.config, 100)), GetParam());
  const QuantizedEngine engine(qm);
  const double scale = logit_scale(qm);
  int agree = 0, decisive = 0;
  for (std::uint64_t b = 0; b < 10; ++b) {
    const auto x = fixture::batch(m.config, 20, 500 + b);
    const auto sim = engine.forward(x, QuantMode::simulated), in = engine.forward(x, QuantMode::integer);
    for (std::size_t n = 0; n < 20; ++n) {
      std::array<float, 6> s{}, q{};
      for (std::size_t g = 0; g < 6; ++g) {
        s[g] = sim[n * 6 + g];
        q[g] = in[n * 6 + g];
        EXPECT_LE(std::abs(s[g] - q[g]), 2 * scale);
      }
      const auto ts = std::max_element(s.begin(), s.end()) - s.begin();
      const auto tq = std::max_element(q.begin(), q.end()) - q.begin();
      agree += ts == tq;
      auto sorted = s;
      std::sort(sorted.rbegin(), sorted.rend());
      // A margin above twice the per-logit bound cannot be overturned.
      if (sorted[0] - sorted[1] > 4 * scale) {
        ++decisive;
        EXPECT_EQ(ts, tq);
      }
    }
  }
  EXPECT_GE(agree, 190);
  EXPECT_GT(decisive, 0);
}

TEST_P(QuantModes, ZeroInputIsBitExactAcrossModes) {
  const auto m = fixture::tiny_model(13);
  const auto qm = quantize_model(m, calibrate(m, calibration_batches(m.config, 200)), GetParam());
  const Tensor<float> x(Shape{2, 3, 16, 16}, 0.0f);
  const auto a = quantized_forward(qm, x, QuantMode::simulated), b = quantized_forward(qm, x, QuantMode::integer);
  EXPECT_TRUE(a.bitwise_equal(b));
  for (std::size_t g = 0; g < 6; ++g) EXPECT_EQ(a[g], a[6 + g]);
}

TEST_P(QuantModes, SimulatedTracksFloatModel) {
  const auto m = fixture::tiny_model(14);
  const auto qm = quantize_model(m, calibrate(m, calibration_batches(m.config, 300)), GetParam());
  const auto x = fixture::batch(m.config, 8, 301);
  const auto f = forward(m, x), s = quantized_forward(qm, x, QuantMode::simulated);
  double range = tensor_max(f) - tensor_min(f), worst = 0;
  for (std::size_t i = 0; i < f.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(f[i] - s[i])));
  EXPECT_LT(worst, 0.1 * range);
}

TEST_P(QuantModes, SerializationRoundTrip) {
  fixture::TempDir dir("quant");
  const auto m = fixture::tiny_model(15);
  const auto qm = quantize_model(m, calibrate(m, calibration_batches(m.config, 400)), GetParam());
  save(qm, dir / "q.rcmp");
  const auto l = load_quantized(dir / "q.rcmp");
  EXPECT_EQ(model_hash(l), model_hash(qm));
  EXPECT_EQ(l.site_mode, GetParam());
  const auto x = fixture::batch(m.config, 3, 401);
  for (auto mode : {QuantMode::simulated, QuantMode::integer})
    EXPECT_TRUE(quantized_forward(l, x, mode).bitwise_equal(quantized_forward(qm, x, mode)));
}

INSTANTIATE_TEST_SUITE_P(Sites, QuantModes, ::testing::Values(ActivationSites::all, ActivationSites::boundary),
                         [](const auto& info) { return std::string(activation_sites_name(info.param)); });

TEST(QuantizedModel, WeightStorageIsQuarterOfFloat) {
  const auto m = fixture::tiny_model(16);
  const auto qa = to_archive(quantize_model(m, calibrate(m, calibration_batches(m.config, 500))));
  std::size_t float_weight_bytes = 0;
  for (const auto& l : weight_layers(m.arch)) float_weight_bytes += m.param(l.name + ".weight").size() * sizeof(float);
  EXPECT_EQ(qa.blob_size("qweight") * 4, float_weight_bytes);
}

TEST(QuantizedModel, PrunedWeightsStayExactlyZero) {
  const auto pruned = apply_prune(fixture::tiny_model(17)).model;
  const auto qm = quantize_model(pruned, calibrate(pruned, calibration_batches(pruned.config, 600)));
  EXPECT_EQ(qm.masks.size(), pruned.masks.size());
  for (const auto& [name, mask] : pruned.masks) {
    const auto layer = name.substr(0, name.size() - std::string(".weight").size());
    const auto& w = qm.layer(layer).weight;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!mask[i]) {
        EXPECT_EQ(dequantize_value(w.values[i], w.params), 0.0f) << name << "[" << i << "]";
      }
  }
}

TEST(QuantizedModel, MissingCalibrationSiteRejected) {
  const auto m = fixture::tiny_model(18);
  auto s = calibrate(m, calibration_batches(m.config, 700, 1));
  s.ranges.erase("layer2.0");
  EXPECT_THROW(quantize_model(m, s, ActivationSites::all), QuantizationError);
  EXPECT_NO_THROW(quantize_model(m, s, ActivationSites::boundary));
}

TEST(QuantizedModel, DenseLoaderRejectsQuantizedArchive) {
  const auto m = fixture::tiny_model(19);
  const auto a = to_archive(quantize_model(m, calibrate(m, calibration_batches(m.config, 800, 1))));
  EXPECT_THROW(model_from_archive(a), FormatError);
  EXPECT_THROW(quantized_from_archive(to_archive(m)), FormatError);
}

TEST(IntGemm, RoundHalfEvenMatchesNearbyint) {
  for (float v : {0.5f, 1.5f, 2.5f, -0.5f, -1.5f, -2.5f, 0.49999997f, 254.5f, 255.5f, -0.0f})
    EXPECT_EQ(round_half_even(v), static_cast<int>(std::nearbyint(v))) << v;
  Rng rng(3);
  for (int i = 0; i < 10000; ++i) {
    const auto v = static_cast<float>(rng.uniform(-1e6, 1e6));
    ASSERT_EQ(round_half_even(v), static_cast<int>(std::nearbyint(v))) << v;
  }
  EXPECT_EQ(round_half_even(1e20f), 1 << 30);
  EXPECT_EQ(round_half_even(-1e20f), -(1 << 30));
}
