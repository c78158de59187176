#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rcmp/pruner.hpp"

using namespace rcmp;

namespace {

/// Sort, then interpolate between neighbours at q * (n - 1).
double sorted_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::vector<double> target_magnitudes(const Model& m) {
  std::vector<double> out;
  for (const auto& p : m.arch.parameters())
    if (default_prune_targets(p))
      for (float v : m.param(p.name).values()) out.push_back(std::abs(static_cast<double>(v)));
  return out;
}

bool only_fc_weight(const ParamInfo& p) { return p.name == "fc.weight"; }

ImageSet random_set(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  ImageSet s;
  for (std::size_t i = 0; i < n; ++i)
    s.append(oracle::random_tensor<float>(Shape{c.in_channels, c.input_size, c.input_size}, seed + i, 0.0, 1.0),
             static_cast<int>(i % 6));
  return s;
}

}  // namespace

TEST(Quantile, FourWeightExample) {
  std::vector<double> v{4.0, 1.0, 3.0, 2.0};
  EXPECT_NEAR(interpolated_quantile(v, 0.67), 3.01, 1e-12);
  std::vector<double> w{4.0, 1.0, 3.0, 2.0};
  EXPECT_EQ(interpolated_quantile(w, 0.0), 1.0);
}

TEST(Quantile, MatchesSortedOracle) {
  for (std::uint64_t t = 0; t < 30; ++t) {
    Rng rng(t);
    std::vector<double> v(1 + rng.below(50));
    for (auto& x : v) x = rng.uniform(0, 10);
    const double q = rng.uniform();
    auto copy = v;
    EXPECT_NEAR(interpolated_quantile(copy, q), sorted_quantile(v, q), 1e-12);
  }
}

TEST(Prune, TwelveWeightTensorKeepsTopFour) {
  auto m = build(fixture::tiny_config(1), 0);
  auto& w = m.param("fc.weight");
  ASSERT_EQ(w.size(), 12u);
  w.fill(0.0f);
  PruneConfig cfg;
  cfg.targets = only_fc_weight;
  // Magnitudes 1..12 with alternating signs.
  for (std::size_t i = 0; i < 12; ++i) w[i] = static_cast<float>((i % 2 ? -1.0 : 1.0) * static_cast<double>(i + 1));
  const auto r = apply_prune(m, cfg);
  // q = 0.67 over 1..12 sits at position 7.37: 8.37.
  EXPECT_NEAR(r.threshold.global, 8.37, 1e-6);
  const auto& pw = r.model.param("fc.weight");
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(pw[i] != 0.0f, i + 1 >= 9) << i;
  EXPECT_EQ(r.report.nonzero, r.report.total - 8);
}

TEST(Prune, QuantileZeroIsIdentity) {
  const auto m = fixture::tiny_model(1);
  PruneConfig cfg;
  cfg.retain_quantile = 0.0;
  const auto r = apply_prune(m, cfg);
  EXPECT_TRUE(r.masks.empty());
  for (const auto& [k, v] : m.params) EXPECT_TRUE(v.bitwise_equal(r.model.param(k))) << k;
}

TEST(Prune, InvalidQuantileRejected) {
  const auto m = fixture::tiny_model(1);
  for (double q : {-0.1, 1.0, std::nan("")}) {
    PruneConfig cfg;
    cfg.retain_quantile = q;
    EXPECT_THROW(apply_prune(m, cfg), ConfigError) << q;
  }
}

TEST(Prune, UniformWeightsSurviveAtOneMinusQuantile) {
  auto m = build(resnet_desk(6), 2);
  Rng rng(3);
  for (auto& [k, v] : m.params)
    for (auto& x : v.values()) x = static_cast<float>(rng.uniform(-1, 1));
  const auto r = apply_prune(m);
  std::int64_t total = 0, kept = 0;
  for (const auto& p : m.arch.parameters())
    if (default_prune_targets(p)) {
      total += static_cast<std::int64_t>(m.param(p.name).size());
      for (float v : r.model.param(p.name).values()) kept += v != 0.0f;
    }
  EXPECT_NEAR(static_cast<double>(kept) / static_cast<double>(total), 0.33, 0.01);
}

TEST(Prune, MasksMatchSortAndCutOracle) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto m = fixture::tiny_model(seed);
    const double q = 0.2 * static_cast<double>(seed + 1);
    PruneConfig cfg;
    cfg.retain_quantile = q;
    const auto r = apply_prune(m, cfg);
    const double tau = sorted_quantile(target_magnitudes(m), q);
    EXPECT_NEAR(r.threshold.global, tau, 1e-7);
    for (const auto& p : m.arch.parameters()) {
      const auto& before = m.param(p.name);
      const auto& after = r.model.param(p.name);
      for (std::size_t i = 0; i < before.size(); ++i) {
        const bool keep = !default_prune_targets(p) || std::abs(static_cast<double>(before[i])) >= tau;
        EXPECT_EQ(after[i], keep ? before[i] : 0.0f) << p.name << "[" << i << "]";
      }
    }
  }
}

TEST(Prune, HigherQuantileKeepsSubset) {
  const auto m = fixture::tiny_model(5);
  PruneConfig lo, hi;
  lo.retain_quantile = 0.3;
  hi.retain_quantile = 0.8;
  const auto a = apply_prune(m, lo), b = apply_prune(m, hi);
  EXPECT_LT(b.report.nonzero, a.report.nonzero);
  for (const auto& [k, v] : a.model.params)
    for (std::size_t i = 0; i < v.size(); ++i)
      if (v[i] == 0.0f) {
        EXPECT_EQ(b.model.param(k)[i], 0.0f) << k << "[" << i << "]";
      }
}

TEST(Prune, ScalingWeightsKeepsMasks) {
  const auto m = fixture::tiny_model(6);
  auto scaled = m;
  for (auto& [k, v] : scaled.params)
    for (auto& x : v.values()) x *= 4.0f;
  const auto a = apply_prune(m), b = apply_prune(scaled);
  ASSERT_EQ(a.masks.size(), b.masks.size());
  for (const auto& [name, mask] : a.masks) EXPECT_TRUE(mask.bitwise_equal(b.masks.at(name))) << name;
}

TEST(Prune, PerLayerScopeCutsEachTensor) {
  const auto m = build(resnet_desk(6), 7);
  PruneConfig cfg;
  cfg.scope = PruneScope::per_layer;
  const auto r = apply_prune(m, cfg);
  for (const auto& t : r.report.tensors) {
    if (!t.prunable) continue;
    EXPECT_NEAR(static_cast<double>(t.nonzero) / static_cast<double>(t.total), 0.33, 0.02) << t.name;
  }
}

TEST(Prune, RepruningKeepsEarlierZeros) {
  const auto m = fixture::tiny_model(8);
  const auto first = apply_prune(m);
  PruneConfig zero;
  zero.retain_quantile = 0.0;
  const auto second = apply_prune(first.model, zero);
  EXPECT_EQ(second.report.nonzero, first.report.nonzero);
}

TEST(Report, NonzeroCountMatchesScan) {
  const auto r = apply_prune(fixture::tiny_model(9));
  std::int64_t total = 0, nonzero = 0;
  for (const auto& p : r.model.arch.parameters()) {
    const auto& v = r.model.param(p.name);
    total += static_cast<std::int64_t>(v.size());
    if (!default_prune_targets(p)) {
      nonzero += static_cast<std::int64_t>(v.size());
      continue;
    }
    for (float x : v.values()) nonzero += x != 0.0f;
  }
  EXPECT_EQ(r.report.total, total);
  EXPECT_EQ(r.report.nonzero, nonzero);
  EXPECT_NEAR(r.report.reduction_percent, 100.0 * (1.0 - static_cast<double>(nonzero) / static_cast<double>(total)), 1e-9);
  EXPECT_NE(r.report.table().find("TOTAL"), std::string::npos);
}

TEST(Report, MaskDisagreementIsAnIntegrityError) {
  auto r = apply_prune(fixture::tiny_model(10));
  const auto& [name, mask] = *r.model.masks.begin();
  std::size_t i = 0;
  while (mask[i] != 0) ++i;
  r.model.param(name)[i] = 1.0f;
  EXPECT_THROW(sparsity_report(r.model), IntegrityError);
}

TEST(Finetune, MaskedEntriesStayZero) {
  const auto pruned = apply_prune(fixture::tiny_model(11));
  auto m = pruned.model;
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.learning_rate = 0.01;
  masked_finetune(m, pruned.masks, random_set(m.config, 8, 12), ImageSet{}, cfg);
  EXPECT_NO_THROW(sparsity_report(m));
  EXPECT_EQ(sparsity_report(m).nonzero, pruned.report.nonzero);
  bool changed = false;
  for (const auto& [k, v] : m.params) changed |= !v.bitwise_equal(pruned.model.param(k));
  EXPECT_TRUE(changed);
}

TEST(Finetune, ZeroEpochsOnlyAppliesMasks) {
  const auto pruned = apply_prune(fixture::tiny_model(13));
  auto m = fixture::tiny_model(13);
  TrainConfig cfg;
  cfg.epochs = 0;
  masked_finetune(m, pruned.masks, ImageSet{}, ImageSet{}, cfg);
  for (const auto& [k, v] : pruned.model.params) EXPECT_TRUE(v.bitwise_equal(m.param(k))) << k;
}

TEST(Finetune, MismatchedMaskRejected) {
  auto m = fixture::tiny_model(14);
  std::map<std::string, Tensor<std::uint8_t>> masks{{"fc.weight", Tensor<std::uint8_t>(Shape{2, 2}, std::uint8_t{1})}};
  TrainConfig cfg;
  EXPECT_THROW(masked_finetune(m, masks, ImageSet{}, ImageSet{}, cfg), ShapeError);
}
