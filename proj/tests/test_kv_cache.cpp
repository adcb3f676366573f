// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0

#include "kvnorm/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "gtest/gtest.h"
#include "kvnorm/rng.hpp"

namespace kvnorm {
namespace {

// Builds a cache whose entry norms are exactly `norms` (keys are [norm, 0]).
LayerHeadCache cache_with_norms(const std::vector<float>& norms,
                                std::size_t layer = 2) {
  LayerHeadCache c;
  c.layer = layer;
  c.head = 0;
  for (std::size_t i = 0; i < norms.size(); ++i) {
    const std::vector<float> key = {norms[i], 0.0f};
    const std::vector<float> value = {1.0f, 1.0f};
    cache_append(c, key, value, i, static_cast<int>(i));
  }
  return c;
}

std::vector<float> cache_norms(const LayerHeadCache& c) {
  std::vector<float> out;
  for (const auto& e : c.entries) out.push_back(e.key_norm);
  return out;
}

TEST(CacheAppend, BasicsAndNormPrecompute) {
  LayerHeadCache c;
  EXPECT_EQ(c.occupancy(), 0u);
  const std::vector<float> key = {3.0f, 4.0f};
  const std::vector<float> value = {0.0f, 0.0f};
  cache_append(c, key, value, 0, 42);
  EXPECT_EQ(c.occupancy(), 1u);
  EXPECT_FLOAT_EQ(c.entries[0].key_norm, 5.0f);
  EXPECT_EQ(c.appended_total, 1u);
}

TEST(CacheAppend, MonotonicPositions) {
  LayerHeadCache c;
  const std::vector<float> kv = {1.0f};
  for (std::size_t i = 0; i < 10; ++i) cache_append(c, kv, kv, i * 3, 0);
  for (std::size_t i = 1; i < 10; ++i) {
    EXPECT_GT(c.entries[i].position, c.entries[i - 1].position);
  }
  EXPECT_THROW(cache_append(c, kv, kv, 5, 0), ShapeError);
}

TEST(Evict, KeepLowL2HandCase) {
  // norms [0.5, 2.0, 1.0], budget 2, keep_low_l2, protect 0 -> evict norm 2.0
  auto c = cache_with_norms({0.5f, 2.0f, 1.0f});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_low_l2;
  cfg.budget = 2;
  cfg.protect_recent = 0;
  cfg.skip_layers = {};
  const EvictionOutcome out = evict(c, cfg);
  EXPECT_EQ(out.evicted_positions, std::set<std::size_t>{1});
  EXPECT_EQ(out.retained_count, 2u);
  EXPECT_EQ(cache_norms(c), (std::vector<float>{0.5f, 1.0f}));
}

TEST(Evict, KeepHighL2HandCase) {
  auto c = cache_with_norms({0.5f, 2.0f, 1.0f});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_high_l2;
  cfg.budget = 2;
  cfg.protect_recent = 0;
  cfg.skip_layers = {};
  const EvictionOutcome out = evict(c, cfg);
  EXPECT_EQ(out.evicted_positions, std::set<std::size_t>{0});
  EXPECT_EQ(cache_norms(c), (std::vector<float>{2.0f, 1.0f}));
}

TEST(Evict, NoOpWhenWithinBudget) {
  auto c = cache_with_norms({0.5f, 2.0f});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_low_l2;
  cfg.budget = 2;
  cfg.skip_layers = {};
  const EvictionOutcome out = evict(c, cfg);
  EXPECT_TRUE(out.evicted_positions.empty());
  EXPECT_EQ(out.retained_count, 2u);
}

TEST(Evict, TieBreakEvictsEarlierPosition) {
  auto c = cache_with_norms({1.0f, 1.0f, 1.0f, 1.0f});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_low_l2;
  cfg.budget = 2;
  cfg.protect_recent = 0;
  cfg.skip_layers = {};
  const EvictionOutcome out = evict(c, cfg);
  EXPECT_EQ(out.evicted_positions, (std::set<std::size_t>{0, 1}));
}

TEST(Evict, ProtectRecentSurvives) {
  // Highest norm sits at the newest position; protection keeps it.
  auto c = cache_with_norms({0.5f, 1.0f, 9.0f});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_low_l2;
  cfg.budget = 2;
  cfg.protect_recent = 1;
  cfg.skip_layers = {};
  const EvictionOutcome out = evict(c, cfg);
  EXPECT_EQ(out.evicted_positions, std::set<std::size_t>{1});
  EXPECT_EQ(cache_norms(c), (std::vector<float>{0.5f, 9.0f}));
}

TEST(Evict, BudgetBelowProtectRecentThrows) {
  auto c = cache_with_norms({1.0f, 2.0f, 3.0f});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_low_l2;
  cfg.budget = 1;
  cfg.protect_recent = 2;
  cfg.skip_layers = {};
  EXPECT_THROW(evict(c, cfg), ConfigError);
}

TEST(Evict, SkipLayerNeverMutated) {
  SplitMix64 rng(3);
  for (Policy p : {Policy::keep_low_l2, Policy::keep_high_l2, Policy::random,
                   Policy::fastgen_lite}) {
    std::vector<float> norms(12);
    for (float& x : norms) x = static_cast<float>(rng.next_uniform());
    auto c = cache_with_norms(norms, /*layer=*/1);
    CompressionConfig cfg;
    cfg.policy = p;
    if (p != Policy::fastgen_lite) cfg.budget = 3;
    cfg.protect_recent = 0;
    cfg.local_window = 0;
    cfg.skip_layers = {0, 1};
    const EvictionOutcome out = evict(c, cfg);
    EXPECT_TRUE(out.evicted_positions.empty());
    EXPECT_EQ(c.occupancy(), 12u);
  }
}

TEST(Evict, RatioAgainstAppendedTotal) {
  auto c = cache_with_norms({1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_low_l2;
  cfg.ratio = 0.5;
  cfg.protect_recent = 0;
  cfg.skip_layers = {};
  evict(c, cfg);
  EXPECT_EQ(c.occupancy(), 5u);  // ceil(0.5 * 10)
  // A second pass with no new appends changes nothing: the ratio binds
  // against the 10 appended entries, not the current occupancy.
  const EvictionOutcome again = evict(c, cfg);
  EXPECT_TRUE(again.evicted_positions.empty());
  EXPECT_EQ(c.occupancy(), 5u);
}

TEST(Evict, RatioZeroIsNoOp) {
  auto c = cache_with_norms({1, 2, 3});
  CompressionConfig cfg;
  cfg.policy = Policy::keep_low_l2;
  cfg.ratio = 0.0;
  cfg.protect_recent = 0;
  cfg.skip_layers = {};
  const EvictionOutcome out = evict(c, cfg);
  EXPECT_TRUE(out.evicted_positions.empty());
}

TEST(Evict, RandomDeterministicAndUniform) {
  CompressionConfig cfg;
  cfg.policy = Policy::random;
  cfg.budget = 4;
  cfg.protect_recent = 1;
  cfg.skip_layers = {};
  cfg.seed = 99;

  auto c1 = cache_with_norms({1, 2, 3, 4, 5, 6, 7, 8});
  auto c2 = cache_with_norms({1, 2, 3, 4, 5, 6, 7, 8});
  const auto o1 = evict(c1, cfg, /*step=*/17);
  const auto o2 = evict(c2, cfg, /*step=*/17);
  EXPECT_EQ(to_string(o1), to_string(o2));

  auto c3 = cache_with_norms({1, 2, 3, 4, 5, 6, 7, 8});
  const auto o3 = evict(c3, cfg, /*step=*/18);
  EXPECT_NE(to_string(o1), to_string(o3));  // step feeds the stream

  // Protected newest entry is never selected.
  for (std::size_t step = 0; step < 50; ++step) {
    auto c = cache_with_norms({1, 2, 3, 4, 5, 6, 7, 8});
    const auto o = evict(c, cfg, step);
    EXPECT_EQ(o.evicted_positions.count(7), 0u);
    EXPECT_EQ(c.occupancy(), 4u);
  }
}

TEST(OracleEvict, HandCaseAndEdges) {
  auto c = cache_with_norms({1, 1, 1, 1});
  const std::vector<float> scores = {0.1f, 0.2f, 0.3f, 0.4f};
  const auto out = oracle_evict(c, scores, 2);
  EXPECT_EQ(out.evicted_positions, (std::set<std::size_t>{0, 1}));

  auto c2 = cache_with_norms({1, 1});
  const std::vector<float> s2 = {0.5f, 0.5f};
  const auto out2 = oracle_evict(c2, s2, 0);
  EXPECT_TRUE(out2.evicted_positions.empty());

  auto c3 = cache_with_norms({1, 1});
  const std::vector<float> bad = {0.5f};
  EXPECT_THROW(oracle_evict(c3, bad, 1), ShapeError);
}

// Exhaustive subset oracle: for every m, the evicted mass must equal the
// minimum over all C(n, m) subsets.
TEST(OracleEvict, MatchesExhaustiveSubsetMinimum) {
  SplitMix64 rng(123);
  for (int iter = 0; iter < 60; ++iter) {
    const std::size_t n = 2 + rng.next_below(7);  // up to 8
    std::vector<float> scores(n);
    double sum = 0.0;
    for (float& s : scores) {
      s = static_cast<float>(rng.next_uniform());
      sum += s;
    }
    for (float& s : scores) s = static_cast<float>(s / sum);
    for (std::size_t m = 0; m <= n; ++m) {
      auto c = cache_with_norms(std::vector<float>(n, 1.0f));
      const auto out = oracle_evict(c, scores, m);
      std::vector<float> picked;
      for (std::size_t p : out.evicted_positions) picked.push_back(scores[p]);
      const double got = sum_scores_ascending(std::move(picked));

      double best = std::numeric_limits<double>::infinity();
      for (std::uint32_t bits = 0; bits < (1u << n); ++bits) {
        if (static_cast<std::size_t>(__builtin_popcount(bits)) != m) continue;
        std::vector<float> vals;
        for (std::size_t j = 0; j < n; ++j) {
          if (bits & (1u << j)) vals.push_back(scores[j]);
        }
        best = std::min(best, sum_scores_ascending(std::move(vals)));
      }
      if (m == 0) best = 0.0;
      EXPECT_EQ(got, best);
    }
  }
}

TEST(FastgenLite, HandRuleApplication) {
  // tokens [BOS, a, COMMA, b, c], w = 1, special = {BOS}, punct = {COMMA}
  LayerHeadCache c;
  c.layer = 2;
  const std::vector<float> kv = {1.0f};
  const int kBosTok = 256;
  const int kComma = ',';
  const int toks[] = {kBosTok, 'a', kComma, 'b', 'c'};
  for (std::size_t i = 0; i < 5; ++i) cache_append(c, kv, kv, i, toks[i]);

  CompressionConfig cfg;
  cfg.policy = Policy::fastgen_lite;
  cfg.local_window = 1;
  cfg.special_token_ids = {kBosTok};
  cfg.punctuation_token_ids = {kComma};
  const auto out = fastgen_lite_evict(c, cfg);
  EXPECT_EQ(out.evicted_positions, (std::set<std::size_t>{1, 3}));
  ASSERT_EQ(c.occupancy(), 3u);
  EXPECT_EQ(c.entries[0].token_id, kBosTok);
  EXPECT_EQ(c.entries[1].token_id, kComma);
  EXPECT_EQ(c.entries[2].token_id, 'c');
}

TEST(FastgenLite, WindowCoversAllAndVacuousRules) {
  LayerHeadCache c;
  const std::vector<float> kv = {1.0f};
  for (std::size_t i = 0; i < 4; ++i) cache_append(c, kv, kv, i, 'x');
  CompressionConfig cfg;
  cfg.policy = Policy::fastgen_lite;
  cfg.local_window = 10;
  auto out = fastgen_lite_evict(c, cfg);
  EXPECT_TRUE(out.evicted_positions.empty());

  cfg.local_window = 0;
  out = fastgen_lite_evict(c, cfg);
  EXPECT_EQ(out.evicted_positions.size(), 4u);
  EXPECT_EQ(c.occupancy(), 0u);
}

TEST(CompressionRatio, HandValues) {
  EXPECT_DOUBLE_EQ(compression_ratio(100, 50), 0.5);
  EXPECT_DOUBLE_EQ(compression_ratio(100, 100), 0.0);
  EXPECT_DOUBLE_EQ(compression_ratio(1000, 100), 0.9);
  EXPECT_THROW(compression_ratio(0, 0), ConfigError);
}

TEST(CompressionConfig, ValidationRules) {
  CompressionConfig c;
  c.policy = Policy::keep_low_l2;
  EXPECT_THROW(c.validate(), ConfigError);  // neither budget nor ratio
  c.budget = 8;
  EXPECT_NO_THROW(c.validate());
  c.ratio = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);  // both set
  c.budget.reset();
  EXPECT_NO_THROW(c.validate());
  c.policy = Policy::none;
  EXPECT_THROW(c.validate(), ConfigError);  // none + ratio conflicts
  c.ratio.reset();
  EXPECT_NO_THROW(c.validate());
}

// Property: budgeted policies land exactly on min(occupancy, budget), and
// keep_low_l2 orders retained non-protected norms below evicted ones.
TEST(Evict, BudgetAndNormOrderingProperties) {
  SplitMix64 rng(2025);
  for (int iter = 0; iter < 1000; ++iter) {
    const std::size_t n = 1 + rng.next_below(24);
    std::vector<float> norms(n);
    for (float& x : norms) {
      // coarse grid to provoke ties
      x = static_cast<float>(rng.next_below(6)) * 0.5f;
    }
    auto c = cache_with_norms(norms);
    CompressionConfig cfg;
    cfg.policy = iter % 2 == 0 ? Policy::keep_low_l2 : Policy::keep_high_l2;
    cfg.protect_recent = rng.next_below(2);
    cfg.budget = cfg.protect_recent + rng.next_below(8);
    cfg.skip_layers = {};
    cfg.seed = iter;
    const auto out = evict(c, cfg, iter);
    EXPECT_EQ(c.occupancy(), std::min(n, *cfg.budget));
    EXPECT_EQ(out.retained_count + out.evicted_positions.size(), n);

    if (cfg.policy == Policy::keep_low_l2 && !out.evicted_positions.empty()) {
      float max_retained = -1.0f;
      const std::size_t protected_from = n - cfg.protect_recent;
      for (const auto& e : c.entries) {
        if (e.position >= protected_from) continue;  // protected slots exempt
        max_retained = std::max(max_retained, e.key_norm);
      }
      float min_evicted = std::numeric_limits<float>::infinity();
      for (std::size_t p : out.evicted_positions) {
        min_evicted = std::min(min_evicted, norms[p]);
      }
      EXPECT_LE(max_retained, min_evicted);
    }
  }
}

TEST(Evict, OutcomeByteIdentical) {
  for (Policy p : {Policy::keep_low_l2, Policy::keep_high_l2, Policy::random}) {
    CompressionConfig cfg;
    cfg.policy = p;
    cfg.budget = 5;
    cfg.seed = 7;
    cfg.skip_layers = {};
    auto a = cache_with_norms({9, 8, 7, 1, 2, 3, 4, 5, 6});
    auto b = cache_with_norms({9, 8, 7, 1, 2, 3, 4, 5, 6});
    EXPECT_EQ(to_string(evict(a, cfg, 3)), to_string(evict(b, cfg, 3)));
  }
}

}  // namespace
}  // namespace kvnorm
