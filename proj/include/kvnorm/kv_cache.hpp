// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kvnorm/errors.hpp"
#include "kvnorm/rng.hpp"
#include "kvnorm/tensor.hpp"

namespace kvnorm {

// One cached (key, value) pair. key_norm is precomputed at append time and
// equals l2_norm(key) for the lifetime of the entry.
struct CacheEntry {
  std::vector<float> key;
  std::vector<float> value;
  float key_norm = 0.0f;
  std::size_t position = 0;
  int token_id = 0;
};

// Per-(layer, head) KV storage. Entries are ordered by strictly increasing
// position. appended_total counts every entry ever appended, i.e. the
// occupancy an uncompressed cache would have.
struct LayerHeadCache {
  std::vector<CacheEntry> entries;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t appended_total = 0;

  std::size_t occupancy() const { return entries.size(); }
};

enum class Policy {
  none,
  keep_low_l2,
  keep_high_l2,
  random,
  oracle_attention,
  fastgen_lite,
};

inline const char* policy_name(Policy p) {
  switch (p) {
    case Policy::none: return "none";
    case Policy::keep_low_l2: return "l2-low";
    case Policy::keep_high_l2: return "l2-high";
    case Policy::random: return "random";
    case Policy::oracle_attention: return "oracle";
    case Policy::fastgen_lite: return "fastgen";
  }
  return "?";
}

inline std::optional<Policy> parse_policy(const std::string& s) {
  if (s == "none") return Policy::none;
  if (s == "l2-low" || s == "keep_low_l2") return Policy::keep_low_l2;
  if (s == "l2-high" || s == "keep_high_l2") return Policy::keep_high_l2;
  if (s == "random") return Policy::random;
  if (s == "oracle" || s == "oracle_attention") return Policy::oracle_attention;
  if (s == "fastgen" || s == "fastgen_lite") return Policy::fastgen_lite;
  return std::nullopt;
}

struct CompressionConfig {
  Policy policy = Policy::none;
  std::optional<std::size_t> budget;
  std::optional<double> ratio;  // fraction of appended entries to drop, [0,1)
  std::set<std::size_t> skip_layers = {0, 1};
  std::size_t protect_recent = 1;
  // fastgen_lite only:
  std::size_t local_window = 4;
  std::set<int> special_token_ids;
  std::set<int> punctuation_token_ids;
  std::uint64_t seed = 0;
  // Phase gating: whether eviction passes run while consuming the prompt
  // and/or during subsequent generation.
  bool apply_in_prefill = true;
  bool apply_in_decode = true;
  // Per-(layer, head) budget overrides; uniform by default.
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> head_budget_overrides;

  void validate() const {
    const bool budgeted = policy == Policy::keep_low_l2 ||
                          policy == Policy::keep_high_l2 ||
                          policy == Policy::random ||
                          policy == Policy::oracle_attention;
    if (budgeted) {
      if (budget.has_value() == ratio.has_value()) {
        throw ConfigError(
            "compression: exactly one of budget/ratio must be set for policy " +
            std::string(policy_name(policy)));
      }
      if (ratio && (*ratio < 0.0 || *ratio >= 1.0)) {
        throw ConfigError("compression: ratio must be in [0, 1)");
      }
      if (budget && *budget < protect_recent) {
        throw ConfigError("compression: budget < protect_recent");
      }
    } else if (budget || ratio) {
      throw ConfigError("compression: policy " +
                        std::string(policy_name(policy)) +
                        " does not take budget/ratio");
    }
  }
};

struct EvictionOutcome {
  std::set<std::size_t> evicted_positions;
  std::size_t retained_count = 0;
};

// Canonical string form, used by determinism checks.
inline std::string to_string(const EvictionOutcome& o) {
  std::string s;
  for (std::size_t p : o.evicted_positions) {
    if (!s.empty()) s += ';';
    s += std::to_string(p);
  }
  s += '|';
  s += std::to_string(o.retained_count);
  return s;
}

// Sums attention scores smallest-first with a double accumulator. Using one
// canonical order everywhere makes equal drop-sets price out bit-identically,
// so the loss comparisons in the analysis module are exact.
inline double sum_scores_ascending(std::vector<float> vals) {
  std::sort(vals.begin(), vals.end());
  double s = 0.0;
  for (float v : vals) s += static_cast<double>(v);
  return s;
}

inline void cache_append(LayerHeadCache& cache, std::span<const float> key,
                         std::span<const float> value, std::size_t position,
                         int token_id) {
  if (!cache.entries.empty() && position <= cache.entries.back().position) {
    throw ShapeError("cache_append: non-monotonic position " +
                     std::to_string(position));
  }
  CacheEntry e;
  e.key.assign(key.begin(), key.end());
  e.value.assign(value.begin(), value.end());
  e.key_norm = l2_norm(key);
  e.position = position;
  e.token_id = token_id;
  cache.entries.push_back(std::move(e));
  cache.appended_total += 1;
}

namespace detail {

// Removes the given entry indices (not positions) and returns the outcome.
inline EvictionOutcome remove_indices(LayerHeadCache& cache,
                                      const std::vector<std::size_t>& indices) {
  EvictionOutcome out;
  std::vector<bool> drop(cache.entries.size(), false);
  for (std::size_t i : indices) {
    drop[i] = true;
    out.evicted_positions.insert(cache.entries[i].position);
  }
  std::vector<CacheEntry> kept;
  kept.reserve(cache.entries.size() - indices.size());
  for (std::size_t i = 0; i < cache.entries.size(); ++i) {
    if (!drop[i]) kept.push_back(std::move(cache.entries[i]));
  }
  cache.entries = std::move(kept);
  out.retained_count = cache.entries.size();
  return out;
}

// The budget a cache is held to at this pass. Ratio is taken against the
// number of entries ever appended, so a ratio-r run retains ceil((1-r)*t)
// of the t tokens seen so far rather than compounding across passes.
inline std::size_t effective_budget(const LayerHeadCache& cache,
                                    const CompressionConfig& cfg) {
  auto it = cfg.head_budget_overrides.find({cache.layer, cache.head});
  if (it != cfg.head_budget_overrides.end()) return it->second;
  if (cfg.budget) return *cfg.budget;
  const double keep = (1.0 - *cfg.ratio) * static_cast<double>(cache.appended_total);
  return static_cast<std::size_t>(std::ceil(keep));
}

}  // namespace detail

// Reference policy: evict the m entries with the smallest attention scores.
// scores[i] belongs to entries[i]. Ties evict the earlier position first.
inline EvictionOutcome oracle_evict(LayerHeadCache& cache,
                                    std::span<const float> scores,
                                    std::size_t m) {
  if (scores.size() != cache.occupancy()) {
    throw ShapeError("oracle_evict: scores length " +
                     std::to_string(scores.size()) + " != occupancy " +
                     std::to_string(cache.occupancy()));
  }
  if (m > cache.occupancy()) {
    throw ShapeError("oracle_evict: m exceeds occupancy");
  }
  std::vector<std::size_t> idx(cache.occupancy());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  idx.resize(m);
  return detail::remove_indices(cache, idx);
}

// Rule-driven retention: keep special tokens, punctuation tokens and the
// local_window most recent entries; evict everything else.
inline EvictionOutcome fastgen_lite_evict(LayerHeadCache& cache,
                                          const CompressionConfig& cfg) {
  const std::size_t n = cache.occupancy();
  const std::size_t recent_from = n > cfg.local_window ? n - cfg.local_window : 0;
  std::vector<std::size_t> to_evict;
  for (std::size_t i = 0; i < n; ++i) {
    if (i >= recent_from) continue;
    const int tok = cache.entries[i].token_id;
    if (cfg.special_token_ids.count(tok) ||
        cfg.punctuation_token_ids.count(tok)) {
      continue;
    }
    to_evict.push_back(i);
  }
  return detail::remove_indices(cache, to_evict);
}

// Variant of the oracle used inside the decode loop: the newest
// protect_recent entries are excluded from the candidate set.
inline EvictionOutcome oracle_evict_protected(LayerHeadCache& cache,
                                              std::span<const float> scores,
                                              std::size_t m,
                                              std::size_t protect_recent) {
  if (scores.size() != cache.occupancy()) {
    throw ShapeError("oracle_evict_protected: scores/occupancy mismatch");
  }
  const std::size_t n = cache.occupancy();
  const std::size_t candidates = n > protect_recent ? n - protect_recent : 0;
  if (m > candidates) {
    throw ShapeError("oracle_evict_protected: m exceeds candidate count");
  }
  std::vector<std::size_t> idx(candidates);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  idx.resize(m);
  return detail::remove_indices(cache, idx);
}

// Budget-driven eviction pass. No-op on skipped layers, on policy none and
// while occupancy is within budget. `step` seeds the random policy together
// with (seed, layer, head).
inline EvictionOutcome evict(LayerHeadCache& cache,
                             const CompressionConfig& cfg,
                             std::size_t step = 0) {
  EvictionOutcome noop;
  noop.retained_count = cache.occupancy();
  if (cfg.policy == Policy::none) return noop;
  if (cfg.skip_layers.count(cache.layer)) return noop;
  if (cfg.policy == Policy::fastgen_lite) return fastgen_lite_evict(cache, cfg);
  if (cfg.policy == Policy::oracle_attention) {
    throw ConfigError(
        "evict: oracle_attention requires attention scores; use oracle_evict");
  }

  const std::size_t budget = detail::effective_budget(cache, cfg);
  if (budget < cfg.protect_recent) {
    throw ConfigError("evict: budget < protect_recent");
  }
  const std::size_t n = cache.occupancy();
  if (n <= budget) return noop;
  const std::size_t m = n - budget;
  const std::size_t candidates = n - cfg.protect_recent;

  std::vector<std::size_t> idx(candidates);
  std::iota(idx.begin(), idx.end(), 0);
  const auto& entries = cache.entries;

  switch (cfg.policy) {
    case Policy::keep_low_l2:
      // Evict the highest norms; on ties the earlier position goes first.
      std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (entries[a].key_norm != entries[b].key_norm) {
          return entries[a].key_norm > entries[b].key_norm;
        }
        return a < b;
      });
      break;
    case Policy::keep_high_l2:
      std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (entries[a].key_norm != entries[b].key_norm) {
          return entries[a].key_norm < entries[b].key_norm;
        }
        return a < b;
      });
      break;
    case Policy::random: {
      SplitMix64 rng(mix_seed(cfg.seed, cache.layer, cache.head, step));
      for (std::size_t i = 0; i < m && i + 1 < idx.size(); ++i) {
        const std::size_t j = i + rng.next_below(idx.size() - i);
        std::swap(idx[i], idx[j]);
      }
      break;
    }
    default:
      break;
  }
  idx.resize(m);
  return detail::remove_indices(cache, idx);
}

// Fraction of entries dropped between two occupancy readings.
inline double compression_ratio(std::size_t pre_occupancy,
                                std::size_t post_occupancy) {
  if (pre_occupancy == 0) {
    throw ConfigError("compression_ratio: pre_occupancy == 0");
  }
  if (post_occupancy > pre_occupancy) {
    throw ConfigError("compression_ratio: post > pre");
  }
  return 1.0 - static_cast<double>(post_occupancy) /
                   static_cast<double>(pre_occupancy);
}

}  // namespace kvnorm
