// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "kvnorm/errors.hpp"
#include "kvnorm/kv_cache.hpp"
#include "kvnorm/model.hpp"
#include "kvnorm/transformer.hpp"
#include "kvnorm/workloads.hpp"

namespace kvnorm {

// Attention mass a compression would discard: the sum of the scores at the
// dropped slots. Values are accumulated smallest-first so equal drop-sets
// price out identically.
inline double attention_loss(std::span<const float> scores,
                             const std::set<std::size_t>& dropped) {
  std::vector<float> vals;
  vals.reserve(dropped.size());
  for (std::size_t p : dropped) {
    if (p >= scores.size()) {
      throw ShapeError("attention_loss: dropped position out of range");
    }
    vals.push_back(scores[p]);
  }
  return sum_scores_ascending(std::move(vals));
}

namespace detail {

// Slot order for "drop the m highest key norms first"; norm ties evict the
// earlier position first.
inline std::vector<std::size_t> norm_drop_order(std::span<const float> norms) {
  std::vector<std::size_t> idx(norms.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (norms[a] != norms[b]) return norms[a] > norms[b];
    return a < b;
  });
  return idx;
}

// Slot order for the score-optimal reference drop.
inline std::vector<std::size_t> score_drop_order(std::span<const float> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;
  });
  return idx;
}

}  // namespace detail

// Y^m for m = 1..n: the attention loss of dropping the m highest-norm slots
// minus the loss of the score-optimal drop of the same size. Non-negative
// for every m; exactly zero when the two drop-sets carry equal mass.
inline std::vector<double> alr_curve(std::span<const float> scores,
                                     std::span<const float> key_norms) {
  if (scores.size() != key_norms.size()) {
    throw ShapeError("alr_curve: scores/norms length mismatch");
  }
  const std::size_t n = scores.size();
  const auto by_norm = detail::norm_drop_order(key_norms);
  const auto by_score = detail::score_drop_order(scores);

  std::vector<double> curve(n, 0.0);
  std::vector<float> heur_vals, ref_vals;
  heur_vals.reserve(n);
  ref_vals.reserve(n);
  for (std::size_t m = 1; m <= n; ++m) {
    heur_vals.push_back(scores[by_norm[m - 1]]);
    ref_vals.push_back(scores[by_score[m - 1]]);
    const double heur = sum_scores_ascending(heur_vals);
    const double ref = sum_scores_ascending(ref_vals);
    curve[m - 1] = heur - ref;
  }
  return curve;
}

// The scalar ALr: cumulative excess attention loss of the norm-based drop
// order relative to the score-optimal order, over all drop counts.
inline double alr(std::span<const float> scores,
                  std::span<const float> key_norms) {
  const auto curve = alr_curve(scores, key_norms);
  double sum = 0.0;
  for (double y : curve) sum += y;
  return sum;
}

// Per-(layer, head) ALr aggregated over corpus chunks.
struct AlrReport {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::vector<std::vector<double>> curves;   // [L*H], mean Y^m curve
  std::vector<double> alr_values;            // [L*H], sum of the mean curve
  std::vector<std::vector<double>> per_chunk;  // [L*H][chunk]
  std::size_t num_chunks = 0;
  std::size_t chunk_len = 0;
  std::string corpus_id;

  std::size_t index(std::size_t l, std::size_t h) const {
    return l * num_heads + h;
  }
};

// For each chunk: feed chunk_len - 1 tokens (BOS-prefixed, uncompressed),
// take the attention rows of the final step and the cached key norms, and
// compute the per-head ALr. `avg_last_steps` > 1 averages the measurement
// over that many trailing steps, zero-padding shorter curves.
inline AlrReport alr_heatmap(const Model& model,
                             const std::vector<std::vector<int>>& chunks,
                             std::size_t chunk_len,
                             std::size_t avg_last_steps = 1,
                             std::size_t threads = 1) {
  if (chunk_len < 2) throw ConfigError("alr_heatmap: chunk_len must be >= 2");
  if (chunks.empty()) throw ConfigError("alr_heatmap: no chunks");
  if (avg_last_steps < 1 || avg_last_steps > chunk_len - 1) {
    throw ConfigError("alr_heatmap: avg_last_steps out of range");
  }
  const std::size_t L = model.config.num_layers;
  const std::size_t H = model.config.num_heads;
  // BOS + (chunk_len - 1) corpus tokens; the final step's row covers the
  // full chunk_len-slot cache.
  const std::size_t feed = chunk_len - 1;
  const std::size_t curve_len = feed + 1;

  AlrReport report;
  report.num_layers = L;
  report.num_heads = H;
  report.num_chunks = chunks.size();
  report.chunk_len = chunk_len;
  report.curves.assign(L * H, std::vector<double>(curve_len, 0.0));
  report.alr_values.assign(L * H, 0.0);
  report.per_chunk.assign(L * H, std::vector<double>(chunks.size(), 0.0));

  std::vector<std::vector<std::vector<double>>> chunk_curves(
      chunks.size(),
      std::vector<std::vector<double>>(L * H, std::vector<double>(curve_len, 0.0)));

  detail::parallel_for(chunks.size(), threads, [&](std::size_t c) {
    const auto& chunk = chunks[c];
    if (chunk.size() < feed) {
      throw ConfigError("alr_heatmap: chunk shorter than chunk_len - 1");
    }
    CompressionConfig none;
    none.policy = Policy::none;
    DecodeState state = new_decode_state(model, none);
    std::vector<int> tokens;
    tokens.push_back(tok::kBos);
    tokens.insert(tokens.end(), chunk.begin(), chunk.begin() + feed);
    // tokens.size() == feed + 1; we feed all but keep the last `avg` records
    const std::size_t total = tokens.size();
    const std::size_t first_measured = total - avg_last_steps;
    const double inv_avg = 1.0 / static_cast<double>(avg_last_steps);
    state.in_prefill = true;
    for (std::size_t i = 0; i < total; ++i) {
      StepResult step = kvnorm::detail::decode_step_impl(model, state, tokens[i]);
      if (i < first_measured) continue;
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t h = 0; h < H; ++h) {
          const auto& row = step.record.rows[step.record.index(l, h)];
          const LayerHeadCache& cache = state.cache(l, h, H);
          std::vector<float> norms(cache.occupancy());
          for (std::size_t j = 0; j < norms.size(); ++j) {
            norms[j] = cache.entries[j].key_norm;
          }
          const auto curve = alr_curve(row, norms);
          auto& dst = chunk_curves[c][l * H + h];
          for (std::size_t m = 0; m < curve.size() && m < curve_len; ++m) {
            dst[m] += curve[m] * inv_avg;
          }
        }
      }
    }
  });

  const double inv_chunks = 1.0 / static_cast<double>(chunks.size());
  for (std::size_t c = 0; c < chunks.size(); ++c) {
    for (std::size_t i = 0; i < L * H; ++i) {
      double chunk_alr = 0.0;
      for (std::size_t m = 0; m < curve_len; ++m) {
        report.curves[i][m] += chunk_curves[c][i][m] * inv_chunks;
        chunk_alr += chunk_curves[c][i][m];
      }
      report.per_chunk[i][c] = chunk_alr;
    }
  }
  for (std::size_t i = 0; i < L * H; ++i) {
    double sum = 0.0;
    for (double y : report.curves[i]) sum += y;
    report.alr_values[i] = sum;
  }
  return report;
}

// One row per cached slot per head at the final step: plot-ready data for
// norm-versus-attention visualisations.
struct DumpRow {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t position = 0;
  int token_id = 0;
  float attention_score = 0.0f;
  float key_norm = 0.0f;
};

inline std::vector<DumpRow> norm_attention_dump(const Model& model,
                                                std::span<const int> tokens) {
  if (tokens.size() < 2) {
    throw ConfigError("norm_attention_dump: need at least 2 tokens");
  }
  CompressionConfig none;
  none.policy = Policy::none;
  DecodeState state = prefill(model, tokens, none);
  const AttentionRecord& rec = *state.last_record;
  const std::size_t L = model.config.num_layers;
  const std::size_t H = model.config.num_heads;
  std::vector<DumpRow> rows;
  rows.reserve(L * H * tokens.size());
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      const auto& scores = rec.rows[rec.index(l, h)];
      const LayerHeadCache& cache = state.cache(l, h, H);
      for (std::size_t j = 0; j < cache.occupancy(); ++j) {
        DumpRow r;
        r.layer = l;
        r.head = h;
        r.position = cache.entries[j].position;
        r.token_id = cache.entries[j].token_id;
        r.attention_score = scores[j];
        r.key_norm = cache.entries[j].key_norm;
        rows.push_back(r);
      }
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Dimension-zeroing probe
// ---------------------------------------------------------------------------

enum class ProbeMode { peak_dims, random_dims };

inline const char* probe_mode_name(ProbeMode m) {
  return m == ProbeMode::peak_dims ? "peak_dims" : "random_dims";
}

struct ProbeResult {
  ProbeMode mode = ProbeMode::peak_dims;
  std::vector<std::size_t> zeroed_dims;  // sorted, size == k_dims
  double attention_delta = 0.0;
  Tensor2D baseline;   // [n x n], causal attention rows of the probed head
  Tensor2D perturbed;
  std::size_t target_position = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t k_dims = 0;
};

namespace detail {

// Causal attention rows recomputed from recorded queries and a key matrix.
inline Tensor2D recompute_attention_rows(const Tensor2D& queries,
                                         const Tensor2D& keys) {
  const std::size_t n = queries.rows;
  const std::size_t dk = queries.cols;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));
  Tensor2D rows(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<float> s(i + 1, 0.0f);
    for (std::size_t j = 0; j <= i; ++j) {
      float dot = 0.0f;
      for (std::size_t c = 0; c < dk; ++c) {
        dot += queries.at(i, c) * keys.at(j, c);
      }
      s[j] = dot * inv_sqrt;
    }
    ops::softmax_inplace(s);
    for (std::size_t j = 0; j <= i; ++j) rows.at(i, j) = s[j];
  }
  return rows;
}

}  // namespace detail

// Zeroes the k largest-magnitude (or k seeded-random) dimensions of one
// cached key and reports how much the subsequent attention rows of that
// head move. Queries are held fixed; only the target key changes.
inline ProbeResult dim_zero_probe(const Model& model,
                                  std::span<const int> tokens,
                                  std::optional<std::size_t> target,
                                  std::size_t k_dims, ProbeMode mode,
                                  std::size_t layer, std::size_t head,
                                  std::uint64_t seed = 0) {
  const auto& cfg = model.config;
  if (tokens.size() < 2) {
    throw ConfigError("dim_zero_probe: need at least 2 tokens");
  }
  if (k_dims > cfg.d_head) {
    throw ConfigError("dim_zero_probe: k_dims exceeds d_head");
  }
  if (layer >= cfg.num_layers || head >= cfg.num_heads) {
    throw ConfigError("dim_zero_probe: layer/head out of range");
  }

  CompressionConfig none;
  none.policy = Policy::none;
  DecodeState state = new_decode_state(model, none);
  state.record_queries = true;
  state.in_prefill = true;
  for (int t : tokens) kvnorm::detail::decode_step_impl(model, state, t);

  const std::size_t n = tokens.size();
  const std::size_t dk = cfg.d_head;
  const LayerHeadCache& cache = state.cache(layer, head, cfg.num_heads);
  Tensor2D keys(n, dk);
  for (std::size_t j = 0; j < n; ++j) {
    std::copy(cache.entries[j].key.begin(), cache.entries[j].key.end(),
              keys.row(j).begin());
  }
  Tensor2D queries(n, dk);
  const auto& qh = state.query_history[layer * cfg.num_heads + head];
  std::copy(qh.begin(), qh.end(), queries.data.begin());

  std::size_t target_pos;
  if (target.has_value()) {
    if (*target >= n) {
      throw ConfigError("dim_zero_probe: target position absent");
    }
    target_pos = *target;
  } else {
    // Default to the lowest-norm key; ties take the earliest position.
    target_pos = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (cache.entries[j].key_norm < cache.entries[target_pos].key_norm) {
        target_pos = j;
      }
    }
  }

  ProbeResult res;
  res.mode = mode;
  res.layer = layer;
  res.head = head;
  res.k_dims = k_dims;
  res.target_position = target_pos;

  if (mode == ProbeMode::peak_dims) {
    std::vector<std::size_t> idx(dk);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const float ma = std::fabs(keys.at(target_pos, a));
      const float mb = std::fabs(keys.at(target_pos, b));
      if (ma != mb) return ma > mb;
      return a < b;
    });
    res.zeroed_dims.assign(idx.begin(), idx.begin() + k_dims);
  } else {
    SplitMix64 rng(mix_seed(seed, layer, head, target_pos));
    std::vector<std::size_t> idx(dk);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < k_dims && i + 1 < dk; ++i) {
      std::swap(idx[i], idx[i + rng.next_below(dk - i)]);
    }
    res.zeroed_dims.assign(idx.begin(), idx.begin() + k_dims);
  }
  std::sort(res.zeroed_dims.begin(), res.zeroed_dims.end());

  res.baseline = detail::recompute_attention_rows(queries, keys);
  Tensor2D zeroed_keys = keys;
  for (std::size_t d : res.zeroed_dims) zeroed_keys.at(target_pos, d) = 0.0f;
  res.perturbed = detail::recompute_attention_rows(queries, zeroed_keys);

  // Mean absolute change over the rows that can see the target.
  double delta = 0.0;
  std::size_t count = 0;
  for (std::size_t i = target_pos; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      delta += std::fabs(static_cast<double>(res.perturbed.at(i, j)) -
                         res.baseline.at(i, j));
      count += 1;
    }
  }
  res.attention_delta = count > 0 ? delta / static_cast<double>(count) : 0.0;
  return res;
}

}  // namespace kvnorm
