// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "kvnorm/errors.hpp"
#include "kvnorm/kv_cache.hpp"
#include "kvnorm/model.hpp"
#include "kvnorm/tensor.hpp"

namespace kvnorm {

// Attention rows of one step: for each (layer, head), the softmax scores
// over the cache slots visible at attention time (the just-appended entry
// included) and the sequence positions those slots held.
struct AttentionRecord {
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::vector<std::vector<float>> rows;
  std::vector<std::vector<std::size_t>> positions;

  void init(std::size_t layers, std::size_t heads) {
    num_layers = layers;
    num_heads = heads;
    rows.assign(layers * heads, {});
    positions.assign(layers * heads, {});
  }
  std::size_t index(std::size_t l, std::size_t h) const {
    return l * num_heads + h;
  }
  const std::vector<float>& row(std::size_t l, std::size_t h) const {
    return rows[index(l, h)];
  }
};

// One eviction pass as seen by the audit log and the loss comparisons:
// attention_mass_evicted is the Eq-style sum of the current step's scores
// over the evicted slots.
struct EvictionEvent {
  std::size_t step = 0;
  std::size_t layer = 0;
  std::size_t head = 0;
  Policy policy = Policy::none;
  std::size_t pre_occupancy = 0;
  std::size_t post_occupancy = 0;
  std::vector<std::size_t> evicted_positions;
  double attention_mass_evicted = 0.0;
  // Least mass any same-size eviction could have shed from this step's row
  // (the oracle's choice); budgeted policies honor protect_recent here.
  double min_attention_mass = 0.0;
};

struct DecodeState {
  CompressionConfig compression;
  std::vector<LayerHeadCache> caches;  // [num_layers * num_heads]
  std::size_t t = 0;                   // tokens consumed since reset
  std::optional<AttentionRecord> last_record;
  bool in_prefill = false;

  // Optional instrumentation.
  bool record_queries = false;
  std::vector<std::vector<float>> query_history;  // [L*H], t x d_head flat
  std::vector<EvictionEvent>* eviction_log = nullptr;

  LayerHeadCache& cache(std::size_t layer, std::size_t head,
                        std::size_t num_heads) {
    return caches[layer * num_heads + head];
  }
};

inline DecodeState new_decode_state(const Model& model,
                                    CompressionConfig compression) {
  compression.validate();
  DecodeState s;
  s.compression = std::move(compression);
  const auto& cfg = model.config;
  s.caches.resize(cfg.num_layers * cfg.num_heads);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
      s.caches[l * cfg.num_heads + h].layer = l;
      s.caches[l * cfg.num_heads + h].head = h;
    }
  }
  s.query_history.assign(cfg.num_layers * cfg.num_heads, {});
  return s;
}

namespace ops {

// y = x * W for a single row, k-outer j-inner like matmul's row step.
inline void row_times_matrix(std::span<const float> x, const Tensor2D& w,
                             std::span<float> out) {
  if (x.size() != w.rows || out.size() != w.cols) {
    throw ShapeError("row_times_matrix: shape mismatch");
  }
  std::fill(out.begin(), out.end(), 0.0f);
  for (std::size_t k = 0; k < w.rows; ++k) {
    const float xk = x[k];
    const float* wrow = w.data.data() + k * w.cols;
    for (std::size_t j = 0; j < w.cols; ++j) {
      out[j] += xk * wrow[j];
    }
  }
}

inline void rmsnorm_row(std::span<const float> x, std::span<const float> gain,
                        float eps, std::span<float> out) {
  double ss = 0.0;
  for (float v : x) ss += static_cast<double>(v) * static_cast<double>(v);
  const float inv = static_cast<float>(
      1.0 / std::sqrt(ss / static_cast<double>(x.size()) + eps));
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] * inv * gain[i];
  }
}

// tanh-form gelu; smooth everywhere, which keeps finite-difference
// gradient checks meaningful.
inline float gelu(float x) {
  const double xd = x;
  const double c = 0.7978845608028654;  // sqrt(2/pi)
  const double inner = c * (xd + 0.044715 * xd * xd * xd);
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(inner)));
}

inline float gelu_grad(float x) {
  const double xd = x;
  const double c = 0.7978845608028654;
  const double inner = c * (xd + 0.044715 * xd * xd * xd);
  const double th = std::tanh(inner);
  const double sech2 = 1.0 - th * th;
  const double dinner = c * (1.0 + 3.0 * 0.044715 * xd * xd);
  return static_cast<float>(0.5 * (1.0 + th) + 0.5 * xd * sech2 * dinner);
}

// Rotates consecutive dimension pairs (2j, 2j+1) of one head row by
// pos * theta_j with theta_j = 10000^(-2j/d). Angles in double, result
// stored back as float.
inline void rope_row(std::span<float> row, std::size_t pos) {
  const std::size_t d = row.size();
  for (std::size_t j = 0; 2 * j + 1 < d; ++j) {
    const double theta =
        std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    const double angle = static_cast<double>(pos) * theta;
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const float x0 = row[2 * j];
    const float x1 = row[2 * j + 1];
    row[2 * j] = x0 * c - x1 * s;
    row[2 * j + 1] = x0 * s + x1 * c;
  }
}

// Inverse rotation, used by the backward pass.
inline void rope_row_inverse(std::span<float> row, std::size_t pos) {
  const std::size_t d = row.size();
  for (std::size_t j = 0; 2 * j + 1 < d; ++j) {
    const double theta =
        std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(d));
    const double angle = static_cast<double>(pos) * theta;
    const float c = static_cast<float>(std::cos(angle));
    const float s = static_cast<float>(std::sin(angle));
    const float x0 = row[2 * j];
    const float x1 = row[2 * j + 1];
    row[2 * j] = x0 * c + x1 * s;
    row[2 * j + 1] = -x0 * s + x1 * c;
  }
}

// In-place softmax matching softmax_rows: max subtraction, double
// accumulation of the denominator, multiply by its float inverse.
inline void softmax_inplace(std::span<float> v) {
  if (v.empty()) throw NumericError("softmax_inplace: empty row");
  float maxv = v[0];
  for (float x : v) maxv = std::max(maxv, x);
  double denom = 0.0;
  for (float& x : v) {
    x = std::exp(x - maxv);
    denom += x;
  }
  const float inv = static_cast<float>(1.0 / denom);
  for (float& x : v) x *= inv;
}

}  // namespace ops

// Rotary encoding over a whole [n x d_head] block; positions[i] applies to
// row i. Row L2 norms are preserved.
inline Tensor2D apply_rope(const Tensor2D& m,
                           std::span<const std::size_t> positions) {
  if (m.cols % 2 != 0) {
    throw ShapeError("apply_rope: d_head must be even");
  }
  if (positions.size() != m.rows) {
    throw ShapeError("apply_rope: positions length != rows");
  }
  Tensor2D out = m;
  for (std::size_t i = 0; i < out.rows; ++i) {
    ops::rope_row(out.row(i), positions[i]);
  }
  return out;
}

// Per-head projections of x by the head's column block of W_Q/W_K/W_V.
inline std::tuple<Tensor2D, Tensor2D, Tensor2D> project_qkv(
    const Model& model, const Tensor2D& x, std::size_t layer,
    std::size_t head) {
  const auto& cfg = model.config;
  if (x.cols != cfg.d_model) {
    throw ShapeError("project_qkv: x.cols != d_model");
  }
  if (layer >= cfg.num_layers || head >= cfg.num_heads) {
    throw ShapeError("project_qkv: layer/head out of range");
  }
  const auto& lw = model.weights.layers[layer];
  const std::size_t off = head * cfg.d_head;
  auto slice_block = [&](const Tensor2D& w) {
    Tensor2D block(w.rows, cfg.d_head);
    for (std::size_t r = 0; r < w.rows; ++r) {
      for (std::size_t c = 0; c < cfg.d_head; ++c) {
        block.at(r, c) = w.at(r, off + c);
      }
    }
    return block;
  };
  return {matmul(x, slice_block(lw.w_q)), matmul(x, slice_block(lw.w_k)),
          matmul(x, slice_block(lw.w_v))};
}

// Single-query attention over a cached K/V block. Returns the attention
// output and the softmax scores, which feed the analysis module.
inline std::pair<std::vector<float>, std::vector<float>> attention_head(
    const Tensor2D& q, const Tensor2D& cache_k, const Tensor2D& cache_v) {
  if (q.rows != 1) throw ShapeError("attention_head: q must be 1 x d_head");
  if (cache_k.rows == 0) throw ShapeError("attention_head: empty cache");
  if (cache_k.cols != q.cols || !cache_k.same_shape(cache_v)) {
    throw ShapeError("attention_head: K/V shape mismatch");
  }
  const std::size_t t = cache_k.rows;
  const std::size_t dk = q.cols;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));
  std::vector<float> scores(t, 0.0f);
  for (std::size_t j = 0; j < t; ++j) {
    float dot = 0.0f;
    const float* krow = cache_k.data.data() + j * dk;
    for (std::size_t i = 0; i < dk; ++i) dot += q.data[i] * krow[i];
    scores[j] = dot * inv_sqrt;
  }
  ops::softmax_inplace(scores);
  std::vector<float> out(dk, 0.0f);
  for (std::size_t j = 0; j < t; ++j) {
    const float s = scores[j];
    const float* vrow = cache_v.data.data() + j * dk;
    for (std::size_t i = 0; i < dk; ++i) out[i] += s * vrow[i];
  }
  return {out, scores};
}

// Concat(head_1..head_H) * W_O.
inline std::vector<float> multi_head_merge(
    const std::vector<std::vector<float>>& head_outputs, const Tensor2D& w_o) {
  if (head_outputs.empty()) {
    throw ShapeError("multi_head_merge: no head outputs");
  }
  const std::size_t dk = head_outputs[0].size();
  if (head_outputs.size() * dk != w_o.rows) {
    throw ShapeError("multi_head_merge: head count mismatch");
  }
  std::vector<float> concat;
  concat.reserve(w_o.rows);
  for (const auto& h : head_outputs) {
    if (h.size() != dk) throw ShapeError("multi_head_merge: ragged heads");
    concat.insert(concat.end(), h.begin(), h.end());
  }
  std::vector<float> out(w_o.cols, 0.0f);
  ops::row_times_matrix(concat, w_o, out);
  return out;
}

// KV cache footprint in bytes: L * H * n * d_head * 2 * precision.
inline std::uint64_t kv_memory_bytes(const ModelConfig& cfg, std::uint64_t n,
                                     std::uint64_t precision_bytes) {
  if (precision_bytes != 2 && precision_bytes != 4) {
    throw ConfigError("kv_memory_bytes: precision_bytes must be 2 or 4");
  }
  return static_cast<std::uint64_t>(cfg.num_layers) * cfg.num_heads * n *
         cfg.d_head * 2ULL * precision_bytes;
}

struct StepResult {
  std::vector<float> logits;
  AttentionRecord record;
};

namespace detail {

// Runs one eviction pass for every head of one layer, honoring phase gates
// and feeding the audit log. `record` supplies the per-head score rows the
// oracle policy and the loss bookkeeping need.
inline void run_eviction_pass(const Model& model, DecodeState& state,
                              std::size_t layer, const AttentionRecord& record) {
  const auto& cc = state.compression;
  if (cc.policy == Policy::none) return;
  if (state.in_prefill ? !cc.apply_in_prefill : !cc.apply_in_decode) return;
  if (cc.skip_layers.count(layer)) return;

  const auto& cfg = model.config;
  for (std::size_t h = 0; h < cfg.num_heads; ++h) {
    LayerHeadCache& cache = state.cache(layer, h, cfg.num_heads);
    const std::size_t pre = cache.occupancy();
    const auto& scores = record.rows[record.index(layer, h)];

    EvictionOutcome outcome;
    outcome.retained_count = pre;
    if (cc.policy == Policy::oracle_attention) {
      const std::size_t budget = kvnorm::detail::effective_budget(cache, cc);
      if (budget < cc.protect_recent) {
        throw ConfigError("decode: budget < protect_recent");
      }
      if (pre > budget) {
        outcome =
            oracle_evict_protected(cache, scores, pre - budget, cc.protect_recent);
      }
    } else {
      outcome = evict(cache, cc, state.t);
    }
    if (outcome.evicted_positions.empty()) continue;

    if (state.eviction_log) {
      EvictionEvent ev;
      ev.step = state.t;
      ev.layer = layer;
      ev.head = h;
      ev.policy = cc.policy;
      ev.pre_occupancy = pre;
      ev.post_occupancy = outcome.retained_count;
      ev.evicted_positions.assign(outcome.evicted_positions.begin(),
                                  outcome.evicted_positions.end());
      // Map evicted positions back to pre-eviction slots to price the pass.
      const auto& pos = record.positions[record.index(layer, h)];
      std::vector<float> dropped;
      dropped.reserve(ev.evicted_positions.size());
      for (std::size_t p : ev.evicted_positions) {
        const auto it = std::lower_bound(pos.begin(), pos.end(), p);
        if (it != pos.end() && *it == p) {
          dropped.push_back(scores[static_cast<std::size_t>(it - pos.begin())]);
        }
      }
      ev.attention_mass_evicted = sum_scores_ascending(std::move(dropped));

      const std::size_t protect =
          cc.policy == Policy::fastgen_lite ? 0 : cc.protect_recent;
      const std::size_t pool = scores.size() - std::min(protect, scores.size());
      std::vector<float> candidates(scores.begin(), scores.begin() + pool);
      std::sort(candidates.begin(), candidates.end());
      candidates.resize(
          std::min(candidates.size(), ev.evicted_positions.size()));
      ev.min_attention_mass = sum_scores_ascending(std::move(candidates));
      state.eviction_log->push_back(std::move(ev));
    }
  }
}

inline StepResult decode_step_impl(const Model& model, DecodeState& state,
                                   int token) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size) {
    throw ConfigError("decode_step: token " + std::to_string(token) +
                      " out of vocab");
  }
  if (state.t >= cfg.max_seq_len) {
    throw CapacityError("decode_step: max_seq_len reached");
  }
  const std::size_t d = cfg.d_model;
  const std::size_t dk = cfg.d_head;
  const std::size_t H = cfg.num_heads;
  const std::size_t pos = state.t;

  std::vector<float> x(w.token_embedding.row(static_cast<std::size_t>(token)).begin(),
                       w.token_embedding.row(static_cast<std::size_t>(token)).end());

  AttentionRecord record;
  record.init(cfg.num_layers, H);

  std::vector<float> normed(d), qf(d), kf(d), vf(d), merged(d);
  std::vector<float> ff(cfg.d_ff);

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    ops::rmsnorm_row(x, lw.norm_attn_gain.row(0), cfg.norm_eps, normed);
    ops::row_times_matrix(normed, lw.w_q, qf);
    ops::row_times_matrix(normed, lw.w_k, kf);
    ops::row_times_matrix(normed, lw.w_v, vf);

    std::vector<std::vector<float>> head_outs(H);
    for (std::size_t h = 0; h < H; ++h) {
      std::span<float> q(qf.data() + h * dk, dk);
      std::span<float> k(kf.data() + h * dk, dk);
      std::span<const float> v(vf.data() + h * dk, dk);
      if (cfg.use_rope) {
        ops::rope_row(q, pos);
        ops::rope_row(k, pos);
      }
      LayerHeadCache& cache = state.cache(l, h, H);
      cache_append(cache, k, v, pos, token);
      if (state.record_queries) {
        auto& qh = state.query_history[l * H + h];
        qh.insert(qh.end(), q.begin(), q.end());
      }

      const std::size_t t = cache.occupancy();
      const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));
      std::vector<float> scores(t, 0.0f);
      std::vector<std::size_t> positions(t, 0);
      for (std::size_t j = 0; j < t; ++j) {
        const CacheEntry& e = cache.entries[j];
        float dot = 0.0f;
        for (std::size_t i = 0; i < dk; ++i) dot += q[i] * e.key[i];
        scores[j] = dot * inv_sqrt;
        positions[j] = e.position;
      }
      ops::softmax_inplace(scores);
      std::vector<float> out(dk, 0.0f);
      for (std::size_t j = 0; j < t; ++j) {
        const float s = scores[j];
        const auto& vrow = cache.entries[j].value;
        for (std::size_t i = 0; i < dk; ++i) out[i] += s * vrow[i];
      }
      head_outs[h] = std::move(out);
      record.rows[record.index(l, h)] = std::move(scores);
      record.positions[record.index(l, h)] = std::move(positions);
    }

    std::vector<float> concat;
    concat.reserve(d);
    for (auto& ho : head_outs) concat.insert(concat.end(), ho.begin(), ho.end());
    ops::row_times_matrix(concat, lw.w_o, merged);
    for (std::size_t i = 0; i < d; ++i) x[i] += merged[i];

    run_eviction_pass(model, state, l, record);

    ops::rmsnorm_row(x, lw.norm_mlp_gain.row(0), cfg.norm_eps, normed);
    ops::row_times_matrix(normed, lw.mlp_in, ff);
    for (float& v : ff) v = ops::gelu(v);
    ops::row_times_matrix(ff, lw.mlp_out, merged);
    for (std::size_t i = 0; i < d; ++i) x[i] += merged[i];
  }

  StepResult result;
  result.logits.assign(cfg.vocab_size, 0.0f);
  ops::row_times_matrix(x, w.unembedding, result.logits);
  for (float v : result.logits) {
    if (!std::isfinite(v)) throw NumericError("decode_step: non-finite logits");
  }
  result.record = record;
  state.last_record = std::move(record);
  state.t += 1;
  return result;
}

}  // namespace detail

// Consumes one token: appends its K/V to every cache, attends over the
// concatenated cache (the new entry included), then runs the eviction pass.
inline StepResult decode_step(const Model& model, DecodeState& state,
                              int token) {
  state.in_prefill = false;
  return detail::decode_step_impl(model, state, token);
}

// Encodes a prompt position by position, applying eviction after every
// append when the config enables it for the pre-filling phase.
inline DecodeState prefill(const Model& model, std::span<const int> tokens,
                           CompressionConfig compression) {
  if (tokens.empty()) throw ConfigError("prefill: empty token list");
  if (tokens.size() > model.config.max_seq_len) {
    throw CapacityError("prefill: prompt longer than max_seq_len");
  }
  DecodeState state = new_decode_state(model, std::move(compression));
  state.in_prefill = true;
  for (int tok : tokens) {
    detail::decode_step_impl(model, state, tok);
  }
  state.in_prefill = false;
  return state;
}

// Full-context causal forward without any cache; returns logits for every
// position. Reference path for cache-equivalence checks and the teacher
// of the training loop.
inline Tensor2D forward_full(const Model& model, std::span<const int> tokens) {
  const auto& cfg = model.config;
  const auto& w = model.weights;
  if (tokens.empty()) throw ConfigError("forward_full: empty token list");
  if (tokens.size() > cfg.max_seq_len) {
    throw CapacityError("forward_full: sequence longer than max_seq_len");
  }
  const std::size_t n = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t dk = cfg.d_head;
  const std::size_t H = cfg.num_heads;

  Tensor2D x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const int tok = tokens[i];
    if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size) {
      throw ConfigError("forward_full: token out of vocab");
    }
    auto src = w.token_embedding.row(static_cast<std::size_t>(tok));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }

  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  std::vector<std::uint8_t> causal_mask(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) causal_mask[i * n + j] = 1;
  }

  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& lw = w.layers[l];
    Tensor2D a(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      ops::rmsnorm_row(x.row(i), lw.norm_attn_gain.row(0), cfg.norm_eps,
                       a.row(i));
    }
    Tensor2D qf = matmul(a, lw.w_q);
    Tensor2D kf = matmul(a, lw.w_k);
    Tensor2D vf = matmul(a, lw.w_v);

    Tensor2D concat(n, d);
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dk));
    for (std::size_t h = 0; h < H; ++h) {
      Tensor2D qh(n, dk), kh(n, dk), vh(n, dk);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dk; ++c) {
          qh.at(i, c) = qf.at(i, h * dk + c);
          kh.at(i, c) = kf.at(i, h * dk + c);
          vh.at(i, c) = vf.at(i, h * dk + c);
        }
      }
      if (cfg.use_rope) {
        qh = apply_rope(qh, positions);
        kh = apply_rope(kh, positions);
      }
      Tensor2D scores(n, n);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          float dot = 0.0f;
          for (std::size_t c = 0; c < dk; ++c) dot += qh.at(i, c) * kh.at(j, c);
          scores.at(i, j) = dot * inv_sqrt;
        }
      }
      Tensor2D probs = softmax_rows(scores, &causal_mask);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dk; ++c) {
          float acc = 0.0f;
          for (std::size_t j = 0; j <= i; ++j) {
            acc += probs.at(i, j) * vh.at(j, c);
          }
          concat.at(i, h * dk + c) = acc;
        }
      }
    }
    Tensor2D attn_out = matmul(concat, lw.w_o);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += attn_out.data[i];

    Tensor2D b(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      ops::rmsnorm_row(x.row(i), lw.norm_mlp_gain.row(0), cfg.norm_eps,
                       b.row(i));
    }
    Tensor2D h1 = matmul(b, lw.mlp_in);
    for (float& v : h1.data) v = ops::gelu(v);
    Tensor2D mlp_out = matmul(h1, lw.mlp_out);
    for (std::size_t i = 0; i < x.size(); ++i) x.data[i] += mlp_out.data[i];
  }

  Tensor2D logits = matmul(x, w.unembedding);
  ensure_finite(logits, "forward_full");
  return logits;
}

}  // namespace kvnorm
