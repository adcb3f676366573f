// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "kvnorm/backprop.hpp"
#include "kvnorm/errors.hpp"
#include "kvnorm/kv_cache.hpp"
#include "kvnorm/model.hpp"
#include "kvnorm/rng.hpp"
#include "kvnorm/transformer.hpp"

namespace kvnorm {

// ---------------------------------------------------------------------------
// Byte-level tokenizer: ids 0..255 are raw bytes, 256..259 are reserved
// specials. Removes any external tokenizer dependency and gives the
// fastgen policy concrete special/punctuation sets.
// ---------------------------------------------------------------------------
namespace tok {

inline constexpr int kBos = 256;
inline constexpr int kMarkerOpen = 257;
inline constexpr int kMarkerClose = 258;
inline constexpr int kQuery = 259;
inline constexpr std::size_t kVocabSize = 260;

inline std::vector<int> tokenize(std::string_view bytes) {
  std::vector<int> out;
  out.reserve(bytes.size());
  for (unsigned char c : bytes) out.push_back(static_cast<int>(c));
  return out;
}

inline std::string detokenize(std::span<const int> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (int t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  }
  return out;
}

inline std::set<int> special_ids() {
  return {kBos, kMarkerOpen, kMarkerClose, kQuery};
}

// Byte ids of ASCII punctuation (C locale ispunct).
inline std::set<int> punctuation_ids() {
  std::set<int> s;
  for (int c = 33; c <= 47; ++c) s.insert(c);
  for (int c = 58; c <= 64; ++c) s.insert(c);
  for (int c = 91; c <= 96; ++c) s.insert(c);
  for (int c = 123; c <= 126; ++c) s.insert(c);
  return s;
}

inline std::set<int> digit_ids() {
  std::set<int> s;
  for (int c = '0'; c <= '9'; ++c) s.insert(c);
  return s;
}

}  // namespace tok

// ---------------------------------------------------------------------------
// Synthetic retrieval tasks
// ---------------------------------------------------------------------------

struct RetrievalSample {
  std::vector<int> tokens;                    // prompt, ends with QUERY (+cue)
  std::pair<std::size_t, std::size_t> answer_span;  // planted span in tokens
  std::vector<int> passkey_tokens;            // expected generation
  double depth_fraction = 0.0;
};

namespace detail {

inline int filler_token(SplitMix64& rng) {
  // 27-symbol text alphabet: 'a'..'z' and space.
  const std::uint64_t r = rng.next_below(27);
  return r == 26 ? ' ' : static_cast<int>('a' + r);
}

inline int digit_token(SplitMix64& rng) {
  return static_cast<int>('0' + rng.next_below(10));
}

}  // namespace detail

// Prompt layout: filler*, MARKER_OPEN, digits, MARKER_CLOSE, filler*, QUERY.
// The key's start lands at roughly depth_fraction * total_len.
inline RetrievalSample gen_passkey(std::uint64_t seed, std::size_t total_len,
                                   double depth_fraction, std::size_t key_len) {
  if (depth_fraction < 0.0 || depth_fraction > 1.0) {
    throw ConfigError("gen_passkey: depth_fraction outside [0,1]");
  }
  if (key_len == 0 || key_len + 3 > total_len) {
    throw ConfigError("gen_passkey: infeasible lengths");
  }
  const std::size_t filler_total = total_len - key_len - 3;
  const std::size_t prefix =
      static_cast<std::size_t>(std::llround(depth_fraction * filler_total));

  SplitMix64 rng(seed);
  RetrievalSample s;
  s.depth_fraction = depth_fraction;
  s.tokens.reserve(total_len);
  for (std::size_t i = 0; i < prefix; ++i) {
    s.tokens.push_back(detail::filler_token(rng));
  }
  s.tokens.push_back(tok::kMarkerOpen);
  s.answer_span = {s.tokens.size(), key_len};
  for (std::size_t i = 0; i < key_len; ++i) {
    const int d = detail::digit_token(rng);
    s.tokens.push_back(d);
    s.passkey_tokens.push_back(d);
  }
  s.tokens.push_back(tok::kMarkerClose);
  for (std::size_t i = prefix; i < filler_total; ++i) {
    s.tokens.push_back(detail::filler_token(rng));
  }
  s.tokens.push_back(tok::kQuery);
  return s;
}

// Needle variant: the planted fact is a (key -> value) pair and the query
// repeats the key, so the expected generation is the single value token.
inline RetrievalSample gen_needle(std::uint64_t seed, std::size_t total_len,
                                  double depth_fraction) {
  if (depth_fraction < 0.0 || depth_fraction > 1.0) {
    throw ConfigError("gen_needle: depth_fraction outside [0,1]");
  }
  if (total_len < 7) {
    throw ConfigError("gen_needle: infeasible lengths");
  }
  const std::size_t filler_total = total_len - 6;
  const std::size_t prefix =
      static_cast<std::size_t>(std::llround(depth_fraction * filler_total));

  SplitMix64 rng(seed);
  RetrievalSample s;
  s.depth_fraction = depth_fraction;
  const int key = detail::digit_token(rng);
  const int value = detail::digit_token(rng);
  s.tokens.reserve(total_len);
  for (std::size_t i = 0; i < prefix; ++i) {
    s.tokens.push_back(detail::filler_token(rng));
  }
  s.tokens.push_back(tok::kMarkerOpen);
  s.tokens.push_back(key);
  s.answer_span = {s.tokens.size(), 1};
  s.tokens.push_back(value);
  s.tokens.push_back(tok::kMarkerClose);
  for (std::size_t i = prefix; i < filler_total; ++i) {
    s.tokens.push_back(detail::filler_token(rng));
  }
  s.tokens.push_back(tok::kQuery);
  s.tokens.push_back(key);
  s.passkey_tokens.push_back(value);
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  std::string policy;
  double ratio = 0.0;  // -1 when the run was budget-driven
  double accuracy = 0.0;
  double perplexity = 0.0;          // language modelling only
  double next_token_accuracy = 0.0; // language modelling only
  bool is_lm = false;
  std::size_t num_samples = 0;
};

namespace detail {

inline std::size_t argmax(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Deterministic index-parallel driver: items run on any thread, results
// land in per-index slots.
inline void parallel_for(std::size_t count, std::size_t threads,
                         const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::vector<std::string> errors;
  std::vector<std::thread> pool;
  const std::size_t n = std::min(threads, count);
  for (std::size_t t = 0; t < n; ++t) {
    pool.emplace_back([&]() {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= count) return;
          i = next++;
        }
        try {
          body(i);
        } catch (const std::exception& e) {
          std::lock_guard<std::mutex> lock(mu);
          errors.push_back(e.what());
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (!errors.empty()) throw NumericError(errors.front());
}

}  // namespace detail

// Runs one retrieval sample: BOS-prefixed prompt through prefill, then the
// final prompt token through decode_step to obtain first-answer logits,
// then greedy generation of the expected answer length. Returns exact match
// and optionally captures the eviction log of the run.
inline bool run_retrieval_sample(const Model& model,
                                 const RetrievalSample& sample,
                                 CompressionConfig compression,
                                 std::vector<EvictionEvent>* log = nullptr) {
  std::vector<int> prompt;
  prompt.reserve(sample.tokens.size() + 1);
  prompt.push_back(tok::kBos);
  prompt.insert(prompt.end(), sample.tokens.begin(), sample.tokens.end());
  if (prompt.size() + sample.passkey_tokens.size() > model.config.max_seq_len) {
    throw CapacityError("run_retrieval_sample: sample longer than max_seq_len");
  }

  DecodeState state = new_decode_state(model, std::move(compression));
  state.eviction_log = log;
  state.in_prefill = true;
  for (std::size_t i = 0; i + 1 < prompt.size(); ++i) {
    kvnorm::detail::decode_step_impl(model, state, prompt[i]);
  }
  state.in_prefill = false;
  StepResult step = decode_step(model, state, prompt.back());

  bool match = true;
  for (std::size_t i = 0; i < sample.passkey_tokens.size(); ++i) {
    const int pred = static_cast<int>(detail::argmax(step.logits));
    if (pred != sample.passkey_tokens[i]) match = false;
    if (i + 1 < sample.passkey_tokens.size()) {
      step = decode_step(model, state, pred);
    }
  }
  return match;
}

// Exact-match accuracy over a sample set. Each sample derives its own
// eviction seed from (config seed, sample index) so the random policy does
// not replay one pattern everywhere.
inline EvalResult eval_retrieval(
    const Model& model, const std::vector<RetrievalSample>& samples,
    const CompressionConfig& compression, std::size_t threads = 1,
    std::vector<std::vector<EvictionEvent>>* logs = nullptr) {
  if (samples.empty()) throw ConfigError("eval_retrieval: no samples");
  std::vector<int> ok(samples.size(), 0);
  if (logs) logs->assign(samples.size(), {});
  detail::parallel_for(samples.size(), threads, [&](std::size_t i) {
    CompressionConfig cc = compression;
    cc.seed = mix_seed(compression.seed, i);
    ok[i] = run_retrieval_sample(model, samples[i], std::move(cc),
                                 logs ? &(*logs)[i] : nullptr)
                ? 1
                : 0;
  });
  EvalResult r;
  r.policy = policy_name(compression.policy);
  r.ratio = compression.ratio.value_or(-1.0);
  r.num_samples = samples.size();
  double acc = 0.0;
  for (int v : ok) acc += v;
  r.accuracy = acc / static_cast<double>(samples.size());
  return r;
}

// Teacher-forced next-token evaluation over fixed-length chunks of a text
// corpus. Each chunk is BOS-prefixed; perplexity is exp(mean NLL).
inline EvalResult eval_lm(const Model& model, std::string_view corpus,
                          std::size_t chunk_len,
                          const CompressionConfig& compression,
                          std::size_t threads = 1) {
  if (chunk_len < 2) throw ConfigError("eval_lm: chunk_len must be >= 2");
  if (chunk_len + 1 > model.config.max_seq_len) {
    throw ConfigError("eval_lm: chunk_len exceeds max_seq_len");
  }
  const std::vector<int> text = tok::tokenize(corpus);
  const std::size_t num_chunks = text.size() / chunk_len;
  if (num_chunks == 0) {
    throw ConfigError("eval_lm: corpus shorter than one chunk");
  }

  std::vector<double> nll_sum(num_chunks, 0.0);
  std::vector<std::size_t> hits(num_chunks, 0);
  detail::parallel_for(num_chunks, threads, [&](std::size_t c) {
    CompressionConfig cc = compression;
    cc.seed = mix_seed(compression.seed, c);
    DecodeState state = new_decode_state(model, std::move(cc));
    const int* chunk = text.data() + c * chunk_len;
    int cur = tok::kBos;
    for (std::size_t i = 0; i < chunk_len; ++i) {
      StepResult step = decode_step(model, state, cur);
      const int target = chunk[i];
      // log-softmax in double precision
      float maxv = step.logits[0];
      for (float v : step.logits) maxv = std::max(maxv, v);
      double denom = 0.0;
      for (float v : step.logits) {
        denom += std::exp(static_cast<double>(v) - maxv);
      }
      const double lse = static_cast<double>(maxv) + std::log(denom);
      nll_sum[c] += lse - step.logits[static_cast<std::size_t>(target)];
      if (static_cast<int>(detail::argmax(step.logits)) == target) hits[c] += 1;
      cur = target;
    }
  });

  double total_nll = 0.0;
  std::size_t total_hits = 0;
  for (std::size_t c = 0; c < num_chunks; ++c) {
    total_nll += nll_sum[c];
    total_hits += hits[c];
  }
  const double positions = static_cast<double>(num_chunks * chunk_len);
  EvalResult r;
  r.policy = policy_name(compression.policy);
  r.ratio = compression.ratio.value_or(-1.0);
  r.is_lm = true;
  r.num_samples = num_chunks;
  r.perplexity = std::exp(total_nll / positions);
  r.next_token_accuracy = static_cast<double>(total_hits) / positions;
  r.accuracy = r.next_token_accuracy;
  if (!std::isfinite(r.perplexity)) {
    throw NumericError("eval_lm: non-finite perplexity");
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t batch_size = 8;
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::size_t warmup_steps = 200;  // linear learning-rate ramp
  std::uint64_t seed = 1;
  std::string task = "passkey";  // passkey | lm
  // Passkey prompts are drawn with lengths uniform in
  // [min_sample_len, sample_len]; short prompts form the copy circuit early,
  // long ones make the marker addressing position-robust.
  std::size_t sample_len = 96;
  std::size_t min_sample_len = 32;
  std::size_t key_len = 5;
  std::size_t threads = 1;

  void validate() const {
    if (batch_size == 0 || learning_rate <= 0.0 || adam_eps <= 0.0 ||
        clip_norm <= 0.0 || sample_len < 16 || key_len == 0) {
      throw ConfigError("TrainConfig: all quantities must be positive");
    }
    if (min_sample_len < 16 || min_sample_len > sample_len) {
      throw ConfigError("TrainConfig: need 16 <= min_sample_len <= sample_len");
    }
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
      throw ConfigError("TrainConfig: betas must lie in (0,1)");
    }
    if (task != "passkey" && task != "lm") {
      throw ConfigError("TrainConfig: task must be passkey or lm");
    }
  }
};

namespace detail {

// Seeded 64-word lexicon for the synthetic language-modelling task.
inline std::vector<std::string> lm_lexicon(std::uint64_t seed) {
  SplitMix64 rng(mix_seed(seed, 0x13ec5u));
  std::vector<std::string> words(64);
  for (auto& w : words) {
    const std::size_t len = 3 + rng.next_below(5);
    for (std::size_t i = 0; i < len; ++i) {
      w.push_back(static_cast<char>('a' + rng.next_below(26)));
    }
  }
  return words;
}

}  // namespace detail

// One (input, target) pair for a training step item.
inline std::pair<std::vector<int>, std::vector<int>> make_train_sequence(
    const TrainConfig& cfg, std::uint64_t item_seed,
    const std::vector<std::string>* lexicon) {
  SplitMix64 rng(item_seed);
  std::vector<int> seq;
  if (cfg.task == "passkey") {
    const std::size_t len =
        cfg.min_sample_len +
        rng.next_below(cfg.sample_len - cfg.min_sample_len + 1);
    const double depth = rng.next_uniform();
    RetrievalSample s = gen_passkey(rng.next_u64(), len, depth, cfg.key_len);
    seq.reserve(s.tokens.size() + s.passkey_tokens.size() + 1);
    seq.push_back(tok::kBos);
    seq.insert(seq.end(), s.tokens.begin(), s.tokens.end());
    seq.insert(seq.end(), s.passkey_tokens.begin(), s.passkey_tokens.end());
  } else {
    seq.push_back(tok::kBos);
    while (seq.size() < cfg.sample_len) {
      const std::string& w = (*lexicon)[rng.next_below(lexicon->size())];
      for (char c : w) seq.push_back(static_cast<unsigned char>(c));
      seq.push_back(' ');
    }
    seq.resize(cfg.sample_len);
  }
  std::vector<int> input(seq.begin(), seq.end() - 1);
  std::vector<int> target(seq.begin() + 1, seq.end());
  return {std::move(input), std::move(target)};
}

struct TrainResult {
  Model model;
  std::vector<std::pair<std::size_t, double>> loss_curve;
};

// Adam over forward_train on freshly generated task batches. Deterministic
// given (model seed via `model`, train seed); aborts on divergence.
inline TrainResult train_model(
    Model model, const TrainConfig& cfg,
    const std::function<void(std::size_t, double)>& progress = nullptr) {
  cfg.validate();
  const auto lexicon = detail::lm_lexicon(cfg.seed);

  std::vector<float> m_state(model.weights.num_params(), 0.0f);
  std::vector<float> v_state(model.weights.num_params(), 0.0f);

  TrainResult out;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::vector<int>> inputs(cfg.batch_size);
    std::vector<std::vector<int>> targets(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      auto pair = make_train_sequence(cfg, mix_seed(cfg.seed, step + 1, b),
                                      &lexicon);
      inputs[b] = std::move(pair.first);
      targets[b] = std::move(pair.second);
    }
    TrainStepResult sr;
    try {
      sr = forward_train(model, inputs, targets, cfg.threads);
    } catch (const NumericError& e) {
      throw NumericError("train: diverged at step " + std::to_string(step) +
                         ": " + e.what());
    }

    // Global-norm gradient clip.
    double gnorm_sq = 0.0;
    sr.grads.for_each_tensor([&](const Tensor2D& t) {
      for (float g : t.data) {
        gnorm_sq += static_cast<double>(g) * static_cast<double>(g);
      }
    });
    const double gnorm = std::sqrt(gnorm_sq);
    const double gscale = gnorm > cfg.clip_norm ? cfg.clip_norm / gnorm : 1.0;

    const double t_step = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t_step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t_step);
    const double lr =
        cfg.warmup_steps > 0
            ? cfg.learning_rate *
                  std::min(1.0, t_step / static_cast<double>(cfg.warmup_steps))
            : cfg.learning_rate;

    std::size_t off = 0;
    std::vector<Tensor2D*> wts;
    model.weights.for_each_tensor([&](Tensor2D& t) { wts.push_back(&t); });
    std::size_t wi = 0;
    sr.grads.for_each_tensor([&](const Tensor2D& gt) {
      Tensor2D& wt = *wts[wi++];
      for (std::size_t i = 0; i < gt.size(); ++i) {
        const double g = static_cast<double>(gt.data[i]) * gscale;
        const std::size_t s = off + i;
        const double m1 = cfg.beta1 * m_state[s] + (1.0 - cfg.beta1) * g;
        const double v1 = cfg.beta2 * v_state[s] + (1.0 - cfg.beta2) * g * g;
        m_state[s] = static_cast<float>(m1);
        v_state[s] = static_cast<float>(v1);
        const double update =
            lr * (m1 / bc1) / (std::sqrt(v1 / bc2) + cfg.adam_eps);
        wt.data[i] = static_cast<float>(wt.data[i] - update);
      }
      off += gt.size();
    });

    out.loss_curve.emplace_back(step, sr.loss);
    if (progress) progress(step, sr.loss);
  }
  out.model = std::move(model);
  return out;
}

}  // namespace kvnorm
