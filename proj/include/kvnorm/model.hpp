// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvnorm/errors.hpp"
#include "kvnorm/tensor.hpp"

namespace kvnorm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

struct ModelConfig {
  std::size_t num_layers = 1;
  std::size_t num_heads = 1;
  std::size_t d_model = 8;
  std::size_t d_head = 8;
  std::size_t d_ff = 16;
  std::size_t vocab_size = 260;
  std::size_t max_seq_len = 128;
  bool use_rope = true;
  float norm_eps = 1e-5f;

  void validate() const {
    if (num_layers < 1 || num_heads < 1 || d_model < 1 || d_head < 1 ||
        d_ff < 1 || vocab_size < 1 || max_seq_len < 1) {
      throw ConfigError("ModelConfig: all counts must be >= 1");
    }
    if (d_model != num_heads * d_head) {
      throw ConfigError("ModelConfig: d_model != num_heads * d_head");
    }
    if (use_rope && d_head % 2 != 0) {
      throw ConfigError("ModelConfig: d_head must be even with rope enabled");
    }
    if (!(norm_eps > 0.0f)) {
      throw ConfigError("ModelConfig: norm_eps must be positive");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},
                     {"num_heads", c.num_heads},
                     {"d_model", c.d_model},
                     {"d_head", c.d_head},
                     {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"use_rope", c.use_rope},
                     {"norm_eps", c.norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_head").get_to(c.d_head);
  j.at("d_ff").get_to(c.d_ff);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("use_rope").get_to(c.use_rope);
  j.at("norm_eps").get_to(c.norm_eps);
}

struct LayerWeights {
  Tensor2D w_q, w_k, w_v, w_o;   // each [d x d], QKV split into head blocks
  Tensor2D mlp_in;               // [d x d_ff]
  Tensor2D mlp_out;              // [d_ff x d]
  Tensor2D norm_attn_gain;       // [1 x d]
  Tensor2D norm_mlp_gain;        // [1 x d]
};

struct ModelWeights {
  Tensor2D token_embedding;      // [vocab x d]
  std::vector<LayerWeights> layers;
  Tensor2D unembedding;          // [d x vocab]

  // Canonical matrix order: embedding, then per layer Q, K, V, O, mlp_in,
  // mlp_out, norm_attn, norm_mlp, then unembedding. Checkpoints, gradient
  // buffers and the optimizer all follow this order.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn(token_embedding);
    for (auto& l : layers) {
      fn(l.w_q);
      fn(l.w_k);
      fn(l.w_v);
      fn(l.w_o);
      fn(l.mlp_in);
      fn(l.mlp_out);
      fn(l.norm_attn_gain);
      fn(l.norm_mlp_gain);
    }
    fn(unembedding);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    fn(token_embedding);
    for (const auto& l : layers) {
      fn(l.w_q);
      fn(l.w_k);
      fn(l.w_v);
      fn(l.w_o);
      fn(l.mlp_in);
      fn(l.mlp_out);
      fn(l.norm_attn_gain);
      fn(l.norm_mlp_gain);
    }
    fn(unembedding);
  }

  std::size_t num_params() const {
    std::size_t n = 0;
    for_each_tensor([&](const Tensor2D& t) { n += t.size(); });
    return n;
  }
};

struct Model {
  ModelConfig config;
  ModelWeights weights;
};

// Weight-group names in canonical order, used by diagnostics and the
// gradient checker.
inline std::vector<std::string> weight_group_names(const ModelConfig& cfg) {
  std::vector<std::string> names;
  names.push_back("token_embedding");
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    for (const char* s : {"w_q", "w_k", "w_v", "w_o", "mlp_in", "mlp_out",
                          "norm_attn_gain", "norm_mlp_gain"}) {
      names.push_back(p + s);
    }
  }
  names.push_back("unembedding");
  return names;
}

// Zero-filled weights with shapes from the config.
inline ModelWeights zero_weights(const ModelConfig& cfg) {
  ModelWeights w;
  w.token_embedding = Tensor2D(cfg.vocab_size, cfg.d_model);
  w.layers.resize(cfg.num_layers);
  for (auto& l : w.layers) {
    l.w_q = Tensor2D(cfg.d_model, cfg.d_model);
    l.w_k = Tensor2D(cfg.d_model, cfg.d_model);
    l.w_v = Tensor2D(cfg.d_model, cfg.d_model);
    l.w_o = Tensor2D(cfg.d_model, cfg.d_model);
    l.mlp_in = Tensor2D(cfg.d_model, cfg.d_ff);
    l.mlp_out = Tensor2D(cfg.d_ff, cfg.d_model);
    l.norm_attn_gain = Tensor2D(1, cfg.d_model);
    l.norm_mlp_gain = Tensor2D(1, cfg.d_model);
  }
  w.unembedding = Tensor2D(cfg.d_model, cfg.vocab_size);
  return w;
}

// Seeded initialization: every projection matrix is normal(sigma) drawn from
// one SplitMix64(seed) stream over the canonical tensor order; norm gains
// start at 1.
inline Model init_model(const ModelConfig& cfg, std::uint64_t seed,
                        double sigma = 0.02) {
  cfg.validate();
  Model m;
  m.config = cfg;
  m.weights = zero_weights(cfg);
  SplitMix64 rng(seed);
  m.weights.for_each_tensor([&](Tensor2D& t) {
    if (t.rows == 1) return;  // norm gains handled below
    for (float& v : t.data) {
      v = static_cast<float>(sigma * rng.next_normal());
    }
  });
  for (auto& l : m.weights.layers) {
    std::fill(l.norm_attn_gain.data.begin(), l.norm_attn_gain.data.end(), 1.0f);
    std::fill(l.norm_mlp_gain.data.begin(), l.norm_mlp_gain.data.end(), 1.0f);
  }
  return m;
}

inline constexpr char kCheckpointMagic[4] = {'K', 'V', 'S', 'Q'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic "KVSQ", u32 LE version, u64 LE JSON length, UTF-8 JSON
// ModelConfig, then every weight matrix as raw float32 LE in canonical order.
inline void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("save_checkpoint: cannot open " + path);
  f.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::string js = nlohmann::json(model.config).dump();
  const std::uint64_t jlen = js.size();
  f.write(reinterpret_cast<const char*>(&jlen), sizeof(jlen));
  f.write(js.data(), static_cast<std::streamsize>(js.size()));
  model.weights.for_each_tensor([&](const Tensor2D& t) {
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
  });
  if (!f) throw ConfigError("save_checkpoint: write failed for " + path);
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("load_checkpoint: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw ConfigError("load_checkpoint: bad magic in " + path);
  }
  std::uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!f || version != kCheckpointVersion) {
    throw ConfigError("load_checkpoint: unsupported version");
  }
  std::uint64_t jlen = 0;
  f.read(reinterpret_cast<char*>(&jlen), sizeof(jlen));
  if (!f || jlen == 0 || jlen > (1u << 20)) {
    throw ConfigError("load_checkpoint: bad config length");
  }
  std::string js(jlen, '\0');
  f.read(js.data(), static_cast<std::streamsize>(jlen));
  if (!f) throw ConfigError("load_checkpoint: truncated config");

  Model m;
  try {
    m.config = nlohmann::json::parse(js).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("load_checkpoint: config parse: ") + e.what());
  }
  m.config.validate();
  m.weights = zero_weights(m.config);
  m.weights.for_each_tensor([&](Tensor2D& t) {
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
  });
  if (!f) throw ConfigError("load_checkpoint: truncated weights");
  // The weight section must end exactly at EOF.
  f.peek();
  if (!f.eof()) throw ConfigError("load_checkpoint: trailing bytes");
  m.weights.for_each_tensor(
      [&](const Tensor2D& t) { ensure_finite(t, "load_checkpoint"); });
  return m;
}

}  // namespace kvnorm
