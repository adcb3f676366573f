// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
//
// kvnorm: train toy decoder-only models, evaluate KV-cache eviction
// policies, sweep policy/ratio/depth grids and emit plot-ready analysis
// tables. Every command writes a manifest.json first; `kvnorm replay`
// reproduces a run from it byte-for-byte.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kvnorm/analysis.hpp"
#include "kvnorm/backprop.hpp"
#include "kvnorm/io.hpp"
#include "kvnorm/kv_cache.hpp"
#include "kvnorm/model.hpp"
#include "kvnorm/transformer.hpp"
#include "kvnorm/workloads.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// flag parsing helpers
// ---------------------------------------------------------------------------

std::set<std::size_t> parse_index_set(const std::string& csv) {
  std::set<std::size_t> out;
  if (csv.empty() || csv == "none") return out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.insert(static_cast<std::size_t>(std::stoull(item)));
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  return out;
}

std::vector<std::string> parse_string_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join_indices(const std::set<std::size_t>& s, char sep = ';') {
  std::string out;
  for (std::size_t v : s) {
    if (!out.empty()) out += sep;
    out += std::to_string(v);
  }
  return out;
}

std::uint64_t default_seed_from_env() {
  if (const char* env = std::getenv("KVNORM_SEED")) {
    try {
      return std::stoull(env);
    } catch (...) {
      throw kvnorm::ConfigError("KVNORM_SEED is not a valid u64");
    }
  }
  return 0;
}

// Config-file precedence: a flag that the user did not pass on the command
// line takes its value from the JSON config file when present there.
template <typename T>
void apply_config(const CLI::Option* opt, const json& cfg, const char* key,
                  T& var) {
  if (opt != nullptr && opt->count() > 0) return;  // flag wins
  if (cfg.contains(key)) cfg.at(key).get_to(var);
}

// ---------------------------------------------------------------------------
// command parameter structs (serialized into manifests; replay runs them)
// ---------------------------------------------------------------------------

struct CompressionParams {
  std::string policy = "none";
  double ratio = -1.0;   // <0: unset
  std::int64_t budget = -1;  // <0: unset
  std::string skip_layers = "0,1";
  std::size_t protect_recent = 1;
  std::size_t local_window = 4;
  bool no_prefill_compression = false;
  bool no_decode_compression = false;

  kvnorm::CompressionConfig to_config(std::uint64_t seed) const {
    kvnorm::CompressionConfig cc;
    const auto parsed = kvnorm::parse_policy(policy);
    if (!parsed) throw kvnorm::ConfigError("unknown policy: " + policy);
    cc.policy = *parsed;
    if (ratio >= 0.0) cc.ratio = ratio;
    if (budget >= 0) cc.budget = static_cast<std::size_t>(budget);
    cc.skip_layers = parse_index_set(skip_layers);
    cc.protect_recent = protect_recent;
    cc.local_window = local_window;
    cc.special_token_ids = kvnorm::tok::special_ids();
    cc.punctuation_token_ids = kvnorm::tok::punctuation_ids();
    cc.seed = seed;
    cc.apply_in_prefill = !no_prefill_compression;
    cc.apply_in_decode = !no_decode_compression;
    cc.validate();
    return cc;
  }
};

void to_json(json& j, const CompressionParams& p) {
  j = json{{"policy", p.policy},
           {"ratio", p.ratio},
           {"budget", p.budget},
           {"skip_layers", p.skip_layers},
           {"protect_recent", p.protect_recent},
           {"local_window", p.local_window},
           {"no_prefill_compression", p.no_prefill_compression},
           {"no_decode_compression", p.no_decode_compression}};
}

void from_json(const json& j, CompressionParams& p) {
  j.at("policy").get_to(p.policy);
  j.at("ratio").get_to(p.ratio);
  j.at("budget").get_to(p.budget);
  j.at("skip_layers").get_to(p.skip_layers);
  j.at("protect_recent").get_to(p.protect_recent);
  j.at("local_window").get_to(p.local_window);
  j.at("no_prefill_compression").get_to(p.no_prefill_compression);
  j.at("no_decode_compression").get_to(p.no_decode_compression);
}

struct TrainParams {
  std::size_t layers = 4, heads = 4, d_model = 128, d_head = 32, d_ff = 512;
  std::size_t max_seq_len = 512;
  bool no_rope = false;
  std::uint64_t model_seed = 1;
  std::uint64_t seed = 0;
  std::size_t steps = 3000, batch_size = 8;
  double lr = 2e-3, beta1 = 0.9, beta2 = 0.99, adam_eps = 1e-8, clip = 1.0;
  std::size_t warmup = 200;
  std::string task = "passkey";
  std::size_t sample_len = 96, min_sample_len = 32, key_len = 5;
  std::size_t threads = 1;
};

void to_json(json& j, const TrainParams& p) {
  j = json{{"layers", p.layers},       {"heads", p.heads},
           {"d_model", p.d_model},     {"d_head", p.d_head},
           {"d_ff", p.d_ff},           {"max_seq_len", p.max_seq_len},
           {"no_rope", p.no_rope},     {"model_seed", p.model_seed},
           {"seed", p.seed},           {"steps", p.steps},
           {"batch_size", p.batch_size}, {"lr", p.lr},
           {"beta1", p.beta1},         {"beta2", p.beta2},
           {"adam_eps", p.adam_eps},   {"clip", p.clip},
           {"warmup", p.warmup},
           {"task", p.task},           {"sample_len", p.sample_len},
           {"min_sample_len", p.min_sample_len},
           {"key_len", p.key_len},     {"threads", p.threads}};
}

void from_json(const json& j, TrainParams& p) {
  j.at("layers").get_to(p.layers);
  j.at("heads").get_to(p.heads);
  j.at("d_model").get_to(p.d_model);
  j.at("d_head").get_to(p.d_head);
  j.at("d_ff").get_to(p.d_ff);
  j.at("max_seq_len").get_to(p.max_seq_len);
  j.at("no_rope").get_to(p.no_rope);
  j.at("model_seed").get_to(p.model_seed);
  j.at("seed").get_to(p.seed);
  j.at("steps").get_to(p.steps);
  j.at("batch_size").get_to(p.batch_size);
  j.at("lr").get_to(p.lr);
  j.at("beta1").get_to(p.beta1);
  j.at("beta2").get_to(p.beta2);
  j.at("adam_eps").get_to(p.adam_eps);
  j.at("clip").get_to(p.clip);
  j.at("warmup").get_to(p.warmup);
  j.at("task").get_to(p.task);
  j.at("sample_len").get_to(p.sample_len);
  j.at("min_sample_len").get_to(p.min_sample_len);
  j.at("key_len").get_to(p.key_len);
  j.at("threads").get_to(p.threads);
}

struct EvalParams {
  std::string model_path;
  std::string task = "passkey";  // passkey | needle | lm
  CompressionParams compression;
  std::uint64_t seed = 0;
  std::size_t samples = 100;
  std::size_t sample_len = 128, key_len = 5;
  std::string depths = "0,0.25,0.5,0.75,1";
  std::string corpus;  // lm only
  std::size_t chunk_len = 128;
  std::size_t threads = 1;
  bool audit_log = false;
};

void to_json(json& j, const EvalParams& p) {
  j = json{{"model_path", p.model_path}, {"task", p.task},
           {"compression", p.compression}, {"seed", p.seed},
           {"samples", p.samples},       {"sample_len", p.sample_len},
           {"key_len", p.key_len},       {"depths", p.depths},
           {"corpus", p.corpus},         {"chunk_len", p.chunk_len},
           {"threads", p.threads},       {"audit_log", p.audit_log}};
}

void from_json(const json& j, EvalParams& p) {
  j.at("model_path").get_to(p.model_path);
  j.at("task").get_to(p.task);
  j.at("compression").get_to(p.compression);
  j.at("seed").get_to(p.seed);
  j.at("samples").get_to(p.samples);
  j.at("sample_len").get_to(p.sample_len);
  j.at("key_len").get_to(p.key_len);
  j.at("depths").get_to(p.depths);
  j.at("corpus").get_to(p.corpus);
  j.at("chunk_len").get_to(p.chunk_len);
  j.at("threads").get_to(p.threads);
  j.at("audit_log").get_to(p.audit_log);
}

struct SweepParams {
  std::string model_path;
  std::string task = "passkey";
  std::string policies = "l2-low,l2-high,random,oracle";
  std::string ratios = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  std::string depths = "0.5";
  std::string skip_layer_sets = "0,1";  // ';'-separated sets of ','-ints
  std::size_t protect_recent = 1;
  std::size_t local_window = 4;
  std::uint64_t seed = 0;
  std::size_t samples = 100;
  std::size_t sample_len = 128, key_len = 5;
  std::string corpus;
  std::size_t chunk_len = 128;
  std::size_t threads = 1;
};

void to_json(json& j, const SweepParams& p) {
  j = json{{"model_path", p.model_path}, {"task", p.task},
           {"policies", p.policies},     {"ratios", p.ratios},
           {"depths", p.depths},         {"skip_layer_sets", p.skip_layer_sets},
           {"protect_recent", p.protect_recent},
           {"local_window", p.local_window},
           {"seed", p.seed},             {"samples", p.samples},
           {"sample_len", p.sample_len}, {"key_len", p.key_len},
           {"corpus", p.corpus},         {"chunk_len", p.chunk_len},
           {"threads", p.threads}};
}

void from_json(const json& j, SweepParams& p) {
  j.at("model_path").get_to(p.model_path);
  j.at("task").get_to(p.task);
  j.at("policies").get_to(p.policies);
  j.at("ratios").get_to(p.ratios);
  j.at("depths").get_to(p.depths);
  j.at("skip_layer_sets").get_to(p.skip_layer_sets);
  j.at("protect_recent").get_to(p.protect_recent);
  j.at("local_window").get_to(p.local_window);
  j.at("seed").get_to(p.seed);
  j.at("samples").get_to(p.samples);
  j.at("sample_len").get_to(p.sample_len);
  j.at("key_len").get_to(p.key_len);
  j.at("corpus").get_to(p.corpus);
  j.at("chunk_len").get_to(p.chunk_len);
  j.at("threads").get_to(p.threads);
}

struct AnalyzeParams {
  std::string model_path;
  std::string mode = "alr";  // alr | dump | probe
  std::string corpus;
  std::size_t chunk_len = 128;
  std::size_t num_chunks = 16;
  std::size_t avg_last_steps = 1;
  bool per_chunk = false;
  std::size_t length = 64;  // dump/probe prompt length, BOS included
  std::size_t k_dims = 8;
  std::string probe_mode = "peak";  // peak | random
  std::size_t layer = 0;
  std::size_t head = 0;
  std::int64_t target = -1;  // <0: lowest-norm key position
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

void to_json(json& j, const AnalyzeParams& p) {
  j = json{{"model_path", p.model_path}, {"mode", p.mode},
           {"corpus", p.corpus},         {"chunk_len", p.chunk_len},
           {"num_chunks", p.num_chunks}, {"avg_last_steps", p.avg_last_steps},
           {"per_chunk", p.per_chunk},   {"length", p.length},
           {"k_dims", p.k_dims},         {"probe_mode", p.probe_mode},
           {"layer", p.layer},           {"head", p.head},
           {"target", p.target},         {"seed", p.seed},
           {"threads", p.threads}};
}

void from_json(const json& j, AnalyzeParams& p) {
  j.at("model_path").get_to(p.model_path);
  j.at("mode").get_to(p.mode);
  j.at("corpus").get_to(p.corpus);
  j.at("chunk_len").get_to(p.chunk_len);
  j.at("num_chunks").get_to(p.num_chunks);
  j.at("avg_last_steps").get_to(p.avg_last_steps);
  j.at("per_chunk").get_to(p.per_chunk);
  j.at("length").get_to(p.length);
  j.at("k_dims").get_to(p.k_dims);
  j.at("probe_mode").get_to(p.probe_mode);
  j.at("layer").get_to(p.layer);
  j.at("head").get_to(p.head);
  j.at("target").get_to(p.target);
  j.at("seed").get_to(p.seed);
  j.at("threads").get_to(p.threads);
}

struct GenCorpusParams {
  std::uint64_t seed = 0;
  std::size_t bytes = 65536;
};

void to_json(json& j, const GenCorpusParams& p) {
  j = json{{"seed", p.seed}, {"bytes", p.bytes}};
}

void from_json(const json& j, GenCorpusParams& p) {
  j.at("seed").get_to(p.seed);
  j.at("bytes").get_to(p.bytes);
}

// ---------------------------------------------------------------------------
// shared run helpers
// ---------------------------------------------------------------------------

// Canonical sample list shared by eval and sweep so a sweep cell equals a
// standalone eval with the same seed.
std::vector<kvnorm::RetrievalSample> make_eval_samples(
    const std::string& task, std::uint64_t seed, std::size_t count,
    std::size_t sample_len, std::size_t key_len,
    const std::vector<double>& depths) {
  if (depths.empty()) throw kvnorm::ConfigError("empty depth list");
  std::vector<kvnorm::RetrievalSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double depth = depths[i % depths.size()];
    const std::uint64_t s = kvnorm::mix_seed(seed, i + 1);
    if (task == "passkey") {
      out.push_back(kvnorm::gen_passkey(s, sample_len, depth, key_len));
    } else if (task == "needle") {
      out.push_back(kvnorm::gen_needle(s, sample_len, depth));
    } else {
      throw kvnorm::ConfigError("unknown retrieval task: " + task);
    }
  }
  return out;
}

std::vector<std::string> eval_csv_header() {
  return {"policy", "ratio", "skip_layers", "accuracy", "perplexity",
          "next_token_accuracy", "num_samples", "seed"};
}

std::vector<std::string> eval_csv_row(const kvnorm::EvalResult& r,
                                      const std::string& skip_layers,
                                      std::uint64_t seed) {
  return {r.policy,
          kvnorm::fmt_float(r.ratio),
          skip_layers,
          kvnorm::fmt_float(r.accuracy),
          r.is_lm ? kvnorm::fmt_float(r.perplexity) : std::string{},
          r.is_lm ? kvnorm::fmt_float(r.next_token_accuracy) : std::string{},
          std::to_string(r.num_samples),
          std::to_string(seed)};
}

void write_audit_csv(const fs::path& path,
                     const std::vector<kvnorm::EvictionEvent>& events) {
  kvnorm::CsvWriter csv({"step", "layer", "head", "policy", "pre_occupancy",
                         "post_occupancy", "evicted_positions"});
  for (const auto& ev : events) {
    std::string positions;
    for (std::size_t p : ev.evicted_positions) {
      if (!positions.empty()) positions += ';';
      positions += std::to_string(p);
    }
    csv.append_row({std::to_string(ev.step), std::to_string(ev.layer),
                    std::to_string(ev.head), kvnorm::policy_name(ev.policy),
                    std::to_string(ev.pre_occupancy),
                    std::to_string(ev.post_occupancy), positions});
  }
  csv.write(path);
}

// ---------------------------------------------------------------------------
// command implementations (shared by the flag path and replay)
// ---------------------------------------------------------------------------

int run_train(const TrainParams& p, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  kvnorm::RunManifest manifest;
  manifest.command = "train";
  manifest.resolved_config = json(p);
  manifest.output_paths = {"checkpoint.kvsq", "loss_curve.csv"};
  manifest.write(out_dir / "manifest.json");

  kvnorm::ModelConfig cfg;
  cfg.num_layers = p.layers;
  cfg.num_heads = p.heads;
  cfg.d_model = p.d_model;
  cfg.d_head = p.d_head;
  cfg.d_ff = p.d_ff;
  cfg.vocab_size = kvnorm::tok::kVocabSize;
  cfg.max_seq_len = p.max_seq_len;
  cfg.use_rope = !p.no_rope;
  cfg.validate();

  kvnorm::TrainConfig tc;
  tc.steps = p.steps;
  tc.batch_size = p.batch_size;
  tc.learning_rate = p.lr;
  tc.beta1 = p.beta1;
  tc.beta2 = p.beta2;
  tc.adam_eps = p.adam_eps;
  tc.clip_norm = p.clip;
  tc.warmup_steps = p.warmup;
  tc.seed = p.seed;
  tc.task = p.task;
  tc.sample_len = p.sample_len;
  tc.min_sample_len = p.min_sample_len;
  tc.key_len = p.key_len;
  tc.threads = p.threads;

  kvnorm::Model model = kvnorm::init_model(cfg, p.model_seed);
  kvnorm::TrainResult result = kvnorm::train_model(
      std::move(model), tc, [](std::size_t step, double loss) {
        if (step % 100 == 0) {
          std::cout << "step " << step << " loss " << loss << "\n";
        }
      });

  // atomic: write beside the target, then rename
  const fs::path ckpt = out_dir / "checkpoint.kvsq";
  kvnorm::save_checkpoint(result.model, (ckpt.string() + ".tmp"));
  fs::rename(ckpt.string() + ".tmp", ckpt);
  kvnorm::CsvWriter csv({"step", "loss"});
  for (const auto& [step, loss] : result.loss_curve) {
    csv.append_row({std::to_string(step), kvnorm::fmt_float(loss)});
  }
  csv.write(out_dir / "loss_curve.csv");
  std::cout << "wrote " << (out_dir / "checkpoint.kvsq").string() << "\n";
  return 0;
}

int run_eval(const EvalParams& p, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  kvnorm::RunManifest manifest;
  manifest.command = "eval";
  manifest.resolved_config = json(p);
  manifest.input_digests[p.model_path] = kvnorm::file_digest(p.model_path);
  if (!p.corpus.empty()) {
    manifest.input_digests[p.corpus] = kvnorm::file_digest(p.corpus);
  }
  manifest.output_paths = {"eval.json", "eval.csv"};
  if (p.audit_log) manifest.output_paths.push_back("audit.csv");
  manifest.write(out_dir / "manifest.json");

  const kvnorm::Model model = kvnorm::load_checkpoint(p.model_path);
  const kvnorm::CompressionConfig cc = p.compression.to_config(p.seed);

  kvnorm::EvalResult result;
  std::vector<std::vector<kvnorm::EvictionEvent>> logs;
  if (p.task == "lm") {
    if (p.corpus.empty()) {
      throw kvnorm::ConfigError("eval --task lm requires --corpus");
    }
    result = kvnorm::eval_lm(model, kvnorm::read_file(p.corpus), p.chunk_len,
                             cc, p.threads);
  } else {
    const auto samples =
        make_eval_samples(p.task, p.seed, p.samples, p.sample_len, p.key_len,
                          parse_double_list(p.depths));
    result = kvnorm::eval_retrieval(model, samples, cc, p.threads,
                                    p.audit_log ? &logs : nullptr);
  }

  json out = {{"policy", result.policy},
              {"ratio", result.ratio},
              {"skip_layers", p.compression.skip_layers},
              {"accuracy", result.accuracy},
              {"num_samples", result.num_samples},
              {"seed", p.seed},
              {"task", p.task}};
  if (result.is_lm) {
    out["perplexity"] = result.perplexity;
    out["next_token_accuracy"] = result.next_token_accuracy;
  }
  kvnorm::atomic_write_file(out_dir / "eval.json", out.dump(2) + "\n");

  kvnorm::CsvWriter csv(eval_csv_header());
  csv.append_row(eval_csv_row(
      result, join_indices(parse_index_set(p.compression.skip_layers)),
      p.seed));
  csv.write(out_dir / "eval.csv");

  if (p.audit_log) {
    // The audit log records the first sample's eviction passes.
    write_audit_csv(out_dir / "audit.csv",
                    logs.empty() ? std::vector<kvnorm::EvictionEvent>{}
                                 : logs.front());
  }
  std::cout << "accuracy " << result.accuracy;
  if (result.is_lm) std::cout << " perplexity " << result.perplexity;
  std::cout << "\n";
  return 0;
}

int run_sweep(const SweepParams& p, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  kvnorm::RunManifest manifest;
  manifest.command = "sweep";
  manifest.resolved_config = json(p);
  manifest.input_digests[p.model_path] = kvnorm::file_digest(p.model_path);
  if (!p.corpus.empty()) {
    manifest.input_digests[p.corpus] = kvnorm::file_digest(p.corpus);
  }
  manifest.output_paths = {"sweep.csv"};
  manifest.write(out_dir / "manifest.json");

  const kvnorm::Model model = kvnorm::load_checkpoint(p.model_path);
  const auto policies = parse_string_list(p.policies);
  const auto ratios = parse_double_list(p.ratios);
  const auto depths = parse_double_list(p.depths);
  std::vector<std::string> skip_sets;
  {
    std::stringstream ss(p.skip_layer_sets);
    std::string item;
    while (std::getline(ss, item, ';')) skip_sets.push_back(item);
    if (skip_sets.empty()) skip_sets.push_back("0,1");
  }
  if (policies.empty() || ratios.empty() || depths.empty()) {
    throw kvnorm::ConfigError("sweep: empty grid");
  }
  std::string corpus_text;
  if (p.task == "lm") {
    if (p.corpus.empty()) {
      throw kvnorm::ConfigError("sweep --task lm requires --corpus");
    }
    corpus_text = kvnorm::read_file(p.corpus);
  }

  kvnorm::CsvWriter csv({"policy", "ratio", "depth", "skip_layers", "accuracy",
                         "perplexity", "next_token_accuracy", "num_samples",
                         "seed"});
  // Row order is the documented (policy, ratio, depth, skip_set) nesting.
  for (const auto& policy : policies) {
    for (double ratio : ratios) {
      for (double depth : depths) {
        for (const auto& skip : skip_sets) {
          CompressionParams cp;
          cp.policy = policy;
          if (policy != "none" && policy != "fastgen") cp.ratio = ratio;
          cp.skip_layers = skip;
          cp.protect_recent = p.protect_recent;
          cp.local_window = p.local_window;
          const kvnorm::CompressionConfig cc = cp.to_config(p.seed);

          kvnorm::EvalResult r;
          if (p.task == "lm") {
            r = kvnorm::eval_lm(model, corpus_text, p.chunk_len, cc, p.threads);
          } else {
            const auto samples =
                make_eval_samples(p.task, p.seed, p.samples, p.sample_len,
                                  p.key_len, {depth});
            r = kvnorm::eval_retrieval(model, samples, cc, p.threads);
          }
          csv.append_row({policy, kvnorm::fmt_float(ratio),
                          kvnorm::fmt_float(depth),
                          join_indices(parse_index_set(skip)),
                          kvnorm::fmt_float(r.accuracy),
                          r.is_lm ? kvnorm::fmt_float(r.perplexity)
                                  : std::string{},
                          r.is_lm ? kvnorm::fmt_float(r.next_token_accuracy)
                                  : std::string{},
                          std::to_string(r.num_samples),
                          std::to_string(p.seed)});
        }
      }
    }
  }
  csv.write(out_dir / "sweep.csv");
  std::cout << "wrote " << (out_dir / "sweep.csv").string() << "\n";
  return 0;
}

int run_analyze(const AnalyzeParams& p, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  kvnorm::RunManifest manifest;
  manifest.command = "analyze";
  manifest.resolved_config = json(p);
  manifest.input_digests[p.model_path] = kvnorm::file_digest(p.model_path);
  if (!p.corpus.empty()) {
    manifest.input_digests[p.corpus] = kvnorm::file_digest(p.corpus);
  }
  if (p.mode == "alr") {
    manifest.output_paths = {"alr.csv"};
    if (p.per_chunk) manifest.output_paths.push_back("alr_chunks.csv");
  } else if (p.mode == "dump") {
    manifest.output_paths = {"dump.csv"};
  } else if (p.mode == "probe") {
    manifest.output_paths = {"probe.json"};
  } else {
    throw kvnorm::ConfigError("analyze: unknown mode " + p.mode);
  }
  manifest.write(out_dir / "manifest.json");

  const kvnorm::Model model = kvnorm::load_checkpoint(p.model_path);
  if (p.corpus.empty()) {
    throw kvnorm::ConfigError("analyze requires --corpus");
  }
  const std::vector<int> text = kvnorm::tok::tokenize(kvnorm::read_file(p.corpus));

  if (p.mode == "alr") {
    if (text.size() < p.chunk_len) {
      throw kvnorm::ConfigError("analyze: corpus shorter than one chunk");
    }
    std::vector<std::vector<int>> chunks;
    for (std::size_t c = 0; c + 1 <= p.num_chunks; ++c) {
      const std::size_t off = c * p.chunk_len;
      if (off + p.chunk_len > text.size()) break;
      chunks.emplace_back(text.begin() + off, text.begin() + off + p.chunk_len);
    }
    if (chunks.empty()) {
      throw kvnorm::ConfigError("analyze: corpus shorter than one chunk");
    }
    kvnorm::AlrReport report = kvnorm::alr_heatmap(
        model, chunks, p.chunk_len, p.avg_last_steps, p.threads);
    report.corpus_id = p.corpus;
    kvnorm::CsvWriter csv({"layer", "head", "alr", "num_chunks"});
    for (std::size_t l = 0; l < report.num_layers; ++l) {
      for (std::size_t h = 0; h < report.num_heads; ++h) {
        csv.append_row({std::to_string(l), std::to_string(h),
                        kvnorm::fmt_float(report.alr_values[report.index(l, h)]),
                        std::to_string(report.num_chunks)});
      }
    }
    csv.write(out_dir / "alr.csv");
    if (p.per_chunk) {
      kvnorm::CsvWriter pc({"layer", "head", "chunk", "alr"});
      for (std::size_t l = 0; l < report.num_layers; ++l) {
        for (std::size_t h = 0; h < report.num_heads; ++h) {
          const auto& v = report.per_chunk[report.index(l, h)];
          for (std::size_t c = 0; c < v.size(); ++c) {
            pc.append_row({std::to_string(l), std::to_string(h),
                           std::to_string(c), kvnorm::fmt_float(v[c])});
          }
        }
      }
      pc.write(out_dir / "alr_chunks.csv");
    }
  } else if (p.mode == "dump") {
    if (p.length < 2 || text.size() + 1 < p.length) {
      throw kvnorm::ConfigError("analyze dump: bad --length for corpus");
    }
    std::vector<int> tokens;
    tokens.push_back(kvnorm::tok::kBos);
    tokens.insert(tokens.end(), text.begin(),
                  text.begin() + static_cast<std::ptrdiff_t>(p.length - 1));
    const auto rows = kvnorm::norm_attention_dump(model, tokens);
    kvnorm::CsvWriter csv({"layer", "head", "position", "token_id",
                           "attention_score", "key_norm"});
    for (const auto& r : rows) {
      csv.append_row({std::to_string(r.layer), std::to_string(r.head),
                      std::to_string(r.position), std::to_string(r.token_id),
                      kvnorm::fmt_float(r.attention_score),
                      kvnorm::fmt_float(r.key_norm)});
    }
    csv.write(out_dir / "dump.csv");
  } else {
    if (p.length < 2 || text.size() + 1 < p.length) {
      throw kvnorm::ConfigError("analyze probe: bad --length for corpus");
    }
    std::vector<int> tokens;
    tokens.push_back(kvnorm::tok::kBos);
    tokens.insert(tokens.end(), text.begin(),
                  text.begin() + static_cast<std::ptrdiff_t>(p.length - 1));
    std::optional<std::size_t> target;
    if (p.target >= 0) target = static_cast<std::size_t>(p.target);
    const kvnorm::ProbeMode mode = p.probe_mode == "random"
                                       ? kvnorm::ProbeMode::random_dims
                                       : kvnorm::ProbeMode::peak_dims;
    const auto res = kvnorm::dim_zero_probe(model, tokens, target, p.k_dims,
                                            mode, p.layer, p.head, p.seed);
    json out = {{"mode", kvnorm::probe_mode_name(res.mode)},
                {"zeroed_dims", res.zeroed_dims},
                {"attention_delta", res.attention_delta},
                {"k_dims", res.k_dims},
                {"layer", res.layer},
                {"head", res.head},
                {"target_position", res.target_position}};
    kvnorm::atomic_write_file(out_dir / "probe.json", out.dump(2) + "\n");
  }
  std::cout << "analyze " << p.mode << " done\n";
  return 0;
}

int run_gen_corpus(const GenCorpusParams& p, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  kvnorm::RunManifest manifest;
  manifest.command = "gen-corpus";
  manifest.resolved_config = json(p);
  manifest.output_paths = {"corpus.txt"};
  manifest.write(out_dir / "manifest.json");

  // Same lexicon/stream family the lm training task draws from.
  const auto lexicon = kvnorm::detail::lm_lexicon(p.seed);
  kvnorm::SplitMix64 rng(kvnorm::mix_seed(p.seed, 0xc0));
  std::string text;
  text.reserve(p.bytes + 16);
  while (text.size() < p.bytes) {
    text += lexicon[rng.next_below(lexicon.size())];
    text += ' ';
  }
  text.resize(p.bytes);
  kvnorm::atomic_write_file(out_dir / "corpus.txt", text);
  std::cout << "wrote " << (out_dir / "corpus.txt").string() << "\n";
  return 0;
}

int run_replay(const fs::path& manifest_path, const fs::path& out_dir) {
  json j;
  try {
    j = json::parse(kvnorm::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw kvnorm::ConfigError(std::string("replay: bad manifest: ") + e.what());
  }
  const kvnorm::RunManifest manifest = kvnorm::RunManifest::from_json(j);
  // Inputs must still match what the original run saw.
  for (const auto& [path, digest] : manifest.input_digests) {
    if (kvnorm::file_digest(path) != digest) {
      throw kvnorm::ConfigError("replay: input digest changed for " + path);
    }
  }
  if (manifest.command == "train") {
    return run_train(manifest.resolved_config.get<TrainParams>(), out_dir);
  }
  if (manifest.command == "eval") {
    return run_eval(manifest.resolved_config.get<EvalParams>(), out_dir);
  }
  if (manifest.command == "sweep") {
    return run_sweep(manifest.resolved_config.get<SweepParams>(), out_dir);
  }
  if (manifest.command == "analyze") {
    return run_analyze(manifest.resolved_config.get<AnalyzeParams>(), out_dir);
  }
  if (manifest.command == "gen-corpus") {
    return run_gen_corpus(manifest.resolved_config.get<GenCorpusParams>(),
                          out_dir);
  }
  throw kvnorm::ConfigError("replay: unknown command " + manifest.command);
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return json::parse(kvnorm::read_file(path));
  } catch (const json::exception& e) {
    throw kvnorm::ConfigError(std::string("config file: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kvnorm: KV-cache eviction experiments on toy transformers"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  app.add_option("--config", config_path, "JSON config file (flags override)")
      ->capture_default_str();
  app.add_option("--out", out_dir, "output directory")->capture_default_str();

  TrainParams tp;
  tp.seed = 0;
  EvalParams ep;
  SweepParams sp;
  AnalyzeParams ap;
  GenCorpusParams gp;
  std::string replay_manifest;

  auto* train = app.add_subcommand("train", "train a toy model");
  auto* t_layers = train->add_option("--layers", tp.layers);
  auto* t_heads = train->add_option("--heads", tp.heads);
  auto* t_dmodel = train->add_option("--d-model", tp.d_model);
  auto* t_dhead = train->add_option("--d-head", tp.d_head);
  auto* t_dff = train->add_option("--d-ff", tp.d_ff);
  auto* t_maxseq = train->add_option("--max-seq-len", tp.max_seq_len);
  auto* t_norope = train->add_flag("--no-rope", tp.no_rope);
  auto* t_mseed = train->add_option("--model-seed", tp.model_seed);
  auto* t_seed = train->add_option("--seed", tp.seed);
  auto* t_steps = train->add_option("--steps", tp.steps);
  auto* t_batch = train->add_option("--batch-size", tp.batch_size);
  auto* t_lr = train->add_option("--lr", tp.lr);
  auto* t_b1 = train->add_option("--beta1", tp.beta1);
  auto* t_b2 = train->add_option("--beta2", tp.beta2);
  auto* t_eps = train->add_option("--adam-eps", tp.adam_eps);
  auto* t_clip = train->add_option("--clip", tp.clip);
  auto* t_warmup = train->add_option("--warmup", tp.warmup);
  auto* t_task = train->add_option("--task", tp.task)
                     ->check(CLI::IsMember({"passkey", "lm"}));
  auto* t_slen = train->add_option("--sample-len", tp.sample_len);
  auto* t_minlen = train->add_option("--min-sample-len", tp.min_sample_len);
  auto* t_klen = train->add_option("--key-len", tp.key_len);
  auto* t_thr = train->add_option("--threads", tp.threads);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  auto* e_model = eval->add_option("--model", ep.model_path)->required();
  auto* e_task = eval->add_option("--task", ep.task)
                     ->check(CLI::IsMember({"passkey", "needle", "lm"}));
  auto* e_policy = eval->add_option("--policy", ep.compression.policy)
                       ->check(CLI::IsMember({"none", "l2-low", "l2-high",
                                              "random", "oracle", "fastgen"}));
  auto* e_ratio = eval->add_option("--ratio", ep.compression.ratio);
  auto* e_budget = eval->add_option("--budget", ep.compression.budget);
  auto* e_skip = eval->add_option("--skip-layers", ep.compression.skip_layers);
  auto* e_protect =
      eval->add_option("--protect-recent", ep.compression.protect_recent);
  auto* e_window =
      eval->add_option("--local-window", ep.compression.local_window);
  auto* e_nopre = eval->add_flag("--no-prefill-compression",
                                 ep.compression.no_prefill_compression);
  auto* e_nodec = eval->add_flag("--no-decode-compression",
                                 ep.compression.no_decode_compression);
  auto* e_seed = eval->add_option("--seed", ep.seed);
  auto* e_samples = eval->add_option("--samples", ep.samples);
  auto* e_slen = eval->add_option("--sample-len", ep.sample_len);
  auto* e_klen = eval->add_option("--key-len", ep.key_len);
  auto* e_depths = eval->add_option("--depths", ep.depths);
  auto* e_corpus = eval->add_option("--corpus", ep.corpus);
  auto* e_chunk = eval->add_option("--chunk-len", ep.chunk_len);
  auto* e_thr = eval->add_option("--threads", ep.threads);
  auto* e_audit = eval->add_flag("--audit-log", ep.audit_log);

  auto* sweep = app.add_subcommand("sweep", "grid of eval cells");
  auto* s_model = sweep->add_option("--model", sp.model_path)->required();
  auto* s_task = sweep->add_option("--task", sp.task)
                     ->check(CLI::IsMember({"passkey", "needle", "lm"}));
  auto* s_policies = sweep->add_option("--policies", sp.policies);
  auto* s_ratios = sweep->add_option("--ratios", sp.ratios);
  auto* s_depths = sweep->add_option("--depths", sp.depths);
  auto* s_skips = sweep->add_option("--skip-layer-sets", sp.skip_layer_sets);
  auto* s_protect = sweep->add_option("--protect-recent", sp.protect_recent);
  auto* s_window = sweep->add_option("--local-window", sp.local_window);
  auto* s_seed = sweep->add_option("--seed", sp.seed);
  auto* s_samples = sweep->add_option("--samples", sp.samples);
  auto* s_slen = sweep->add_option("--sample-len", sp.sample_len);
  auto* s_klen = sweep->add_option("--key-len", sp.key_len);
  auto* s_corpus = sweep->add_option("--corpus", sp.corpus);
  auto* s_chunk = sweep->add_option("--chunk-len", sp.chunk_len);
  auto* s_thr = sweep->add_option("--threads", sp.threads);

  auto* analyze = app.add_subcommand("analyze", "alr/dump/probe tables");
  auto* a_model = analyze->add_option("--model", ap.model_path)->required();
  auto* a_mode = analyze->add_option("--mode", ap.mode)
                     ->check(CLI::IsMember({"alr", "dump", "probe"}));
  auto* a_corpus = analyze->add_option("--corpus", ap.corpus);
  auto* a_chunk = analyze->add_option("--chunk-len", ap.chunk_len);
  auto* a_nchunks = analyze->add_option("--num-chunks", ap.num_chunks);
  auto* a_avg = analyze->add_option("--avg-last-steps", ap.avg_last_steps);
  auto* a_perchunk = analyze->add_flag("--per-chunk", ap.per_chunk);
  auto* a_length = analyze->add_option("--length", ap.length);
  auto* a_kdims = analyze->add_option("--k-dims", ap.k_dims);
  auto* a_pmode = analyze->add_option("--probe-mode", ap.probe_mode)
                      ->check(CLI::IsMember({"peak", "random"}));
  auto* a_layer = analyze->add_option("--layer", ap.layer);
  auto* a_head = analyze->add_option("--head", ap.head);
  auto* a_target = analyze->add_option("--target", ap.target);
  auto* a_seed = analyze->add_option("--seed", ap.seed);
  auto* a_thr = analyze->add_option("--threads", ap.threads);

  auto* gen = app.add_subcommand("gen-corpus", "emit synthetic lexicon text");
  auto* g_seed = gen->add_option("--seed", gp.seed);
  auto* g_bytes = gen->add_option("--bytes", gp.bytes);

  auto* replay = app.add_subcommand("replay", "re-run a recorded manifest");
  replay->add_option("--manifest", replay_manifest)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const json cfg = load_config_file(config_path);
    const std::uint64_t env_seed = default_seed_from_env();

    if (train->parsed()) {
      apply_config(t_layers, cfg, "layers", tp.layers);
      apply_config(t_heads, cfg, "heads", tp.heads);
      apply_config(t_dmodel, cfg, "d_model", tp.d_model);
      apply_config(t_dhead, cfg, "d_head", tp.d_head);
      apply_config(t_dff, cfg, "d_ff", tp.d_ff);
      apply_config(t_maxseq, cfg, "max_seq_len", tp.max_seq_len);
      apply_config(t_norope, cfg, "no_rope", tp.no_rope);
      apply_config(t_mseed, cfg, "model_seed", tp.model_seed);
      apply_config(t_seed, cfg, "seed", tp.seed);
      apply_config(t_steps, cfg, "steps", tp.steps);
      apply_config(t_batch, cfg, "batch_size", tp.batch_size);
      apply_config(t_lr, cfg, "lr", tp.lr);
      apply_config(t_b1, cfg, "beta1", tp.beta1);
      apply_config(t_b2, cfg, "beta2", tp.beta2);
      apply_config(t_eps, cfg, "adam_eps", tp.adam_eps);
      apply_config(t_clip, cfg, "clip", tp.clip);
      apply_config(t_warmup, cfg, "warmup", tp.warmup);
      apply_config(t_task, cfg, "task", tp.task);
      apply_config(t_slen, cfg, "sample_len", tp.sample_len);
      apply_config(t_minlen, cfg, "min_sample_len", tp.min_sample_len);
      apply_config(t_klen, cfg, "key_len", tp.key_len);
      apply_config(t_thr, cfg, "threads", tp.threads);
      if (t_seed->count() == 0 && !cfg.contains("seed")) tp.seed = env_seed;
      return run_train(tp, out_dir);
    }
    if (eval->parsed()) {
      apply_config(e_model, cfg, "model", ep.model_path);
      apply_config(e_task, cfg, "task", ep.task);
      apply_config(e_policy, cfg, "policy", ep.compression.policy);
      apply_config(e_ratio, cfg, "ratio", ep.compression.ratio);
      apply_config(e_budget, cfg, "budget", ep.compression.budget);
      apply_config(e_skip, cfg, "skip_layers", ep.compression.skip_layers);
      apply_config(e_protect, cfg, "protect_recent",
                   ep.compression.protect_recent);
      apply_config(e_window, cfg, "local_window", ep.compression.local_window);
      apply_config(e_nopre, cfg, "no_prefill_compression",
                   ep.compression.no_prefill_compression);
      apply_config(e_nodec, cfg, "no_decode_compression",
                   ep.compression.no_decode_compression);
      apply_config(e_seed, cfg, "seed", ep.seed);
      apply_config(e_samples, cfg, "samples", ep.samples);
      apply_config(e_slen, cfg, "sample_len", ep.sample_len);
      apply_config(e_klen, cfg, "key_len", ep.key_len);
      apply_config(e_depths, cfg, "depths", ep.depths);
      apply_config(e_corpus, cfg, "corpus", ep.corpus);
      apply_config(e_chunk, cfg, "chunk_len", ep.chunk_len);
      apply_config(e_thr, cfg, "threads", ep.threads);
      apply_config(e_audit, cfg, "audit_log", ep.audit_log);
      if (e_seed->count() == 0 && !cfg.contains("seed")) ep.seed = env_seed;
      return run_eval(ep, out_dir);
    }
    if (sweep->parsed()) {
      apply_config(s_model, cfg, "model", sp.model_path);
      apply_config(s_task, cfg, "task", sp.task);
      apply_config(s_policies, cfg, "policies", sp.policies);
      apply_config(s_ratios, cfg, "ratios", sp.ratios);
      apply_config(s_depths, cfg, "depths", sp.depths);
      apply_config(s_skips, cfg, "skip_layer_sets", sp.skip_layer_sets);
      apply_config(s_protect, cfg, "protect_recent", sp.protect_recent);
      apply_config(s_window, cfg, "local_window", sp.local_window);
      apply_config(s_seed, cfg, "seed", sp.seed);
      apply_config(s_samples, cfg, "samples", sp.samples);
      apply_config(s_slen, cfg, "sample_len", sp.sample_len);
      apply_config(s_klen, cfg, "key_len", sp.key_len);
      apply_config(s_corpus, cfg, "corpus", sp.corpus);
      apply_config(s_chunk, cfg, "chunk_len", sp.chunk_len);
      apply_config(s_thr, cfg, "threads", sp.threads);
      if (s_seed->count() == 0 && !cfg.contains("seed")) sp.seed = env_seed;
      return run_sweep(sp, out_dir);
    }
    if (analyze->parsed()) {
      apply_config(a_model, cfg, "model", ap.model_path);
      apply_config(a_mode, cfg, "mode", ap.mode);
      apply_config(a_corpus, cfg, "corpus", ap.corpus);
      apply_config(a_chunk, cfg, "chunk_len", ap.chunk_len);
      apply_config(a_nchunks, cfg, "num_chunks", ap.num_chunks);
      apply_config(a_avg, cfg, "avg_last_steps", ap.avg_last_steps);
      apply_config(a_perchunk, cfg, "per_chunk", ap.per_chunk);
      apply_config(a_length, cfg, "length", ap.length);
      apply_config(a_kdims, cfg, "k_dims", ap.k_dims);
      apply_config(a_pmode, cfg, "probe_mode", ap.probe_mode);
      apply_config(a_layer, cfg, "layer", ap.layer);
      apply_config(a_head, cfg, "head", ap.head);
      apply_config(a_target, cfg, "target", ap.target);
      apply_config(a_seed, cfg, "seed", ap.seed);
      apply_config(a_thr, cfg, "threads", ap.threads);
      if (a_seed->count() == 0 && !cfg.contains("seed")) ap.seed = env_seed;
      return run_analyze(ap, out_dir);
    }
    if (gen->parsed()) {
      apply_config(g_seed, cfg, "seed", gp.seed);
      apply_config(g_bytes, cfg, "bytes", gp.bytes);
      if (g_seed->count() == 0 && !cfg.contains("seed")) gp.seed = env_seed;
      return run_gen_corpus(gp, out_dir);
    }
    if (replay->parsed()) {
      return run_replay(replay_manifest, out_dir);
    }
  } catch (const kvnorm::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const kvnorm::ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const kvnorm::CapacityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const kvnorm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
