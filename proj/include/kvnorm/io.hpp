// Copyright 2026 the kvnorm authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvnorm/errors.hpp"

namespace kvnorm {

inline constexpr const char* kToolVersion = "0.1.0";

// Round-trippable, locale-independent float formatting; identical inputs
// give identical bytes.
inline std::string fmt_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string fmt_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

// Writes via a temp file in the same directory plus rename, so readers never
// observe partial contents.
inline void atomic_write_file(const std::filesystem::path& path,
                              const std::string& content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("cannot open for writing: " + tmp.string());
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw ConfigError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open: " + path.string());
  std::string content((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
  return content;
}

// FNV-1a 64-bit content digest, hex-encoded.
inline std::string fnv1a64_hex(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

inline std::string file_digest(const std::filesystem::path& path) {
  return fnv1a64_hex(read_file(path));
}

// Minimal CSV emitter: mandatory header, comma delimiter, UTF-8.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) {
    append_row(header);
  }

  void append_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ += ',';
      out_ += cells[i];
    }
    out_ += '\n';
  }

  const std::string& str() const { return out_; }

  void write(const std::filesystem::path& path) const {
    atomic_write_file(path, out_);
  }

 private:
  std::string out_;
};

// Everything needed to replay a command: written to the output directory
// before any result file.
struct RunManifest {
  std::string command;
  nlohmann::json resolved_config;
  std::string tool_version = kToolVersion;
  std::map<std::string, std::string> input_digests;  // path -> fnv1a64
  std::vector<std::string> output_paths;

  nlohmann::json to_json() const {
    return nlohmann::json{{"command", command},
                          {"resolved_config", resolved_config},
                          {"tool_version", tool_version},
                          {"input_digests", input_digests},
                          {"output_paths", output_paths}};
  }

  static RunManifest from_json(const nlohmann::json& j) {
    RunManifest m;
    j.at("command").get_to(m.command);
    m.resolved_config = j.at("resolved_config");
    j.at("tool_version").get_to(m.tool_version);
    if (j.contains("input_digests")) {
      j.at("input_digests").get_to(m.input_digests);
    }
    if (j.contains("output_paths")) {
      j.at("output_paths").get_to(m.output_paths);
    }
    return m;
  }

  void write(const std::filesystem::path& path) const {
    atomic_write_file(path, to_json().dump(2) + "\n");
  }
};

}  // namespace kvnorm
