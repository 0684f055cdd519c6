// Copyright (C) 2026 The partsmith Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Provenance record written next to every CLI output. Manifests chain through
// `parents`, each naming an upstream manifest and its checksum.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partsmith/checksum.hpp"
#include "partsmith/error.hpp"
#include "partsmith/psfm.hpp"

namespace partsmith {

inline constexpr const char* kRunManifestFile = "run-manifest.json";

struct FileDigest {
  std::string path;
  std::string sha256;
};

struct RunManifest {
  std::string command;
  std::vector<std::string> args;
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json config = nlohmann::json::object();
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> artifacts;  // relative to the manifest directory
  std::vector<FileDigest> parents;    // upstream manifests

  std::string config_hash() const { return sha256_hex(config.dump()); }
};

inline nlohmann::json to_json(const std::vector<FileDigest>& files) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& f : files) out.push_back({{"path", f.path}, {"sha256", f.sha256}});
  return out;
}

inline std::vector<FileDigest> digests_from_json(const nlohmann::json& j) {
  std::vector<FileDigest> out;
  for (const auto& f : j) out.push_back({f.at("path").get<std::string>(), f.at("sha256").get<std::string>()});
  return out;
}

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"format", "partsmith-run"},
          {"version", 1},
          {"command", m.command},
          {"args", m.args},
          {"seeds", m.seeds},
          {"config", m.config},
          {"config_hash", m.config_hash()},
          {"inputs", to_json(m.inputs)},
          {"artifacts", to_json(m.artifacts)},
          {"parents", to_json(m.parents)}};
}

inline RunManifest read_run_manifest(const std::filesystem::path& path) {
  const std::filesystem::path file = std::filesystem::is_directory(path) ? path / kRunManifestFile : path;
  require(std::filesystem::exists(file), ErrorKind::validation, "no run manifest at " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(psfm::read_file_bytes(file));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, "malformed run manifest " + file.string() + ": " + e.what());
  }
  require(j.value("format", "") == "partsmith-run", ErrorKind::format, file.string() + " is not a run manifest");
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.args = j.at("args").get<std::vector<std::string>>();
  m.seeds = j.at("seeds");
  m.config = j.at("config");
  m.inputs = digests_from_json(j.at("inputs"));
  m.artifacts = digests_from_json(j.at("artifacts"));
  m.parents = digests_from_json(j.at("parents"));
  return m;
}

/// Every regular file under `dir` except run manifests, sorted by relative path.
inline std::vector<FileDigest> digest_tree(const std::filesystem::path& dir) {
  std::vector<FileDigest> out;
  if (std::filesystem::is_regular_file(dir)) return {{dir.filename().string(), file_sha256(dir)}};
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == kRunManifestFile) continue;
    out.push_back({std::filesystem::relative(e.path(), dir).generic_string(), file_sha256(e.path())});
  }
  std::sort(out.begin(), out.end(), [](const FileDigest& a, const FileDigest& b) { return a.path < b.path; });
  return out;
}

/// Adds `dir`'s manifest as a parent when one exists.
inline void link_parent(RunManifest& m, const std::filesystem::path& dir) {
  const auto file = (std::filesystem::is_directory(dir) ? dir : dir.parent_path()) / kRunManifestFile;
  if (std::filesystem::exists(file)) m.parents.push_back({std::filesystem::absolute(file).lexically_normal().string(), file_sha256(file)});
}

/// Digests the artifacts under `out_dir` and writes the manifest there.
inline std::filesystem::path write_run_manifest(const std::filesystem::path& out_dir, RunManifest m) {
  std::filesystem::create_directories(out_dir);
  m.artifacts = digest_tree(out_dir);
  const auto path = out_dir / kRunManifestFile;
  psfm::write_file_bytes(path, to_json(m).dump(2) + "\n");
  return path;
}

/// Re-hashes recorded artifacts; returns the paths whose content changed or vanished.
inline std::vector<std::string> verify_run_manifest(const std::filesystem::path& out_dir) {
  const RunManifest m = read_run_manifest(out_dir);
  std::vector<std::string> bad;
  for (const auto& a : m.artifacts) {
    const auto p = out_dir / a.path;
    if (!std::filesystem::exists(p) || file_sha256(p) != a.sha256) bad.push_back(a.path);
  }
  return bad;
}

}  // namespace partsmith
