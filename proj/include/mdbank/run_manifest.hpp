#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace mdbank {

inline constexpr const char* kCodeVersion = "mdbank 0.1.0";

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::string dataset_fingerprint;
  std::string code_version = kCodeVersion;
  std::string started_at;
  std::string finished_at;
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

/// SHA-256 over every file under `root` (relative path and bytes, sorted by path).
std::string dataset_fingerprint(const std::filesystem::path& root);
std::string utc_timestamp();

}  // namespace mdbank
