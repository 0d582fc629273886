#pragma once

#include <filesystem>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "mdbank/params.hpp"

namespace mdbank {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ParamStore params;
  nlohmann::json config;  // echo of the configuration that produced the weights
};

/// Single-file archive: magic, JSON header (config echo plus a tensor index of
/// names, shapes and offsets), then raw little-endian float64 data. Written to
/// a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const nlohmann::json& config);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Copies every tensor of `into` from the checkpoint by name, failing on any
/// missing name or shape mismatch.
void load_params_strict(const Checkpoint& ckpt, ParamStore& into, const std::string& prefix = "");

/// Writes `text` to `path` through a temporary file plus rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

}  // namespace mdbank
