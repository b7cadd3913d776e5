#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "icod/incremental.hpp"
#include "icod/model.hpp"

namespace icod {

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  std::int64_t step = 0;
  int epoch = -1;  // -1 for a final checkpoint
  std::string config_hash;
  std::string mode;  // "icod", "baseline", "finetune", ...
};

struct Checkpoint {
  Model model;
  CheckpointMeta meta;
};

/// Writes <path> (JSON manifest) and <path>.bin (little-endian f64 blob).
/// The manifest records name, group, shape, dtype, byte offset and byte
/// length of every array, and the SHA-256 of the blob.
void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::string& path);

/// Verifies version, blob length and hash before building any parameter.
/// Throws VersionError, IntegrityError (hash mismatch, truncated blob) or
/// ParseError (malformed manifest).
Checkpoint load_checkpoint(const std::string& path);

/// EWC anchor and Fisher diagonal in the same manifest + blob format.
void save_ewc_state(const EWCState& state, const std::string& path);
EWCState load_ewc_state(const std::string& path);

}  // namespace icod
