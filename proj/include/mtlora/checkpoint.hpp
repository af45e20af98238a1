// Copyright 2026 The MTLoRA Desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mtlora/config.hpp"
#include "mtlora/model.hpp"

namespace mtlora {

// File layout: "MTLR", u32 format version, u64 manifest length, the JSON
// manifest, then every tensor as raw little-endian f32 in manifest order.
// Offsets are relative to the start of the data section.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::string dtype = "f32";
  std::uint64_t offset = 0;
  // True for a base weight that already includes its shared adapter.
  bool merged = false;
};

struct CheckpointManifest {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json config;  // RunConfig echo
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  bool merged = false;
  std::vector<CheckpointEntry> entries;
};

struct LoadedCheckpoint {
  RunConfig run;
  CheckpointManifest manifest;
  std::unique_ptr<MultiTaskModel<float>> model;
};

// Stores every parameter as is. `run.model` is replaced by the model's own
// configuration. Throws IoError when the file cannot be written.
void save_checkpoint(MultiTaskModel<float>& model, const std::string& path, RunConfig run = {},
                     std::int64_t steps = 0);

// Folds each shared adapter into its base weight wherever the layer carries
// no task adapters; those shared factors are not stored. Task adapters, and
// the shared adapter of layers that also branch per task, stay separate.
// The model itself is left unchanged.
void export_merged(MultiTaskModel<float>& model, const std::string& path, RunConfig run = {},
                   std::int64_t steps = 0);

// Throws IoError for an unreadable file and FormatError for a malformed one.
CheckpointManifest read_manifest(const std::string& path);

// Rebuilds the model from the configuration echo and fills every parameter.
// Missing, extra or mis-shaped entries are format errors.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mtlora
