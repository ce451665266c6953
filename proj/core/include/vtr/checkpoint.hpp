// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>

#include "vtr/model.hpp"

namespace vtr {

struct LoadedCheckpoint {
  ModelState state;
  AblationFlags flags;
};

/// Self-describing binary container: magic, format version, a JSON
/// config record (model config + ablation flags), then named parameter
/// entries as (name, rank, dims, raw little-endian 64-bit floats).
/// Round-trips are bitwise exact.
void save_checkpoint(const std::filesystem::path& path,
                     const ModelState& state, const AblationFlags& flags);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 bool requires_grad = true);

}  // namespace vtr
