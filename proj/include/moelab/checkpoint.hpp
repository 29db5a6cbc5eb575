// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "moelab/model.hpp"

namespace moelab {

inline constexpr char kCheckpointMagic[8] = {'M', 'O', 'E', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Writes the model in the versioned binary layout described in
/// docs/checkpoint_format.md. Round trips are bit-exact.
void save_checkpoint(const std::filesystem::path& path, MoEModel& model);
MoEModel load_checkpoint(const std::filesystem::path& path);

/// In-memory variants of the same byte layout.
std::vector<char> serialize_checkpoint(MoEModel& model);
MoEModel deserialize_checkpoint(const std::vector<char>& bytes);

}  // namespace moelab
