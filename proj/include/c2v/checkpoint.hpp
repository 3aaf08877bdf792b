#pragma once

#include "c2v/encoder.hpp"
#include "c2v/targets.hpp"

#include <map>
#include <optional>
#include <string>

namespace c2v {

/// Everything needed to resume training or to run a frozen encoder.
///
/// File layout (little-endian): magic "C2VK", u32 version, length-prefixed
/// config text (`key=value` lines, encoder keys plus `train.*` keys), u64
/// step, parameter tensors as (name, rows, cols, f32 values), then optional
/// optimizer and teacher sections, each behind a presence byte.
struct Checkpoint {
    EncoderConfig encoder;
    std::map<std::string, std::string> train_config;
    std::uint64_t step = 0;
    EncoderParams<float> params;
    std::optional<AdamState<float>> optimizer;
    std::optional<TeacherState<float>> teacher;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace c2v
