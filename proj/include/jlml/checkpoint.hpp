#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "jlml/model.hpp"

namespace jlml {

inline constexpr std::uint16_t kCheckpointVersion = 1;

// Layout: "JLMC", u16 version, u32 length + key=value model config, then one
// record per tensor: u16 name length, name, u8 rank, u32 dims, f32 data.
// All integers and floats are little-endian.
std::string encode_checkpoint(const JlmlModel& model);
// Throws FormatError on bad magic or version, truncation, unknown or missing
// tensors and shape disagreement.
JlmlModel decode_checkpoint(std::string_view bytes);

void save_checkpoint(const JlmlModel& model, const std::filesystem::path& path);
JlmlModel load_checkpoint(const std::filesystem::path& path);

}  // namespace jlml
