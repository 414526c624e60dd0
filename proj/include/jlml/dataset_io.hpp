#pragma once

#include <filesystem>

#include "jlml/kv.hpp"
#include "jlml/synth.hpp"

namespace jlml {

enum class ImageFormat { jlmi, ppm };

ImageFormat parse_image_format(std::string_view text);

// Raw image: "JLMI", u32 C, u32 H, u32 W, then C*H*W f32 values (CHW).
std::string encode_jlmi(const Tensor& image);  // 3 x H x W or 1 x 3 x H x W
// 8-bit binary PPM (P6); values are clamped to [0, 1] and rounded.
std::string encode_ppm(const Tensor& image);
// Accepts either encoding; returns a 3 x H x W f32 tensor.
Tensor decode_image(std::string_view bytes);

// Writes manifest.csv (index,id,camera,split,path), one file per image under
// images/, and config.txt with the given provenance pairs.
void write_dataset(const std::filesystem::path& dir, const IdentityDataset& dataset, ImageFormat format,
                   const KeyValues& provenance);
// Throws FormatError on malformed manifests or images, IoError on missing files.
IdentityDataset read_dataset(const std::filesystem::path& dir);
KeyValues read_dataset_config(const std::filesystem::path& dir);

}  // namespace jlml
