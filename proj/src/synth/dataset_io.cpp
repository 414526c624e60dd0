#include "jlml/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <sstream>

#include "jlml/binary_io.hpp"
#include "jlml/errors.hpp"

namespace jlml {

ImageFormat parse_image_format(std::string_view text) {
  if (text == "jlmi" || text == "raw") return ImageFormat::jlmi;
  if (text == "ppm") return ImageFormat::ppm;
  throw ConfigError("unknown image format '" + std::string(text) + "' (expected jlmi or ppm)");
}

namespace {

constexpr std::string_view kImageMagic = "JLMI";

struct ImageView {
  std::size_t h, w;
  const float* data;
};

ImageView image_view(const Tensor& image) {
  if (image.dtype() != DType::f32) throw DimensionError("image must be 32-bit");
  const Shape& s = image.shape();
  if (s.size() == 3 && s[0] == 3) return {s[1], s[2], image.data<float>().data()};
  if (s.size() == 4 && s[0] == 1 && s[1] == 3) return {s[2], s[3], image.data<float>().data()};
  throw DimensionError("image must be 3 x H x W, got " + shape_str(s));
}

std::size_t ppm_number(std::string_view bytes, std::size_t& pos) {
  for (;;) {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t v = 0, digits = 0;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
    v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
    ++pos;
    if (++digits > 9) throw FormatError("ppm: header number too large");
  }
  if (digits == 0) throw FormatError("ppm: malformed header");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string encode_jlmi(const Tensor& image) {
  const ImageView v = image_view(image);
  std::string out(kImageMagic);
  binary::put<std::uint32_t>(out, 3);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.h));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(v.w));
  for (std::size_t i = 0; i < 3 * v.h * v.w; ++i) binary::put<float>(out, v.data[i]);
  return out;
}

std::string encode_ppm(const Tensor& image) {
  const ImageView v = image_view(image);
  std::string out = "P6\n" + std::to_string(v.w) + " " + std::to_string(v.h) + "\n255\n";
  const std::size_t plane = v.h * v.w;
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t k = 0; k < 3; ++k) {
      const double x = std::clamp(static_cast<double>(v.data[k * plane + p]), 0.0, 1.0);
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(x * 255.0))));
    }
  }
  return out;
}

Tensor decode_image(std::string_view bytes) {
  if (bytes.substr(0, kImageMagic.size()) == kImageMagic) {
    binary::Reader in(bytes, "image");
    in.take(kImageMagic.size());
    const std::size_t c = in.get<std::uint32_t>(), h = in.get<std::uint32_t>(), w = in.get<std::uint32_t>();
    if (c != 3) throw FormatError("image: expected 3 channels, found " + std::to_string(c));
    if (h == 0 || w == 0 || h * w > (1u << 28)) throw FormatError("image: implausible size");
    Tensor out = Tensor::zeros({3, h, w}, DType::f32);
    for (float& x : out.data<float>()) x = in.get<float>();
    if (!in.done()) throw FormatError("image: trailing bytes");
    return out;
  }
  if (bytes.substr(0, 2) == "P6") {
    std::size_t pos = 2;
    const std::size_t w = ppm_number(bytes, pos), h = ppm_number(bytes, pos), maxval = ppm_number(bytes, pos);
    if (maxval == 0 || maxval > 255) throw FormatError("ppm: only 8-bit images are supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
      throw FormatError("ppm: malformed header");
    }
    ++pos;
    if (h == 0 || w == 0 || bytes.size() - pos != 3 * h * w) throw FormatError("ppm: pixel data has the wrong size");
    Tensor out = Tensor::zeros({3, h, w}, DType::f32);
    auto d = out.data<float>();
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t k = 0; k < 3; ++k)
        d[k * h * w + p] = static_cast<float>(static_cast<unsigned char>(bytes[pos + 3 * p + k])) /
                           static_cast<float>(maxval);
    return out;
  }
  throw FormatError("image: unrecognised format (expected JLMI or P6)");
}

void write_dataset(const std::filesystem::path& dir, const IdentityDataset& dataset, ImageFormat format,
                   const KeyValues& provenance) {
  dataset.check();
  std::filesystem::create_directories(dir / "images");
  std::string manifest = "index,id,camera,split,path\n";
  const char* ext = format == ImageFormat::jlmi ? ".jlmi" : ".ppm";
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu", i);
    const std::string rel = std::string("images/") + name + ext;
    const Tensor image = dataset.gather({i});
    binary::write_file(dir / rel, format == ImageFormat::jlmi ? encode_jlmi(image) : encode_ppm(image));
    manifest += std::to_string(i) + "," + std::to_string(dataset.ids[i]) + "," + std::to_string(dataset.cameras[i]) +
                "," + split_name(dataset.splits[i]) + "," + rel + "\n";
  }
  binary::write_file(dir / "manifest.csv", manifest);
  binary::write_file(dir / "config.txt", to_text(provenance));
}

KeyValues read_dataset_config(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "config.txt")) return {};
  return parse_key_values(binary::read_file(dir / "config.txt"));
}

IdentityDataset read_dataset(const std::filesystem::path& dir) {
  const std::string manifest = binary::read_file(dir / "manifest.csv");
  std::stringstream lines(manifest);
  std::string line;
  if (!std::getline(lines, line) || line != "index,id,camera,split,path") {
    throw FormatError("manifest: missing or wrong header in " + (dir / "manifest.csv").string());
  }
  IdentityDataset ds;
  std::vector<Tensor> images;
  std::size_t row = 1;
  while (std::getline(lines, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 5) throw FormatError("manifest line " + std::to_string(row) + ": expected 5 fields");
    try {
      if (parse_size("index", cells[0]) != images.size()) {
        throw FormatError("manifest line " + std::to_string(row) + ": indices must be consecutive from 0");
      }
      ds.ids.push_back(parse_size("id", cells[1]));
      ds.cameras.push_back(parse_size("camera", cells[2]));
    } catch (const ConfigError& e) {
      throw FormatError("manifest line " + std::to_string(row) + ": " + e.what());
    }
    ds.splits.push_back(parse_split(cells[3]));
    Tensor img = decode_image(binary::read_file(dir / cells[4]));
    if (images.empty()) {
      ds.height = img.dim(1);
      ds.width = img.dim(2);
    } else if (img.dim(1) != ds.height || img.dim(2) != ds.width) {
      throw FormatError("manifest line " + std::to_string(row) + ": image size differs from the first image");
    }
    images.push_back(std::move(img));
  }
  ds.images = Tensor::zeros({images.size(), 3, ds.height, ds.width}, DType::f32);
  const std::size_t plane = 3 * ds.height * ds.width;
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::memcpy(ds.images.data<float>().data() + i * plane, images[i].data<float>().data(), plane * sizeof(float));
  }
  return ds;
}

}  // namespace jlml
