#include "jlml/checkpoint.hpp"

#include <limits>
#include <map>

#include "jlml/binary_io.hpp"
#include "jlml/errors.hpp"

namespace jlml {

namespace {
constexpr std::string_view kMagic = "JLMC";
}

std::string encode_checkpoint(const JlmlModel& model) {
  std::string out(kMagic);
  binary::put<std::uint16_t>(out, kCheckpointVersion);
  const std::string config = to_text(model.config().to_key_values());
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  for (const auto& [name, tensor] : model.state()) {
    binary::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    binary::put<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    const Tensor f = tensor.to(DType::f32);
    for (float v : f.data<float>()) binary::put<float>(out, v);
  }
  return out;
}

JlmlModel decode_checkpoint(std::string_view bytes) {
  binary::Reader in(bytes, "checkpoint");
  if (bytes.size() < kMagic.size() || in.take(kMagic.size()) != kMagic) {
    throw FormatError("checkpoint: bad magic (not a JLMC file)");
  }
  const auto version = in.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto config_len = in.get<std::uint32_t>();
  ModelConfig config;
  try {
    config = ModelConfig::from_key_values(parse_key_values(in.take(config_len)));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad config block: ") + e.what());
  }
  JlmlModel model = JlmlModel::build(config, 0, DType::f32);

  std::map<std::string, Tensor, std::less<>> slots;
  for (const auto& [name, tensor] : model.state()) slots.emplace(name, tensor);
  std::size_t loaded = 0;
  while (!in.done()) {
    const auto name_len = in.get<std::uint16_t>();
    const std::string name(in.take(name_len));
    const auto rank = in.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint32_t>();
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint: unknown tensor '" + name + "'");
    Tensor& dst = it->second;
    if (!dst.defined()) throw FormatError("checkpoint: tensor '" + name + "' appears twice");
    if (shape != dst.shape()) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", config expects " +
                        shape_str(dst.shape()));
    }
    const std::size_t n = shape_numel(shape);
    if (n > (bytes.size() - in.position()) / sizeof(float)) {
      throw FormatError("checkpoint: truncated data for tensor '" + name + "'");
    }
    auto values = dst.data<float>();
    for (std::size_t i = 0; i < n; ++i) values[i] = in.get<float>();
    dst = Tensor();
    ++loaded;
  }
  if (loaded != slots.size()) {
    throw FormatError("checkpoint: " + std::to_string(slots.size() - loaded) + " tensors missing (truncated file?)");
  }
  return model;
}

void save_checkpoint(const JlmlModel& model, const std::filesystem::path& path) {
  binary::write_file(path, encode_checkpoint(model));
}

JlmlModel load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(binary::read_file(path)); }

}  // namespace jlml
