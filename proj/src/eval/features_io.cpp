#include <sstream>

#include "jlml/binary_io.hpp"
#include "jlml/errors.hpp"
#include "jlml/eval.hpp"

namespace jlml {

namespace {

constexpr std::string_view kMagic = "JLMF";

std::filesystem::path sidecar(const std::filesystem::path& path, const char* suffix) {
  return std::filesystem::path(path.string() + suffix);
}

}  // namespace

std::string encode_features(const FeatureSet& features) {
  std::string out(kMagic);
  binary::put<std::uint16_t>(out, kFeatureVersion);
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(features.records.size()));
  binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(features.dim()));
  for (const auto& r : features.records) {
    if (r.feature.size() != features.dim()) throw DimensionError("encode_features: record has the wrong dimension");
    for (float v : r.feature) binary::put<float>(out, v);
  }
  return out;
}

FeatureSet decode_features(std::string_view bytes) {
  binary::Reader in(bytes, "feature file");
  if (bytes.size() < kMagic.size() || in.take(kMagic.size()) != kMagic) {
    throw FormatError("feature file: bad magic (not a JLMF file)");
  }
  const auto version = in.get<std::uint16_t>();
  if (version != kFeatureVersion) throw FormatError("feature file: unsupported version " + std::to_string(version));
  const std::size_t count = in.get<std::uint32_t>(), dim = in.get<std::uint32_t>();
  if (dim != 0 && count > (bytes.size() - in.position()) / (dim * sizeof(float))) {
    throw FormatError("feature file: truncated (" + std::to_string(count) + " rows of " + std::to_string(dim) +
                      " declared)");
  }
  FeatureSet fs;
  fs.global_dim = dim;
  fs.records.resize(count);
  for (auto& r : fs.records) {
    r.feature.resize(dim);
    for (float& v : r.feature) v = in.get<float>();
  }
  if (!in.done()) throw FormatError("feature file: trailing bytes");
  return fs;
}

void write_features(const std::filesystem::path& path, const FeatureSet& features, const KeyValues& provenance) {
  binary::write_file(path, encode_features(features));
  std::string manifest = "index,id,camera,source_path\n";
  for (std::size_t i = 0; i < features.records.size(); ++i) {
    const auto& r = features.records[i];
    manifest += std::to_string(i) + "," + std::to_string(r.id) + "," + std::to_string(r.camera) + "," + r.source + "\n";
  }
  binary::write_file(sidecar(path, ".manifest.csv"), manifest);
  KeyValues kv{{"features.global_dim", std::to_string(features.global_dim)},
               {"features.local_dim", std::to_string(features.local_dim)}};
  kv.insert(kv.end(), provenance.begin(), provenance.end());
  binary::write_file(sidecar(path, ".config"), to_text(kv));
}

FeatureSet read_features(const std::filesystem::path& path) {
  FeatureSet fs = decode_features(binary::read_file(path));
  std::size_t global_dim = fs.global_dim, local_dim = 0;
  bool have_dims = false;
  for (const auto& [k, v] : parse_key_values(binary::read_file(sidecar(path, ".config")))) {
    if (k == "features.global_dim") global_dim = parse_size(k, v), have_dims = true;
    if (k == "features.local_dim") local_dim = parse_size(k, v);
  }
  if (!have_dims || global_dim + local_dim != fs.global_dim) {
    throw FormatError("feature file: config sidecar does not describe a " + std::to_string(fs.global_dim) +
                      "-D layout");
  }
  fs.global_dim = global_dim;
  fs.local_dim = local_dim;

  std::stringstream lines(binary::read_file(sidecar(path, ".manifest.csv")));
  std::string line;
  if (!std::getline(lines, line) || line != "index,id,camera,source_path") {
    throw FormatError("feature manifest: missing or wrong header");
  }
  std::size_t row = 0;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::size_t a = line.find(','), b = line.find(',', a + 1), c = line.find(',', b + 1);
    if (a == std::string::npos || b == std::string::npos || c == std::string::npos) {
      throw FormatError("feature manifest line " + std::to_string(row + 2) + ": expected 4 fields");
    }
    if (row >= fs.records.size()) throw FormatError("feature manifest: more rows than features");
    try {
      if (parse_size("index", line.substr(0, a)) != row) throw FormatError("feature manifest: indices out of order");
      fs.records[row].id = parse_size("id", line.substr(a + 1, b - a - 1));
      fs.records[row].camera = parse_size("camera", line.substr(b + 1, c - b - 1));
    } catch (const ConfigError& e) {
      throw FormatError(std::string("feature manifest: ") + e.what());
    }
    fs.records[row].source = line.substr(c + 1);
    ++row;
  }
  if (row != fs.records.size()) throw FormatError("feature manifest: fewer rows than features");
  return fs;
}

}  // namespace jlml
