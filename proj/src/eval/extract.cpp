#include <chrono>
#include <cmath>

#include "jlml/errors.hpp"
#include "jlml/eval.hpp"

namespace jlml {

std::string branch_name(Branch branch) {
  switch (branch) {
    case Branch::global: return "global";
    case Branch::local: return "local";
    case Branch::joint: break;
  }
  return "joint";
}

void normalize_segments(std::span<float> feature, std::size_t global_dim) {
  if (global_dim > feature.size()) throw DimensionError("normalize_segments: global segment exceeds the feature");
  for (auto seg : {feature.subspan(0, global_dim), feature.subspan(global_dim)}) {
    double sq = 0;
    for (float v : seg) sq += static_cast<double>(v) * v;
    if (sq == 0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    for (float& v : seg) v = static_cast<float>(v * inv);
  }
}

FeatureSet select_branch(const FeatureSet& features, Branch branch) {
  if (branch == Branch::joint) return features;
  FeatureSet out = features;
  const bool global = branch == Branch::global;
  out.global_dim = global ? features.global_dim : 0;
  out.local_dim = global ? 0 : features.local_dim;
  for (auto& r : out.records) {
    if (global) r.feature.resize(features.global_dim);
    else r.feature.erase(r.feature.begin(), r.feature.begin() + static_cast<long>(features.global_dim));
  }
  return out;
}

ExtractResult extract(const JlmlModel& model, const IdentityDataset& images, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("extract: batch_size must be positive");
  images.check();
  const ModelConfig& c = model.config();
  if (images.size() > 0 && (images.height != c.input_height || images.width != c.input_width)) {
    throw DimensionError("extract: images are " + std::to_string(images.height) + "x" + std::to_string(images.width) +
                         " but the model expects " + std::to_string(c.input_height) + "x" +
                         std::to_string(c.input_width));
  }
  ExtractResult result;
  FeatureSet& fs = result.features;
  fs.global_dim = c.global_feature_dim;
  fs.local_dim = c.local_feature_dim;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t first = 0; first < images.size(); first += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = first; i < std::min(images.size(), first + batch_size); ++i) idx.push_back(i);
    Tensor batch = images.gather(idx);
    if (model.dtype() != DType::f32) batch = batch.to(model.dtype());
    const ForwardOutput out = model.forward(batch, Mode::eval);
    const std::vector<double> g = out.global_feature.to_doubles(), l = out.local_feature.to_doubles();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      FeatureRecord rec;
      rec.id = images.ids[idx[r]];
      rec.camera = images.cameras[idx[r]];
      rec.source = std::to_string(idx[r]);
      rec.feature.reserve(fs.dim());
      for (std::size_t k = 0; k < fs.global_dim; ++k) rec.feature.push_back(static_cast<float>(g[r * fs.global_dim + k]));
      for (std::size_t k = 0; k < fs.local_dim; ++k) rec.feature.push_back(static_cast<float>(l[r * fs.local_dim + k]));
      normalize_segments(rec.feature, fs.global_dim);
      fs.records.push_back(std::move(rec));
    }
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.images_per_second = result.seconds > 0 ? static_cast<double>(images.size()) / result.seconds : 0.0;
  return result;
}

}  // namespace jlml
