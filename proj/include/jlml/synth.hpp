#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "jlml/kv.hpp"
#include "jlml/tensor.hpp"

namespace jlml {

enum class Split { none, train, probe, gallery };

std::string split_name(Split split);
Split parse_split(std::string_view text);

struct SynthConfig {
  std::size_t num_ids = 16;
  std::size_t cameras = 2;
  std::size_t images_per_id_per_cam = 4;
  std::size_t height = 64;
  std::size_t width = 64;
  double global_cue_strength = 1.0;  // how far identity palettes spread from grey
  double local_cue_strength = 1.0;   // contrast of the per-band motifs
  std::size_t misalign_max_shift = 0;  // vertical shift in pixels, < height / 4
  double occlusion_prob = 0.0;
  double occlusion_max_frac = 0.5;  // of the image area
  double noise_sigma = 0.03;
  std::uint64_t seed = 0;

  // Throws ConfigError.
  void validate() const;
  KeyValues to_key_values() const;
  bool apply(std::string_view key, std::string_view value);
  bool operator==(const SynthConfig&) const = default;
};

// Images with identity labels (1-based), camera ids (1-based) and split tags.
struct IdentityDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  Tensor images;  // N x 3 x H x W, f32
  std::vector<std::size_t> ids;
  std::vector<std::size_t> cameras;
  std::vector<Split> splits;

  std::size_t size() const { return ids.size(); }
  // Distinct identities in ascending order.
  std::vector<std::size_t> identity_set() const;
  IdentityDataset subset(const std::vector<std::size_t>& indices) const;
  // Stacks the given images into a batch.
  Tensor gather(const std::vector<std::size_t>& indices) const;
  void check() const;
};

// Every image is drawn from a generator keyed by (seed, id, camera, shot),
// so the dataset is bit-identical for a given config.
IdentityDataset generate(const SynthConfig& config);

// Where a single image's nuisance factors landed; exposed for tests.
struct ImageFactors {
  int shift = 0;
  bool occluded = false;
  std::size_t occ_top = 0, occ_left = 0, occ_h = 0, occ_w = 0;
};
ImageFactors image_factors(const SynthConfig& config, std::size_t id, std::size_t camera, std::size_t shot);

struct DatasetSplit {
  IdentityDataset train;
  IdentityDataset probe;
  IdentityDataset gallery;
};

// Identity-disjoint split. A random round(train_frac * n_id) identities go
// to training; for each test identity one random camera supplies the
// probes and the remaining cameras the gallery. Trial t uses seed + t.
DatasetSplit split(const IdentityDataset& dataset, double train_frac, std::uint64_t seed);
// Tags every image of `dataset` with its split (same assignment as above).
IdentityDataset tag_splits(const IdentityDataset& dataset, double train_frac, std::uint64_t seed);
// Recovers the three parts of an already tagged dataset.
DatasetSplit by_tag(const IdentityDataset& dataset);

}  // namespace jlml
