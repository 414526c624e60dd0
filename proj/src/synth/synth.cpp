#include "jlml/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <set>

#include "jlml/errors.hpp"

namespace jlml {

std::string split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::probe: return "probe";
    case Split::gallery: return "gallery";
    case Split::none: break;
  }
  return "none";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "probe") return Split::probe;
  if (text == "gallery") return Split::gallery;
  if (text == "none") return Split::none;
  throw FormatError("unknown split tag '" + std::string(text) + "'");
}

void SynthConfig::validate() const {
  if (num_ids == 0 || cameras == 0 || images_per_id_per_cam == 0) {
    throw ConfigError("synth: ids, cameras and images per camera must be positive");
  }
  if (height < 8 || width < 8) throw ConfigError("synth: images must be at least 8x8");
  auto unit = [](double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("synth: ") + what + " must lie in [0, 1]");
  };
  unit(global_cue_strength, "global_cue_strength");
  unit(local_cue_strength, "local_cue_strength");
  unit(occlusion_prob, "occlusion_prob");
  unit(occlusion_max_frac, "occlusion_max_frac");
  if (!(noise_sigma >= 0.0)) throw ConfigError("synth: noise_sigma must be non-negative");
  if (4 * misalign_max_shift >= height) {
    throw ConfigError("synth: misalign_max_shift " + std::to_string(misalign_max_shift) + " must be below H/4");
  }
}

KeyValues SynthConfig::to_key_values() const {
  return {
      {"synth.num_ids", std::to_string(num_ids)},
      {"synth.cameras", std::to_string(cameras)},
      {"synth.images_per_id_per_cam", std::to_string(images_per_id_per_cam)},
      {"synth.height", std::to_string(height)},
      {"synth.width", std::to_string(width)},
      {"synth.global_cue_strength", format_double(global_cue_strength)},
      {"synth.local_cue_strength", format_double(local_cue_strength)},
      {"synth.misalign_max_shift", std::to_string(misalign_max_shift)},
      {"synth.occlusion_prob", format_double(occlusion_prob)},
      {"synth.occlusion_max_frac", format_double(occlusion_max_frac)},
      {"synth.noise_sigma", format_double(noise_sigma)},
      {"synth.seed", std::to_string(seed)},
  };
}

bool SynthConfig::apply(std::string_view key, std::string_view value) {
  if (key == "synth.num_ids") num_ids = parse_size(key, value);
  else if (key == "synth.cameras") cameras = parse_size(key, value);
  else if (key == "synth.images_per_id_per_cam") images_per_id_per_cam = parse_size(key, value);
  else if (key == "synth.height") height = parse_size(key, value);
  else if (key == "synth.width") width = parse_size(key, value);
  else if (key == "synth.global_cue_strength") global_cue_strength = parse_double(key, value);
  else if (key == "synth.local_cue_strength") local_cue_strength = parse_double(key, value);
  else if (key == "synth.misalign_max_shift") misalign_max_shift = parse_size(key, value);
  else if (key == "synth.occlusion_prob") occlusion_prob = parse_double(key, value);
  else if (key == "synth.occlusion_max_frac") occlusion_max_frac = parse_double(key, value);
  else if (key == "synth.noise_sigma") noise_sigma = parse_double(key, value);
  else if (key == "synth.seed") seed = parse_u64(key, value);
  else return false;
  return true;
}

namespace {

using Color = std::array<double, 3>;
constexpr std::size_t kBands = 4;

std::mt19937_64 keyed_rng(std::uint64_t seed, std::uint32_t a, std::uint32_t b, std::uint32_t c, std::uint32_t kind) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), a, b, c, kind};
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Color random_color(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

struct Motif {
  int kind = 0;  // 0 horizontal bars, 1 vertical bars, 2 checker, 3 diagonal
  int period = 4;
  Color accent{};

  bool on(std::size_t y, std::size_t x) const {
    const std::size_t p = static_cast<std::size_t>(period);
    switch (kind) {
      case 0: return (y / (p / 2 == 0 ? 1 : p / 2)) % 2 == 0;
      case 1: return (x / (p / 2 == 0 ? 1 : p / 2)) % 2 == 0;
      case 2: return ((y / p) + (x / p)) % 2 == 0;
      default: return ((x + y) / (p / 2 == 0 ? 1 : p / 2)) % 2 == 0;
    }
  }
};

struct Identity {
  Color body{};
  std::array<Motif, kBands> bands{};
};

Identity identity_appearance(const SynthConfig& c, std::size_t id) {
  auto rng = keyed_rng(c.seed, static_cast<std::uint32_t>(id), 0, 0, 1);
  Identity out;
  const Color raw = random_color(rng, 0.05, 0.95);
  for (std::size_t k = 0; k < 3; ++k) out.body[k] = 0.5 + c.global_cue_strength * (raw[k] - 0.5);
  static constexpr int kPeriods[] = {4, 6, 8};
  for (auto& m : out.bands) {
    m.kind = static_cast<int>(std::uniform_int_distribution<int>(0, 3)(rng));
    m.period = kPeriods[std::uniform_int_distribution<int>(0, 2)(rng)];
    m.accent = random_color(rng);
  }
  return out;
}

struct Camera {
  Color gain{};
  Color offset{};
  Color background{};
};

Camera camera_appearance(const SynthConfig& c, std::size_t camera) {
  auto rng = keyed_rng(c.seed, 0, static_cast<std::uint32_t>(camera), 0, 2);
  Camera out;
  out.gain = random_color(rng, 0.93, 1.07);
  out.offset = random_color(rng, -0.02, 0.02);
  out.background = random_color(rng, 0.4, 0.6);
  return out;
}

// Draws the per-image nuisance factors; must be the first use of rng.
ImageFactors draw_factors(const SynthConfig& c, std::mt19937_64& rng) {
  ImageFactors f;
  const int s = static_cast<int>(c.misalign_max_shift);
  f.shift = s > 0 ? std::uniform_int_distribution<int>(-s, s)(rng) : 0;
  f.occluded = c.occlusion_prob > 0 && std::bernoulli_distribution(c.occlusion_prob)(rng);
  if (f.occluded) {
    const double area = uniform(rng, 0.25, 1.0) * c.occlusion_max_frac * static_cast<double>(c.height * c.width);
    const double aspect = std::exp(uniform(rng, std::log(0.5), std::log(2.0)));
    f.occ_h = std::clamp<std::size_t>(static_cast<std::size_t>(std::sqrt(area * aspect)), 1, c.height);
    f.occ_w = std::clamp<std::size_t>(static_cast<std::size_t>(area / static_cast<double>(f.occ_h)), 1, c.width);
    while (f.occ_h * f.occ_w > c.occlusion_max_frac * static_cast<double>(c.height * c.width)) {
      if (f.occ_h >= f.occ_w && f.occ_h > 1) --f.occ_h;
      else if (f.occ_w > 1) --f.occ_w;
      else break;
    }
    f.occ_top = std::uniform_int_distribution<std::size_t>(0, c.height - f.occ_h)(rng);
    f.occ_left = std::uniform_int_distribution<std::size_t>(0, c.width - f.occ_w)(rng);
  }
  return f;
}

std::mt19937_64 image_rng(const SynthConfig& c, std::size_t id, std::size_t camera, std::size_t shot) {
  return keyed_rng(c.seed, static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(camera),
                   static_cast<std::uint32_t>(shot), 3);
}

void render(const SynthConfig& c, const Identity& who, const Camera& cam, std::size_t id, std::size_t camera,
            std::size_t shot, float* out) {
  auto rng = image_rng(c, id, camera, shot);
  const ImageFactors f = draw_factors(c, rng);
  const std::size_t H = c.height, W = c.width;
  const long margin = static_cast<long>(H / 16);
  const long top = margin + f.shift, bottom = static_cast<long>(H) - margin + f.shift;
  const long jitter = static_cast<long>(W / 32);
  const long dx = jitter > 0 ? std::uniform_int_distribution<long>(-jitter, jitter)(rng) : 0;
  const long left = static_cast<long>(W / 6) + dx, right = static_cast<long>(W - W / 6) + dx;
  Color bg = cam.background;
  for (auto& v : bg) v += uniform(rng, -0.05, 0.05);
  const Color occluder = random_color(rng);
  const double mix = 0.7 * c.local_cue_strength;
  std::normal_distribution<double> noise(0.0, c.noise_sigma);

  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      Color v = bg;
      const long ly = static_cast<long>(y), lx = static_cast<long>(x);
      if (ly >= top && ly < bottom && lx >= left && lx < right) {
        const std::size_t row = static_cast<std::size_t>(ly - top);
        const std::size_t band = std::min(kBands - 1, row * kBands / static_cast<std::size_t>(bottom - top));
        const Motif& m = who.bands[band];
        const bool on = m.on(row, static_cast<std::size_t>(lx - left));
        for (std::size_t k = 0; k < 3; ++k) v[k] = on ? (1 - mix) * who.body[k] + mix * m.accent[k] : who.body[k];
      }
      if (f.occluded && y >= f.occ_top && y < f.occ_top + f.occ_h && x >= f.occ_left && x < f.occ_left + f.occ_w) {
        v = occluder;
      }
      for (std::size_t k = 0; k < 3; ++k) {
        double p = cam.gain[k] * v[k] + cam.offset[k];
        if (c.noise_sigma > 0) p += noise(rng);
        out[(k * H + y) * W + x] = static_cast<float>(std::clamp(p, 0.0, 1.0));
      }
    }
  }
}

}  // namespace

ImageFactors image_factors(const SynthConfig& config, std::size_t id, std::size_t camera, std::size_t shot) {
  auto rng = image_rng(config, id, camera, shot);
  return draw_factors(config, rng);
}

IdentityDataset generate(const SynthConfig& config) {
  config.validate();
  IdentityDataset ds;
  ds.height = config.height;
  ds.width = config.width;
  const std::size_t n = config.num_ids * config.cameras * config.images_per_id_per_cam;
  ds.images = Tensor::zeros({n, 3, config.height, config.width}, DType::f32);
  const std::size_t plane = 3 * config.height * config.width;
  float* data = ds.images.data<float>().data();

  std::vector<Camera> cams;
  for (std::size_t cam = 1; cam <= config.cameras; ++cam) cams.push_back(camera_appearance(config, cam));
  std::size_t index = 0;
  for (std::size_t id = 1; id <= config.num_ids; ++id) {
    const Identity who = identity_appearance(config, id);
    for (std::size_t cam = 1; cam <= config.cameras; ++cam) {
      for (std::size_t shot = 0; shot < config.images_per_id_per_cam; ++shot) {
        render(config, who, cams[cam - 1], id, cam, shot, data + index * plane);
        ds.ids.push_back(id);
        ds.cameras.push_back(cam);
        ds.splits.push_back(Split::none);
        ++index;
      }
    }
  }
  return ds;
}

std::vector<std::size_t> IdentityDataset::identity_set() const {
  std::set<std::size_t> s(ids.begin(), ids.end());
  return {s.begin(), s.end()};
}

void IdentityDataset::check() const {
  if (cameras.size() != ids.size() || splits.size() != ids.size()) {
    throw DimensionError("dataset: label, camera and split lists differ in length");
  }
  if (ids.empty()) return;
  if (images.shape() != Shape{ids.size(), 3, height, width}) {
    throw DimensionError("dataset: images " + shape_str(images.shape()) + " do not match " +
                         std::to_string(ids.size()) + " labels of " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
}

Tensor IdentityDataset::gather(const std::vector<std::size_t>& indices) const {
  const std::size_t plane = 3 * height * width;
  Tensor out = Tensor::zeros({indices.size(), 3, height, width}, DType::f32);
  const float* src = images.data<float>().data();
  float* dst = out.data<float>().data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw DimensionError("dataset: index " + std::to_string(indices[i]) + " out of range");
    std::memcpy(dst + i * plane, src + indices[i] * plane, plane * sizeof(float));
  }
  return out;
}

IdentityDataset IdentityDataset::subset(const std::vector<std::size_t>& indices) const {
  IdentityDataset out;
  out.height = height;
  out.width = width;
  out.images = gather(indices);
  for (std::size_t i : indices) {
    out.ids.push_back(ids[i]);
    out.cameras.push_back(cameras[i]);
    out.splits.push_back(splits[i]);
  }
  return out;
}

IdentityDataset tag_splits(const IdentityDataset& dataset, double train_frac, std::uint64_t seed) {
  if (!(train_frac >= 0.0 && train_frac <= 1.0)) throw ConfigError("split: train_frac must lie in [0, 1]");
  std::vector<std::size_t> ids = dataset.identity_set();
  const std::size_t n_train =
      static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(ids.size())));
  if (n_train == 0) throw ConfigError("split: no training identities");
  if (n_train == ids.size()) throw ConfigError("split: no test identities (train_frac leaves the test set empty)");

  std::map<std::size_t, std::set<std::size_t>> cams_of;
  for (std::size_t i = 0; i < dataset.size(); ++i) cams_of[dataset.ids[i]].insert(dataset.cameras[i]);

  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::map<std::size_t, std::size_t> probe_camera;  // test ids only
  std::sort(ids.begin() + static_cast<long>(n_train), ids.end());
  for (auto it = ids.begin() + static_cast<long>(n_train); it != ids.end(); ++it) {
    const auto& cams = cams_of[*it];
    if (cams.size() < 2) {
      throw ConfigError("split: test identity " + std::to_string(*it) + " appears in fewer than two cameras");
    }
    auto pick = cams.begin();
    std::advance(pick, std::uniform_int_distribution<std::size_t>(0, cams.size() - 1)(rng));
    probe_camera[*it] = *pick;
  }

  IdentityDataset out = dataset;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto p = probe_camera.find(out.ids[i]);
    if (p == probe_camera.end()) out.splits[i] = Split::train;
    else out.splits[i] = out.cameras[i] == p->second ? Split::probe : Split::gallery;
  }
  return out;
}

DatasetSplit by_tag(const IdentityDataset& dataset) {
  std::vector<std::size_t> train, probe, gallery;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    switch (dataset.splits[i]) {
      case Split::train: train.push_back(i); break;
      case Split::probe: probe.push_back(i); break;
      case Split::gallery: gallery.push_back(i); break;
      case Split::none: break;
    }
  }
  return {dataset.subset(train), dataset.subset(probe), dataset.subset(gallery)};
}

DatasetSplit split(const IdentityDataset& dataset, double train_frac, std::uint64_t seed) {
  return by_tag(tag_splits(dataset, train_frac, seed));
}

}  // namespace jlml
