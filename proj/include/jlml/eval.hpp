#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "jlml/kv.hpp"
#include "jlml/model.hpp"
#include "jlml/synth.hpp"

namespace jlml {

struct FeatureRecord {
  std::size_t id = 0;
  std::size_t camera = 0;
  std::vector<float> feature;  // [global | local]
  std::string source;          // provenance, e.g. dataset path or index
};

struct FeatureSet {
  std::size_t global_dim = 0;
  std::size_t local_dim = 0;
  std::vector<FeatureRecord> records;

  std::size_t dim() const { return global_dim + local_dim; }
};

enum class Branch { joint, global, local };
std::string branch_name(Branch branch);
// Keeps only one branch's segment (already unit length).
FeatureSet select_branch(const FeatureSet& features, Branch branch);

// Scales each branch segment to unit l2 norm (all-zero segments stay zero).
void normalize_segments(std::span<float> feature, std::size_t global_dim);

struct ExtractResult {
  FeatureSet features;
  double seconds = 0;
  double images_per_second = 0;
};

// Eval-mode forward in batches; per-branch l2 normalisation then concat.
ExtractResult extract(const JlmlModel& model, const IdentityDataset& images, std::size_t batch_size = 32);

enum class Metric { l1, l2 };
std::string metric_name(Metric metric);
Metric parse_metric(std::string_view text);

double distance(std::span<const float> a, std::span<const float> b, Metric metric);
double distance(const FeatureRecord& a, const FeatureRecord& b, Metric metric);

// Gallery indices by ascending distance, ties in gallery order. With the
// cross-camera filter, entries sharing the probe's id and camera are dropped.
// Throws ConfigError when nothing remains.
std::vector<std::size_t> rank_gallery(const FeatureRecord& probe, std::span<const FeatureRecord> gallery,
                                      Metric metric, bool cross_camera_filter = true);

// Ranked gallery of one probe reduced to true-match flags by rank.
using MatchList = std::vector<bool>;

struct CmcResult {
  std::vector<double> curve;  // curve[k-1] = rank-k accuracy
  std::size_t evaluated = 0;
  std::size_t excluded = 0;   // probes without any true match
};

// Probes without a true match are excluded and counted.
CmcResult cmc(std::span<const MatchList> probes);
// Mean over probes with at least one true match of
// AP = (1/R) * sum over true matches at rank r of precision@r.
double map_score(std::span<const MatchList> probes);
// Rank (1-based) of the first true match, 0 if none.
std::size_t first_match_rank(const MatchList& matches);

// Mean feature of records sharing one id and camera, re-normalised per
// branch. Throws ConfigError on an empty or mixed set.
FeatureRecord multi_query_pool(std::span<const FeatureRecord> records, std::size_t global_dim);

// One uniformly chosen gallery entry per identity, in gallery order.
std::vector<std::size_t> single_shot_gallery(std::span<const FeatureRecord> gallery, std::mt19937_64& rng);

enum class QueryProtocol { single, multi };
enum class ShotProtocol { single, multi };

struct EvalOptions {
  QueryProtocol query = QueryProtocol::single;
  ShotProtocol shot = ShotProtocol::multi;
  Metric metric = Metric::l2;
  std::size_t trials = 10;  // single-shot only
  std::uint64_t seed = 0;
  bool cross_camera_filter = true;
};

std::string protocol_name(const EvalOptions& options);

struct EvalReport {
  std::vector<double> cmc;
  double map = 0;
  std::string protocol;
  std::string metric;
  std::size_t num_probes = 0;
  std::size_t excluded_probes = 0;
  std::vector<std::size_t> probe_ranks;  // first true-match rank per probe (first trial), 0 = none
  double rank1() const { return cmc.empty() ? 0.0 : cmc[0]; }
};

EvalReport evaluate(const FeatureSet& probe, const FeatureSet& gallery, const EvalOptions& options);

std::string report_json(const EvalReport& report, const KeyValues& provenance);

// Feature file: "JLMF", u16 version, u32 count, u32 dim, count rows of f32.
// Written with <path>.manifest.csv (index,id,camera,source_path) and
// <path>.config (key=value provenance including the branch dims).
inline constexpr std::uint16_t kFeatureVersion = 1;
std::string encode_features(const FeatureSet& features);
// Decodes the binary part; records get no ids until the manifest is read.
FeatureSet decode_features(std::string_view bytes);
void write_features(const std::filesystem::path& path, const FeatureSet& features, const KeyValues& provenance);
FeatureSet read_features(const std::filesystem::path& path);

}  // namespace jlml
