#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "jlml/errors.hpp"
#include "jlml/eval.hpp"

namespace jlml {

std::string metric_name(Metric metric) { return metric == Metric::l1 ? "l1" : "l2"; }

Metric parse_metric(std::string_view text) {
  if (text == "l1" || text == "L1") return Metric::l1;
  if (text == "l2" || text == "L2") return Metric::l2;
  throw ConfigError("unknown metric '" + std::string(text) + "' (expected l1 or l2)");
}

double distance(std::span<const float> a, std::span<const float> b, Metric metric) {
  if (a.size() != b.size()) {
    throw DimensionError("distance: dimensions differ (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + ")");
  }
  double acc = 0;
  if (metric == Metric::l1) {
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(static_cast<double>(a[i]) - b[i]);
    return acc;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

double distance(const FeatureRecord& a, const FeatureRecord& b, Metric metric) {
  return distance(a.feature, b.feature, metric);
}

std::vector<std::size_t> rank_gallery(const FeatureRecord& probe, std::span<const FeatureRecord> gallery,
                                      Metric metric, bool cross_camera_filter) {
  std::vector<std::size_t> order;
  std::vector<double> dist(gallery.size());
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    if (cross_camera_filter && gallery[g].id == probe.id && gallery[g].camera == probe.camera) continue;
    dist[g] = distance(probe, gallery[g], metric);
    order.push_back(g);
  }
  if (order.empty()) throw ConfigError("rank_gallery: gallery is empty after filtering");
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

std::size_t first_match_rank(const MatchList& matches) {
  for (std::size_t r = 0; r < matches.size(); ++r)
    if (matches[r]) return r + 1;
  return 0;
}

CmcResult cmc(std::span<const MatchList> probes) {
  CmcResult out;
  std::size_t longest = 0;
  for (const auto& m : probes) longest = std::max(longest, m.size());
  std::vector<std::size_t> hits(longest + 1, 0);
  for (const auto& m : probes) {
    const std::size_t r = first_match_rank(m);
    if (r == 0) {
      ++out.excluded;
      continue;
    }
    ++out.evaluated;
    ++hits[r];
  }
  out.curve.resize(longest, 0.0);
  if (out.evaluated == 0) return out;
  std::size_t running = 0;
  for (std::size_t k = 1; k <= longest; ++k) {
    running += hits[k];
    out.curve[k - 1] = static_cast<double>(running) / static_cast<double>(out.evaluated);
  }
  return out;
}

double map_score(std::span<const MatchList> probes) {
  double total = 0;
  std::size_t counted = 0;
  for (const auto& m : probes) {
    const std::size_t relevant = static_cast<std::size_t>(std::count(m.begin(), m.end(), true));
    if (relevant == 0) continue;
    double ap = 0;
    std::size_t seen = 0;
    for (std::size_t r = 0; r < m.size(); ++r) {
      if (!m[r]) continue;
      ++seen;
      ap += static_cast<double>(seen) / static_cast<double>(r + 1);
    }
    total += ap / static_cast<double>(relevant);
    ++counted;
  }
  return counted ? total / static_cast<double>(counted) : 0.0;
}

FeatureRecord multi_query_pool(std::span<const FeatureRecord> records, std::size_t global_dim) {
  if (records.empty()) throw ConfigError("multi_query_pool: empty query set");
  const FeatureRecord& first = records.front();
  std::vector<double> sum(first.feature.size(), 0.0);
  for (const auto& r : records) {
    if (r.id != first.id || r.camera != first.camera) {
      throw ConfigError("multi_query_pool: records mix identities or cameras");
    }
    if (r.feature.size() != sum.size()) throw DimensionError("multi_query_pool: feature dimensions differ");
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += r.feature[k];
  }
  FeatureRecord out{first.id, first.camera, {}, first.source};
  out.feature.resize(sum.size());
  for (std::size_t k = 0; k < sum.size(); ++k) {
    out.feature[k] = static_cast<float>(sum[k] / static_cast<double>(records.size()));
  }
  normalize_segments(out.feature, global_dim);
  return out;
}

std::vector<std::size_t> single_shot_gallery(std::span<const FeatureRecord> gallery, std::mt19937_64& rng) {
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t g = 0; g < gallery.size(); ++g) by_id[gallery[g].id].push_back(g);
  std::vector<std::size_t> chosen;
  for (const auto& [id, members] : by_id) {
    chosen.push_back(members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(rng)]);
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

std::string protocol_name(const EvalOptions& options) {
  return std::string(options.query == QueryProtocol::single ? "SQ" : "MQ") + "-" +
         (options.shot == ShotProtocol::single ? "SS" : "MS");
}

namespace {

std::vector<FeatureRecord> query_set(const FeatureSet& probe, QueryProtocol query) {
  if (query == QueryProtocol::single) return probe.records;
  std::vector<std::pair<std::size_t, std::size_t>> keys;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<FeatureRecord>> groups;
  for (const auto& r : probe.records) {
    auto key = std::make_pair(r.id, r.camera);
    if (!groups.count(key)) keys.push_back(key);
    groups[key].push_back(r);
  }
  std::vector<FeatureRecord> out;
  for (const auto& key : keys) out.push_back(multi_query_pool(groups[key], probe.global_dim));
  return out;
}

}  // namespace

EvalReport evaluate(const FeatureSet& probe, const FeatureSet& gallery, const EvalOptions& options) {
  if (probe.global_dim != gallery.global_dim || probe.local_dim != gallery.local_dim) {
    throw DimensionError("evaluate: probe and gallery features have different layouts");
  }
  if (gallery.records.empty()) throw ConfigError("evaluate: empty gallery");
  const std::vector<FeatureRecord> queries = query_set(probe, options.query);
  if (queries.empty()) throw ConfigError("evaluate: no probes");
  const bool single_shot = options.shot == ShotProtocol::single;
  const std::size_t trials = single_shot ? std::max<std::size_t>(1, options.trials) : 1;

  EvalReport report;
  report.protocol = protocol_name(options);
  report.metric = metric_name(options.metric);
  report.num_probes = queries.size();
  std::mt19937_64 rng(options.seed);
  std::vector<double> curve_sum;
  double map_sum = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<std::size_t> members(gallery.records.size());
    std::iota(members.begin(), members.end(), 0);
    if (single_shot) members = single_shot_gallery(gallery.records, rng);
    std::vector<FeatureRecord> subset;
    for (std::size_t g : members) subset.push_back(gallery.records[g]);

    std::vector<MatchList> lists;
    for (const auto& q : queries) {
      MatchList m;
      const bool any_left = std::any_of(subset.begin(), subset.end(), [&](const FeatureRecord& g) {
        return !(options.cross_camera_filter && g.id == q.id && g.camera == q.camera);
      });
      if (any_left) {
        for (std::size_t g : rank_gallery(q, subset, options.metric, options.cross_camera_filter)) {
          m.push_back(subset[g].id == q.id);
        }
      }
      lists.push_back(std::move(m));
    }
    const CmcResult c = cmc(lists);
    if (t == 0) {
      for (const auto& m : lists) report.probe_ranks.push_back(first_match_rank(m));
    }
    report.excluded_probes = std::max(report.excluded_probes, c.excluded);
    if (curve_sum.size() < c.curve.size()) {
      curve_sum.resize(c.curve.size(), curve_sum.empty() ? 0.0 : curve_sum.back());
    }
    for (std::size_t k = 0; k < curve_sum.size(); ++k) {
      curve_sum[k] += c.curve.empty() ? 0.0 : c.curve[std::min(k, c.curve.size() - 1)];
    }
    map_sum += map_score(lists);
  }
  for (double v : curve_sum) report.cmc.push_back(v / static_cast<double>(trials));
  report.map = map_sum / static_cast<double>(trials);
  return report;
}

std::string report_json(const EvalReport& report, const KeyValues& provenance) {
  nlohmann::ordered_json j;
  j["cmc"] = report.cmc;
  j["map"] = report.map;
  j["protocol"] = report.protocol;
  j["metric"] = report.metric;
  j["num_probes"] = report.num_probes;
  j["excluded_probes"] = report.excluded_probes;
  j["probe_ranks"] = report.probe_ranks;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  for (const auto& [k, v] : provenance) config[k] = v;
  j["config"] = config;
  return j.dump(2) + "\n";
}

}  // namespace jlml
