#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "jlml/binary_io.hpp"
#include "jlml/errors.hpp"
#include "jlml/eval.hpp"
#include "model_fixtures.hpp"
#include "temp_dir.hpp"

using namespace jlml;
using jlml::testing::TempDir;
using jlml::testing::tiny_config;

namespace {

FeatureRecord rec(std::size_t id, std::size_t cam, std::vector<float> f) { return {id, cam, std::move(f), ""}; }

// Random unit-segment features; ids drawn from [1, n_ids].
FeatureSet random_set(std::size_t count, std::size_t n_ids, std::size_t camera, std::size_t gd, std::size_t ld,
                      std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::uniform_int_distribution<std::size_t> pick(1, n_ids);
  FeatureSet fs;
  fs.global_dim = gd;
  fs.local_dim = ld;
  for (std::size_t i = 0; i < count; ++i) {
    FeatureRecord r{pick(rng), camera, std::vector<float>(gd + ld), "img" + std::to_string(i)};
    for (float& v : r.feature) v = g(rng);
    normalize_segments(r.feature, gd);
    fs.records.push_back(std::move(r));
  }
  return fs;
}

// Brute force on match lists, written from the definitions.
std::vector<double> oracle_cmc(const std::vector<MatchList>& lists) {
  std::size_t longest = 0, valid = 0;
  for (const auto& m : lists) longest = std::max(longest, m.size());
  for (const auto& m : lists) valid += std::count(m.begin(), m.end(), true) > 0;
  std::vector<double> curve(longest, 0.0);
  for (std::size_t k = 1; k <= longest; ++k) {
    std::size_t hit = 0;
    for (const auto& m : lists) {
      bool any = false;
      for (std::size_t r = 0; r < std::min(k, m.size()); ++r) any = any || m[r];
      hit += any;
    }
    curve[k - 1] = valid ? static_cast<double>(hit) / static_cast<double>(valid) : 0.0;
  }
  return curve;
}

double oracle_map(const std::vector<MatchList>& lists) {
  double total = 0;
  std::size_t valid = 0;
  for (const auto& m : lists) {
    std::vector<std::size_t> positions;
    for (std::size_t r = 0; r < m.size(); ++r)
      if (m[r]) positions.push_back(r);
    if (positions.empty()) continue;
    double ap = 0;
    for (std::size_t i = 0; i < positions.size(); ++i) {
      ap += static_cast<double>(i + 1) / static_cast<double>(positions[i] + 1);
    }
    total += ap / static_cast<double>(positions.size());
    ++valid;
  }
  return valid ? total / static_cast<double>(valid) : 0.0;
}

// Independent ranking: the position of gallery entry g is the number of kept
// entries strictly closer, plus equally close ones with a smaller index.
std::vector<MatchList> oracle_lists(const FeatureSet& probe, const FeatureSet& gallery, Metric metric) {
  std::vector<MatchList> out;
  for (const auto& p : probe.records) {
    std::vector<std::size_t> kept;
    for (std::size_t g = 0; g < gallery.records.size(); ++g) {
      const auto& r = gallery.records[g];
      if (!(r.id == p.id && r.camera == p.camera)) kept.push_back(g);
    }
    MatchList m(kept.size(), false);
    for (std::size_t a : kept) {
      const double da = distance(p, gallery.records[a], metric);
      std::size_t pos = 0;
      for (std::size_t b : kept) {
        const double db = distance(p, gallery.records[b], metric);
        if (db < da || (db == da && b < a)) ++pos;
      }
      m[pos] = gallery.records[a].id == p.id;
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<float> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1, 1);
  std::vector<float> v(n);
  for (float& x : v) x = u(rng);
  return v;
}

}  // namespace

TEST_CASE("distance examples") {
  const std::vector<float> a{0, 0}, b{3, 4};
  CHECK(distance(a, b, Metric::l1) == 7.0);
  CHECK(distance(a, b, Metric::l2) == 5.0);
  CHECK(distance(b, b, Metric::l2) == 0.0);
  CHECK_THROWS_AS(distance(a, std::vector<float>{1, 2, 3}, Metric::l2), DimensionError);
  CHECK(parse_metric("L1") == Metric::l1);
  CHECK(parse_metric("l2") == Metric::l2);
  CHECK_THROWS_AS(parse_metric("cosine"), ConfigError);
}

TEST_CASE("metric axioms on sampled vectors") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 200; ++t) {
    const auto x = random_vec(9, rng), y = random_vec(9, rng), z = random_vec(9, rng);
    for (Metric m : {Metric::l1, Metric::l2}) {
      CHECK(distance(x, y, m) == distance(y, x, m));
      CHECK(distance(x, x, m) == 0.0);
      CHECK(distance(x, y, m) > 0.0);
      CHECK(distance(x, z, m) <= distance(x, y, m) + distance(y, z, m) + 1e-12);
    }
  }
}

TEST_CASE("ranking breaks ties by gallery order and filters same-camera matches") {
  const FeatureRecord probe = rec(1, 1, {0, 0});
  const std::vector<FeatureRecord> gallery{rec(2, 2, {1, 0}), rec(3, 2, {0, 1}), rec(1, 1, {0, 0}),
                                           rec(1, 2, {0.5f, 0}), rec(4, 2, {-1, 0})};
  CHECK(rank_gallery(probe, gallery, Metric::l2) == std::vector<std::size_t>{3, 0, 1, 4});
  CHECK(rank_gallery(probe, gallery, Metric::l2, false) == std::vector<std::size_t>{2, 3, 0, 1, 4});
  const std::vector<FeatureRecord> only_self{rec(1, 1, {1, 1})};
  CHECK_THROWS_AS(rank_gallery(probe, only_self, Metric::l2), ConfigError);
}

TEST_CASE("ranking is invariant to a monotone transform of distance") {
  std::mt19937_64 rng(4);
  const FeatureSet gallery = random_set(40, 8, 2, 4, 4, rng);
  const FeatureSet probe = random_set(10, 8, 1, 4, 4, rng);
  for (const auto& p : probe.records) {
    const auto order = rank_gallery(p, gallery.records, Metric::l2);
    std::vector<std::size_t> squared(gallery.records.size());
    std::iota(squared.begin(), squared.end(), 0);
    std::stable_sort(squared.begin(), squared.end(), [&](std::size_t a, std::size_t b) {
      return std::pow(distance(p, gallery.records[a], Metric::l2), 2) <
             std::pow(distance(p, gallery.records[b], Metric::l2), 2);
    });
    CHECK(order == squared);
  }
}

TEST_CASE("cmc examples") {
  const std::vector<MatchList> perfect{{true, false}, {true, false, false}};
  CHECK(cmc(perfect).curve[0] == 1.0);
  const std::vector<MatchList> ranks13{{true, false, false}, {false, false, true}};
  const CmcResult c = cmc(ranks13);
  CHECK(c.curve == std::vector<double>{0.5, 0.5, 1.0});
  const std::vector<MatchList> with_miss{{false, false}, {false, true}};
  const CmcResult d = cmc(with_miss);
  CHECK(d.excluded == 1);
  CHECK(d.evaluated == 1);
  CHECK(d.curve == std::vector<double>{0.0, 1.0});
  CHECK(first_match_rank({false, false, true}) == 3);
  CHECK(first_match_rank({false}) == 0);
}

TEST_CASE("average precision examples") {
  CHECK(map_score(std::vector<MatchList>{{false, true}}) == 0.5);
  CHECK(map_score(std::vector<MatchList>{{true, false, true}}) == doctest::Approx((1 + 2.0 / 3) / 2).epsilon(1e-15));
  CHECK(map_score(std::vector<MatchList>{{true, true, false}, {true, false}}) == 1.0);
  CHECK(map_score(std::vector<MatchList>{{false, false}}) == 0.0);
}

TEST_CASE("mAP is one exactly when all true matches come first") {
  std::mt19937_64 rng(2);
  std::bernoulli_distribution coin(0.4);
  for (int t = 0; t < 300; ++t) {
    std::vector<MatchList> lists(3);
    bool all_first = true;
    for (auto& m : lists) {
      m.resize(6);
      for (std::size_t r = 0; r < 6; ++r) m[r] = coin(rng);
      m[5] = true;  // every probe has a match
      bool seen_false = false;
      for (bool v : m) {
        if (!v) seen_false = true;
        else if (seen_false) all_first = false;
      }
    }
    CHECK((map_score(lists) == 1.0) == all_first);
  }
}

TEST_CASE("cmc and mAP agree with brute force on random match lists") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    const std::size_t P = 1 + rng() % 50;
    std::vector<MatchList> lists(P);
    for (auto& m : lists) {
      m.resize(1 + rng() % 50);
      for (std::size_t r = 0; r < m.size(); ++r) m[r] = rng() % 7 == 0;
    }
    const CmcResult c = cmc(lists);
    const auto oc = oracle_cmc(lists);
    REQUIRE(c.curve.size() == oc.size());
    for (std::size_t k = 0; k < oc.size(); ++k) CHECK(std::abs(c.curve[k] - oc[k]) <= 1e-12);
    for (std::size_t k = 1; k < c.curve.size(); ++k) CHECK(c.curve[k - 1] <= c.curve[k]);
    CHECK(std::abs(map_score(lists) - oracle_map(lists)) <= 1e-12);
  }
}

TEST_CASE("full evaluation agrees with brute force on random galleries") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 50; ++t) {
    const std::size_t P = 1 + rng() % 50, G = 1 + rng() % 50, ids = 1 + rng() % 12;
    FeatureSet gallery = random_set(G, ids, 2, 3, 5, rng);
    for (auto& r : gallery.records) r.camera = 1 + rng() % 2;
    const FeatureSet probe = random_set(P, ids, 1, 3, 5, rng);
    for (Metric metric : {Metric::l1, Metric::l2}) {
      EvalOptions opt;
      opt.metric = metric;
      const auto lists = oracle_lists(probe, gallery, metric);
      bool all_have_gallery = true;
      for (const auto& m : lists) all_have_gallery = all_have_gallery && !m.empty();
      if (!all_have_gallery) continue;
      const EvalReport r = evaluate(probe, gallery, opt);
      const auto oc = oracle_cmc(lists);
      REQUIRE(r.cmc.size() == oc.size());
      for (std::size_t k = 0; k < oc.size(); ++k) CHECK(std::abs(r.cmc[k] - oc[k]) <= 1e-12);
      CHECK(std::abs(r.map - oracle_map(lists)) <= 1e-12);
      CHECK(r.num_probes == P);
      for (std::size_t i = 0; i < P; ++i) CHECK(r.probe_ranks[i] == first_match_rank(lists[i]));
    }
  }
}

TEST_CASE("a perfect fixture scores one") {
  FeatureSet probe, gallery;
  probe.global_dim = gallery.global_dim = 2;
  probe.local_dim = gallery.local_dim = 2;
  for (std::size_t id = 1; id <= 4; ++id) {
    std::vector<float> f(4, 0.0f);
    f[(id - 1) % 2] = id <= 2 ? 1.0f : -1.0f;
    f[2 + (id - 1) / 2] = 1.0f;
    probe.records.push_back(rec(id, 1, f));
    gallery.records.push_back(rec(id, 2, f));
    gallery.records.push_back(rec(id, 2, f));
  }
  for (Metric m : {Metric::l1, Metric::l2}) {
    EvalOptions opt;
    opt.metric = m;
    const EvalReport r = evaluate(probe, gallery, opt);
    CHECK(r.rank1() == 1.0);
    CHECK(r.map == 1.0);
    CHECK(r.cmc.back() == 1.0);
    CHECK(r.protocol == "SQ-MS");
  }
}

TEST_CASE("probes without any gallery entry are excluded") {
  FeatureSet probe, gallery;
  probe.global_dim = gallery.global_dim = 1;
  probe.records = {rec(1, 1, {1}), rec(2, 1, {0})};
  gallery.records = {rec(1, 1, {1}), rec(3, 2, {0})};
  const EvalReport r = evaluate(probe, gallery, {});
  CHECK(r.excluded_probes == 2);  // probe 1 only sees a distractor, probe 2 has no match
  CHECK(r.map == 0.0);
}

TEST_CASE("segment normalisation and branch selection") {
  std::vector<float> f{3, 4, 0, 0, 0};
  normalize_segments(f, 2);
  CHECK(f == std::vector<float>{0.6f, 0.8f, 0, 0, 0});
  std::vector<float> g{0, 0, 1, 2, 2};
  normalize_segments(g, 2);
  CHECK(g[2] == doctest::Approx(1.0 / 3));
  CHECK_THROWS_AS(normalize_segments(g, 7), DimensionError);

  FeatureSet fs;
  fs.global_dim = 2;
  fs.local_dim = 3;
  fs.records = {rec(1, 1, {1, 2, 3, 4, 5})};
  const FeatureSet gl = select_branch(fs, Branch::global), lo = select_branch(fs, Branch::local);
  CHECK(gl.records[0].feature == std::vector<float>{1, 2});
  CHECK(lo.records[0].feature == std::vector<float>{3, 4, 5});
  CHECK(gl.dim() == 2);
  CHECK(lo.dim() == 3);
  CHECK(select_branch(fs, Branch::joint).dim() == 5);
}

TEST_CASE("multi-query pooling") {
  const FeatureRecord a = rec(3, 1, {0.6f, 0.8f, 1, 0});
  const FeatureRecord one[] = {a};
  CHECK(multi_query_pool(one, 2).feature == a.feature);
  const FeatureRecord two[] = {a, a};
  CHECK(multi_query_pool(two, 2).feature == a.feature);
  const FeatureRecord mixed[] = {a, rec(4, 1, {1, 0, 1, 0})};
  CHECK_THROWS_AS(multi_query_pool(mixed, 2), ConfigError);
  const FeatureRecord cams[] = {a, rec(3, 2, {1, 0, 1, 0})};
  CHECK_THROWS_AS(multi_query_pool(cams, 2), ConfigError);
  CHECK_THROWS_AS(multi_query_pool(std::span<const FeatureRecord>{}, 2), ConfigError);

  // Pooling never does worse than the worst single query against the
  // identity's gallery mean.
  std::mt19937_64 rng(5);
  std::normal_distribution<float> noise(0.0f, 0.4f);
  for (int t = 0; t < 100; ++t) {
    std::vector<float> centre = random_vec(8, rng);
    normalize_segments(centre, 4);
    std::vector<FeatureRecord> queries;
    for (int q = 0; q < 4; ++q) {
      std::vector<float> f = centre;
      for (float& v : f) v += noise(rng);
      normalize_segments(f, 4);
      queries.push_back(rec(1, 1, f));
    }
    const FeatureRecord pooled = multi_query_pool(queries, 4);
    double worst = 0;
    for (const auto& q : queries) worst = std::max(worst, distance(q.feature, centre, Metric::l2));
    CHECK(distance(pooled.feature, centre, Metric::l2) <= worst);
  }
}

TEST_CASE("multi-query evaluation pools per identity and camera") {
  FeatureSet probe, gallery;
  probe.global_dim = gallery.global_dim = 2;
  probe.records = {rec(1, 1, {1, 0}), rec(1, 1, {0.8f, 0.6f}), rec(2, 1, {0, 1})};
  gallery.records = {rec(1, 2, {1, 0}), rec(2, 2, {0, 1})};
  EvalOptions opt;
  opt.query = QueryProtocol::multi;
  const EvalReport r = evaluate(probe, gallery, opt);
  CHECK(r.num_probes == 2);
  CHECK(r.protocol == "MQ-MS");
  CHECK(r.rank1() == 1.0);
}

TEST_CASE("single-shot galleries") {
  std::vector<FeatureRecord> gallery;
  for (std::size_t id = 1; id <= 5; ++id)
    for (std::size_t k = 0; k < id; ++k) gallery.push_back(rec(id, 2, {static_cast<float>(k)}));
  std::mt19937_64 a(3), b(3);
  for (int t = 0; t < 20; ++t) {
    const auto ga = single_shot_gallery(gallery, a), gb = single_shot_gallery(gallery, b);
    CHECK(ga == gb);
    REQUIRE(ga.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) CHECK(gallery[ga[i]].id == i + 1);
    CHECK(ga[0] == 0);  // identity 1 has exactly one image
  }
}

TEST_CASE("single-shot averages stay within the per-trial range") {
  std::mt19937_64 gen(31);
  FeatureSet gallery = random_set(60, 10, 2, 3, 3, gen);
  const FeatureSet probe = random_set(20, 10, 1, 3, 3, gen);
  EvalOptions opt;
  opt.shot = ShotProtocol::single;
  opt.trials = 6;
  opt.seed = 12;
  const EvalReport avg = evaluate(probe, gallery, opt);
  CHECK(avg.protocol == "SQ-SS");
  CHECK(evaluate(probe, gallery, opt).cmc == avg.cmc);

  std::mt19937_64 rng(opt.seed);
  std::vector<std::vector<double>> curves;
  std::vector<double> maps;
  for (std::size_t t = 0; t < opt.trials; ++t) {
    FeatureSet sub = gallery;
    sub.records.clear();
    for (std::size_t g : single_shot_gallery(gallery.records, rng)) sub.records.push_back(gallery.records[g]);
    const EvalReport one = evaluate(probe, sub, {});
    curves.push_back(one.cmc);
    maps.push_back(one.map);
  }
  for (std::size_t k = 0; k < avg.cmc.size(); ++k) {
    double lo = 1, hi = 0, sum = 0;
    for (const auto& c : curves) lo = std::min(lo, c[k]), hi = std::max(hi, c[k]), sum += c[k];
    CHECK(avg.cmc[k] >= lo - 1e-12);
    CHECK(avg.cmc[k] <= hi + 1e-12);
    CHECK(avg.cmc[k] == doctest::Approx(sum / static_cast<double>(curves.size())).epsilon(1e-12));
  }
  CHECK(avg.map >= *std::min_element(maps.begin(), maps.end()) - 1e-12);
  CHECK(avg.map <= *std::max_element(maps.begin(), maps.end()) + 1e-12);
}

TEST_CASE("report JSON carries the documented fields") {
  FeatureSet probe, gallery;
  probe.global_dim = gallery.global_dim = 1;
  probe.records = {rec(1, 1, {1})};
  gallery.records = {rec(1, 2, {1}), rec(2, 2, {0})};
  EvalOptions opt;
  opt.metric = Metric::l1;
  const EvalReport r = evaluate(probe, gallery, opt);
  const auto j = nlohmann::json::parse(report_json(r, {{"eval.metric", "l1"}}));
  CHECK(j["cmc"].is_array());
  CHECK(j["cmc"].size() == 2);
  CHECK(j["map"].get<double>() == 1.0);
  CHECK(j["protocol"] == "SQ-MS");
  CHECK(j["metric"] == "l1");
  CHECK(j["num_probes"] == 1);
  CHECK(j["excluded_probes"] == 0);
  CHECK(j["probe_ranks"][0] == 1);
  CHECK(j["config"]["eval.metric"] == "l1");
}

TEST_CASE("feature files round trip byte-identically") {
  std::mt19937_64 rng(6);
  FeatureSet fs = random_set(7, 3, 2, 4, 3, rng);
  fs.records[2].source = "images/000002.jlmi";
  TempDir dir("features");
  const auto path = dir / "probe.jlmf";
  write_features(path, fs, {{"model.m", "4"}});
  const FeatureSet back = read_features(path);
  CHECK(back.global_dim == 4);
  CHECK(back.local_dim == 3);
  REQUIRE(back.records.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(back.records[i].feature == fs.records[i].feature);
    CHECK(back.records[i].id == fs.records[i].id);
    CHECK(back.records[i].camera == fs.records[i].camera);
    CHECK(back.records[i].source == fs.records[i].source);
  }
  CHECK(encode_features(back) == binary::read_file(path));
  write_features(dir / "again.jlmf", back, {{"model.m", "4"}});
  CHECK(binary::read_file(dir / "again.jlmf") == binary::read_file(path));
  CHECK(binary::read_file(dir / "again.jlmf.manifest.csv") == binary::read_file(dir / "probe.jlmf.manifest.csv"));
}

TEST_CASE("damaged feature files are rejected") {
  std::mt19937_64 rng(6);
  const std::string bytes = encode_features(random_set(3, 2, 1, 2, 2, rng));
  std::string bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_features(bad), FormatError);
  bad = bytes;
  bad[4] = 9;  // version
  CHECK_THROWS_AS(decode_features(bad), FormatError);
  CHECK_THROWS_AS(decode_features(bytes.substr(0, bytes.size() - 1)), FormatError);
  CHECK_THROWS_AS(decode_features(bytes + "x"), FormatError);
  CHECK_THROWS_AS(decode_features("JL"), FormatError);

  TempDir dir("features_bad");
  FeatureSet fs = random_set(3, 2, 1, 2, 2, rng);
  write_features(dir / "f.jlmf", fs, {});
  std::ofstream(dir / "f.jlmf.manifest.csv", std::ios::app) << "3,1,1,extra\n";
  CHECK_THROWS_AS(read_features(dir / "f.jlmf"), FormatError);
  CHECK_THROWS_AS(read_features(dir / "missing.jlmf"), IoError);
}

TEST_CASE("extraction yields unit segments of the configured width, reproducibly") {
  const JlmlModel model = JlmlModel::build(tiny_config(), 3);
  SynthConfig sc;
  sc.num_ids = 3;
  sc.images_per_id_per_cam = 3;
  sc.height = sc.width = 16;
  const IdentityDataset ds = generate(sc);
  const ExtractResult a = extract(model, ds, 4), b = extract(model, ds, 7);
  const std::size_t gd = model.config().global_feature_dim, ld = model.config().local_feature_dim;
  CHECK(a.features.global_dim == gd);
  CHECK(a.features.local_dim == ld);
  REQUIRE(a.features.records.size() == ds.size());
  CHECK(a.images_per_second > 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& f = a.features.records[i].feature;
    CHECK(f.size() == gd + ld);
    CHECK(a.features.records[i].id == ds.ids[i]);
    CHECK(a.features.records[i].camera == ds.cameras[i]);
    double g2 = 0, l2 = 0;
    for (std::size_t k = 0; k < gd; ++k) g2 += f[k] * f[k];
    for (std::size_t k = gd; k < gd + ld; ++k) l2 += f[k] * f[k];
    CHECK(g2 == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(l2 == doctest::Approx(1.0).epsilon(1e-5));
  }
  const ExtractResult c = extract(model, ds, 4);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(c.features.records[i].feature == a.features.records[i].feature);
  // Eval mode uses running statistics, so batching does not change features.
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t k = 0; k < gd + ld; ++k) {
      CHECK(b.features.records[i].feature[k] == doctest::Approx(a.features.records[i].feature[k]).epsilon(1e-5));
    }
  }
}
