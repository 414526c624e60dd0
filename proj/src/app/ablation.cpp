#include "jlml/ablation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "jlml/errors.hpp"

namespace jlml {

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.data.num_ids = 48;
  c.data.cameras = 2;
  c.data.images_per_id_per_cam = 4;
  c.data.height = 32;
  c.data.width = 32;
  c.model = ModelConfig::toy();
  c.model.input_height = 32;
  c.model.input_width = 32;
  c.train.iterations = 600;
  c.train.lr_step_iters = 400;
  c.train.batch_size = 32;
  c.eval.shot = ShotProtocol::multi;
  return c;
}

KeyValues ExperimentConfig::to_key_values() const {
  KeyValues kv = model.to_key_values();
  for (auto& [k, v] : kv) k = "model." + k;
  for (const auto& p : data.to_key_values()) kv.push_back(p);
  for (const auto& p : train.to_key_values()) kv.push_back(p);
  kv.emplace_back("split.train_frac", format_double(train_frac));
  kv.emplace_back("eval.query", eval.query == QueryProtocol::single ? "sq" : "mq");
  kv.emplace_back("eval.shot", eval.shot == ShotProtocol::single ? "ss" : "ms");
  kv.emplace_back("eval.metric", metric_name(eval.metric));
  kv.emplace_back("eval.trials", std::to_string(eval.trials));
  kv.emplace_back("eval.seed", std::to_string(eval.seed));
  kv.emplace_back("eval.cross_camera_filter", format_bool(eval.cross_camera_filter));
  return kv;
}

bool ExperimentConfig::apply(std::string_view key, std::string_view value) {
  if (key.starts_with("model.")) {
    const std::string_view rest = key.substr(6);
    if (rest == "preset") {
      if (value == "paper") model = ModelConfig::paper();
      else if (value == "toy") model = ModelConfig::toy();
      else throw ConfigError("model.preset must be paper or toy, got '" + std::string(value) + "'");
      return true;
    }
    return model.apply(rest, value);
  }
  if (data.apply(key, value) || train.apply(key, value)) return true;
  if (key == "split.train_frac") {
    train_frac = parse_double(key, value);
  } else if (key == "eval.query") {
    if (value == "sq" || value == "SQ") eval.query = QueryProtocol::single;
    else if (value == "mq" || value == "MQ") eval.query = QueryProtocol::multi;
    else throw ConfigError("eval.query must be sq or mq, got '" + std::string(value) + "'");
  } else if (key == "eval.shot") {
    if (value == "ss" || value == "SS") eval.shot = ShotProtocol::single;
    else if (value == "ms" || value == "MS") eval.shot = ShotProtocol::multi;
    else throw ConfigError("eval.shot must be ss or ms, got '" + std::string(value) + "'");
  } else if (key == "eval.metric") {
    eval.metric = parse_metric(value);
  } else if (key == "eval.trials") {
    eval.trials = parse_size(key, value);
  } else if (key == "eval.seed") {
    eval.seed = parse_u64(key, value);
  } else if (key == "eval.cross_camera_filter") {
    eval.cross_camera_filter = parse_bool(key, value);
  } else {
    return false;
  }
  return true;
}

std::vector<RunResult> run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                      const std::vector<View>& views) {
  SynthConfig data = config.data;
  data.seed = config.data.seed + seed;
  const DatasetSplit parts = split(generate(data), config.train_frac, data.seed);

  ModelConfig mc = config.model;
  mc.input_height = data.height;
  mc.input_width = data.width;
  mc.num_identities = parts.train.identity_set().size();
  const JlmlModel model = JlmlModel::build(mc, seed);
  TrainConfig tc = config.train;
  tc.seed = config.train.seed + seed;
  train(model, parts.train, tc);

  const FeatureSet probe = extract(model, parts.probe).features;
  const FeatureSet gallery = extract(model, parts.gallery).features;
  std::vector<RunResult> out;
  for (const View& v : views) {
    EvalOptions opt = config.eval;
    opt.metric = v.metric;
    opt.seed = config.eval.seed + seed;
    const EvalReport r = evaluate(select_branch(probe, v.branch), select_branch(gallery, v.branch), opt);
    out.push_back({r.rank1(), r.map});
  }
  return out;
}

double SuiteRow::mean_rank1() const {
  return rank1.empty() ? 0.0 : std::accumulate(rank1.begin(), rank1.end(), 0.0) / static_cast<double>(rank1.size());
}

double SuiteRow::mean_map() const {
  return map.empty() ? 0.0 : std::accumulate(map.begin(), map.end(), 0.0) / static_cast<double>(map.size());
}

std::size_t Comparison::wins() const {
  return static_cast<std::size_t>(std::count_if(margins.begin(), margins.end(), [](double m) { return m >= 0; }));
}

bool Comparison::holds() const { return !margins.empty() && 3 * wins() >= 2 * margins.size(); }

const SuiteRow& SuiteReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return r;
  throw ConfigError("suite " + suite + " has no row '" + name + "'");
}

std::vector<std::string> suite_names() {
  return {"branches", "uniloss", "noshare", "nosfl", "parts", "robustness", "metric"};
}

namespace {

// A trained configuration and the views read off it.
struct Arm {
  std::string label;
  ExperimentConfig config;
  std::vector<std::pair<std::string, View>> views;
};

std::vector<Arm> suite_arms(const std::string& suite, const ExperimentConfig& base) {
  const View joint{Branch::joint, base.eval.metric};
  if (suite == "branches") {
    return {{"", base,
             {{"global", {Branch::global, base.eval.metric}},
              {"local", {Branch::local, base.eval.metric}},
              {"joint", joint}}}};
  }
  if (suite == "uniloss") {
    ExperimentConfig uni = base;
    uni.model.loss_mode = LossMode::uni;
    return {{"multiloss", base, {{"multiloss", joint}}}, {"uniloss", uni, {{"uniloss", joint}}}};
  }
  if (suite == "noshare") {
    ExperimentConfig unshared = base;
    unshared.model.share_stem = false;
    return {{"shared", base, {{"shared", joint}}}, {"unshared", unshared, {{"unshared", joint}}}};
  }
  if (suite == "nosfl") {
    ExperimentConfig on = base, off = base;
    on.model.sfl_enabled = true;
    off.model.sfl_enabled = false;
    return {{"sfl_on", on, {{"sfl_on", joint}}}, {"sfl_off", off, {{"sfl_off", joint}}}};
  }
  if (suite == "parts") {
    std::vector<Arm> arms;
    for (std::size_t m : {1, 2, 4, 8}) {
      ExperimentConfig c = base;
      c.model.stripes = m;
      c.model.input_height = c.data.height;
      c.model.input_width = c.data.width;
      if (c.model.stem_height() % m != 0) continue;
      const std::string name = "m" + std::to_string(m);
      arms.push_back({name, c, {{name, joint}}});
    }
    return arms;
  }
  if (suite == "robustness") {
    ExperimentConfig c = base;
    c.data.occlusion_prob = 0.5;
    c.data.misalign_max_shift = c.data.height / 8;
    return {{"", c, {{"global", {Branch::global, base.eval.metric}}, {"local", {Branch::local, base.eval.metric}}}}};
  }
  if (suite == "metric") {
    return {{"", base, {{"l1", {Branch::joint, Metric::l1}}, {"l2", {Branch::joint, Metric::l2}}}}};
  }
  throw ConfigError("unknown ablation suite '" + suite + "'");
}

std::vector<std::pair<std::string, std::string>> suite_claims(const std::string& suite) {
  if (suite == "branches") return {{"joint", "global"}, {"joint", "local"}};
  if (suite == "uniloss") return {{"multiloss", "uniloss"}};
  if (suite == "noshare") return {{"shared", "unshared"}};
  if (suite == "nosfl") return {{"sfl_on", "sfl_off"}};
  if (suite == "robustness") return {{"local", "global"}};
  return {};
}

}  // namespace

SuiteReport run_suite(const std::string& suite, const ExperimentConfig& config, const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const std::string&)>& progress) {
  const std::vector<Arm> arms = suite_arms(suite, config);
  SuiteReport report;
  report.suite = suite;
  report.seeds = seeds;
  report.config = config.to_key_values();
  for (const Arm& arm : arms) {
    for (const auto& [name, view] : arm.views) report.rows.push_back({name, {}, {}});
  }
  std::size_t row_base = 0;
  for (const Arm& arm : arms) {
    std::vector<View> views;
    for (const auto& v : arm.views) views.push_back(v.second);
    for (std::uint64_t seed : seeds) {
      const auto results = run_experiment(arm.config, seed, views);
      for (std::size_t k = 0; k < results.size(); ++k) {
        SuiteRow& row = report.rows[row_base + k];
        row.rank1.push_back(results[k].rank1);
        row.map.push_back(results[k].map);
        if (progress) {
          progress(suite + " " + row.name + " seed " + std::to_string(seed) + ": rank1 " +
                   format_double(results[k].rank1) + " map " + format_double(results[k].map));
        }
      }
    }
    row_base += views.size();
  }
  for (const auto& [better, worse] : suite_claims(suite)) {
    Comparison c{better, worse, {}};
    const SuiteRow& b = report.row(better);
    const SuiteRow& w = report.row(worse);
    for (std::size_t s = 0; s < seeds.size(); ++s) c.margins.push_back(b.rank1[s] - w.rank1[s]);
    report.comparisons.push_back(c);
  }
  return report;
}

std::string suite_json(const SuiteReport& report) {
  nlohmann::ordered_json j;
  j["suite"] = report.suite;
  j["seeds"] = report.seeds;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"name", r.name},
                    {"rank1", r.rank1},
                    {"map", r.map},
                    {"mean_rank1", r.mean_rank1()},
                    {"mean_map", r.mean_map()}});
  }
  j["rows"] = rows;
  nlohmann::ordered_json comps = nlohmann::ordered_json::array();
  for (const auto& c : report.comparisons) {
    comps.push_back({{"better", c.better},
                     {"worse", c.worse},
                     {"margins", c.margins},
                     {"wins", c.wins()},
                     {"holds", c.holds()}});
  }
  j["comparisons"] = comps;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.config) config[k] = v;
  j["config"] = config;
  return j.dump(2) + "\n";
}

}  // namespace jlml
