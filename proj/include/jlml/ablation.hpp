#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jlml/eval.hpp"
#include "jlml/model_config.hpp"
#include "jlml/synth.hpp"
#include "jlml/trainer.hpp"

namespace jlml {

// Everything one ablation run needs besides the variant under test.
struct ExperimentConfig {
  SynthConfig data;
  ModelConfig model;
  TrainConfig train;
  EvalOptions eval;
  double train_frac = 0.5;

  // Small-image defaults sized for a single CPU core.
  static ExperimentConfig desk();
  // Keys are prefixed model., synth., train., split. and eval.; the pseudo
  // key model.preset (paper|toy) replaces the whole model section.
  KeyValues to_key_values() const;
  bool apply(std::string_view key, std::string_view value);
};

struct RunResult {
  double rank1 = 0;
  double map = 0;
};

// One seeded run: generate, split, train, extract, evaluate each requested
// (branch, metric) view of the same trained model.
struct View {
  Branch branch = Branch::joint;
  Metric metric = Metric::l2;
};
std::vector<RunResult> run_experiment(const ExperimentConfig& config, std::uint64_t seed,
                                      const std::vector<View>& views);

struct SuiteRow {
  std::string name;
  std::vector<double> rank1;  // per seed
  std::vector<double> map;
  double mean_rank1() const;
  double mean_map() const;
};

// "better" is expected to score at least "worse" on Rank-1.
struct Comparison {
  std::string better;
  std::string worse;
  std::vector<double> margins;  // per seed, Rank-1(better) - Rank-1(worse)
  std::size_t wins() const;     // seeds with margin >= 0
  bool holds() const;           // wins on at least two thirds of the seeds
};

struct SuiteReport {
  std::string suite;
  std::vector<std::uint64_t> seeds;
  std::vector<SuiteRow> rows;
  std::vector<Comparison> comparisons;
  KeyValues config;
  const SuiteRow& row(const std::string& name) const;
};

std::vector<std::string> suite_names();
// Throws ConfigError for an unknown suite.
SuiteReport run_suite(const std::string& suite, const ExperimentConfig& config, const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const std::string&)>& progress = {});
std::string suite_json(const SuiteReport& report);

}  // namespace jlml
