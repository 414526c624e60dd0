#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "jlml/kv.hpp"
#include "jlml/losses.hpp"
#include "jlml/model.hpp"
#include "jlml/synth.hpp"

namespace jlml {

// Regulariser weights and the loss mode live in ModelConfig because they
// shape the model (heads) as well as the objective.
struct TrainConfig {
  double base_lr = 0.01;
  std::size_t lr_step_iters = 20000;
  double lr_factor = 0.1;
  double momentum = 0.9;
  std::size_t iterations = 300;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;

  void validate() const;
  KeyValues to_key_values() const;
  bool apply(std::string_view key, std::string_view value);
  bool operator==(const TrainConfig&) const = default;
};

// base_lr * lr_factor ^ floor(iter / lr_step_iters)
double lr_at(const TrainConfig& config, std::size_t iter);

struct IterationRecord {
  std::size_t iter = 0;
  double lr = 0;
  LossBreakdown loss;
};

struct TrainState {
  std::size_t iteration = 0;
  std::vector<Tensor> velocity;  // one per parameter, same shape
  std::mt19937_64 rng;
  std::vector<IterationRecord> history;
};

TrainState make_train_state(const JlmlModel& model, const TrainConfig& config);

// Accumulating momentum: v <- momentum * v + lr * g; w <- w - v. A parameter
// without a gradient is treated as having gradient zero. Throws NumericError
// naming the parameter when a gradient is not finite (nothing is updated).
void sgd_step(const std::vector<NamedTensor>& params, std::vector<Tensor>& velocity, double lr, double momentum);

// Maps the identity labels of a training set onto classes 0..n-1 in
// ascending id order.
class ClassMap {
 public:
  explicit ClassMap(const IdentityDataset& dataset);
  std::size_t size() const { return ids_.size(); }
  std::size_t class_of(std::size_t id) const;
  std::size_t id_of(std::size_t cls) const { return ids_.at(cls); }

 private:
  std::vector<std::size_t> ids_;
  std::map<std::size_t, std::size_t> index_;
};

struct Batch {
  std::vector<std::size_t> indices;
  Tensor images;
  std::vector<std::size_t> labels;  // classes
};

// Uniform sampling with replacement; labels are identity classes only.
Batch sample_batch(const IdentityDataset& dataset, const ClassMap& classes, std::size_t batch_size,
                   std::mt19937_64& rng);

// Called after every update with the record and the batch it was computed on.
using TrainHook = std::function<void(const IterationRecord&, const Batch&)>;

// Runs config.iterations steps of forward, combined-loss backward and SGD.
// The model's num_identities must equal the number of training identities.
// Throws NumericError with the iteration index when the loss diverges.
std::vector<IterationRecord> train(const JlmlModel& model, const IdentityDataset& dataset, const TrainConfig& config,
                                   const TrainHook& hook = {});
// Continues from a state (for callers that train in segments).
void train_steps(const JlmlModel& model, const IdentityDataset& dataset, const TrainConfig& config, TrainState& state,
                 std::size_t steps, const TrainHook& hook = {});

// CSV log: "# key=value" provenance lines, a header, then one row per
// iteration: iter,lr,ce_global,ce_local,reg_global,reg_local.
std::string training_log_csv(const std::vector<IterationRecord>& history, const KeyValues& provenance);

}  // namespace jlml
