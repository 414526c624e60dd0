#include "jlml/trainer.hpp"

#include <cmath>

#include "jlml/errors.hpp"

namespace jlml {

void TrainConfig::validate() const {
  if (!(base_lr > 0)) throw ConfigError("train: base_lr must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("train: momentum must lie in [0, 1)");
  if (!(lr_factor > 0 && lr_factor <= 1)) throw ConfigError("train: lr_factor must lie in (0, 1]");
  if (lr_step_iters == 0) throw ConfigError("train: lr_step_iters must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
}

KeyValues TrainConfig::to_key_values() const {
  return {
      {"train.base_lr", format_double(base_lr)},
      {"train.lr_step_iters", std::to_string(lr_step_iters)},
      {"train.lr_factor", format_double(lr_factor)},
      {"train.momentum", format_double(momentum)},
      {"train.iterations", std::to_string(iterations)},
      {"train.batch_size", std::to_string(batch_size)},
      {"train.seed", std::to_string(seed)},
  };
}

bool TrainConfig::apply(std::string_view key, std::string_view value) {
  if (key == "train.base_lr") base_lr = parse_double(key, value);
  else if (key == "train.lr_step_iters") lr_step_iters = parse_size(key, value);
  else if (key == "train.lr_factor") lr_factor = parse_double(key, value);
  else if (key == "train.momentum") momentum = parse_double(key, value);
  else if (key == "train.iterations") iterations = parse_size(key, value);
  else if (key == "train.batch_size") batch_size = parse_size(key, value);
  else if (key == "train.seed") seed = parse_u64(key, value);
  else return false;
  return true;
}

double lr_at(const TrainConfig& config, std::size_t iter) {
  const std::size_t steps = iter / config.lr_step_iters;
  return config.base_lr * std::pow(config.lr_factor, static_cast<double>(steps));
}

TrainState make_train_state(const JlmlModel& model, const TrainConfig& config) {
  TrainState state;
  for (const auto& p : model.parameters()) state.velocity.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
  state.rng.seed(config.seed);
  return state;
}

void sgd_step(const std::vector<NamedTensor>& params, std::vector<Tensor>& velocity, double lr, double momentum) {
  if (params.size() != velocity.size()) throw DimensionError("sgd_step: one velocity buffer per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& w = params[i].tensor;
    if (velocity[i].shape() != w.shape() || velocity[i].dtype() != w.dtype()) {
      throw DimensionError("sgd_step: velocity of '" + params[i].name + "' does not mirror the parameter");
    }
    if (w.has_grad() && !w.grad_all_finite()) {
      for (std::size_t k = 0; k < w.numel(); ++k) {
        if (!std::isfinite(w.grad_at(k))) {
          throw NumericError("sgd_step: non-finite gradient " + std::to_string(w.grad_at(k)) + " in '" +
                             params[i].name + "' element " + std::to_string(k));
        }
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor w = params[i].tensor;
    visit_dtype(w.dtype(), [&](auto zero) {
      using T = decltype(zero);
      auto v = velocity[i].data<T>();
      auto x = w.data<T>();
      const T mu = static_cast<T>(momentum), rate = static_cast<T>(lr);
      if (w.has_grad()) {
        std::span<const T> g = std::as_const(w).grad<T>();
        for (std::size_t k = 0; k < x.size(); ++k) {
          v[k] = mu * v[k] + rate * g[k];
          x[k] -= v[k];
        }
      } else {
        for (std::size_t k = 0; k < x.size(); ++k) {
          v[k] = mu * v[k];
          x[k] -= v[k];
        }
      }
    });
  }
}

ClassMap::ClassMap(const IdentityDataset& dataset) : ids_(dataset.identity_set()) {
  for (std::size_t c = 0; c < ids_.size(); ++c) index_[ids_[c]] = c;
}

std::size_t ClassMap::class_of(std::size_t id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw ConfigError("identity " + std::to_string(id) + " has no training class");
  return it->second;
}

Batch sample_batch(const IdentityDataset& dataset, const ClassMap& classes, std::size_t batch_size,
                   std::mt19937_64& rng) {
  if (dataset.size() == 0) throw ConfigError("sample_batch: empty dataset");
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  Batch b;
  for (std::size_t i = 0; i < batch_size; ++i) b.indices.push_back(pick(rng));
  b.images = dataset.gather(b.indices);
  for (std::size_t i : b.indices) b.labels.push_back(classes.class_of(dataset.ids[i]));
  return b;
}

void train_steps(const JlmlModel& model, const IdentityDataset& dataset, const TrainConfig& config, TrainState& state,
                 std::size_t steps, const TrainHook& hook) {
  config.validate();
  const ClassMap classes(dataset);
  if (classes.size() != model.config().num_identities) {
    throw ConfigError("train: model has " + std::to_string(model.config().num_identities) +
                      " identity classes but the training set has " + std::to_string(classes.size()));
  }
  if (dataset.height != model.config().input_height || dataset.width != model.config().input_width) {
    throw ConfigError("train: images are " + std::to_string(dataset.height) + "x" + std::to_string(dataset.width) +
                      " but the model expects " + std::to_string(model.config().input_height) + "x" +
                      std::to_string(model.config().input_width));
  }
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t iter = state.iteration;
    const double lr = lr_at(config, iter);
    Batch batch = sample_batch(dataset, classes, config.batch_size, state.rng);
    if (model.dtype() != DType::f32) batch.images = batch.images.to(model.dtype());
    IterationRecord rec{iter, lr, {}};
    {
      Graph graph;
      const ForwardOutput out = model.forward(batch.images, Mode::train);
      LossResult loss = combined_losses(out, batch.labels, model);
      rec.loss = loss.breakdown;
      if (!std::isfinite(rec.loss.total)) {
        throw NumericError("train: loss diverged (" + std::to_string(rec.loss.total) + ") at iteration " +
                           std::to_string(iter));
      }
      graph.backward(loss.total);
    }
    try {
      sgd_step(model.parameters(), state.velocity, lr, config.momentum);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(iter));
    }
    model.zero_grad();
    state.history.push_back(rec);
    ++state.iteration;
    if (hook) hook(rec, batch);
  }
}

std::vector<IterationRecord> train(const JlmlModel& model, const IdentityDataset& dataset, const TrainConfig& config,
                                   const TrainHook& hook) {
  TrainState state = make_train_state(model, config);
  train_steps(model, dataset, config, state, config.iterations, hook);
  return std::move(state.history);
}

std::string training_log_csv(const std::vector<IterationRecord>& history, const KeyValues& provenance) {
  std::string out;
  for (const auto& [k, v] : provenance) out += "# " + k + "=" + v + "\n";
  out += "iter,lr,ce_global,ce_local,reg_global,reg_local\n";
  for (const auto& r : history) {
    out += std::to_string(r.iter) + "," + format_double(r.lr) + "," + format_double(r.loss.ce_global) + "," +
           format_double(r.loss.ce_local) + "," + format_double(r.loss.reg_global) + "," +
           format_double(r.loss.reg_local) + "\n";
  }
  return out;
}

}  // namespace jlml
