#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "jlml/errors.hpp"
#include "jlml/graph.hpp"
#include "jlml/trainer.hpp"
#include "model_fixtures.hpp"

using namespace jlml;
using jlml::testing::tiny_config;

namespace {

IdentityDataset tiny_data(std::size_t ids = 3, std::size_t size = 16) {
  SynthConfig c;
  c.num_ids = ids;
  c.cameras = 2;
  c.images_per_id_per_cam = 3;
  c.height = c.width = size;
  c.seed = 5;
  return generate(c);
}

TrainConfig quick(std::size_t iterations) {
  TrainConfig t;
  t.iterations = iterations;
  t.batch_size = 6;
  t.seed = 9;
  return t;
}

Tensor scalar_param(double w) {
  Tensor t = Tensor::full({1}, w, DType::f64);
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor& t, double g) { t.grad<double>()[0] = g; }

bool same_state(const JlmlModel& a, const JlmlModel& b) {
  for (const auto& nt : a.state())
    if (!nt.tensor.bit_equal(b.tensor(nt.name))) return false;
  return true;
}

// Average l2 norm of the smallest tenth of the global feature matrix's columns.
double bottom_decile_mass(const JlmlModel& model) {
  const Tensor& w = model.global_feature_weight();
  std::vector<double> norms;
  for (std::size_t c = 0; c < w.dim(1); ++c) {
    double sq = 0;
    for (std::size_t r = 0; r < w.dim(0); ++r) sq += std::pow(w.value_at(r * w.dim(1) + c), 2);
    norms.push_back(std::sqrt(sq));
  }
  std::sort(norms.begin(), norms.end());
  const std::size_t k = std::max<std::size_t>(1, norms.size() / 10);
  double s = 0;
  for (std::size_t i = 0; i < k; ++i) s += norms[i];
  return s / static_cast<double>(k);
}

double mean_column_norm(const JlmlModel& model) {
  const Tensor& w = model.global_feature_weight();
  double total = 0;
  for (std::size_t c = 0; c < w.dim(1); ++c) {
    double sq = 0;
    for (std::size_t r = 0; r < w.dim(0); ++r) sq += std::pow(w.value_at(r * w.dim(1) + c), 2);
    total += std::sqrt(sq);
  }
  return total / static_cast<double>(w.dim(1));
}

}  // namespace

TEST_CASE("stepped learning rate") {
  TrainConfig c;
  CHECK(lr_at(c, 0) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(c, 19999) == doctest::Approx(0.01).epsilon(1e-15));
  CHECK(lr_at(c, 20000) == doctest::Approx(0.001).epsilon(1e-15));
  CHECK(lr_at(c, 40000) == doctest::Approx(0.0001).epsilon(1e-15));
  double prev = lr_at(c, 0);
  for (std::size_t it = 0; it < 100000; it += 777) {
    CHECK(lr_at(c, it) <= prev);
    prev = lr_at(c, it);
  }
  c.lr_factor = 1;
  CHECK(lr_at(c, 0) == lr_at(c, 1000000));
}

TEST_CASE("train config validation and key values") {
  TrainConfig c;
  c.base_lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.momentum = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr_factor = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  TrainConfig d;
  d.base_lr = 0.02;
  d.iterations = 77;
  d.seed = 123456789012345ULL;
  TrainConfig back;
  for (const auto& [k, v] : d.to_key_values()) REQUIRE(back.apply(k, v));
  CHECK(back == d);
}

TEST_CASE("sgd step by hand") {
  Tensor w = scalar_param(1.0);
  std::vector<NamedTensor> params{{"w", w}};
  std::vector<Tensor> v{Tensor::zeros({1}, DType::f64)};
  set_grad(w, 0.5);
  sgd_step(params, v, 0.1, 0.9);
  CHECK(v[0].item() == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(w.item() == doctest::Approx(0.95).epsilon(1e-15));

  Tensor u = scalar_param(1.0);
  std::vector<NamedTensor> p2{{"u", u}};
  std::vector<Tensor> v2{Tensor::zeros({1}, DType::f64)};
  set_grad(u, 1.0);
  sgd_step(p2, v2, 0.1, 0.9);
  CHECK(u.item() == doctest::Approx(0.9).epsilon(1e-15));
  sgd_step(p2, v2, 0.1, 0.9);  // gradient slot still holds 1
  CHECK(v2[0].item() == doctest::Approx(0.19).epsilon(1e-15));
  CHECK(u.item() == doctest::Approx(0.71).epsilon(1e-15));
}

TEST_CASE("with zero gradient the weight settles geometrically") {
  Tensor w = scalar_param(2.0);
  std::vector<NamedTensor> params{{"w", w}};
  std::vector<Tensor> v{Tensor::full({1}, 0.3, DType::f64)};
  const double mu = 0.9;
  const double fixed_point = 2.0 - 0.3 * mu / (1 - mu);
  double prev_v = 0.3;
  for (int k = 0; k < 400; ++k) {
    sgd_step(params, v, 0.1, mu);  // no gradient slot: treated as zero
    CHECK(v[0].item() == doctest::Approx(mu * prev_v).epsilon(1e-12));
    prev_v = v[0].item();
  }
  CHECK(std::abs(v[0].item()) < 1e-15);
  CHECK(w.item() == doctest::Approx(fixed_point).epsilon(1e-12));
}

TEST_CASE("non-finite gradients abort before anything moves") {
  Tensor a = scalar_param(1.0), b = Tensor::full({3}, 1.0, DType::f64);
  b.set_requires_grad(true);
  std::vector<NamedTensor> params{{"a", a}, {"layer.weight", b}};
  std::vector<Tensor> v{Tensor::zeros({1}, DType::f64), Tensor::zeros({3}, DType::f64)};
  set_grad(a, 1.0);
  b.grad<double>()[2] = std::numeric_limits<double>::quiet_NaN();
  try {
    sgd_step(params, v, 0.1, 0.9);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("layer.weight") != std::string::npos);
    CHECK(msg.find("element 2") != std::string::npos);
  }
  CHECK(a.item() == 1.0);
  CHECK(v[0].item() == 0.0);

  std::vector<Tensor> wrong{Tensor::zeros({1}, DType::f64), Tensor::zeros({2}, DType::f64)};
  CHECK_THROWS_AS(sgd_step(params, wrong, 0.1, 0.9), DimensionError);
}

TEST_CASE("batch sampling is seeded, label-only and uniform") {
  const IdentityDataset ds = tiny_data(4);
  const ClassMap classes(ds);
  CHECK(classes.size() == 4);
  CHECK(classes.class_of(1) == 0);
  CHECK(classes.id_of(3) == 4);
  CHECK_THROWS_AS(classes.class_of(9), ConfigError);

  std::mt19937_64 r1(3), r2(3);
  for (int k = 0; k < 5; ++k) {
    const Batch a = sample_batch(ds, classes, 7, r1), b = sample_batch(ds, classes, 7, r2);
    CHECK(a.indices == b.indices);
    CHECK(a.labels == b.labels);
    CHECK(a.images.bit_equal(b.images));
    CHECK(a.images.shape() == Shape{7, 3, 16, 16});
    for (std::size_t i = 0; i < 7; ++i) CHECK(a.labels[i] == classes.class_of(ds.ids[a.indices[i]]));
  }
  const Batch one = sample_batch(ds, classes, 1, r1);
  CHECK(one.labels.size() == 1);

  // Unequal class sizes: drop most images of identity 2.
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.ids[i] != 2 || ds.cameras[i] == 1) keep.push_back(i);
  const IdentityDataset skewed = ds.subset(keep);
  const ClassMap sc(skewed);
  std::vector<double> expected(sc.size(), 0);
  for (std::size_t id : skewed.ids) expected[sc.class_of(id)] += 1.0 / static_cast<double>(skewed.size());
  const std::size_t draws = 100000;
  std::vector<std::size_t> counts(sc.size(), 0);
  std::mt19937_64 rng(17);
  for (std::size_t k = 0; k < draws / 100; ++k)
    for (std::size_t label : sample_batch(skewed, sc, 100, rng).labels) ++counts[label];
  for (std::size_t c = 0; c < sc.size(); ++c) {
    const double mean = static_cast<double>(draws) * expected[c];
    const double sigma = std::sqrt(mean * (1 - expected[c]));
    CHECK(std::abs(static_cast<double>(counts[c]) - mean) <= 3 * sigma);
  }
}

TEST_CASE("zero iterations leave the model untouched") {
  const JlmlModel model = JlmlModel::build(tiny_config(), 4);
  const JlmlModel before = model.clone();
  const auto history = train(model, tiny_data(), quick(0));
  CHECK(history.empty());
  CHECK(same_state(model, before));
}

TEST_CASE("training is bit-reproducible within one process") {
  const IdentityDataset ds = tiny_data();
  const JlmlModel a = JlmlModel::build(tiny_config(), 4), b = JlmlModel::build(tiny_config(), 4);
  const auto ha = train(a, ds, quick(12));
  const auto hb = train(b, ds, quick(12));
  REQUIRE(ha.size() == 12);
  CHECK(same_state(a, b));
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(ha[i].iter == i);
    CHECK(ha[i].loss.total == hb[i].loss.total);
  }
  CHECK_FALSE(same_state(a, JlmlModel::build(tiny_config(), 4)));
}

TEST_CASE("segments continue exactly, including momentum across a learning-rate step") {
  const IdentityDataset ds = tiny_data();
  TrainConfig cfg = quick(10);
  cfg.lr_step_iters = 5;
  const JlmlModel whole = JlmlModel::build(tiny_config(), 2), parts = JlmlModel::build(tiny_config(), 2);
  train(whole, ds, cfg);
  TrainState state = make_train_state(parts, cfg);
  train_steps(parts, ds, cfg, state, 4);
  train_steps(parts, ds, cfg, state, 6);
  CHECK(state.iteration == 10);
  CHECK(state.history.size() == 10);
  CHECK(state.history[5].lr == doctest::Approx(cfg.base_lr * cfg.lr_factor));
  CHECK(same_state(whole, parts));
  for (std::size_t i = 0; i < state.velocity.size(); ++i) {
    CHECK(state.velocity[i].shape() == parts.parameters()[i].tensor.shape());
  }
}

TEST_CASE("both branch losses come from the batch the hook reports") {
  const IdentityDataset ds = tiny_data();
  const JlmlModel model = JlmlModel::build(tiny_config(), 6);
  JlmlModel shadow = model.clone();
  std::size_t calls = 0;
  train(model, ds, quick(5), [&](const IterationRecord& rec, const Batch& batch) {
    const ForwardOutput out = shadow.forward(batch.images, Mode::train);
    const LossBreakdown again = combined_losses(out, batch.labels, shadow).breakdown;
    CHECK(again.ce_global == rec.loss.ce_global);
    CHECK(again.ce_local == rec.loss.ce_local);
    CHECK(again.reg_global == rec.loss.reg_global);
    CHECK(batch.labels.size() == 6);
    shadow.copy_state_from(model);
    ++calls;
  });
  CHECK(calls == 5);
}

TEST_CASE("mismatched models and diverging losses are reported") {
  const IdentityDataset ds = tiny_data();
  ModelConfig wrong = tiny_config();
  wrong.num_identities = 5;
  CHECK_THROWS_AS(train(JlmlModel::build(wrong, 0), ds, quick(1)), ConfigError);
  CHECK_THROWS_AS(train(JlmlModel::build(tiny_config(), 0), tiny_data(3, 32), quick(1)), ConfigError);

  const JlmlModel model = JlmlModel::build(tiny_config(), 0);
  Tensor bias = model.tensor("global.head.bias");  // handle aliases the parameter
  bias.set_value_at(0, std::numeric_limits<double>::infinity());
  try {
    train(model, ds, quick(3));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("iteration 0") != std::string::npos);
  }
}

TEST_CASE("a dominant group penalty collapses the global feature columns") {
  ModelConfig cfg = tiny_config();
  cfg.global_feature_dim = 16;
  const IdentityDataset ds = tiny_data();
  TrainConfig tc = quick(60);
  tc.base_lr = 0.005;
  cfg.lambda_global = 0;
  const JlmlModel plain = JlmlModel::build(cfg, 3);
  const auto hp = train(plain, ds, tc);
  cfg.lambda_global = 10;
  const JlmlModel heavy = JlmlModel::build(cfg, 3);
  const auto hh = train(heavy, ds, tc);
  MESSAGE("mean column norm plain " << mean_column_norm(plain) << " heavy " << mean_column_norm(heavy));
  CHECK(mean_column_norm(heavy) < 0.1 * mean_column_norm(plain));
  CHECK(hh.back().loss.ce_global > hp.back().loss.ce_global);
}

TEST_CASE("selective feature learning thins the weakest global columns") {
  ModelConfig cfg = ModelConfig::toy();
  cfg.input_height = cfg.input_width = 32;
  cfg.num_identities = 8;
  SynthConfig data;
  data.num_ids = 8;
  data.height = data.width = 32;
  const IdentityDataset ds = generate(data);
  // The penalty is small, so its pull only outgrows run-to-run drift after a
  // few hundred updates.
  TrainConfig tc;
  tc.iterations = 500;
  tc.batch_size = 16;
  cfg.sfl_enabled = false;
  const JlmlModel off = JlmlModel::build(cfg, 1);
  train(off, ds, tc);
  cfg.sfl_enabled = true;
  const JlmlModel on = JlmlModel::build(cfg, 1);
  train(on, ds, tc);
  MESSAGE("bottom decile mass on " << bottom_decile_mass(on) << " off " << bottom_decile_mass(off));
  CHECK(bottom_decile_mass(on) < bottom_decile_mass(off));
}

TEST_CASE("training log layout") {
  IterationRecord r;
  r.iter = 3;
  r.lr = 0.01;
  r.loss.ce_global = 1.5;
  r.loss.ce_local = 2.25;
  r.loss.reg_global = 0.125;
  r.loss.reg_local = 0;
  const std::string csv = training_log_csv({r}, {{"train.seed", "1"}});
  CHECK(csv == "# train.seed=1\niter,lr,ce_global,ce_local,reg_global,reg_local\n3,0.01,1.5,2.25,0.125,0\n");
}
