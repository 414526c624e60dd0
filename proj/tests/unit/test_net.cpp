#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "jlml/accounting.hpp"
#include "jlml/binary_io.hpp"
#include "jlml/checkpoint.hpp"
#include "jlml/errors.hpp"
#include "jlml/model.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

using namespace jlml;
using jlml::testing::random_projection;
using jlml::testing::random_tensor;
using jlml::testing::tiny_config;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "jlml_test_net";
  std::filesystem::create_directories(dir);
  return dir / name;
}

bool outputs_bit_equal(const ForwardOutput& a, const ForwardOutput& b) {
  return a.global_feature.bit_equal(b.global_feature) && a.local_feature.bit_equal(b.local_feature) &&
         a.global_logits.bit_equal(b.global_logits) && a.local_logits.bit_equal(b.local_logits);
}

}  // namespace

TEST_CASE("paper preset layer plan") {
  const Accounting acc = account(ModelConfig::paper());
  CHECK(acc.depth == 39);
  CHECK(acc.streams == 5);

  const double params = static_cast<double>(acc.params_without_heads());
  const double flops = static_cast<double>(acc.flops);
  MESSAGE("params (no heads) ", params, ", heads ", acc.params_heads, ", flops ", flops);
  CHECK(std::abs(params / 7.2e6 - 1.0) <= 0.2);
  CHECK(std::abs(flops / 1.54e9 - 1.0) <= 0.2);

  struct Expected {
    std::size_t gh, gw, lh, lw;
  };
  const std::vector<Expected> table{{112, 112, 112, 112}, {56, 56, 28, 56}, {28, 28, 14, 28}, {14, 14, 7, 14},
                                    {7, 7, 4, 7}};
  REQUIRE(acc.stages.size() == table.size());
  for (std::size_t s = 0; s < table.size(); ++s) {
    CAPTURE(acc.stages[s].stage);
    CHECK(acc.stages[s].global_h == table[s].gh);
    CHECK(acc.stages[s].global_w == table[s].gw);
    CHECK(acc.stages[s].local_h == table[s].lh);
    CHECK(acc.stages[s].local_w == table[s].lw);
  }
}

TEST_CASE("accounting equals the instantiated parameter total") {
  std::vector<ModelConfig> configs{ModelConfig::toy(), tiny_config(), ModelConfig::paper()};
  ModelConfig c = ModelConfig::toy();
  c.share_stem = false;
  configs.push_back(c);
  c.loss_mode = LossMode::uni;
  configs.push_back(c);
  c.batch_norm = false;
  c.stripes = 1;
  configs.push_back(c);
  for (const auto& config : configs) {
    const JlmlModel model = JlmlModel::build(config, 3);
    CHECK(count_params(config) == model.parameter_count());
    // Each planned conv has a weight of the planned shape.
    for (const LayerRow& row : account(config).layers) {
      if (row.kind != "conv" || row.name.rfind("local.stripe", 0) != 0) continue;
      for (std::size_t j = 1; j <= config.stripes; ++j) {
        const std::string name = "local.stripe" + std::to_string(j) + row.name.substr(12) + ".weight";
        CHECK(model.tensor(name).shape() == Shape{row.out_channels, row.in_channels, row.kernel, row.kernel});
      }
    }
  }
}

TEST_CASE("unshared stems add parameters") {
  ModelConfig c = ModelConfig::paper();
  const std::size_t shared = count_params(c);
  c.share_stem = false;
  CHECK(count_params(c) > shared);
}

TEST_CASE("doubling every width roughly quadruples conv parameters") {
  auto conv_params = [](const ModelConfig& c) {
    std::size_t n = 0;
    for (const auto& row : account(c).layers)
      if (row.kind == "conv") n += row.params;
    return static_cast<double>(n);
  };
  ModelConfig a = ModelConfig::toy();
  ModelConfig b = a;
  b.stem_channels *= 2;
  for (auto* stages : {&b.global_stages, &b.local_stages})
    for (auto& w : *stages) w = {2 * w.reduce, 2 * w.spatial, 2 * w.expand};
  const double ratio = conv_params(b) / conv_params(a);
  CHECK(ratio > 3.8);
  CHECK(ratio < 4.0);
}

TEST_CASE("toy forward shapes") {
  const ModelConfig c = ModelConfig::toy();
  const JlmlModel model = JlmlModel::build(c, 1);
  const auto out = model.forward(random_tensor({2, 3, 64, 64}, 2, DType::f32), Mode::eval);
  CHECK(out.global_feature.shape() == Shape{2, c.global_feature_dim});
  CHECK(out.local_feature.shape() == Shape{2, c.local_feature_dim});
  CHECK(out.global_logits.shape() == Shape{2, c.num_identities});
  CHECK(out.local_logits.shape() == Shape{2, c.num_identities});
  CHECK_FALSE(out.fused_logits.defined());
  CHECK(out.global_feature.all_finite());
  CHECK(out.local_feature.all_finite());

  const auto zero = model.forward(Tensor::zeros({2, 3, 64, 64}), Mode::train);
  CHECK(zero.global_logits.all_finite());
  CHECK(zero.local_logits.all_finite());
}

TEST_CASE("uni-loss wiring uses one fused head") {
  ModelConfig c = tiny_config();
  c.loss_mode = LossMode::uni;
  const auto out = JlmlModel::build(c, 1).forward(random_tensor({2, 3, 16, 16}, 2, DType::f32), Mode::eval);
  CHECK(out.fused_logits.shape() == Shape{2, c.num_identities});
  CHECK_FALSE(out.global_logits.defined());
  CHECK(out.global_feature.shape() == Shape{2, c.global_feature_dim});
}

TEST_CASE("one stripe runs the local branch over the whole map") {
  ModelConfig c = tiny_config();
  c.stripes = 1;
  const auto out = JlmlModel::build(c, 1).forward(random_tensor({1, 3, 16, 16}, 2, DType::f32), Mode::eval);
  CHECK(out.local_feature.shape() == Shape{1, c.local_feature_dim});
  CHECK(JlmlModel::build(c, 1).local_feature_weight().shape() == Shape{4, 4});
}

TEST_CASE("feature matrices have the block layout") {
  const ModelConfig c = ModelConfig::paper();
  CHECK(count_params(c) > 0);
  const JlmlModel model = JlmlModel::build(c, 0);
  CHECK(model.global_feature_weight().shape() == Shape{512, 512});
  CHECK(model.local_feature_weight().shape() == Shape{512, 4 * 256});
}

TEST_CASE("invalid configs and inputs are rejected") {
  ModelConfig c = tiny_config();
  c.stripes = 3;  // stem height 8
  CHECK_THROWS_AS(JlmlModel::build(c, 0), ConfigError);
  c = tiny_config();
  c.local_stages[2].spatial = 0;
  CHECK_THROWS_AS(JlmlModel::build(c, 0), ConfigError);
  const JlmlModel model = JlmlModel::build(tiny_config(), 0);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 3, 16, 17}), Mode::eval), DimensionError);
  CHECK_THROWS_AS(model.forward(Tensor::zeros({1, 3, 16, 16}, DType::f64), Mode::eval), DimensionError);
}

TEST_CASE("eval forward is pure and build is seeded") {
  const JlmlModel a = JlmlModel::build(ModelConfig::toy(), 5);
  const JlmlModel b = JlmlModel::build(ModelConfig::toy(), 5);
  const JlmlModel other = JlmlModel::build(ModelConfig::toy(), 6);
  const Tensor x = random_tensor({2, 3, 64, 64}, 9, DType::f32);
  const auto first = a.forward(x, Mode::eval);
  CHECK(outputs_bit_equal(first, a.forward(x, Mode::eval)));
  CHECK(outputs_bit_equal(first, b.forward(x, Mode::eval)));
  CHECK_FALSE(first.global_feature.bit_equal(other.forward(x, Mode::eval).global_feature));
}

TEST_CASE("shared stem gradient is the sum of both branch gradients") {
  ModelConfig c = tiny_config();
  const JlmlModel shared = JlmlModel::build(c, 4, DType::f64);
  c.share_stem = false;
  const JlmlModel split = JlmlModel::build(c, 4, DType::f64);
  for (const auto& [name, t] : shared.state()) {
    if (name.rfind("stem.", 0) == 0) {
      const std::string suffix = name.substr(4);
      Tensor g = split.tensor("stem_global" + suffix), l = split.tensor("stem_local" + suffix);
      g.copy_from(t);
      l.copy_from(t);
    } else {
      Tensor dst = split.tensor(name);
      dst.copy_from(t);
    }
  }
  const Tensor x = random_tensor({3, 3, 16, 16}, 8);
  auto loss = [&](const JlmlModel& m) {
    const auto out = m.forward(x, Mode::train);
    return add(random_projection(out.global_logits, 1), random_projection(out.local_logits, 2));
  };
  {
    Graph g;
    g.backward(loss(shared));
  }
  {
    Graph g;
    g.backward(loss(split));
  }
  for (const std::string suffix : {".weight", ".gamma", ".beta"}) {
    const Tensor& s = shared.tensor("stem" + suffix);
    const Tensor& g = split.tensor("stem_global" + suffix);
    const Tensor& l = split.tensor("stem_local" + suffix);
    double worst = 0, scale = 0;
    for (std::size_t i = 0; i < s.numel(); ++i) {
      worst = std::max(worst, std::abs(s.grad_at(i) - (g.grad_at(i) + l.grad_at(i))));
      scale = std::max(scale, std::abs(s.grad_at(i)));
    }
    CAPTURE(suffix);
    CHECK(scale > 0);
    CHECK(worst <= 1e-12 * std::max(1.0, scale));
  }
}

TEST_CASE("config key-values round-trip") {
  ModelConfig c = ModelConfig::toy();
  c.loss_mode = LossMode::uni;
  c.lambda_global = 0.125;
  c.share_stem = false;
  CHECK(ModelConfig::from_key_values(c.to_key_values()) == c);
  CHECK(ModelConfig::from_key_values(parse_key_values(to_text(c.to_key_values()))) == c);
  CHECK_THROWS_AS(ModelConfig::from_key_values({{"colour", "red"}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_key_values({{"global_stage1", "1,2"}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_key_values({{"stripes", "-1"}}), ConfigError);
}

TEST_CASE("checkpoint round-trip") {
  const JlmlModel model = JlmlModel::build(ModelConfig::toy(), 11);
  // Move the running statistics away from their initial values.
  model.forward(random_tensor({4, 3, 64, 64}, 1, DType::f32), Mode::train);
  const auto path = scratch("a.jlmc");
  save_checkpoint(model, path);
  const JlmlModel loaded = load_checkpoint(path);
  CHECK(loaded.config() == model.config());
  save_checkpoint(loaded, scratch("b.jlmc"));
  CHECK(binary::read_file(path) == binary::read_file(scratch("b.jlmc")));

  const Tensor x = random_tensor({2, 3, 64, 64}, 3, DType::f32);
  CHECK(outputs_bit_equal(model.forward(x, Mode::eval), loaded.forward(x, Mode::eval)));
}

TEST_CASE("damaged checkpoints are rejected") {
  const std::string good = encode_checkpoint(JlmlModel::build(tiny_config(), 2));
  CHECK_NOTHROW(decode_checkpoint(good));

  std::string bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  bad = good;
  bad[4] = 9;
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() - 3)), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, good.size() / 2)), FormatError);
  CHECK_THROWS_AS(decode_checkpoint(good.substr(0, 3)), FormatError);

  // Same-length edit of the embedded config changes the head shapes.
  bad = good;
  const auto pos = bad.find("num_identities=3");
  REQUIRE(pos != std::string::npos);
  bad[pos + 15] = '4';
  CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
  CHECK_THROWS_AS(load_checkpoint(scratch("missing.jlmc")), IoError);
}
