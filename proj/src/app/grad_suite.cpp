#include "jlml/grad_suite.hpp"

#include <random>

#include "jlml/errors.hpp"
#include "jlml/losses.hpp"
#include "jlml/model.hpp"
#include "jlml/ops.hpp"

namespace jlml {

namespace {

constexpr double kSmooth = 1e-4;
constexpr double kKinked = 1e-3;

// Uniform in [lo, hi]; each input gets its own stream so cases stay stable
// when one is edited.
Tensor uniform(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t = Tensor::zeros(std::move(shape), DType::f64);
  for (std::size_t i = 0; i < t.numel(); ++i) t.set_value_at(i, dist(rng));
  return t;
}

// |v| in [gap, 1] with random sign, away from the kinks of relu and the norms.
Tensor away_from_zero(Shape shape, std::uint64_t seed, double gap) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(gap, 1.0);
  std::bernoulli_distribution neg(0.5);
  Tensor t = Tensor::zeros(std::move(shape), DType::f64);
  for (std::size_t i = 0; i < t.numel(); ++i) t.set_value_at(i, neg(rng) ? -mag(rng) : mag(rng));
  return t;
}

std::uint64_t key(std::uint64_t seed, std::uint64_t input) { return seed * 1000 + input; }

GradcheckOptions opts(std::uint64_t seed, double eps = 1e-3, std::size_t max_probes = 0) {
  GradcheckOptions o;
  o.eps = eps;
  o.seed = seed + 7919;  // never equal to an input stream
  o.max_probes_per_input = max_probes;
  return o;
}

ModelConfig small_model(LossMode mode) {
  ModelConfig c = ModelConfig::toy();
  c.input_height = 16;
  c.input_width = 16;
  c.stem_channels = 3;
  c.global_stages = {{{2, 2, 4}, {2, 2, 4}, {3, 3, 5}, {3, 3, 6}}};
  c.local_stages = {{{2, 2, 3}, {2, 2, 3}, {2, 2, 4}, {2, 2, 4}}};
  c.blocks_per_stage = 1;
  c.stripes = 2;
  c.global_feature_dim = 5;
  c.local_feature_dim = 4;
  c.num_identities = 3;
  c.loss_mode = mode;
  // Large enough that the penalties visibly shape the gradient.
  c.lambda_global = c.lambda_local = 0.05;
  return c;
}

GradcheckResult model_case(LossMode mode, std::uint64_t seed) {
  const JlmlModel model = JlmlModel::build(small_model(mode), key(seed, 0), DType::f64);
  const Tensor x = uniform({4, 3, 16, 16}, key(seed, 1), 0.0, 1.0);
  std::vector<std::size_t> labels{0, 1, 2, 0};
  std::shuffle(labels.begin(), labels.end(), std::mt19937_64(key(seed, 2)));
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  // eps 1e-4: large enough to clear rounding noise on near-zero gradients,
  // small enough that batch-norm curvature stays below the tolerance.
  return gradcheck(
      [&](std::span<const Tensor>) { return combined_losses(model.forward(x, Mode::train), labels, model).total; },
      params, opts(seed, 1e-4, 3));
}

}  // namespace

std::vector<GradCase> grad_suite() {
  std::vector<GradCase> cases;
  cases.push_back({"matmul", kSmooth, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return matmul(in[0], in[1]); },
                                      {uniform({3, 4}, key(s, 0)), uniform({4, 2}, key(s, 1))}, opts(s));
                   }});
  cases.push_back({"linear", kSmooth, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return linear(in[0], in[1], in[2]); },
                                      {uniform({3, 5}, key(s, 0)), uniform({4, 5}, key(s, 1)), uniform({4}, key(s, 2))},
                                      opts(s));
                   }});
  cases.push_back({"add", kSmooth, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return add(in[0], in[1]); },
                                      {uniform({2, 3}, key(s, 0)), uniform({2, 3}, key(s, 1))}, opts(s));
                   }});
  cases.push_back({"scale", kSmooth, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return scale(in[0], -1.75); },
                                      {uniform({2, 3}, key(s, 0))}, opts(s));
                   }});
  cases.push_back({"reshape", kSmooth, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return reshape(in[0], {3, 4}); },
                                      {uniform({2, 6}, key(s, 0))}, opts(s));
                   }});
  cases.push_back({"relu", kKinked, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return relu(in[0]); },
                                      {away_from_zero({4, 5}, key(s, 0), 0.05)}, opts(s));
                   }});
  cases.push_back({"conv2d", kSmooth, [](std::uint64_t s) {
                     return gradcheck(
                         [](std::span<const Tensor> in) {
                           return conv2d(in[0], in[1], in[2], {.stride = {2, 1}, .pad = {1, 1}});
                         },
                         {uniform({2, 3, 5, 4}, key(s, 0)), uniform({4, 3, 3, 3}, key(s, 1)), uniform({4}, key(s, 2))},
                         opts(s));
                   }});
  cases.push_back({"maxpool2d", kKinked, [](std::uint64_t s) {
                     return gradcheck(
                         [](std::span<const Tensor> in) { return maxpool2d(in[0], Pool2dOptions::square(3, 2, 1)); },
                         {uniform({2, 2, 6, 5}, key(s, 0))}, opts(s, 1e-6));
                   }});
  cases.push_back({"avgpool2d", kSmooth, [](std::uint64_t s) {
                     return gradcheck(
                         [](std::span<const Tensor> in) {
                           return avgpool2d(in[0], Pool2dOptions::same({2, 2}, {1, 2}, 5, 5));
                         },
                         {uniform({2, 2, 5, 5}, key(s, 0))}, opts(s));
                   }});
  cases.push_back({"global_avgpool", kSmooth, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return global_avgpool(in[0]); },
                                      {uniform({2, 3, 3, 4}, key(s, 0))}, opts(s));
                   }});
  cases.push_back({"split", kSmooth, [](std::uint64_t s) {
                     return gradcheck(
                         [](std::span<const Tensor> in) {
                           auto parts = slice_h(in[0], 2);
                           return concat({scale(parts[1], 2.0), parts[0]}, 1);
                         },
                         {uniform({2, 3, 4, 2}, key(s, 0))}, opts(s));
                   }});
  cases.push_back({"concat", kSmooth, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return concat({in[0], in[1]}, 1); },
                                      {uniform({2, 3, 2, 2}, key(s, 0)), uniform({2, 1, 2, 2}, key(s, 1))}, opts(s));
                   }});
  for (Mode mode : {Mode::train, Mode::eval}) {
    cases.push_back({mode == Mode::train ? "batchnorm2d/train" : "batchnorm2d/eval", kSmooth, [mode](std::uint64_t s) {
                       BatchNormState bn{uniform({3}, key(s, 3)), uniform({3}, key(s, 4), 0.5, 2.0)};
                       return gradcheck(
                           [&bn, mode](std::span<const Tensor> in) {
                             return batchnorm2d(in[0], in[1], in[2], bn, mode);
                           },
                           {uniform({3, 3, 2, 3}, key(s, 0)), away_from_zero({3}, key(s, 1), 0.5), uniform({3}, key(s, 2))},
                           opts(s));
                     }});
  }
  cases.push_back({"softmax_xent", kSmooth, [](std::uint64_t s) {
                     std::vector<std::size_t> labels{2, 0, 3};
                     return gradcheck([labels](std::span<const Tensor> in) { return softmax_xent(in[0], labels); },
                                      {uniform({3, 4}, key(s, 0), -2, 2)}, opts(s, 1e-5));
                   }});
  cases.push_back({"group_lasso_21", kKinked, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return group_lasso_21(in[0]); },
                                      {away_from_zero({4, 5}, key(s, 0), 1e-2)}, opts(s, 1e-6));
                   }});
  cases.push_back({"exclusive_group_lasso_12", kKinked, [](std::uint64_t s) {
                     return gradcheck([](std::span<const Tensor> in) { return exclusive_group_lasso_12(in[0], 3, 2); },
                                      {away_from_zero({4, 6}, key(s, 0), 1e-2)}, opts(s, 1e-6));
                   }});
  cases.push_back({"model+loss/multiloss", kKinked, [](std::uint64_t s) { return model_case(LossMode::multi, s); }});
  cases.push_back({"model+loss/uniloss", kKinked, [](std::uint64_t s) { return model_case(LossMode::uni, s); }});
  return cases;
}

std::vector<GradCaseReport> run_grad_suite(std::size_t seeds, const std::string& only,
                                           const std::function<void(const GradCaseReport&)>& progress) {
  if (seeds == 0) throw ConfigError("gradcheck: at least one seed is required");
  std::vector<GradCaseReport> out;
  for (const GradCase& c : grad_suite()) {
    if (!only.empty() && c.op != only) continue;
    GradCaseReport r{c.op, c.tolerance, 0.0, {}, 0, true, {}};
    for (std::uint64_t s = 0; s < seeds; ++s) {
      try {
        const GradcheckResult g = c.run(s);
        r.probes += g.probes;
        if (g.max_rel_error >= r.max_rel_error) {
          r.max_rel_error = g.max_rel_error;
          r.worst_location = "seed " + std::to_string(s) + " " + g.worst_location;
        }
        r.passed = r.passed && g.passed(c.tolerance);
      } catch (const std::exception& e) {
        r.passed = false;
        r.error = "seed " + std::to_string(s) + ": " + e.what();
        break;
      }
    }
    if (progress) progress(r);
    out.push_back(std::move(r));
  }
  if (out.empty()) throw ConfigError("gradcheck: no operation named '" + only + "'");
  return out;
}

}  // namespace jlml
