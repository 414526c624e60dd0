#include "jlml/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "jlml/graph.hpp"

namespace jlml {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

namespace {

double project(const Tensor& out, const std::vector<double>& weights) {
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += out.value_at(i) * weights[i];
  return acc;
}

struct Evaluation {
  double value;
  std::uint64_t fingerprint;
};

Evaluation evaluate(const DifferentiableFn& fn, std::span<const Tensor> inputs, const std::vector<double>& weights) {
  kinks::Recorder recorder;
  Tensor out = fn(inputs);
  return {project(out, weights), recorder.digest()};
}

}  // namespace

GradcheckResult gradcheck(const DifferentiableFn& fn, std::vector<Tensor> inputs, const GradcheckOptions& options) {
  for (auto& t : inputs) {
    if (t.dtype() != DType::f64) throw DimensionError("gradcheck requires 64-bit inputs");
    if (!t.all_finite()) throw NumericError("gradcheck input is not finite");
    t.set_requires_grad(true);
    t.clear_grad();
  }
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);

  std::vector<double> weights;
  {
    Graph graph;
    Tensor out = fn(inputs);
    if (!out.requires_grad()) throw GraphError("gradcheck: output does not depend on any input");
    weights.resize(out.numel());
    if (out.numel() == 1) {
      weights[0] = 1.0;
    } else {
      for (auto& w : weights) w = unit(rng);
    }
    graph.backward(out, Tensor::from_vector(out.shape(), weights));
  }

  std::vector<std::vector<double>> analytic;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> g(inputs[k].numel());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = inputs[k].grad_at(i);
      if (!std::isfinite(g[i])) {
        throw NumericError("gradcheck: non-finite gradient at input " + std::to_string(k) + " element " +
                           std::to_string(i));
      }
    }
    analytic.push_back(std::move(g));
  }

  const Evaluation base = evaluate(fn, inputs, weights);
  GradcheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    std::vector<std::size_t> order(t.numel());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t wanted = options.max_probes_per_input ? std::min(options.max_probes_per_input, order.size())
                                                            : order.size();
    if (wanted < order.size()) std::shuffle(order.begin(), order.end(), rng);

    std::size_t done = 0;
    for (std::size_t idx : order) {
      if (done == wanted) break;
      const double original = t.value_at(idx);
      t.set_value_at(idx, original + options.eps);
      const Evaluation plus = evaluate(fn, inputs, weights);
      t.set_value_at(idx, original - options.eps);
      const Evaluation minus = evaluate(fn, inputs, weights);
      t.set_value_at(idx, original);

      if (options.avoid_kinks && (plus.fingerprint != base.fingerprint || minus.fingerprint != base.fingerprint)) {
        ++result.skipped_at_kinks;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * options.eps);
      if (!std::isfinite(numeric)) {
        throw NumericError("gradcheck: non-finite numeric derivative at input " + std::to_string(k) + " element " +
                           std::to_string(idx));
      }
      const double err = relative_error(analytic[k][idx], numeric);
      ++done;
      ++result.probes;
      if (err >= result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_location = "input " + std::to_string(k) + " element " + std::to_string(idx) + " (analytic " +
                                std::to_string(analytic[k][idx]) + ", numeric " + std::to_string(numeric) + ")";
      }
    }
  }
  for (auto& t : inputs) t.clear_grad();
  return result;
}

}  // namespace jlml
