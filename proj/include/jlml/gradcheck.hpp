#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "jlml/tensor.hpp"

namespace jlml {

// Maps inputs to an output tensor. Non-scalar outputs are contracted with a
// fixed random projection so a single backward pass covers every element.
using DifferentiableFn = std::function<Tensor(std::span<const Tensor>)>;

struct GradcheckOptions {
  double eps = 1e-3;
  // Elements probed per input; 0 probes every element.
  std::size_t max_probes_per_input = 0;
  std::uint64_t seed = 0;
  // Skip probes whose +/-eps evaluations change a ReLU sign or pooling argmax.
  bool avoid_kinks = true;
};

struct GradcheckResult {
  // max over probes of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
  double max_rel_error = 0.0;
  std::string worst_location;
  std::size_t probes = 0;
  std::size_t skipped_at_kinks = 0;

  bool passed(double tolerance) const { return probes > 0 && max_rel_error < tolerance; }
};

double relative_error(double analytic, double numeric);

// Central-difference check of reverse-mode gradients. Inputs must be 64-bit;
// they are marked as requiring gradients and restored after probing.
// Throws NumericError naming the input and element when a gradient is not finite.
GradcheckResult gradcheck(const DifferentiableFn& fn, std::vector<Tensor> inputs, const GradcheckOptions& options = {});

}  // namespace jlml
