#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jlml/gradcheck.hpp"

namespace jlml {

// One differentiable operation under central-difference test. `run` builds
// seeded 64-bit inputs and checks them.
struct GradCase {
  std::string op;
  double tolerance = 1e-4;  // 1e-3 for ops with kinks and the full model
  std::function<GradcheckResult(std::uint64_t seed)> run;
};

// Every differentiable op of the engine, the losses, and the full model plus
// combined loss in both loss modes.
std::vector<GradCase> grad_suite();

struct GradCaseReport {
  std::string op;
  double tolerance = 0;
  double max_rel_error = 0;  // worst over seeds
  std::string worst_location;
  std::size_t probes = 0;
  bool passed = false;
  std::string error;  // set when the check threw
};

// Runs each case for seeds 0..seeds-1. `only` restricts to one op name.
std::vector<GradCaseReport> run_grad_suite(std::size_t seeds, const std::string& only = {},
                                           const std::function<void(const GradCaseReport&)>& progress = {});

}  // namespace jlml
