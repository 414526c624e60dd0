#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "jlml/tensor.hpp"

namespace jlml {

/// Tape of executed operations for reverse-mode differentiation.
///
/// Constructing a Graph makes it the active tape of the calling thread until
/// it is destroyed; operations executed meanwhile record a backward closure
/// whenever one of their inputs requires a gradient. Without an active graph
/// nothing is recorded, which is how inference runs.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  static Graph* active();

  void record(std::string op, std::function<void()> backward);

  // Seeds d(root)/d(root) = 1 (root must hold one element) and runs every
  // recorded closure in reverse execution order. A graph can be walked once.
  void backward(Tensor root);
  void backward(Tensor root, const Tensor& seed);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  // Operation names in the order backward visited them.
  const std::vector<std::string>& backward_trace() const { return trace_; }

 private:
  struct Node {
    std::string op;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::string> trace_;
  Graph* previous_ = nullptr;
  bool consumed_ = false;
};

// True when an op with these inputs must be recorded on the active graph.
bool tracking(std::initializer_list<const Tensor*> inputs);
bool tracking(std::span<const Tensor> inputs);

namespace fault {

// Test hook: flips the sign of the input gradient produced by the named op's
// backward pass. An empty name clears the fault.
void inject_sign_flip(std::string op);
void clear();
// -1 when a sign flip is injected for op, +1 otherwise.
double sign(std::string_view op);

}  // namespace fault

namespace kinks {

// Forward-time fingerprint of piecewise decisions (ReLU signs, max-pool
// argmaxes). Gradient checks compare fingerprints of perturbed evaluations
// to reject probes whose finite-difference stencil straddles a kink.
class Recorder {
 public:
  Recorder();
  ~Recorder();
  Recorder(const Recorder&) = delete;
  Recorder& operator=(const Recorder&) = delete;

  void mix(std::uint64_t value);
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 1469598103934665603ull;
  Recorder* previous_ = nullptr;
};

Recorder* active();

}  // namespace kinks

}  // namespace jlml
