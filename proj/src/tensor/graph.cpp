#include "jlml/graph.hpp"

#include <algorithm>

namespace jlml {

namespace {
thread_local Graph* active_graph = nullptr;
thread_local kinks::Recorder* active_recorder = nullptr;
std::string faulty_op;
}  // namespace

Graph::Graph() : previous_(active_graph) { active_graph = this; }

Graph::~Graph() {
  if (active_graph == this) active_graph = previous_;
}

Graph* Graph::active() { return active_graph; }

void Graph::record(std::string op, std::function<void()> backward) {
  if (consumed_) throw GraphError("cannot record '" + op + "' on a graph that already ran backward");
  nodes_.push_back({std::move(op), std::move(backward)});
}

void Graph::backward(Tensor root) {
  if (root.numel() != 1) {
    throw GraphError("backward() without a seed needs a scalar root, got " + shape_str(root.shape()));
  }
  backward(root, Tensor::full(root.shape(), 1.0, root.dtype()));
}

void Graph::backward(Tensor root, const Tensor& seed) {
  if (consumed_) throw GraphError("backward called twice on the same graph; run a new forward first");
  if (!root.requires_grad()) throw GraphError("backward root does not require a gradient");
  if (seed.shape() != root.shape()) throw DimensionError("backward seed shape does not match root");
  consumed_ = true;
  visit_dtype(root.dtype(), [&](auto zero) {
    using T = decltype(zero);
    auto g = root.grad<T>();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(seed.value_at(i));
  });
  trace_.reserve(nodes_.size());
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    trace_.push_back(it->op);
    it->backward();
  }
  // Release saved tensors; the tape is single-use.
  for (auto& node : nodes_) node.backward = nullptr;
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_graph) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

bool tracking(std::span<const Tensor> inputs) {
  if (!active_graph) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

namespace fault {

void inject_sign_flip(std::string op) { faulty_op = std::move(op); }
void clear() { faulty_op.clear(); }
double sign(std::string_view op) { return !faulty_op.empty() && op == faulty_op ? -1.0 : 1.0; }

}  // namespace fault

namespace kinks {

Recorder::Recorder() : previous_(active_recorder) { active_recorder = this; }

Recorder::~Recorder() {
  if (active_recorder == this) active_recorder = previous_;
}

void Recorder::mix(std::uint64_t value) {
  // FNV-1a over the 8 bytes of value.
  for (int i = 0; i < 8; ++i) {
    hash_ ^= (value >> (8 * i)) & 0xffu;
    hash_ *= 1099511628211ull;
  }
}

Recorder* active() { return active_recorder; }

}  // namespace kinks

}  // namespace jlml
