#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "flamingo/tensor.hpp"

namespace flamingo {

// Named trainable tensors plus the set of names excluded from updates.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    bool frozen = false;
  };

  void add(const std::string& name, Tensor value, bool frozen = false);
  // Adds or overwrites.
  void set(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get_mutable(const std::string& name);

  bool frozen(const std::string& name) const;
  void set_frozen(const std::string& name, bool frozen);
  // Applies to every name starting with `prefix`; returns how many matched.
  std::size_t set_frozen_prefix(const std::string& prefix, bool frozen);

  std::vector<std::string> names() const;
  std::vector<std::string> frozen_names() const;
  std::size_t parameter_count(const std::string& prefix = "") const;

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, Entry> entries_;
};

using GradMap = std::map<std::string, Tensor>;

enum class GradMode {
  none,       // inference: nothing records a backward closure
  trainable,  // frozen parameters are constants
  all,        // every parameter receives a gradient (gradient checks)
};

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
};

// Tape of op records. Nodes are appended in creation order, which is a
// topological order, so backward is a single reverse sweep.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;

  explicit Graph(const ParamStore* params = nullptr, GradMode mode = GradMode::trainable);
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // Unnamed leaf that receives a gradient (unless mode is none).
  Var variable(Tensor value);
  // Leaf bound to a ParamStore entry; created once per name.
  Var param(const std::string& name);

  GradMode mode() const { return mode_; }
  const ParamStore* params() const { return params_; }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Records an op output. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

  // Gradient buffer of node `id`, zero-initialized on first access.
  Tensor& grad_buffer(std::size_t id);
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

  // Reverse sweep from a scalar loss. Returns gradients for every parameter
  // leaf that requires one; parameters not reachable from the loss get zeros.
  // Frozen parameters (in trainable mode) never appear in the result.
  GradMap backward(Var loss);

  // Gradient of an arbitrary node after backward(); zeros if none reached it.
  Tensor grad_of(Var v) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  const ParamStore* params_;
  GradMode mode_;
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_nodes_;
};

// Adds `src` scaled by `scale` into `dst` (created if missing).
void accumulate_grads(GradMap& dst, const GradMap& src, double scale = 1.0);
double global_grad_norm(const GradMap& grads);

}  // namespace flamingo
