#include "flamingo/graph.hpp"

#include <cmath>
#include <stdexcept>

namespace flamingo {

void ParamStore::add(const std::string& name, Tensor value, bool frozen) {
  if (entries_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
  entries_.emplace(name, Entry{std::move(value), frozen});
}

void ParamStore::set(const std::string& name, Tensor value) {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    entries_.emplace(name, Entry{std::move(value), false});
  } else {
    it->second.value = std::move(value);
  }
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.value;
}

Tensor& ParamStore::get_mutable(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.value;
}

bool ParamStore::frozen(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second.frozen;
}

void ParamStore::set_frozen(const std::string& name, bool frozen) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  it->second.frozen = frozen;
}

std::size_t ParamStore::set_frozen_prefix(const std::string& prefix, bool frozen) {
  std::size_t n = 0;
  for (auto it = entries_.lower_bound(prefix);
       it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it) {
    it->second.frozen = frozen;
    ++n;
  }
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::vector<std::string> ParamStore::frozen_names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_)
    if (e.frozen) out.push_back(name);
  return out;
}

std::size_t ParamStore::parameter_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (auto it = entries_.lower_bound(prefix);
       it != entries_.end() && it->first.compare(0, prefix.size(), prefix) == 0; ++it) {
    n += it->second.value.numel();
  }
  return n;
}

const Tensor& Var::value() const { return graph->value(id); }
bool Var::requires_grad() const { return graph->requires_grad(id); }

Graph::Graph(const ParamStore* params, GradMode mode) : params_(params), mode_(mode) {
  nodes_.reserve(256);
}

Var Graph::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Graph::variable(Tensor value) {
  return record(std::move(value), mode_ != GradMode::none, nullptr);
}

Var Graph::param(const std::string& name) {
  if (auto it = param_nodes_.find(name); it != param_nodes_.end()) return {this, it->second};
  if (!params_) throw std::logic_error("graph has no parameter store (asked for " + name + ")");
  const auto& entry = params_->entries();
  auto it = entry.find(name);
  if (it == entry.end()) throw std::out_of_range("unknown parameter: " + name);
  bool needs = mode_ == GradMode::all || (mode_ == GradMode::trainable && !it->second.frozen);
  Var v = record(it->second.value, needs, nullptr);
  param_nodes_.emplace(name, v.id);
  return v;
}

Var Graph::record(Tensor value, bool requires_grad, BackwardFn backward) {
  if (mode_ == GradMode::none) requires_grad = false;
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor& Graph::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

GradMap Graph::backward(Var loss) {
  if (loss.graph != this) throw std::invalid_argument("backward: loss from another graph");
  if (value(loss.id).numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_to_string(value(loss.id).shape()));
  }
  for (auto& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
  GradMap out;
  if (nodes_[loss.id].requires_grad) {
    grad_buffer(loss.id).fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
  }
  for (const auto& [name, id] : param_nodes_) {
    const auto& n = nodes_[id];
    if (!n.requires_grad) continue;
    out.emplace(name, n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0));
  }
  // Parameters the graph never touched are disconnected: zero gradient.
  if (params_ && mode_ != GradMode::none) {
    for (const auto& [name, e] : params_->entries()) {
      if (param_nodes_.count(name) || (mode_ == GradMode::trainable && e.frozen)) continue;
      out.emplace(name, Tensor(e.value.shape(), 0.0));
    }
  }
  return out;
}

Tensor Graph::grad_of(Var v) const {
  const auto& n = nodes_[v.id];
  return n.has_grad ? n.grad : Tensor(n.value.shape(), 0.0);
}

void accumulate_grads(GradMap& dst, const GradMap& src, double scale) {
  for (const auto& [name, g] : src) {
    auto it = dst.find(name);
    if (it == dst.end()) {
      Tensor t(g.shape(), 0.0);
      for (std::size_t i = 0; i < g.numel(); ++i) t[i] = scale * g[i];
      dst.emplace(name, std::move(t));
    } else {
      if (!it->second.same_shape(g)) throw std::invalid_argument("gradient shape mismatch: " + name);
      for (std::size_t i = 0; i < g.numel(); ++i) it->second[i] += scale * g[i];
    }
  }
}

double global_grad_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [_, g] : grads)
    for (double v : g.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace flamingo
