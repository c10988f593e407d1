#include "flamingo/layers.hpp"

#include <cmath>

namespace flamingo::layers {

Tensor normal(Rng& rng, Shape shape, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

void add_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
  store.add(prefix + ".scale", Tensor({d}, 1.0));
  store.add(prefix + ".offset", Tensor({d}, 0.0));
}

Var layer_norm(Graph& g, const std::string& prefix, Var x) {
  return ops::layer_norm(x, g.param(prefix + ".scale"), g.param(prefix + ".offset"));
}

void add_linear(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in,
                std::size_t out, bool bias, double gain) {
  store.add(prefix + ".w", normal(rng, {in, out}, gain / std::sqrt(static_cast<double>(in))));
  if (bias) store.add(prefix + ".b", Tensor({out}, 0.0));
}

Var linear(Graph& g, const std::string& prefix, Var x, bool bias) {
  if (bias) return ops::linear(x, g.param(prefix + ".w"), g.param(prefix + ".b"));
  return ops::linear(x, g.param(prefix + ".w"));
}

void add_ffw(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d,
             std::size_t hidden, double out_gain) {
  add_layer_norm(store, prefix + ".ln", d);
  add_linear(store, rng, prefix + ".fc1", d, hidden, true);
  add_linear(store, rng, prefix + ".fc2", hidden, d, true, out_gain);
}

Var ffw(Graph& g, const std::string& prefix, Var x, ops::Activation act) {
  auto h = linear(g, prefix + ".fc1", layer_norm(g, prefix + ".ln", x), true);
  return linear(g, prefix + ".fc2", ops::activation(h, act), true);
}

void add_attention(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d,
                   double out_gain) {
  for (const char* w : {".wq", ".wk", ".wv"}) {
    store.add(prefix + w, normal(rng, {d, d}, 1.0 / std::sqrt(static_cast<double>(d))));
  }
  store.add(prefix + ".wo", normal(rng, {d, d}, out_gain / std::sqrt(static_cast<double>(d))));
}

Var attention(Graph& g, const std::string& prefix, Var q_in, Var kv_in, const BoolMatrix* mask,
              bool causal, std::size_t heads) {
  auto q = ops::matmul(q_in, g.param(prefix + ".wq"));
  auto k = ops::matmul(kv_in, g.param(prefix + ".wk"));
  auto v = ops::matmul(kv_in, g.param(prefix + ".wv"));
  return ops::matmul(ops::attention(q, k, v, mask, causal, heads), g.param(prefix + ".wo"));
}

}  // namespace flamingo::layers
