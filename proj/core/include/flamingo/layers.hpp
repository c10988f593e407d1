#pragma once

#include <string>

#include "flamingo/graph.hpp"
#include "flamingo/ops.hpp"
#include "flamingo/rng.hpp"

// Parameter-naming helpers shared by every transformer-style component.
// A layer at `prefix` owns entries "<prefix>.<field>".
namespace flamingo::layers {

Tensor normal(Rng& rng, Shape shape, double stddev);

void add_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d);
Var layer_norm(Graph& g, const std::string& prefix, Var x);

// weight "<prefix>.w" [in, out] ~ N(0, gain^2 / in); bias "<prefix>.b" zeros.
void add_linear(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in,
                std::size_t out, bool bias, double gain = 1.0);
Var linear(Graph& g, const std::string& prefix, Var x, bool bias);

// FFW(x) = W2 act(W1 LN(x) + b1) + b2 with LN at "<prefix>.ln".
void add_ffw(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d,
             std::size_t hidden, double out_gain = 1.0);
Var ffw(Graph& g, const std::string& prefix, Var x, ops::Activation act);

// Projections "<prefix>.wq/.wk/.wv/.wo" without biases.
void add_attention(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d,
                   double out_gain = 1.0);
Var attention(Graph& g, const std::string& prefix, Var q_in, Var kv_in, const BoolMatrix* mask,
              bool causal, std::size_t heads);

}  // namespace flamingo::layers
