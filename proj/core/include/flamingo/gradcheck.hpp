#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flamingo/graph.hpp"
#include "flamingo/rng.hpp"

namespace flamingo {

struct GradCheckOptions {
  double step = 1e-5;
  double rtol = 1e-4;
  double atol = 1e-8;
};

struct GradProbe {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool ok = true;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;
  double max_rel_error = 0.0;
  std::size_t failures() const;
  bool ok() const { return failures() == 0; }
};

using LossBuilder = std::function<Var(Graph&)>;

// Compares reverse-mode gradients with central differences at `count`
// randomly chosen (parameter, element) coordinates. The loss is rebuilt from
// scratch for every evaluation with GradMode::all.
GradCheckReport check_gradients(ParamStore& params, const LossBuilder& loss, Rng& rng,
                                std::size_t count, const GradCheckOptions& opts = {});

// One randomized graph per differentiable op kind; the loss is a random
// projection of the op output so every output element matters.
struct OpCase {
  std::string name;
  ParamStore params;
  LossBuilder loss;
};
std::vector<OpCase> make_op_cases(Rng& rng);

}  // namespace flamingo
