#pragma once

#include <span>
#include <string>

#include "flamingo/graph.hpp"
#include "flamingo/rng.hpp"

namespace flamingo {

// Row l admits visual column (i, r) (column (i-1)*R + r, images 1-based) iff
// phi[l] == i >= 1, or 1 <= i <= phi[l] when all_previous is set.
struct PhiMask {
  BoolMatrix admissible;
};

PhiMask build_phi_mask(std::span<const int> phi, std::size_t num_images, std::size_t tokens_per_image,
                       bool all_previous = false);

struct GatedBlockConfig {
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t ffw_mult = 4;
  bool vanilla_xattn = false;  // drop the dense FFW sub-block
  bool tanh_gating = true;     // false: branches are added ungated

  void validate() const;
};

struct GateValues {
  double attn = 0.0;  // |tanh(alpha_attn)|
  double ffw = 0.0;   // |tanh(alpha_ffw)|
};

// GATED XATTN-DENSE at "<prefix>": ln_q, ln_kv (shared by keys and values),
// attn.{wq,wk,wv,wo}, alpha_attn, ffw.*, alpha_ffw.
class GatedXAttnBlock {
 public:
  GatedXAttnBlock(GatedBlockConfig cfg, std::string prefix);

  const GatedBlockConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  void init(ParamStore& store, Rng& rng) const;
  Var forward(Graph& g, Var text, Var visual, const PhiMask& mask) const;
  GateValues gates(const ParamStore& params) const;

 private:
  GatedBlockConfig cfg_;
  std::string prefix_;
};

}  // namespace flamingo
