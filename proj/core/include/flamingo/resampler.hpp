#pragma once

#include <string>

#include "flamingo/graph.hpp"
#include "flamingo/rng.hpp"
#include "flamingo/vision.hpp"

namespace flamingo {

struct ResamplerConfig {
  std::size_t input_width = 32;  // d_v
  std::size_t width = 32;        // d
  std::size_t latents = 8;       // R
  std::size_t layers = 2;        // L_r
  std::size_t heads = 2;
  std::size_t ffw_mult = 4;
  std::size_t max_frames = 8;    // rows of the learned time-embedding table

  void validate() const;
};

// Fixed-size visual tokens for one visual input.
struct VisualTokenSet {
  Var tokens;  // [R, d]
  std::size_t source = 0;
};

// Parameters: "<prefix>.latents" [R, d], "<prefix>.time_embed" [T, d_v],
// "<prefix>.proj" (d_v -> d), per layer "<prefix>.layer<l>.{ln_q, ln_kv,
// attn, ffw}". Keys/values are concat(grid features, latents).
class PerceiverResampler {
 public:
  explicit PerceiverResampler(ResamplerConfig cfg, std::string prefix = "resampler");

  const ResamplerConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  void init(ParamStore& store, Rng& rng) const;

  // Temporal embedding, projection and the latent transformer.
  VisualTokenSet resample(Graph& g, const VisualFeatureGrid& grid, std::size_t source = 0) const;
  // Latent transformer only, on already projected features [rows, d].
  Var attend(Graph& g, Var features) const;

 private:
  ResamplerConfig cfg_;
  std::string prefix_;
};

}  // namespace flamingo
