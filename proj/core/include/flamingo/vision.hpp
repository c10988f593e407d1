#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "flamingo/graph.hpp"
#include "flamingo/rng.hpp"

namespace flamingo {

struct VisionConfig {
  std::size_t resolution = 16;
  std::size_t patch = 4;
  std::size_t channels = 3;
  std::size_t width = 32;   // d_v
  std::size_t blocks = 2;   // residual conv blocks after the patch embedding
  std::size_t kernel = 3;   // 1 makes every block patch-local
  std::size_t hidden = 64;
  std::array<double, 3> pixel_mean{0.5, 0.5, 0.5};
  std::array<double, 3> pixel_std{0.5, 0.5, 0.5};

  std::size_t grid() const { return resolution / patch; }
  std::size_t spatial() const { return grid() * grid(); }
  void validate() const;
};

enum class VisualKind { image, video };

// Preprocessed pixels [T, H, W, C] (standardized).
struct VisualInput {
  Tensor pixels;
  VisualKind kind = VisualKind::image;

  std::size_t frames() const { return pixels.rank() == 4 ? pixels.dim(0) : 0; }
};

// Rows ordered frame-major then raster: row = t * spatial + s.
struct VisualFeatureGrid {
  Var features;
  std::size_t frames = 0;
  std::size_t spatial = 0;
};

// Bilinear resize of the larger side to `target`, placed top-left; the rest is
// filled with the per-channel mean of `raw` ([h, w, 3]).
Tensor resize_with_pad(const Tensor& raw, std::size_t target);
Tensor standardize(const Tensor& image, const VisionConfig& cfg);
VisualInput preprocess_image(const Tensor& raw, const VisionConfig& cfg);
VisualInput preprocess_video(std::span<const Tensor> frames, const VisionConfig& cfg);

// Interpolation weights [T_eval, T_train]; endpoint-anchored linear.
Tensor temporal_weights(std::size_t t_train, std::size_t t_eval);
// Adds e(t) (interpolated from `table` [T_train, d_v]) to every row of frame t.
VisualFeatureGrid temporal_embed(const VisualFeatureGrid& grid, Var table);

class VisionEncoder {
 public:
  explicit VisionEncoder(VisionConfig cfg, std::string prefix = "vision");

  const VisionConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  void init(ParamStore& store, Rng& rng) const;

  // Every frame is encoded with the same weights; frames never mix.
  VisualFeatureGrid encode_frames(Graph& g, const VisualInput& v) const;
  // Several inputs stacked frame-wise: [sum_i T_i * S, d_v].
  Var encode_stack(Graph& g, std::span<const VisualInput> inputs) const;

  // Mean-pooled features [d_v] without recording gradients.
  Tensor pooled(const ParamStore& params, const VisualInput& v) const;

 private:
  Var encode_pixels(Graph& g, const Tensor& pixels, std::size_t frames) const;

  VisionConfig cfg_;
  std::string prefix_;
};

}  // namespace flamingo
