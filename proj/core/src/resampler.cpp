#include "flamingo/resampler.hpp"

#include <stdexcept>

#include "flamingo/layers.hpp"
#include "flamingo/ops.hpp"

namespace flamingo {

void ResamplerConfig::validate() const {
  if (latents == 0) throw std::invalid_argument("resampler: latents must be positive");
  if (width == 0 || input_width == 0) throw std::invalid_argument("resampler: widths must be positive");
  if (heads == 0 || width % heads != 0) {
    throw std::invalid_argument("resampler: width " + std::to_string(width) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (max_frames == 0) throw std::invalid_argument("resampler: max_frames must be positive");
}

PerceiverResampler::PerceiverResampler(ResamplerConfig cfg, std::string prefix)
    : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void PerceiverResampler::init(ParamStore& store, Rng& rng) const {
  const std::size_t d = cfg_.width;
  store.add(prefix_ + ".latents", layers::normal(rng, {cfg_.latents, d}, 1.0));
  store.add(prefix_ + ".time_embed", layers::normal(rng, {cfg_.max_frames, cfg_.input_width}, 0.02));
  layers::add_linear(store, rng, prefix_ + ".proj", cfg_.input_width, d, true);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = prefix_ + ".layer" + std::to_string(l);
    layers::add_layer_norm(store, p + ".ln_q", d);
    layers::add_layer_norm(store, p + ".ln_kv", d);
    layers::add_attention(store, rng, p + ".attn", d, 0.5);
    layers::add_ffw(store, rng, p + ".ffw", d, cfg_.ffw_mult * d, 0.5);
  }
}

Var PerceiverResampler::attend(Graph& g, Var features) const {
  if (features.cols() != cfg_.width) {
    throw std::invalid_argument("resample: feature width " + std::to_string(features.cols()) + " != " +
                                std::to_string(cfg_.width));
  }
  Var x = g.param(prefix_ + ".latents");
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = prefix_ + ".layer" + std::to_string(l);
    const Var parts[] = {features, x};
    auto kv = layers::layer_norm(g, p + ".ln_kv", ops::concat_rows(parts));
    auto q = layers::layer_norm(g, p + ".ln_q", x);
    x = ops::add(x, layers::attention(g, p + ".attn", q, kv, nullptr, false, cfg_.heads));
    x = ops::add(x, layers::ffw(g, p + ".ffw", x, ops::Activation::squared_relu));
  }
  return x;
}

VisualTokenSet PerceiverResampler::resample(Graph& g, const VisualFeatureGrid& grid, std::size_t source) const {
  if (grid.features.rows() == 0) throw std::invalid_argument("resample: empty grid");
  if (grid.features.cols() != cfg_.input_width) {
    throw std::invalid_argument("resample: grid width " + std::to_string(grid.features.cols()) +
                                " does not match projection input " + std::to_string(cfg_.input_width));
  }
  auto timed = temporal_embed(grid, g.param(prefix_ + ".time_embed"));
  auto projected = layers::linear(g, prefix_ + ".proj", timed.features, true);
  return {attend(g, projected), source};
}

}  // namespace flamingo
