#pragma once

#include "flamingo/lm.hpp"

namespace fixtures {

using namespace flamingo;

inline FlamingoConfig small_config(std::size_t layers = 2, std::size_t k = 1) {
  FlamingoConfig c;
  c.vision.width = 8;
  c.vision.hidden = 8;
  c.vision.blocks = 1;
  c.lm.vocab = 12;
  c.lm.width = 8;
  c.lm.layers = layers;
  c.lm.max_len = 16;
  c.resampler.latents = 3;
  c.resampler.layers = 1;
  c.xattn_every = k;
  return c.resolve();
}

inline VisualInput random_image(Rng& rng, std::size_t res) {
  Tensor t({1, res, res, 3});
  std::normal_distribution<double> n;
  for (auto& v : t.data()) v = n(rng);
  return {t};
}

inline TrainingInstance random_instance(Rng& rng, const FlamingoConfig& c, std::size_t len, std::size_t n_images) {
  TrainingInstance inst;
  for (std::size_t i = 0; i < n_images; ++i) inst.images.push_back(random_image(rng, c.vision.resolution));
  inst.real_images = n_images;
  int phi = 0;
  for (std::size_t l = 0; l < len; ++l) {
    if (static_cast<std::size_t>(phi) < n_images && bernoulli(rng, 0.3)) ++phi;
    inst.text.push_back(static_cast<TokenId>(uniform_index(rng, c.lm.vocab)));
    inst.indices.push_back(phi);
  }
  return inst;
}

inline void open_gates(FlamingoModel& m, Rng& rng) {
  for (const auto& name : m.params().names())
    if (name.find("alpha") != std::string::npos) m.params().get_mutable(name)[0] = 0.5 + uniform01(rng);
}

}  // namespace fixtures
