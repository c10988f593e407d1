#include "flamingo/xattn.hpp"

#include <cmath>
#include <stdexcept>

#include "flamingo/layers.hpp"
#include "flamingo/ops.hpp"

namespace flamingo {

PhiMask build_phi_mask(std::span<const int> phi, std::size_t num_images, std::size_t tokens_per_image,
                       bool all_previous) {
  PhiMask m{BoolMatrix(phi.size(), num_images * tokens_per_image, false)};
  for (std::size_t l = 0; l < phi.size(); ++l) {
    const int p = phi[l];
    if (p < 0 || static_cast<std::size_t>(p) > num_images) {
      throw std::out_of_range("build_phi_mask: phi[" + std::to_string(l) + "] = " + std::to_string(p) +
                              " outside [0, " + std::to_string(num_images) + "]");
    }
    if (p == 0) continue;
    const std::size_t hi = static_cast<std::size_t>(p);
    const std::size_t lo = all_previous ? 1 : hi;
    for (std::size_t i = lo; i <= hi; ++i)
      for (std::size_t r = 0; r < tokens_per_image; ++r) m.admissible.set(l, (i - 1) * tokens_per_image + r, true);
  }
  return m;
}

void GatedBlockConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw std::invalid_argument("gated block: width " + std::to_string(width) + " not divisible by heads " +
                                std::to_string(heads));
  }
}

GatedXAttnBlock::GatedXAttnBlock(GatedBlockConfig cfg, std::string prefix)
    : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void GatedXAttnBlock::init(ParamStore& store, Rng& rng) const {
  const std::size_t d = cfg_.width;
  layers::add_layer_norm(store, prefix_ + ".ln_q", d);
  layers::add_layer_norm(store, prefix_ + ".ln_kv", d);
  layers::add_attention(store, rng, prefix_ + ".attn", d);
  store.add(prefix_ + ".alpha_attn", Tensor({1}, 0.0));
  if (!cfg_.vanilla_xattn) {
    layers::add_ffw(store, rng, prefix_ + ".ffw", d, cfg_.ffw_mult * d);
    store.add(prefix_ + ".alpha_ffw", Tensor({1}, 0.0));
  }
}

Var GatedXAttnBlock::forward(Graph& g, Var text, Var visual, const PhiMask& mask) const {
  if (mask.admissible.rows() != text.rows() || mask.admissible.cols() != visual.rows()) {
    throw std::invalid_argument("gated block: mask " + std::to_string(mask.admissible.rows()) + "x" +
                                std::to_string(mask.admissible.cols()) + " for " + std::to_string(text.rows()) +
                                " tokens and " + std::to_string(visual.rows()) + " visual tokens");
  }
  auto gate = [&](const std::string& name, Var branch) {
    if (!cfg_.tanh_gating) return branch;
    return ops::mul_scalar(branch, ops::tanh(g.param(prefix_ + name)));
  };
  auto q = layers::layer_norm(g, prefix_ + ".ln_q", text);
  auto kv = layers::layer_norm(g, prefix_ + ".ln_kv", visual);
  auto att = layers::attention(g, prefix_ + ".attn", q, kv, &mask.admissible, false, cfg_.heads);
  Var y = ops::add(text, gate(".alpha_attn", att));
  if (cfg_.vanilla_xattn) return y;
  return ops::add(y, gate(".alpha_ffw", layers::ffw(g, prefix_ + ".ffw", y, ops::Activation::squared_relu)));
}

GateValues GatedXAttnBlock::gates(const ParamStore& params) const {
  GateValues v;
  v.attn = std::abs(std::tanh(params.get(prefix_ + ".alpha_attn").item()));
  if (!cfg_.vanilla_xattn) v.ffw = std::abs(std::tanh(params.get(prefix_ + ".alpha_ffw").item()));
  return v;
}

}  // namespace flamingo
