#include "flamingo/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "flamingo/layers.hpp"
#include "flamingo/ops.hpp"

namespace flamingo {

std::size_t TrainingInstance::max_index() const {
  int m = 0;
  for (int i : indices) m = std::max(m, i);
  return static_cast<std::size_t>(m);
}

void LMConfig::validate() const {
  if (vocab == 0) throw std::invalid_argument("lm: vocab must be positive");
  if (layers == 0) throw std::invalid_argument("lm: needs at least one layer");
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw std::invalid_argument("lm: width " + std::to_string(width) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (max_len == 0) throw std::invalid_argument("lm: max_len must be positive");
}

LanguageModel::LanguageModel(LMConfig cfg, std::string prefix) : cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
  cfg_.validate();
}

void LanguageModel::init(ParamStore& store, Rng& rng) const {
  const std::size_t d = cfg_.width;
  store.add(prefix_ + ".tok_embed", layers::normal(rng, {cfg_.vocab, d}, 0.3));
  store.add(prefix_ + ".pos_embed", layers::normal(rng, {cfg_.max_len, d}, 0.1));
  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
  for (std::size_t j = 0; j < cfg_.layers; ++j) {
    const std::string p = prefix_ + ".layer" + std::to_string(j);
    layers::add_layer_norm(store, p + ".ln1", d);
    layers::add_attention(store, rng, p + ".attn", d, out_gain);
    layers::add_ffw(store, rng, p + ".ffw", d, cfg_.ffw_mult * d, out_gain);
  }
  layers::add_layer_norm(store, prefix_ + ".ln_f", d);
  if (!cfg_.tied_head) layers::add_linear(store, rng, prefix_ + ".head", d, cfg_.vocab, false);
}

Var LanguageModel::embed(Graph& g, std::span<const TokenId> tokens, Var table) const {
  if (tokens.size() > cfg_.max_len) {
    throw std::invalid_argument("lm: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                                std::to_string(cfg_.max_len));
  }
  auto pos = ops::slice_rows(g.param(prefix_ + ".pos_embed"), 0, tokens.size());
  return ops::add(ops::embedding(table, tokens), pos);
}

Var LanguageModel::block(Graph& g, std::size_t layer, Var h) const {
  const std::string p = prefix_ + ".layer" + std::to_string(layer);
  auto x = layers::layer_norm(g, p + ".ln1", h);
  h = ops::add(h, layers::attention(g, p + ".attn", x, x, nullptr, true, cfg_.heads));
  return ops::add(h, layers::ffw(g, p + ".ffw", h, ops::Activation::gelu));
}

Var LanguageModel::head(Graph& g, Var h, Var table) const {
  auto x = layers::layer_norm(g, prefix_ + ".ln_f", h);
  if (cfg_.tied_head) return ops::matmul_nt(x, table);
  return layers::linear(g, prefix_ + ".head", x, false);
}

Var LanguageModel::forward(Graph& g, std::span<const TokenId> tokens) const {
  Var table = g.param(prefix_ + ".tok_embed");
  Var h = embed(g, tokens, table);
  for (std::size_t j = 0; j < cfg_.layers; ++j) h = block(g, j, h);
  return head(g, h, table);
}

FlamingoConfig& FlamingoConfig::resolve() {
  resampler.input_width = vision.width;
  resampler.width = lm.width;
  gated.width = lm.width;
  return *this;
}

void FlamingoConfig::validate() const {
  vision.validate();
  resampler.validate();
  lm.validate();
  gated.validate();
  if (xattn_every == 0) throw std::invalid_argument("flamingo: xattn_every must be >= 1");
  if (resampler.input_width != vision.width) throw std::invalid_argument("flamingo: resampler input width != vision width");
  if (resampler.width != lm.width || gated.width != lm.width) {
    throw std::invalid_argument("flamingo: resampler/gated width must equal lm width");
  }
  if (eoc_id < 0 || static_cast<std::size_t>(eoc_id) >= lm.vocab) throw std::invalid_argument("flamingo: eoc id outside vocab");
}

namespace {
std::uint64_t pixel_hash(const Tensor& t) {
  return fnv1a(std::string_view(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(double)));
}
}  // namespace

const Tensor* FeatureCache::find(const Tensor& pixels) const {
  std::lock_guard lock(mu_);
  auto [lo, hi] = entries_.equal_range(pixel_hash(pixels));
  for (auto it = lo; it != hi; ++it)
    if (bitwise_equal(it->second.pixels, pixels)) return &it->second.features;
  return nullptr;
}

void FeatureCache::insert(const Tensor& pixels, Tensor features) {
  std::lock_guard lock(mu_);
  entries_.emplace(pixel_hash(pixels), Entry{pixels, std::move(features)});
}

std::size_t FeatureCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

void FeatureCache::clear() {
  std::lock_guard lock(mu_);
  entries_.clear();
}

FlamingoModel::FlamingoModel(FlamingoConfig cfg)
    : cfg_(std::move(cfg)), vision_(cfg_.vision), resampler_(cfg_.resampler), lm_(cfg_.lm) {
  cfg_.validate();
  const std::size_t lf = cfg_.lm.layers;
  if (cfg_.xattn_middle_only) {
    xattn_layers_.push_back(lf / 2);
  } else {
    for (std::size_t j = 0; j < lf; j += cfg_.xattn_every) xattn_layers_.push_back(j);
  }
  for (std::size_t j : xattn_layers_) gated_.emplace_back(cfg_.gated, "gated." + std::to_string(j));
}

FlamingoModel FlamingoModel::assemble(FlamingoConfig cfg, Rng& rng) {
  FlamingoModel m(std::move(cfg));
  m.vision_.init(m.params_, rng);
  m.lm_.init(m.params_, rng);
  m.resampler_.init(m.params_, rng);
  for (const auto& b : m.gated_) b.init(m.params_, rng);
  m.params_.add("eoc.embed", Tensor({1, m.cfg_.lm.width}, 0.0));
  m.reset_eoc_embedding();
  m.apply_freeze_policy({});
  return m;
}

void FlamingoModel::reset_eoc_embedding() {
  const Tensor& table = params_.get(lm_.prefix() + ".tok_embed");
  const auto row = table.row(static_cast<std::size_t>(cfg_.eoc_id));
  params_.set("eoc.embed", Tensor({1, row.size()}, std::vector<double>(row.begin(), row.end())));
}

void FlamingoModel::apply_freeze_policy(const FreezePolicy& policy) {
  params_.set_frozen_prefix(vision_.prefix() + ".", policy.freeze_vision);
  params_.set_frozen_prefix(lm_.prefix() + ".", policy.freeze_lm);
  params_.set_frozen_prefix(resampler_.prefix() + ".", false);
  params_.set_frozen_prefix("gated.", false);
  params_.set_frozen_prefix("eoc.", false);
}

Var FlamingoModel::visual_tokens(Graph& g, const TrainingInstance& inst, FeatureCache* cache) const {
  const std::size_t n = inst.max_index();
  if (n > inst.real_images || n > inst.images.size()) {
    throw std::invalid_argument("forward: index " + std::to_string(n) + " refers to a padded image slot");
  }
  if (n == 0) return g.constant(Tensor({0, cfg_.lm.width}));
  std::vector<Var> sets;
  sets.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const VisualInput& v = inst.images[i];
    VisualFeatureGrid grid;
    if (cache) {
      const Tensor* hit = cache->find(v.pixels);
      if (!hit) {
        Graph fg(&params_, GradMode::none);
        cache->insert(v.pixels, vision_.encode_frames(fg, v).features.value());
        hit = cache->find(v.pixels);
      }
      grid = {g.constant(*hit), v.frames(), cfg_.vision.spatial()};
    } else {
      grid = vision_.encode_frames(g, v);
    }
    sets.push_back(resampler_.resample(g, grid, i + 1).tokens);
  }
  return ops::concat_rows(sets);
}

Var FlamingoModel::forward_tokens(Graph& g, std::span<const TokenId> tokens, std::span<const int> phi, Var visual,
                                  std::size_t num_images) const {
  if (phi.size() != tokens.size()) throw std::invalid_argument("forward: indices length != text length");
  for (auto t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.lm.vocab) {
      throw std::out_of_range("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg_.lm.vocab));
    }
  }
  const PhiMask mask = mask_builder_ ? mask_builder_(phi, num_images, cfg_.resampler.latents, cfg_.all_previous)
                                     : build_phi_mask(phi, num_images, cfg_.resampler.latents, cfg_.all_previous);
  Var table = ops::replace_row(g.param(lm_.prefix() + ".tok_embed"), static_cast<std::size_t>(cfg_.eoc_id),
                               g.param("eoc.embed"));
  Var h = lm_.embed(g, tokens, table);
  std::size_t next = 0;
  for (std::size_t j = 0; j < cfg_.lm.layers; ++j) {
    if (next < xattn_layers_.size() && xattn_layers_[next] == j) h = gated_[next++].forward(g, h, visual, mask);
    h = lm_.block(g, j, h);
  }
  return lm_.head(g, h, table);
}

Var FlamingoModel::forward(Graph& g, const TrainingInstance& inst, FeatureCache* cache) const {
  Var visual = visual_tokens(g, inst, cache);
  return forward_tokens(g, inst.text, inst.indices, visual, visual.rows() / cfg_.resampler.latents);
}

Var FlamingoModel::forward_lm_only(Graph& g, std::span<const TokenId> tokens) const { return lm_.forward(g, tokens); }

std::map<std::string, std::size_t> FlamingoModel::parameter_report() const {
  std::map<std::string, std::size_t> r;
  std::size_t trainable = 0;
  for (const auto& [name, e] : params_.entries()) {
    r[name.substr(0, name.find('.'))] += e.value.numel();
    if (!e.frozen) trainable += e.value.numel();
  }
  r["total"] = params_.parameter_count();
  r["trainable"] = trainable;
  return r;
}

std::vector<GateValues> FlamingoModel::gate_values() const {
  std::vector<GateValues> out;
  for (const auto& b : gated_) out.push_back(b.gates(params_));
  return out;
}

double sequence_log_likelihood(const Tensor& logits, std::span<const TokenId> tokens, std::size_t begin,
                               std::size_t end) {
  if (begin >= end) throw std::invalid_argument("sequence_log_likelihood: empty range");
  if (begin < 1 || end > tokens.size()) {
    throw std::out_of_range("sequence_log_likelihood: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") outside [1, " + std::to_string(tokens.size()) + ")");
  }
  const std::size_t v = logits.cols();
  double total = 0.0;
  for (std::size_t l = begin; l < end; ++l) {
    const double* row = logits.ptr() + (l - 1) * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    total += row[static_cast<std::size_t>(tokens[l])] - mx - std::log(s);
  }
  return total;
}

double sequence_log_likelihood(const FlamingoModel& model, const TrainingInstance& inst, std::size_t begin,
                               std::size_t end, FeatureCache* cache) {
  Graph g(&model.params(), GradMode::none);
  return sequence_log_likelihood(model.forward(g, inst, cache).value(), inst.text, begin, end);
}

}  // namespace flamingo
