#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "flamingo/graph.hpp"
#include "flamingo/instance.hpp"
#include "flamingo/resampler.hpp"
#include "flamingo/rng.hpp"
#include "flamingo/vision.hpp"
#include "flamingo/xattn.hpp"

namespace flamingo {

struct LMConfig {
  std::size_t vocab = 64;
  std::size_t width = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffw_mult = 4;
  std::size_t max_len = 64;
  bool tied_head = true;

  void validate() const;
};

// Decoder-only causal transformer at "<prefix>": tok_embed [V, d], pos_embed,
// layer<j>.{ln1, attn, ffw}, ln_f, and head.w [d, V] when untied.
class LanguageModel {
 public:
  explicit LanguageModel(LMConfig cfg, std::string prefix = "lm");

  const LMConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  void init(ParamStore& store, Rng& rng) const;

  Var embed(Graph& g, std::span<const TokenId> tokens, Var table) const;
  Var block(Graph& g, std::size_t layer, Var h) const;
  Var head(Graph& g, Var h, Var table) const;
  // Plain text-only forward with the stored embedding table: logits [L, V].
  Var forward(Graph& g, std::span<const TokenId> tokens) const;

 private:
  LMConfig cfg_;
  std::string prefix_;
};

struct FlamingoConfig {
  VisionConfig vision;
  ResamplerConfig resampler;
  LMConfig lm;
  GatedBlockConfig gated;
  std::size_t xattn_every = 1;     // k
  bool xattn_middle_only = false;  // single block before layer L_f / 2
  bool all_previous = false;       // tokens attend to every image up to phi
  TokenId eoc_id = 4;

  // Fills derived widths (resampler/gated follow the LM width).
  FlamingoConfig& resolve();
  void validate() const;
};

// Frozen vision features keyed by pixel content.
class FeatureCache {
 public:
  const Tensor* find(const Tensor& pixels) const;
  void insert(const Tensor& pixels, Tensor features);
  std::size_t size() const;
  void clear();

 private:
  struct Entry {
    Tensor pixels;
    Tensor features;
  };
  mutable std::mutex mu_;
  std::unordered_multimap<std::uint64_t, Entry> entries_;
};

struct FreezePolicy {
  bool freeze_vision = true;
  bool freeze_lm = true;
  double lm_lr_multiplier = 1.0;  // applied to lm.* updates when unfrozen
};

using MaskBuilder = std::function<PhiMask(std::span<const int> phi, std::size_t num_images,
                                          std::size_t tokens_per_image, bool all_previous)>;

class FlamingoModel {
 public:
  explicit FlamingoModel(FlamingoConfig cfg);

  // Fresh parameters: LM and vision are initialised here (normally then
  // overwritten from pretrained checkpoints); the <EOC> row is copied into
  // the trainable "eoc.embed" so the stack starts as the plain LM.
  static FlamingoModel assemble(FlamingoConfig cfg, Rng& rng);

  const FlamingoConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  const VisionEncoder& vision() const { return vision_; }
  const PerceiverResampler& resampler() const { return resampler_; }
  const LanguageModel& lm() const { return lm_; }
  const std::vector<GatedXAttnBlock>& gated_blocks() const { return gated_; }
  // Frozen-layer index each gated block precedes.
  const std::vector<std::size_t>& xattn_layers() const { return xattn_layers_; }

  void apply_freeze_policy(const FreezePolicy& policy);
  // Re-copies the LM's <EOC> row into eoc.embed.
  void reset_eoc_embedding();
  // Replaces build_phi_mask (self-test negative controls); empty restores it.
  void set_mask_builder(MaskBuilder builder) { mask_builder_ = std::move(builder); }

  // Visual tokens [n * R, d] for images 1..n, n = max index of the instance;
  // later images cannot influence any logit and are skipped.
  Var visual_tokens(Graph& g, const TrainingInstance& inst, FeatureCache* cache = nullptr) const;
  Var forward(Graph& g, const TrainingInstance& inst, FeatureCache* cache = nullptr) const;
  Var forward_tokens(Graph& g, std::span<const TokenId> tokens, std::span<const int> phi, Var visual,
                     std::size_t num_images) const;
  // The frozen language model alone.
  Var forward_lm_only(Graph& g, std::span<const TokenId> tokens) const;

  // Parameter counts per component plus "total" and "trainable".
  std::map<std::string, std::size_t> parameter_report() const;
  std::vector<GateValues> gate_values() const;

 private:
  FlamingoConfig cfg_;
  VisionEncoder vision_;
  PerceiverResampler resampler_;
  LanguageModel lm_;
  std::vector<GatedXAttnBlock> gated_;
  std::vector<std::size_t> xattn_layers_;
  ParamStore params_;
  MaskBuilder mask_builder_;
};

// Sum over l in [begin, end) of log softmax(logits[l-1])[tokens[l]].
double sequence_log_likelihood(const Tensor& logits, std::span<const TokenId> tokens, std::size_t begin,
                               std::size_t end);
double sequence_log_likelihood(const FlamingoModel& model, const TrainingInstance& inst, std::size_t begin,
                               std::size_t end, FeatureCache* cache = nullptr);

}  // namespace flamingo
