#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flamingo/datapipe.hpp"
#include "flamingo/optim.hpp"
#include "flamingo/train.hpp"
#include "flamingo/vision.hpp"

namespace flamingo {

struct DualEncoderConfig {
  VisionConfig vision;
  std::size_t vocab = 64;
  std::size_t text_width = 32;
  std::size_t text_layers = 1;
  std::size_t text_heads = 2;
  std::size_t text_max_len = 16;
  std::size_t joint = 32;
  double init_beta = 10.0;

  void validate() const;
};

// Vision encoder at "vision" (the layout the multimodal model loads), a small
// bidirectional text encoder at "text", projections "proj.vision"/"proj.text"
// into the joint space, and "contrastive.log_beta".
class DualEncoder {
 public:
  DualEncoder(DualEncoderConfig cfg, Rng& rng);

  const DualEncoderConfig& config() const { return cfg_; }
  const VisionEncoder& vision() const { return vision_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Unit-norm joint embeddings, one row per item.
  Var embed_images(Graph& g, std::span<const VisualInput> images) const;
  Var embed_texts(Graph& g, std::span<const std::vector<TokenId>> texts) const;
  Tensor image_embeddings(std::span<const VisualInput> images) const;
  Tensor text_embeddings(std::span<const std::vector<TokenId>> texts) const;
  double beta() const;

  // Writes the "vision" component only.
  void export_vision(const std::filesystem::path& path) const;

 private:
  Var encode_text(Graph& g, std::span<const TokenId> tokens) const;

  DualEncoderConfig cfg_;
  VisionEncoder vision_;
  ParamStore params_;
};

// txt->im plus im->txt cross-entropy over exp(log_beta) * V L^T, averaged over
// the batch, with targets (1 - s) on the diagonal plus s / N everywhere.
Var contrastive_loss(Var v, Var l, Var log_beta, double smoothing);

// Per class: mean of the unit template embeddings, re-normalised. Templates
// contain "{}" where the class name goes.
Tensor class_embeddings(const DualEncoder& enc, const Vocab& vocab, std::span<const std::string> class_names,
                        std::span<const std::string> templates);
std::size_t zero_shot_classify(const Tensor& image_embedding, const Tensor& class_embeds);
std::size_t zero_shot_classify(const DualEncoder& enc, const VisualInput& image, const Vocab& vocab,
                               std::span<const std::string> class_names, std::span<const std::string> templates);

// Indices of gallery rows by decreasing cosine similarity to `query`; ties
// keep the lower index first.
std::vector<std::size_t> rank_by_cosine(std::span<const double> query, const Tensor& gallery);

struct RecallReport {
  double image_to_text = 0.0;
  double text_to_image = 0.0;
};
// V [Q, d], L [G, d]; truth[q] is the gallery index paired with image q.
// Text->image counts a hit when any image paired with the text ranks in the
// top K. Rows need not be normalised.
RecallReport retrieval_recall(const Tensor& v, const Tensor& l, std::span<const std::size_t> truth, std::size_t k);
RecallReport retrieval_recall(const Tensor& v, const Tensor& l, std::size_t k);

struct PairBatch {
  std::vector<VisualInput> images;
  std::vector<std::vector<TokenId>> texts;
  std::size_t size() const { return images.size(); }
};
// batch_size distinct items (fewer if the collection is smaller).
PairBatch draw_pair_batch(const PairCollection& pairs, std::size_t batch_size, Rng& rng, const Vocab& vocab);
PairBatch merge_batches(std::span<const PairBatch> batches);

struct ContrastiveDataset {
  std::string name;
  double weight = 1.0;
  std::size_t batch_size = 16;
  std::shared_ptr<const PairCollection> pairs;
};

struct ContrastiveOptions {
  Strategy strategy = Strategy::accumulation;
  double smoothing = 0.1;
  AdamWConfig optim{1e-3, 0, 0.9, 0.999, 1e-8, 0.0, {}};
  ClipConfig vision_clip{ClipConfig::Mode::agc, 1e-2};
  ClipConfig text_clip{ClipConfig::Mode::global_norm, 10.0};
};

// lambda * gradient of the loss on one batch; losses = {loss}.
GradResult contrastive_gradient(const DualEncoder& enc, const PairBatch& batch, double lambda, double smoothing);

struct ContrastiveStep {
  std::size_t step = 0;
  std::vector<double> losses;  // NaN for datasets not visited
  double total = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double beta = 0.0;
};

// sum_m batch_size distinct items drawn uniformly from the union of the datasets.
PairBatch draw_pooled_pair_batch(std::span<const ContrastiveDataset> datasets, Rng& rng, const Vocab& vocab);

// Vision gradients go through vision_clip, the rest through text_clip. The
// merged strategy trains on pooled batches.
class ContrastiveTrainer {
 public:
  ContrastiveTrainer(DualEncoder& enc, std::vector<ContrastiveDataset> datasets, ContrastiveOptions opts, Rng data_rng,
                     Vocab vocab);

  ContrastiveStep step();
  std::size_t steps_done() const { return opt_.step(); }

 private:
  DualEncoder& enc_;
  std::vector<ContrastiveDataset> datasets_;
  ContrastiveOptions opts_;
  Rng rng_;
  Vocab vocab_;
  OptimState opt_;
};

}  // namespace flamingo
