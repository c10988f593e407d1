#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "flamingo/instance.hpp"
#include "flamingo/rng.hpp"
#include "flamingo/tokenizer.hpp"
#include "flamingo/vision.hpp"

namespace flamingo {

using Segment = std::variant<std::string, VisualInput>;

struct InterleavedDocument {
  std::vector<Segment> segments;

  std::size_t visual_count() const;
};

struct TaggedDocument {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> image_positions;  // positions of <image> tags
  std::vector<VisualInput> images;           // in tag order
};

// <BOS>, then per segment its text tokens or an <image> tag (preceded by
// <EOC> unless it directly follows <BOS>), then <EOC> <EOS>.
TaggedDocument tag_document(const InterleavedDocument& doc, const Vocab& vocab);

// previous: number of tags at positions <= l. next: 1-based index of the
// first tag at position >= l, or 0.
std::vector<int> compute_phi(std::size_t length, std::span<const std::size_t> image_positions,
                             PhiDirection direction);

struct WindowOptions {
  std::size_t length = 32;     // L
  std::size_t max_images = 5;  // N
  double p_next = 0.5;
};

// Zero image with the shape of `like`.
VisualInput blank_like(const VisualInput& like);

// Uniform L-token window among those holding at least one <image> tag; the
// first N in-window images are kept; tokens tied to a dropped image get 0.
TrainingInstance sample_instance(const TaggedDocument& doc, Rng& rng, const WindowOptions& opts,
                                 const Vocab& vocab);

struct PairedOptions {
  std::size_t length = 12;
  double space_prob = 0.5;
};

// <BOS> <image> [space]caption <EOC> <EOS>, padded with <pad> to L.
TrainingInstance format_paired(const std::string& caption, const VisualInput& visual, Rng& rng,
                               const PairedOptions& opts, const Vocab& vocab);

// <BOS> text <EOS> without images (co-training text batches, LM pretraining).
TrainingInstance format_text(const std::string& text, std::size_t length, const Vocab& vocab);

// Targets are text[1..L); weight 0 where the target is <pad>.
std::vector<double> target_weights(const TrainingInstance& inst, const Vocab& vocab);

class DocumentCollection {
 public:
  virtual ~DocumentCollection() = default;
  virtual std::size_t size() const = 0;
  virtual InterleavedDocument document(std::size_t i) const = 0;
};

class PairCollection {
 public:
  virtual ~PairCollection() = default;
  virtual std::size_t size() const = 0;
  virtual std::pair<std::string, VisualInput> pair(std::size_t i) const = 0;
};

class InstanceSource {
 public:
  virtual ~InstanceSource() = default;
  virtual std::size_t size() const = 0;
  virtual TrainingInstance make(std::size_t item, Rng& rng) const = 0;
};

class InterleavedSource : public InstanceSource {
 public:
  InterleavedSource(std::shared_ptr<const DocumentCollection> docs, Vocab vocab, WindowOptions opts);
  std::size_t size() const override { return docs_->size(); }
  TrainingInstance make(std::size_t item, Rng& rng) const override;

 private:
  std::shared_ptr<const DocumentCollection> docs_;
  Vocab vocab_;
  WindowOptions opts_;
};

class PairedSource : public InstanceSource {
 public:
  PairedSource(std::shared_ptr<const PairCollection> pairs, Vocab vocab, PairedOptions opts);
  std::size_t size() const override { return pairs_->size(); }
  TrainingInstance make(std::size_t item, Rng& rng) const override;

 private:
  std::shared_ptr<const PairCollection> pairs_;
  Vocab vocab_;
  PairedOptions opts_;
};

class TextSource : public InstanceSource {
 public:
  TextSource(std::vector<std::string> texts, Vocab vocab, std::size_t length);
  std::size_t size() const override { return texts_.size(); }
  TrainingInstance make(std::size_t item, Rng& rng) const override;

 private:
  std::vector<std::string> texts_;
  Vocab vocab_;
  std::size_t length_;
};

struct MixtureComponent {
  std::string name;
  double weight = 1.0;  // lambda_m
  std::size_t batch_size = 1;
  std::shared_ptr<const InstanceSource> source;
};

struct MixtureSpec {
  std::vector<MixtureComponent> datasets;

  void validate() const;
  std::vector<double> weights() const;
};

using Batch = std::vector<TrainingInstance>;

// One batch per dataset; dataset m draws from its own sub-stream.
std::vector<Batch> next_mixture_batches(const MixtureSpec& spec, Rng& rng);
// A batch of dataset m alone, drawn from a fresh sub-stream of rng.
Batch next_dataset_batch(const MixtureSpec& spec, std::size_t m, Rng& rng);
// sum_m batch_size_m items drawn uniformly from the union of all datasets.
Batch next_pooled_batch(const MixtureSpec& spec, Rng& rng);

// Documents in memory (JSONL ingestion, tests).
class VectorDocuments : public DocumentCollection, public PairCollection {
 public:
  explicit VectorDocuments(std::vector<InterleavedDocument> docs) : docs_(std::move(docs)) {}
  std::size_t size() const override { return docs_.size(); }
  InterleavedDocument document(std::size_t i) const override { return docs_.at(i); }
  // Requires a leading visual followed by text segments.
  std::pair<std::string, VisualInput> pair(std::size_t i) const override;

 private:
  std::vector<InterleavedDocument> docs_;
};

// One JSON object per line: {"text": "... <image> ...", "images": [...]},
// where each image is a file path (relative to the file) or
// {"shape": [h, w, 3], "data": "<base64 float64>"}. Documents without
// images are skipped. Errors name the offending line.
std::vector<InterleavedDocument> load_jsonl_documents(const std::filesystem::path& path, const VisionConfig& vision);

}  // namespace flamingo
