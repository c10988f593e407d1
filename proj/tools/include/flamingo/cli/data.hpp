#pragma once

#include <memory>
#include <string>
#include <vector>

#include "flamingo/cli/config.hpp"
#include "flamingo/contrastive.hpp"
#include "flamingo/datapipe.hpp"
#include "flamingo/fewshot.hpp"

namespace flamingo::cli {

// One configured training dataset, loaded or generated.
struct LoadedDataset {
  DatasetSpec spec;
  std::shared_ptr<const DocumentCollection> documents;  // interleaved
  std::shared_ptr<const PairCollection> pairs;          // paired
  std::vector<std::string> texts;                       // text-only view, "<image>" literals kept
};

// Synthetic corpora draw from the "data" sub-stream, one counter per dataset.
std::vector<LoadedDataset> load_datasets(const RunConfig& cfg);
// Every string the synthetic grammars produce plus the loaded texts.
Vocab build_run_vocab(const RunConfig& cfg, const std::vector<LoadedDataset>& data);
MixtureSpec build_mixture(const RunConfig& cfg, const std::vector<LoadedDataset>& data, const Vocab& vocab);

// Replaces the caption of a fixed random subset of pairs by a random one.
class MismatchedPairs : public PairCollection {
 public:
  MismatchedPairs(std::shared_ptr<const PairCollection> inner, double fraction, std::uint64_t seed,
                  synth::SynthConfig grammar);
  std::size_t size() const override { return inner_->size(); }
  std::pair<std::string, VisualInput> pair(std::size_t i) const override;

 private:
  std::shared_ptr<const PairCollection> inner_;
  double fraction_;
  std::uint64_t seed_;
  synth::SynthConfig grammar_;
};

std::vector<ContrastiveDataset> build_contrastive_datasets(const RunConfig& cfg);

// One fresh render of every colour-shape pair, in colour-major order.
struct HeldOutPairs {
  std::vector<VisualInput> images;
  std::vector<std::vector<TokenId>> texts;
};
HeldOutPairs held_out_pairs(const synth::SynthConfig& cfg, const VisionConfig& vision, const Vocab& vocab, Rng& rng);

// Synthetic few-shot tasks on fresh glyph renders. "color"/"shape": support
// captions name one attribute and every query ranks the union of colour and
// shape names. "caption": `classes` colour-shape classes, support item i is
// of class i mod classes, candidates are the class captions.
EvalTask synthetic_task(const std::string& kind, std::size_t pool, std::size_t queries, std::size_t classes,
                        const synth::SynthConfig& cfg, const VisionConfig& vision, Rng& rng);

}  // namespace flamingo::cli
