#include "flamingo/cli/data.hpp"

#include <set>
#include <stdexcept>

namespace flamingo::cli {
namespace {

std::string document_text(const InterleavedDocument& doc) {
  std::string s;
  for (const auto& seg : doc.segments) {
    if (const auto* t = std::get_if<std::string>(&seg)) s += *t;
    else s += "<image>";
  }
  return s;
}

std::string attribute(const synth::GlyphSpec& g, bool color) {
  return std::string(color ? synth::kColors[static_cast<std::size_t>(g.color)] : synth::kShapes[static_cast<std::size_t>(g.shape)]);
}

}  // namespace

std::vector<LoadedDataset> load_datasets(const RunConfig& cfg) {
  std::vector<LoadedDataset> out;
  const auto& vision = cfg.model.flamingo.vision;
  for (std::size_t i = 0; i < cfg.data.datasets.size(); ++i) {
    LoadedDataset d;
    d.spec = cfg.data.datasets[i];
    if (d.spec.source == "synthetic") {
      Rng rng = make_rng(cfg.seed, "data", i);
      auto corpus = std::make_shared<synth::Dataset>(
          synth::make_corpus(synth::parse_task(d.spec.task), d.spec.size, rng, cfg.data.synth, vision));
      d.texts = synth::text_only(*corpus);
      d.documents = corpus;
      d.pairs = corpus;
    } else {
      auto docs = std::make_shared<VectorDocuments>(load_jsonl_documents(d.spec.path, vision));
      if (docs->size() == 0) throw std::runtime_error(d.spec.path + ": no documents");
      for (std::size_t k = 0; k < docs->size(); ++k) d.texts.push_back(document_text(docs->document(k)));
      if (d.spec.task == "paired")
        for (std::size_t k = 0; k < docs->size(); ++k) docs->pair(k);
      d.documents = docs;
      d.pairs = docs;
    }
    out.push_back(std::move(d));
  }
  return out;
}

Vocab build_run_vocab(const RunConfig& cfg, const std::vector<LoadedDataset>& data) {
  auto texts = synth::grammar_texts(cfg.data.synth);
  for (const auto& d : data)
    if (d.spec.source != "synthetic") texts.insert(texts.end(), d.texts.begin(), d.texts.end());
  return Vocab::build(texts);
}

MixtureSpec build_mixture(const RunConfig& cfg, const std::vector<LoadedDataset>& data, const Vocab& vocab) {
  MixtureSpec spec;
  for (const auto& d : data) {
    const bool interleaved = d.spec.task == "interleaved_pages" || d.spec.task == "interleaved";
    std::shared_ptr<const InstanceSource> src;
    if (interleaved) {
      src = std::make_shared<InterleavedSource>(d.documents, vocab,
                                                WindowOptions{d.spec.length, cfg.train.max_images, cfg.train.p_next});
    } else {
      src = std::make_shared<PairedSource>(d.pairs, vocab, PairedOptions{d.spec.length, cfg.train.space_prob});
    }
    spec.datasets.push_back({d.spec.name, d.spec.weight, d.spec.batch_size, std::move(src)});
  }
  return spec;
}

MismatchedPairs::MismatchedPairs(std::shared_ptr<const PairCollection> inner, double fraction, std::uint64_t seed,
                                 synth::SynthConfig grammar)
    : inner_(std::move(inner)), fraction_(fraction), seed_(seed), grammar_(grammar) {}

std::pair<std::string, VisualInput> MismatchedPairs::pair(std::size_t i) const {
  auto p = inner_->pair(i);
  Rng r(splitmix64(seed_ + i));
  if (bernoulli(r, fraction_)) p.first = synth::caption_text(synth::random_glyph(r, grammar_));
  return p;
}

std::vector<ContrastiveDataset> build_contrastive_datasets(const RunConfig& cfg) {
  std::vector<ContrastiveDataset> out;
  const auto& c = cfg.contrastive;
  for (std::size_t i = 0; i < c.datasets.size(); ++i) {
    const auto& d = c.datasets[i];
    synth::SynthConfig sc = cfg.data.synth;
    sc.noise = d.noise;
    sc.background = d.background;
    Rng rng = make_rng(cfg.seed, "data", 100 + i);
    std::shared_ptr<const PairCollection> pairs = std::make_shared<synth::Dataset>(
        synth::make_corpus(synth::Task::glyph_caption, d.size, rng, sc, cfg.model.flamingo.vision));
    if (d.mismatch > 0.0) pairs = std::make_shared<MismatchedPairs>(pairs, d.mismatch, rng(), cfg.data.synth);
    out.push_back({d.name, d.weight, d.batch_size, std::move(pairs)});
  }
  return out;
}

HeldOutPairs held_out_pairs(const synth::SynthConfig& cfg, const VisionConfig& vision, const Vocab& vocab, Rng& rng) {
  HeldOutPairs h;
  for (std::size_t c = 0; c < cfg.colors; ++c)
    for (std::size_t s = 0; s < cfg.shapes; ++s) {
      auto g = synth::random_glyph(rng, cfg, static_cast<int>(c), static_cast<int>(s));
      h.images.push_back(synth::glyph_input(g, cfg, vision));
      h.texts.push_back(vocab.encode(synth::caption_text(g)));
    }
  return h;
}

EvalTask synthetic_task(const std::string& kind, std::size_t pool, std::size_t queries, std::size_t classes,
                        const synth::SynthConfig& cfg, const VisionConfig& vision, Rng& rng) {
  EvalTask task;
  if (kind == "color" || kind == "shape") {
    const bool color = kind == "color";
    std::vector<std::string> names;
    for (std::size_t c = 0; c < cfg.colors; ++c) names.push_back(" " + std::string(synth::kColors[c]) + "<EOC>");
    for (std::size_t s = 0; s < cfg.shapes; ++s) names.push_back(" " + std::string(synth::kShapes[s]) + "<EOC>");
    for (std::size_t i = 0; i < pool; ++i) {
      auto g = synth::random_glyph(rng, cfg);
      task.support.push_back({synth::glyph_input(g, cfg, vision), caption_prompt(attribute(g, color))});
    }
    for (std::size_t q = 0; q < queries; ++q) {
      auto g = synth::random_glyph(rng, cfg);
      task.queries.push_back({synth::glyph_input(g, cfg, vision), caption_prefix(), " " + attribute(g, color) + "<EOC>", names});
    }
    return task;
  }
  if (kind != "caption") throw std::invalid_argument("unknown synthetic task '" + kind + "' (color, shape, caption)");
  if (classes == 0 || classes > cfg.colors * cfg.shapes) throw std::invalid_argument("caption task: bad class count");
  auto glyph_of = [&](std::size_t k) {
    return synth::random_glyph(rng, cfg, static_cast<int>(k / cfg.shapes), static_cast<int>(k % cfg.shapes));
  };
  std::vector<std::string> names;
  for (std::size_t k = 0; k < classes; ++k) {
    synth::GlyphSpec g;
    g.color = static_cast<int>(k / cfg.shapes);
    g.shape = static_cast<int>(k % cfg.shapes);
    names.push_back(synth::caption_text(g).substr(caption_prefix().size()) + "<EOC>");
  }
  for (std::size_t i = 0; i < pool; ++i) {
    auto g = glyph_of(i % classes);
    task.support.push_back({synth::glyph_input(g, cfg, vision), synth::caption_text(g)});
  }
  for (std::size_t q = 0; q < queries; ++q) {
    const std::size_t k = uniform_index(rng, classes);
    auto g = glyph_of(k);
    task.queries.push_back({synth::glyph_input(g, cfg, vision), caption_prefix(), names[k], names});
  }
  return task;
}

}  // namespace flamingo::cli
