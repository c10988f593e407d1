#include "flamingo/datapipe.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include "flamingo/io.hpp"
#include "jsonl.hpp"

namespace flamingo {

std::size_t InterleavedDocument::visual_count() const {
  return static_cast<std::size_t>(std::count_if(segments.begin(), segments.end(),
                                                [](const Segment& s) { return std::holds_alternative<VisualInput>(s); }));
}

TaggedDocument tag_document(const InterleavedDocument& doc, const Vocab& vocab) {
  TaggedDocument out;
  out.tokens.push_back(vocab.bos());
  for (const auto& seg : doc.segments) {
    if (const auto* text = std::get_if<std::string>(&seg)) {
      auto ids = vocab.encode(*text);
      out.tokens.insert(out.tokens.end(), ids.begin(), ids.end());
      continue;
    }
    if (out.tokens.size() > 1) out.tokens.push_back(vocab.eoc());
    out.image_positions.push_back(out.tokens.size());
    out.tokens.push_back(vocab.image());
    out.images.push_back(std::get<VisualInput>(seg));
  }
  out.tokens.push_back(vocab.eoc());
  out.tokens.push_back(vocab.eos());
  return out;
}

std::vector<int> compute_phi(std::size_t length, std::span<const std::size_t> image_positions,
                             PhiDirection direction) {
  std::vector<int> phi(length, 0);
  if (direction == PhiDirection::previous) {
    std::size_t k = 0;
    for (std::size_t l = 0; l < length; ++l) {
      while (k < image_positions.size() && image_positions[k] <= l) ++k;
      phi[l] = static_cast<int>(k);
    }
  } else {
    std::size_t k = 0;
    for (std::size_t l = 0; l < length; ++l) {
      while (k < image_positions.size() && image_positions[k] < l) ++k;
      phi[l] = k < image_positions.size() ? static_cast<int>(k + 1) : 0;
    }
  }
  return phi;
}

VisualInput blank_like(const VisualInput& like) { return {Tensor(like.pixels.shape(), 0.0), like.kind}; }

TrainingInstance sample_instance(const TaggedDocument& doc, Rng& rng, const WindowOptions& opts, const Vocab& vocab) {
  if (doc.image_positions.empty()) throw std::invalid_argument("sample_instance: document has no images");
  if (opts.length == 0 || opts.max_images == 0) throw std::invalid_argument("sample_instance: L and N must be positive");
  TrainingInstance inst;
  inst.direction = bernoulli(rng, opts.p_next) ? PhiDirection::next : PhiDirection::previous;

  const std::size_t len = doc.tokens.size(), L = opts.length;
  std::size_t start = 0;
  if (len > L) {
    // Starts whose window holds at least one tag; drawing uniformly among
    // them equals resampling the window until it contains an image.
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + L <= len; ++s) {
      auto it = std::lower_bound(doc.image_positions.begin(), doc.image_positions.end(), s);
      if (it != doc.image_positions.end() && *it < s + L) starts.push_back(s);
    }
    start = starts[uniform_index(rng, starts.size())];
  }
  const std::size_t end = std::min(len, start + L);

  std::vector<std::size_t> local;
  std::vector<std::size_t> which;
  for (std::size_t k = 0; k < doc.image_positions.size(); ++k) {
    const std::size_t p = doc.image_positions[k];
    if (p >= start && p < end) {
      local.push_back(p - start);
      which.push_back(k);
    }
  }
  inst.text.assign(doc.tokens.begin() + static_cast<long>(start), doc.tokens.begin() + static_cast<long>(end));
  inst.indices = compute_phi(inst.text.size(), local, inst.direction);
  const std::size_t kept = std::min(opts.max_images, local.size());
  for (auto& i : inst.indices)
    if (static_cast<std::size_t>(i) > kept) i = 0;
  for (std::size_t k = 0; k < kept; ++k) inst.images.push_back(doc.images[which[k]]);
  inst.real_images = kept;
  while (inst.images.size() < opts.max_images) inst.images.push_back(blank_like(doc.images[which[0]]));
  inst.text.resize(L, vocab.pad());
  inst.indices.resize(L, 0);
  return inst;
}

TrainingInstance format_paired(const std::string& caption, const VisualInput& visual, Rng& rng,
                               const PairedOptions& opts, const Vocab& vocab) {
  if (caption.empty()) throw std::invalid_argument("format_paired: empty caption");
  TrainingInstance inst;
  inst.text = {vocab.bos(), vocab.image()};
  const bool space = bernoulli(rng, opts.space_prob);
  auto ids = vocab.encode(space ? " " + caption : caption);
  inst.text.insert(inst.text.end(), ids.begin(), ids.end());
  inst.text.push_back(vocab.eoc());
  inst.text.push_back(vocab.eos());
  if (inst.text.size() > opts.length) inst.text.resize(opts.length);
  inst.indices.assign(inst.text.size(), 1);
  inst.indices[0] = 0;
  inst.text.resize(opts.length, vocab.pad());
  inst.indices.resize(opts.length, 0);
  inst.images = {visual};
  inst.real_images = 1;
  return inst;
}

TrainingInstance format_text(const std::string& text, std::size_t length, const Vocab& vocab) {
  TrainingInstance inst;
  inst.text.push_back(vocab.bos());
  auto ids = vocab.encode(text);
  inst.text.insert(inst.text.end(), ids.begin(), ids.end());
  inst.text.push_back(vocab.eos());
  inst.text.resize(length, vocab.pad());
  inst.indices.assign(length, 0);
  return inst;
}

std::vector<double> target_weights(const TrainingInstance& inst, const Vocab& vocab) {
  std::vector<double> w;
  for (std::size_t l = 1; l < inst.text.size(); ++l) w.push_back(inst.text[l] == vocab.pad() ? 0.0 : 1.0);
  return w;
}

InterleavedSource::InterleavedSource(std::shared_ptr<const DocumentCollection> docs, Vocab vocab, WindowOptions opts)
    : docs_(std::move(docs)), vocab_(std::move(vocab)), opts_(opts) {}

TrainingInstance InterleavedSource::make(std::size_t item, Rng& rng) const {
  return sample_instance(tag_document(docs_->document(item), vocab_), rng, opts_, vocab_);
}

PairedSource::PairedSource(std::shared_ptr<const PairCollection> pairs, Vocab vocab, PairedOptions opts)
    : pairs_(std::move(pairs)), vocab_(std::move(vocab)), opts_(opts) {}

TrainingInstance PairedSource::make(std::size_t item, Rng& rng) const {
  auto [caption, visual] = pairs_->pair(item);
  return format_paired(caption, visual, rng, opts_, vocab_);
}

TextSource::TextSource(std::vector<std::string> texts, Vocab vocab, std::size_t length)
    : texts_(std::move(texts)), vocab_(std::move(vocab)), length_(length) {}

TrainingInstance TextSource::make(std::size_t item, Rng&) const { return format_text(texts_.at(item), length_, vocab_); }

void MixtureSpec::validate() const {
  if (datasets.empty()) throw std::invalid_argument("mixture: no datasets");
  for (const auto& d : datasets) {
    if (!(d.weight > 0.0)) throw std::invalid_argument("mixture: weight of '" + d.name + "' must be > 0");
    if (d.batch_size == 0) throw std::invalid_argument("mixture: batch size of '" + d.name + "' must be > 0");
    if (!d.source || d.source->size() == 0) throw std::invalid_argument("mixture: dataset '" + d.name + "' is empty");
  }
}

std::vector<double> MixtureSpec::weights() const {
  std::vector<double> w;
  for (const auto& d : datasets) w.push_back(d.weight);
  return w;
}

namespace {

Batch draw_batch(const MixtureComponent& d, std::uint64_t seed) {
  Rng sub(seed);
  Batch b;
  for (std::size_t i = 0; i < d.batch_size; ++i) b.push_back(d.source->make(uniform_index(sub, d.source->size()), sub));
  return b;
}

}  // namespace

std::vector<Batch> next_mixture_batches(const MixtureSpec& spec, Rng& rng) {
  spec.validate();
  std::vector<std::uint64_t> seeds;
  for (std::size_t m = 0; m < spec.datasets.size(); ++m) seeds.push_back(rng());
  std::vector<Batch> out;
  for (std::size_t m = 0; m < spec.datasets.size(); ++m) out.push_back(draw_batch(spec.datasets[m], seeds[m]));
  return out;
}

Batch next_dataset_batch(const MixtureSpec& spec, std::size_t m, Rng& rng) {
  spec.validate();
  if (m >= spec.datasets.size()) {
    throw std::out_of_range("dataset index " + std::to_string(m) + " outside mixture of " +
                            std::to_string(spec.datasets.size()));
  }
  return draw_batch(spec.datasets[m], rng());
}

Batch next_pooled_batch(const MixtureSpec& spec, Rng& rng) {
  spec.validate();
  std::size_t total = 0, count = 0;
  for (const auto& d : spec.datasets) {
    total += d.source->size();
    count += d.batch_size;
  }
  Rng sub(rng());
  Batch b;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t u = uniform_index(sub, total), m = 0;
    while (u >= spec.datasets[m].source->size()) u -= spec.datasets[m++].source->size();
    b.push_back(spec.datasets[m].source->make(u, sub));
  }
  return b;
}

std::pair<std::string, VisualInput> VectorDocuments::pair(std::size_t i) const {
  const auto& doc = docs_.at(i);
  if (doc.segments.empty() || !std::holds_alternative<VisualInput>(doc.segments[0]) || doc.visual_count() != 1) {
    throw std::invalid_argument("paired data: document " + std::to_string(i) + " is not <image> followed by text");
  }
  std::string caption;
  for (std::size_t s = 1; s < doc.segments.size(); ++s) caption += std::get<std::string>(doc.segments[s]);
  return {caption, std::get<VisualInput>(doc.segments[0])};
}

std::vector<InterleavedDocument> load_jsonl_documents(const std::filesystem::path& path, const VisionConfig& vision) {
  std::vector<InterleavedDocument> docs;
  constexpr std::string_view kTag = "<image>";
  detail::for_each_jsonl(path, [&](const nlohmann::json& j) {
    const std::string text = j.at("text").get<std::string>();
    std::vector<VisualInput> visuals;
    for (const auto& img : j.value("images", nlohmann::json::array()))
      visuals.push_back(preprocess_image(detail::read_json_image(img, path.parent_path()), vision));
    InterleavedDocument doc;
    std::size_t pos = 0, used = 0;
    while (pos <= text.size()) {
      const auto hit = text.find(kTag, pos);
      const auto stop = hit == std::string::npos ? text.size() : hit;
      if (stop > pos) doc.segments.emplace_back(text.substr(pos, stop - pos));
      if (hit == std::string::npos) break;
      if (used >= visuals.size()) throw std::runtime_error("more <image> markers than images");
      doc.segments.emplace_back(visuals[used++]);
      pos = hit + kTag.size();
    }
    if (used != visuals.size()) throw std::runtime_error("fewer <image> markers than images");
    if (used > 0) docs.push_back(std::move(doc));
  });
  return docs;
}

}  // namespace flamingo
