#include "flamingo/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "flamingo/checkpoint.hpp"
#include "flamingo/layers.hpp"
#include "flamingo/ops.hpp"

namespace flamingo {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Tensor normalized_rows(const Tensor& t) {
  Tensor out = t;
  for (std::size_t r = 0; r < t.rows(); ++r) {
    auto row = out.row(r);
    const double n = std::sqrt(dot(row, row));
    if (n > 0.0)
      for (auto& x : row) x /= n;
  }
  return out;
}

std::string fill_template(const std::string& tmpl, const std::string& name) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos) throw std::invalid_argument("template '" + tmpl + "' has no {} placeholder");
  return tmpl.substr(0, pos) + name + tmpl.substr(pos + 2);
}

}  // namespace

void DualEncoderConfig::validate() const {
  vision.validate();
  if (vocab == 0 || text_width == 0 || text_layers == 0 || joint == 0 || text_max_len == 0) {
    throw std::invalid_argument("dual encoder: sizes must be > 0");
  }
  if (text_heads == 0 || text_width % text_heads != 0) {
    throw std::invalid_argument("dual encoder: text_width must be divisible by text_heads");
  }
  if (!(init_beta > 0.0)) throw std::invalid_argument("dual encoder: init_beta must be > 0");
}

DualEncoder::DualEncoder(DualEncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)), vision_(cfg_.vision, "vision") {
  cfg_.validate();
  vision_.init(params_, rng);
  const std::size_t d = cfg_.text_width;
  params_.add("text.tok_embed", layers::normal(rng, {cfg_.vocab, d}, 0.3));
  params_.add("text.pos_embed", layers::normal(rng, {cfg_.text_max_len, d}, 0.1));
  const double out_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.text_layers));
  for (std::size_t j = 0; j < cfg_.text_layers; ++j) {
    const std::string p = "text.layer" + std::to_string(j);
    layers::add_layer_norm(params_, p + ".ln1", d);
    layers::add_attention(params_, rng, p + ".attn", d, out_gain);
    layers::add_ffw(params_, rng, p + ".ffw", d, 4 * d, out_gain);
  }
  layers::add_layer_norm(params_, "text.ln_f", d);
  layers::add_linear(params_, rng, "proj.vision", cfg_.vision.width, cfg_.joint, false);
  layers::add_linear(params_, rng, "proj.text", d, cfg_.joint, false);
  params_.add("contrastive.log_beta", Tensor({1}, std::log(cfg_.init_beta)));
}

Var DualEncoder::embed_images(Graph& g, std::span<const VisualInput> images) const {
  if (images.empty()) throw std::invalid_argument("embed_images: no images");
  Var feats = vision_.encode_stack(g, images);
  // Mean over each item's frames and cells via a fixed pooling matrix.
  const std::size_t s = cfg_.vision.spatial();
  Tensor pool({images.size(), feats.rows()}, 0.0);
  std::size_t row = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t n = images[i].frames() * s;
    for (std::size_t k = 0; k < n; ++k) pool.at(i, row + k) = 1.0 / static_cast<double>(n);
    row += n;
  }
  Var pooled = ops::matmul(g.constant(std::move(pool)), feats);
  return ops::l2_normalize_rows(layers::linear(g, "proj.vision", pooled, false));
}

Var DualEncoder::encode_text(Graph& g, std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("embed_texts: empty text");
  if (tokens.size() > cfg_.text_max_len) {
    throw std::invalid_argument("embed_texts: " + std::to_string(tokens.size()) + " tokens exceed text_max_len " +
                                std::to_string(cfg_.text_max_len));
  }
  for (auto t : tokens)
    if (t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab) throw std::out_of_range("embed_texts: token id outside vocab");
  Var h = ops::add(ops::embedding(g.param("text.tok_embed"), tokens),
                   ops::slice_rows(g.param("text.pos_embed"), 0, tokens.size()));
  for (std::size_t j = 0; j < cfg_.text_layers; ++j) {
    const std::string p = "text.layer" + std::to_string(j);
    auto x = layers::layer_norm(g, p + ".ln1", h);
    h = ops::add(h, layers::attention(g, p + ".attn", x, x, nullptr, false, cfg_.text_heads));
    h = ops::add(h, layers::ffw(g, p + ".ffw", h, ops::Activation::gelu));
  }
  return ops::mean_rows(layers::layer_norm(g, "text.ln_f", h));
}

Var DualEncoder::embed_texts(Graph& g, std::span<const std::vector<TokenId>> texts) const {
  if (texts.empty()) throw std::invalid_argument("embed_texts: no texts");
  std::vector<Var> rows;
  rows.reserve(texts.size());
  for (const auto& t : texts) rows.push_back(encode_text(g, t));
  return ops::l2_normalize_rows(layers::linear(g, "proj.text", ops::concat_rows(rows), false));
}

Tensor DualEncoder::image_embeddings(std::span<const VisualInput> images) const {
  Graph g(&params_, GradMode::none);
  return embed_images(g, images).value();
}

Tensor DualEncoder::text_embeddings(std::span<const std::vector<TokenId>> texts) const {
  Graph g(&params_, GradMode::none);
  return embed_texts(g, texts).value();
}

double DualEncoder::beta() const { return std::exp(params_.get("contrastive.log_beta")[0]); }

void DualEncoder::export_vision(const std::filesystem::path& path) const {
  ParamStore out;
  for (const auto& [name, e] : params_.entries())
    if (checkpoint::component_of(name) == "vision") out.add(name, e.value, true);
  checkpoint::save(out, path);
}

Var contrastive_loss(Var v, Var l, Var log_beta, double smoothing) {
  const std::size_t n = v.rows();
  if (n < 2) throw std::invalid_argument("contrastive_loss: need at least 2 pairs");
  if (l.rows() != n || l.cols() != v.cols()) throw std::invalid_argument("contrastive_loss: V and L shapes differ");
  if (!(smoothing >= 0.0 && smoothing < 1.0)) throw std::invalid_argument("contrastive_loss: smoothing in [0, 1)");
  Tensor targets({n, n}, smoothing / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i) targets.at(i, i) += 1.0 - smoothing;
  Var sim = ops::mul_scalar(ops::matmul_nt(v, l), ops::exp(log_beta));  // [i, j] = beta V_i . L_j
  Var im2txt = ops::weighted_sum(ops::log_softmax(sim), targets);
  Var txt2im = ops::weighted_sum(ops::log_softmax(ops::transpose(sim)), targets);
  return ops::scale(ops::add(im2txt, txt2im), -1.0 / static_cast<double>(n));
}

Tensor class_embeddings(const DualEncoder& enc, const Vocab& vocab, std::span<const std::string> class_names,
                        std::span<const std::string> templates) {
  if (class_names.empty()) throw std::invalid_argument("zero-shot: empty class list");
  if (templates.empty()) throw std::invalid_argument("zero-shot: no templates");
  Tensor out({class_names.size(), enc.config().joint}, 0.0);
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    std::vector<std::vector<TokenId>> texts;
    for (const auto& t : templates) texts.push_back(vocab.encode(fill_template(t, class_names[c])));
    const Tensor e = enc.text_embeddings(texts);
    for (std::size_t r = 0; r < e.rows(); ++r)
      for (std::size_t k = 0; k < e.cols(); ++k) out.at(c, k) += e.at(r, k) / static_cast<double>(e.rows());
  }
  return normalized_rows(out);
}

std::size_t zero_shot_classify(const Tensor& image_embedding, const Tensor& class_embeds) {
  if (class_embeds.rows() == 0) throw std::invalid_argument("zero-shot: empty class list");
  return rank_by_cosine(image_embedding.data(), class_embeds).front();
}

std::size_t zero_shot_classify(const DualEncoder& enc, const VisualInput& image, const Vocab& vocab,
                               std::span<const std::string> class_names, std::span<const std::string> templates) {
  const VisualInput one[] = {image};
  return zero_shot_classify(enc.image_embeddings(one), class_embeddings(enc, vocab, class_names, templates));
}

std::vector<std::size_t> rank_by_cosine(std::span<const double> query, const Tensor& gallery) {
  if (gallery.cols() != query.size()) throw std::invalid_argument("rank_by_cosine: dimension mismatch");
  const double qn = std::sqrt(dot(query, query));
  std::vector<double> score(gallery.rows());
  for (std::size_t r = 0; r < gallery.rows(); ++r) {
    const auto row = gallery.row(r);
    const double denom = qn * std::sqrt(dot(row, row));
    score[r] = denom > 0.0 ? dot(query, row) / denom : 0.0;
  }
  std::vector<std::size_t> order(gallery.rows());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return order;
}

RecallReport retrieval_recall(const Tensor& v, const Tensor& l, std::span<const std::size_t> truth, std::size_t k) {
  if (k < 1) throw std::invalid_argument("retrieval_recall: K must be >= 1");
  if (truth.size() != v.rows()) throw std::invalid_argument("retrieval_recall: one truth index per image");
  for (auto t : truth)
    if (t >= l.rows()) throw std::out_of_range("retrieval_recall: truth index outside gallery");
  RecallReport r;
  std::size_t hits = 0;
  for (std::size_t q = 0; q < v.rows(); ++q) {
    const auto order = rank_by_cosine(v.row(q), l);
    hits += std::find(order.begin(), order.begin() + std::min(k, order.size()), truth[q]) !=
            order.begin() + std::min(k, order.size());
  }
  r.image_to_text = static_cast<double>(hits) / static_cast<double>(v.rows());
  std::size_t texts = 0;
  hits = 0;
  for (std::size_t t = 0; t < l.rows(); ++t) {
    if (std::find(truth.begin(), truth.end(), t) == truth.end()) continue;
    ++texts;
    const auto order = rank_by_cosine(l.row(t), v);
    for (std::size_t i = 0; i < std::min(k, order.size()); ++i) {
      if (truth[order[i]] == t) {
        ++hits;
        break;
      }
    }
  }
  r.text_to_image = texts ? static_cast<double>(hits) / static_cast<double>(texts) : 0.0;
  return r;
}

RecallReport retrieval_recall(const Tensor& v, const Tensor& l, std::size_t k) {
  std::vector<std::size_t> truth(v.rows());
  std::iota(truth.begin(), truth.end(), 0);
  return retrieval_recall(v, l, truth, k);
}

PairBatch draw_pair_batch(const PairCollection& pairs, std::size_t batch_size, Rng& rng, const Vocab& vocab) {
  if (pairs.size() == 0) throw std::invalid_argument("pair batch: empty collection");
  std::vector<std::size_t> idx(pairs.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t n = std::min(batch_size, idx.size());
  // Partial Fisher-Yates: the first n entries are a uniform sample.
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
  PairBatch b;
  for (std::size_t i = 0; i < n; ++i) {
    auto [caption, visual] = pairs.pair(idx[i]);
    b.images.push_back(std::move(visual));
    b.texts.push_back(vocab.encode(caption));
  }
  return b;
}

PairBatch draw_pooled_pair_batch(std::span<const ContrastiveDataset> datasets, Rng& rng, const Vocab& vocab) {
  std::size_t total = 0, count = 0;
  for (const auto& d : datasets) {
    total += d.pairs->size();
    count += d.batch_size;
  }
  if (total == 0) throw std::invalid_argument("pair batch: empty collection");
  count = std::min(count, total);
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + uniform_index(rng, total - i)]);
  PairBatch b;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t k = idx[i], m = 0;
    while (k >= datasets[m].pairs->size()) k -= datasets[m++].pairs->size();
    auto [caption, visual] = datasets[m].pairs->pair(k);
    b.images.push_back(std::move(visual));
    b.texts.push_back(vocab.encode(caption));
  }
  return b;
}

PairBatch merge_batches(std::span<const PairBatch> batches) {
  PairBatch out;
  for (const auto& b : batches) {
    out.images.insert(out.images.end(), b.images.begin(), b.images.end());
    out.texts.insert(out.texts.end(), b.texts.begin(), b.texts.end());
  }
  return out;
}

GradResult contrastive_gradient(const DualEncoder& enc, const PairBatch& batch, double lambda, double smoothing) {
  Graph g(&enc.params(), lambda == 0.0 ? GradMode::none : GradMode::trainable);
  Var loss = contrastive_loss(enc.embed_images(g, batch.images), enc.embed_texts(g, batch.texts),
                              g.param("contrastive.log_beta"), smoothing);
  GradResult r;
  r.losses = {loss.value()[0]};
  r.total = lambda * r.losses[0];
  if (lambda != 0.0) r.grads = g.backward(ops::scale(loss, lambda));
  return r;
}

ContrastiveTrainer::ContrastiveTrainer(DualEncoder& enc, std::vector<ContrastiveDataset> datasets,
                                       ContrastiveOptions opts, Rng data_rng, Vocab vocab)
    : enc_(enc), datasets_(std::move(datasets)), opts_(std::move(opts)), rng_(std::move(data_rng)),
      vocab_(std::move(vocab)), opt_(opts_.optim) {
  if (datasets_.empty()) throw std::invalid_argument("contrastive: no datasets");
  for (const auto& d : datasets_) {
    if (!d.pairs || d.pairs->size() < 2) throw std::invalid_argument("contrastive: dataset '" + d.name + "' needs >= 2 pairs");
    if (d.batch_size < 2) throw std::invalid_argument("contrastive: batch size of '" + d.name + "' must be >= 2");
    if (!(d.weight > 0.0)) throw std::invalid_argument("contrastive: weight of '" + d.name + "' must be > 0");
  }
}

ContrastiveStep ContrastiveTrainer::step() {
  const std::size_t M = datasets_.size();
  GradResult gr;
  auto draw = [&](std::size_t m) {
    Rng sub(rng_());
    return draw_pair_batch(*datasets_[m].pairs, datasets_[m].batch_size, sub, vocab_);
  };
  switch (opts_.strategy) {
    case Strategy::accumulation: {
      std::vector<PairBatch> batches;
      for (std::size_t m = 0; m < M; ++m) batches.push_back(draw(m));
      for (std::size_t m = 0; m < M; ++m) {
        auto r = contrastive_gradient(enc_, batches[m], datasets_[m].weight, opts_.smoothing);
        gr.losses.push_back(r.losses[0]);
        gr.total += r.total;
        accumulate_grads(gr.grads, r.grads);
      }
      break;
    }
    case Strategy::round_robin: {
      const std::size_t m = opt_.step() % M;
      auto r = contrastive_gradient(enc_, draw(m), datasets_[m].weight, opts_.smoothing);
      gr.losses.assign(M, kNaN);
      gr.losses[m] = r.losses[0];
      gr.total = r.total;
      gr.grads = std::move(r.grads);
      break;
    }
    case Strategy::merged: {
      Rng sub(rng_());
      auto r = contrastive_gradient(enc_, draw_pooled_pair_batch(datasets_, sub, vocab_), 1.0, opts_.smoothing);
      gr.losses.assign(M, kNaN);
      gr.total = r.total;
      gr.grads = std::move(r.grads);
      break;
    }
  }
  GradMap vision, rest;
  for (auto& [name, t] : gr.grads) (name.rfind("vision.", 0) == 0 ? vision : rest).emplace(name, std::move(t));
  const double nv = clip_gradients(vision, opts_.vision_clip, &enc_.params());
  const double nr = clip_gradients(rest, opts_.text_clip, &enc_.params());
  vision.merge(rest);
  ContrastiveStep s;
  s.grad_norm = std::sqrt(nv * nv + nr * nr);
  s.lr = opt_.apply(enc_.params(), vision);
  s.step = opt_.step();
  s.losses = std::move(gr.losses);
  s.total = gr.total;
  s.beta = enc_.beta();
  return s;
}

}  // namespace flamingo
